"""Result tables in the published two-level layout and accuracy-vs-epoch figures.

Tables are built from every ``result.json`` under a results directory. Rows
are backbones ("VGG16 - 2"), columns are (transform set, mode) pairs, cells
are final top-1 test accuracy. The largest value of each column is bolded
within each row group (all of them on ties). Rotation results form one
group; affine results are grouped by block count. Runs with non-default
augmentation or optimizer go into their own comparison tables.
"""

import csv
import io
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

from .downstream import MODE_TERMS, RunResult
from .errors import IngestionError
from .io_utils import atomic_write_text, write_json

log = logging.getLogger(__name__)

MISSING = "—"
ROTATION_SETS = ("rot2", "rot4", "rot8")
AFFINE_SETS = ("affine5", "affine10")
SET_TITLES = {"rot2": "Rotation - 2", "rot4": "Rotation - 4", "rot8": "Rotation - 8",
              "affine5": "Transform - 5", "affine10": "Transform - 10", "random-init": "Random init"}
SHORT_SET = {"rot2": "Rot-2", "rot4": "Rot-4", "rot8": "Rot-8", "affine5": "Tr-5", "affine10": "Tr-10"}
ARCH_TITLES = {"vgg16": "VGG16", "nin": "NIN", "resnet50": "ResNet50", "resnet152v2": "ResNet152V2",
               "densenet201": "DenseNet201"}
ARCH_ORDER = ("resnet50", "densenet201", "vgg16", "nin", "resnet152v2")
AFFINE_ARCH_ORDER = ("nin", "resnet50", "resnet152v2", "densenet201", "vgg16")
MODE_ORDER = ("unfrozen", "frozen")
AUG_ORDER = ("strong", "weak", "none")
OPT_ORDER = ("sgd", "rmsprop", "adam")
DEFAULT_AUG = "none"
DEFAULT_OPT = "rmsprop"


@dataclass
class Entry:
    arch: str
    blocks: int
    transform_set: str
    mode: str
    augmentation: str
    optimizer: str
    accuracy: float
    config_hash: str
    path: str
    train_acc: list = field(default_factory=list)
    test_acc: list = field(default_factory=list)

    @property
    def backbone(self):
        return f"{ARCH_TITLES.get(self.arch, self.arch)} - {self.blocks}"


@dataclass
class Table:
    title: str
    row_header: str
    columns: list          # [(group title, sub title), ...]
    rows: list             # [(row label, row group), ...]
    cells: dict            # (row label, column) -> Entry
    bold: set = field(default_factory=set)

    def cell_text(self, row, col, markdown=True):
        entry = self.cells.get((row, col))
        if entry is None:
            return MISSING
        text = f"{entry.accuracy:.4f}"
        if markdown and (row, col) in self.bold:
            text = f"**{text}**"
        return text


@dataclass
class TableReport:
    tables: list
    warnings: list
    markdown: str
    csv: str
    entries: list


def entry_from_result(result, path):
    cfg = result.config
    prov = result.provenance or {}
    return Entry(
        arch=cfg.get("arch") or "vgg16",
        blocks=int(cfg.get("num_blocks") or 2),
        transform_set=prov.get("transform_set", "random-init"),
        mode=cfg.get("mode", "frozen"),
        augmentation=cfg.get("augmentation", DEFAULT_AUG),
        optimizer=cfg.get("optimizer", DEFAULT_OPT),
        accuracy=float(result.final_test_acc),
        config_hash=result.config_hash,
        path=str(path),
        train_acc=list(result.train_acc),
        test_acc=list(result.test_acc),
    )


def collect_entries(results_dir):
    """Parse every ``result.json`` below ``results_dir``; returns ``(entries, warnings)``."""
    entries, warnings = [], []
    for path in sorted(Path(results_dir).rglob("result.json")):
        try:
            result = RunResult.read(path)
            entry = entry_from_result(result, path)
            if not (0.0 <= entry.accuracy <= 1.0) or math.isnan(entry.accuracy):
                raise ValueError(f"accuracy {entry.accuracy} outside [0, 1]")
        except Exception as exc:  # noqa: BLE001 - any unreadable file becomes a warning
            warnings.append(f"{path}: unreadable result ({type(exc).__name__}: {exc})")
            continue
        entries.append(entry)
    return entries, warnings


def _dedupe(entries, key, warnings):
    cells = {}
    for e in entries:
        k = key(e)
        if k in cells:
            warnings.append(f"{e.path}: duplicate result for {k}, keeping {cells[k].path}")
            continue
        cells[k] = e
    return cells


def _mark_bold(table):
    groups = defaultdict(list)
    for row, group in table.rows:
        groups[group].append(row)
    for col in table.columns:
        for rows in groups.values():
            vals = [table.cells[(r, col)].accuracy for r in rows if (r, col) in table.cells]
            if not vals:
                continue
            best = max(vals)
            table.bold.update((r, col) for r in rows
                              if (r, col) in table.cells and table.cells[(r, col)].accuracy == best)


def _row_sort_key(entry, by_blocks):
    order = AFFINE_ARCH_ORDER if by_blocks else ARCH_ORDER
    arch_rank = order.index(entry.arch) if entry.arch in order else len(order)
    return (entry.blocks, arch_rank) if by_blocks else (arch_rank, entry.blocks)


def _phase_table(title, entries, sets, by_blocks, warnings):
    present = [s for s in sets if any(e.transform_set == s for e in entries)]
    columns = [(SET_TITLES[s], m.capitalize()) for s in present for m in MODE_ORDER
               if any(e.transform_set == s and e.mode == m for e in entries)]
    ordered = sorted(entries, key=lambda e: _row_sort_key(e, by_blocks))
    rows, seen = [], set()
    for e in ordered:
        if e.backbone not in seen:
            seen.add(e.backbone)
            rows.append((e.backbone, e.blocks if by_blocks else 0))
    cells = _dedupe(entries, lambda e: (e.backbone, (SET_TITLES[e.transform_set], e.mode.capitalize())), warnings)
    table = Table(title, "Model - block", columns, rows, cells)
    _mark_bold(table)
    return table


def _variant_tables(title, entries, attr, order, warnings):
    """One table per backbone comparing values of ``attr`` (augmentation/optimizer)."""
    tables = []
    by_backbone = defaultdict(list)
    for e in entries:
        by_backbone[e.backbone].append(e)
    for backbone, group in sorted(by_backbone.items()):
        values = {getattr(e, attr) for e in group}
        if len(values) < 2:
            continue
        sets = [s for s in ROTATION_SETS + AFFINE_SETS if any(e.transform_set == s for e in group)]
        columns = [(m.capitalize(), SHORT_SET[s]) for m in MODE_ORDER for s in sets
                   if any(e.mode == m and e.transform_set == s for e in group)]
        rows = [(v.capitalize() if attr == "augmentation" else _opt_title(v), 0)
                for v in order if v in values]
        label = {v: (v.capitalize() if attr == "augmentation" else _opt_title(v)) for v in order}
        cells = _dedupe(group, lambda e: (label[getattr(e, attr)], (e.mode.capitalize(), SHORT_SET[e.transform_set])),
                        warnings)
        table = Table(f"{title}: {backbone}", backbone, columns, rows, cells)
        _mark_bold(table)
        tables.append(table)
    return tables


def _opt_title(v):
    return {"sgd": "SGD", "rmsprop": "RMSprop", "adam": "Adam"}.get(v, v)


def build_tables(entries, warnings):
    tables = []
    main = [e for e in entries if e.augmentation == DEFAULT_AUG and e.optimizer == DEFAULT_OPT]
    rot = [e for e in main if e.transform_set in ROTATION_SETS]
    aff = [e for e in main if e.transform_set in AFFINE_SETS]
    base = [e for e in main if e.transform_set == "random-init"]
    if rot:
        tables.append(_phase_table("Rotation prediction", rot, ROTATION_SETS, False, warnings))
    if aff:
        tables.append(_phase_table("Affine transformation prediction", aff, AFFINE_SETS, True, warnings))
    if base:
        tables.append(_phase_table("Random-init baseline", base, ("random-init",), False, warnings))
    pretrained = [e for e in entries if e.transform_set != "random-init"]
    tables += _variant_tables("Effect of data augmentation",
                              [e for e in pretrained if e.optimizer == DEFAULT_OPT], "augmentation", AUG_ORDER,
                              warnings)
    tables += _variant_tables("Search for the best optimizer",
                              [e for e in pretrained if e.augmentation == DEFAULT_AUG], "optimizer", OPT_ORDER,
                              warnings)
    return tables


def render_markdown(tables, warnings):
    out = []
    for t in tables:
        out.append(f"### {t.title}\n")
        out.append("| " + " | ".join([t.row_header] + [f"{g} / {s}" for g, s in t.columns]) + " |")
        out.append("|" + "---|" * (len(t.columns) + 1))
        prev_group = None
        for row, group in t.rows:
            if prev_group is not None and group != prev_group:
                out.append("| " + " | ".join([""] * (len(t.columns) + 1)) + " |")
            prev_group = group
            out.append("| " + " | ".join([row] + [t.cell_text(row, c) for c in t.columns]) + " |")
        out.append("")
    if warnings:
        out.append("### Warnings\n")
        out += [f"- {w}" for w in warnings]
        out.append("")
    return "\n".join(out)


def render_csv(tables):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["table", "row", "column_group", "column", "accuracy", "bold", "config_hash", "result_path"])
    for t in tables:
        for row, _ in t.rows:
            for col in t.columns:
                e = t.cells.get((row, col))
                writer.writerow([t.title, row, col[0], col[1],
                                 MISSING if e is None else f"{e.accuracy:.4f}",
                                 int((row, col) in t.bold),
                                 "" if e is None else e.config_hash,
                                 "" if e is None else e.path])
    return buf.getvalue()


def emit_table(results_dir, out_dir=None):
    """Render result tables to ``tables.md`` and ``tables.csv`` in ``out_dir``.

    Returns a :class:`TableReport`. Unreadable result files are listed in a
    warnings section; the tables are emitted regardless.
    """
    entries, warnings = collect_entries(results_dir)
    if not entries and not warnings:
        raise IngestionError(results_dir, "no result.json files found")
    tables = build_tables(entries, warnings)
    report = TableReport(tables, warnings, render_markdown(tables, warnings), render_csv(tables), entries)
    if out_dir is not None:
        out_dir = Path(out_dir)
        atomic_write_text(out_dir / "tables.md", report.markdown)
        atomic_write_text(out_dir / "tables.csv", report.csv)
    return report


@dataclass
class CurveFigure:
    path: Path
    title: str
    series: dict  # legend label -> (epochs, accuracies)


def curve_groups(entries):
    """Group entries that belong on one figure: same backbone, set, augmentation, optimizer."""
    groups = defaultdict(list)
    for e in entries:
        groups[(e.backbone, e.transform_set, e.augmentation, e.optimizer)].append(e)
    return groups


def emit_curves(results_dir, out_dir, warnings=None):
    """One PNG per run group: train/test accuracy against epoch for each mode."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    warnings = [] if warnings is None else warnings
    entries, read_warnings = collect_entries(results_dir)
    warnings += read_warnings
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    figures = []
    for (backbone, tset, aug, opt), group in sorted(curve_groups(entries).items()):
        series = {}
        for e in sorted(group, key=lambda e: MODE_ORDER.index(e.mode) if e.mode in MODE_ORDER else 9):
            if not e.test_acc:
                warnings.append(f"{e.path}: no per-epoch curve, skipped")
                continue
            term = MODE_TERMS.get(e.mode, e.mode)
            epochs = list(range(1, len(e.test_acc) + 1))
            series[f"{term} (train)"] = (epochs, list(e.train_acc))
            series[f"{term} (test)"] = (epochs, list(e.test_acc))
        if not series:
            continue
        title = f"{backbone}, {SET_TITLES.get(tset, tset)} pretext, augmentation {aug}, {_opt_title(opt)}"
        fig, ax = plt.subplots(figsize=(7, 4.5))
        for label, (x, y) in series.items():
            ax.plot(x, y, label=label, linestyle="--" if "train" in label else "-")
        ax.set_xlabel("epoch")
        ax.set_ylabel("accuracy")
        ax.set_ylim(0, 1)
        ax.set_title(title, fontsize=9)
        ax.legend(fontsize=8)
        fig.tight_layout()
        name = f"curves_{backbone.replace(' ', '').lower()}_{tset}_{aug}_{opt}.png"
        path = out_dir / name
        fig.savefig(path, dpi=100)
        plt.close(fig)
        figures.append(CurveFigure(path, title, series))
    write_json(out_dir / "curves_index.json",
               [{"path": str(f.path), "title": f.title, "series": sorted(f.series)} for f in figures])
    for w in warnings:
        log.warning(w)
    return figures


# -- reference numbers -------------------------------------------------------------

# Published top-1 accuracies for the rotation-prediction grid:
# (arch, blocks) -> {(set, mode): accuracy}
PUBLISHED_ROTATION = {
    ("resnet50", 2): (0.7179, 0.6447, 0.6145, 0.5809, 0.6064, 0.5924),
    ("resnet50", 3): (0.7084, 0.5807, 0.6563, 0.5897, 0.6306, 0.6406),
    ("resnet50", 4): (0.6927, 0.3156, 0.6446, 0.3604, 0.6284, 0.3466),
    ("resnet50", 5): (0.672, 0.1692, 0.6455, 0.1655, 0.6024, 0.1678),
    ("densenet201", 2): (0.712, 0.5444, 0.6639, 0.5249, 0.6112, 0.5094),
    ("densenet201", 4): (0.7341, 0.1824, 0.7147, 0.3899, 0.6704, 0.3888),
    ("vgg16", 2): (0.8083, 0.6957, 0.7397, 0.6647, 0.7062, 0.6344),
    ("vgg16", 5): (0.1024, 0.0972, 0.0964, 0.0964, 0.0824, 0.0976),
    ("nin", 2): (0.7153, 0.502, 0.649, 0.5036, 0.6148, 0.4906),
    ("resnet152v2", 2): (0.6979, 0.6788, 0.622, 0.6559, 0.5796, 0.652),
}
PUBLISHED_COLUMNS = [(s, m) for s in ROTATION_SETS for m in MODE_ORDER]

PUBLISHED_AFFINE = {
    ("nin", 1): (0.7357, 0.5196, 0.7319, 0.5538),
    ("vgg16", 1): (0.7672, 0.6319, 0.7605, 0.6338),
    ("resnet50", 2): (0.7633, 0.5006, 0.7443, 0.4934),
    ("resnet152v2", 2): (0.7312, 0.4853, 0.7188, 0.4419),
    ("nin", 2): (0.7494, 0.4385, 0.7537, 0.4742),
    ("densenet201", 2): (0.7401, 0.475, 0.7371, 0.4818),
    ("vgg16", 2): (0.8216, 0.5177, 0.8291, 0.5952),
    ("resnet50", 3): (0.6693, 0.3729, 0.6467, 0.3893),
    ("resnet152v2", 3): (0.7111, 0.332, 0.649, 0.3398),
    ("densenet201", 3): (0.7256, 0.3731, 0.7193, 0.3929),
    ("vgg16", 3): (0.8323, 0.3596, 0.8068, 0.3855),
    ("resnet50", 4): (0.6404, 0.252, 0.6108, 0.2837),
    ("resnet152v2", 4): (0.6885, 0.2321, 0.6251, 0.2352),
    ("densenet201", 4): (0.7054, 0.2462, 0.6985, 0.2546),
    ("vgg16", 4): (0.8048, 0.2334, 0.7698, 0.2807),
    ("resnet50", 5): (0.6312, 0.1628, 0.6013, 0.1885),
    ("resnet152v2", 5): (0.6785, 0.1932, 0.6269, 0.1987),
    ("densenet201", 5): (0.7069, 0.2447, 0.689, 0.2532),
    ("vgg16", 5): (0.7947, 0.1688, 0.7648, 0.2289),
}
PUBLISHED_AFFINE_COLUMNS = [(s, m) for s in AFFINE_SETS for m in MODE_ORDER]


def write_reference_results(out_dir, published=None, columns=None):
    """Write stub ``result.json`` files holding published accuracies.

    Useful to check the table renderer against the printed layout.
    """
    published = PUBLISHED_ROTATION if published is None else published
    columns = PUBLISHED_COLUMNS if columns is None else columns
    out_dir = Path(out_dir)
    paths = []
    for (arch, blocks), values in published.items():
        for (tset, mode), acc in zip(columns, values):
            result = RunResult(
                config={"arch": arch, "num_blocks": blocks, "mode": mode, "augmentation": DEFAULT_AUG,
                        "optimizer": DEFAULT_OPT},
                train_acc=[], test_acc=[], train_loss=[], final_test_acc=acc,
                config_hash=f"published-{arch}-{blocks}-{tset}-{mode}",
                provenance={"transform_set": tset, "source": "published"},
            )
            paths.append(result.write(out_dir / f"{arch}-{blocks}" / tset / mode))
    return paths
