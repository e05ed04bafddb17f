import json
import math

import numpy as np
import pytest
import yaml
from PIL import Image

from geossl.downstream import RunResult
from geossl.errors import ConfigurationError, IngestionError
from geossl.experiment import (ExperimentConfig, RunLock, evaluate_checkpoint, expand_sweep, load_config, plan_sweep,
                               pretext_sources, run_dir_name, run_experiment, run_sweep)
from geossl.report import (MISSING, PUBLISHED_AFFINE, PUBLISHED_AFFINE_COLUMNS, SET_TITLES, emit_curves, emit_table,
                           write_reference_results)
from geossl.synthetic import make_surrogate_split

TINY = dict(surrogate=True, transform_set="rot2", backbone="vgg16-2", width_multiplier=0.125, pretext_epochs=1,
            downstream_epochs=2, pretext_batch_size=20, downstream_batch_size=20, modes=["frozen"])


@pytest.fixture(scope="module")
def data():
    return make_surrogate_split(40, seed=[1, 1]), make_surrogate_split(20, seed=[1, 2])


def tiny(**kw):
    return ExperimentConfig(**{**TINY, **kw})


# -- config ---------------------------------------------------------------------------

def test_hash_ignores_key_order_and_format(tmp_path):
    a = tmp_path / "a.yaml"
    b = tmp_path / "b.json"
    a.write_text(yaml.safe_dump(TINY, sort_keys=True))
    b.write_text(json.dumps(dict(reversed(list(TINY.items()))), indent=4))
    assert load_config(a).config_hash() == load_config(b).config_hash()
    assert tiny(device="cpu").config_hash() == tiny().config_hash()
    assert tiny(seed=1).config_hash() != tiny().config_hash()


def test_config_errors(tmp_path):
    with pytest.raises(ConfigurationError, match="unknown config keys"):
        load_config(_write(tmp_path, {**TINY, "bogus": 1}))
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "missing.yaml")
    with pytest.raises(ConfigurationError):
        tiny(transform_set="rot5")
    with pytest.raises(ConfigurationError):
        tiny(surrogate=False)
    with pytest.raises(ConfigurationError):
        tiny(backbone="vgg16-9")


def _write(tmp_path, d):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump(d))
    return path


def test_overrides_apply(tmp_path):
    cfg = load_config(_write(tmp_path, TINY), {"seed": 4, "device": None})
    assert cfg.seed == 4 and cfg.device is None


def test_sweep_expansion_and_table_plan(tmp_path):
    rows = ["resnet50-2", "resnet50-3", "resnet50-4", "resnet50-5", "densenet201-2", "densenet201-4",
            "vgg16-2", "vgg16-5", "nin-2", "resnet152v2-2"]
    cfg = ExperimentConfig(surrogate=True, backbone=rows, transform_set=["rot2", "rot4", "rot8"],
                           modes=["unfrozen", "frozen"])
    assert cfg.is_sweep and len(expand_sweep(cfg)) == 30
    paths = plan_sweep(cfg, tmp_path)
    assert len(paths) == 60 and len(set(paths)) == 60
    assert not any(p.exists() for p in paths)


def test_split_hygiene(data):
    train, test = data
    assert np.array_equal(pretext_sources(tiny(), train, test), train.images)
    both = pretext_sources(tiny(include_test_split=True), train, test)
    assert len(both) == 60 and np.array_equal(both[40:], test.images)
    assert len(pretext_sources(tiny(pretext_subset=10), train, test)) == 10


# -- running --------------------------------------------------------------------------

def test_run_is_idempotent(tmp_path, data):
    cfg = tiny(baseline=True)
    first = run_experiment(cfg, tmp_path, data=data)
    assert first.pretext_trained and len(first.downstream_trained) == 2
    assert all(p.exists() for p in first.result_paths)
    stamps = [p.stat().st_mtime_ns for p in first.result_paths]
    second = run_experiment(cfg, tmp_path, data=data)
    assert not second.pretext_trained and second.downstream_trained == []
    assert [p.stat().st_mtime_ns for p in second.result_paths] == stamps
    assert not (tmp_path / ".lock").exists()
    kinds = {RunResult.read(p).provenance["transform_set"] for p in first.result_paths}
    assert kinds == {"rot2", "random-init"}


def test_corrupt_result_is_redone(tmp_path, data):
    run = run_experiment(tiny(), tmp_path, data=data)
    run.result_paths[0].write_text("{not json")
    again = run_experiment(tiny(), tmp_path, data=data)
    assert again.downstream_trained == [("downstream", "frozen", "none", "rmsprop")]
    assert RunResult.read(run.result_paths[0]).final_test_acc >= 0


def test_refuses_directory_of_other_config(tmp_path, data):
    run_experiment(tiny(), tmp_path, data=data)
    with pytest.raises(ConfigurationError, match="different configuration"):
        run_experiment(tiny(seed=3), tmp_path, data=data)


def test_pretext_only_stage(tmp_path, data):
    run = run_experiment(tiny(), tmp_path, data=data, stages=("pretext",))
    assert run.pretext_trained and run.result_paths == []
    assert (tmp_path / "pretext" / "checkpoint.tssl").exists()
    assert not (tmp_path / "downstream").exists()
    with pytest.raises(ConfigurationError):
        run_experiment(tiny(), tmp_path, data=data, stages=("finetune",))


def test_live_lock_blocks_second_run(tmp_path, data):
    (tmp_path / ".lock").write_text("1")  # pid 1 always exists
    with pytest.raises(ConfigurationError, match="locked"):
        run_experiment(tiny(), tmp_path, data=data)


def test_stale_lock_is_taken_over(tmp_path):
    (tmp_path / ".lock").write_text("999999999")
    with RunLock(tmp_path):
        assert (tmp_path / ".lock").read_text() != "999999999"
    assert not (tmp_path / ".lock").exists()


def test_evaluate_existing_checkpoint(tmp_path, data):
    run_experiment(tiny(), tmp_path / "a", data=data, stages=("pretext",))
    ckpt = tmp_path / "a" / "pretext" / "checkpoint.tssl"
    res = evaluate_checkpoint(tiny(backbone="nin-2"), ckpt, tmp_path / "b", data=data)
    assert len(res.downstream_trained) == 1
    result = RunResult.read(res.result_paths[0])
    assert result.config["arch"] == "vgg16" and result.provenance["transform_set"] == "rot2"
    assert evaluate_checkpoint(tiny(), ckpt, tmp_path / "b", data=data).downstream_trained == []


def test_sweep_runs_each_combination(tmp_path, monkeypatch, data):
    import geossl.experiment as experiment

    monkeypatch.setattr(experiment, "load_data", lambda cfg: data)
    runs = run_sweep(tiny(transform_set=["rot2", "rot4"]), tmp_path)
    assert len(runs) == 2
    assert {r.run_dir.name for r in runs} == {run_dir_name(c) for c in expand_sweep(tiny(transform_set=["rot2", "rot4"]))}
    assert len(list(tmp_path.rglob("result.json"))) == 2


# -- tables ---------------------------------------------------------------------------

def test_published_rotation_table(tmp_path):
    write_reference_results(tmp_path)
    report = emit_table(tmp_path, tmp_path / "out")
    table = report.tables[0]
    assert table.title == "Rotation prediction"
    assert [r for r, _ in table.rows] == ["ResNet50 - 2", "ResNet50 - 3", "ResNet50 - 4", "ResNet50 - 5",
                                         "DenseNet201 - 2", "DenseNet201 - 4", "VGG16 - 2", "VGG16 - 5",
                                         "NIN - 2", "ResNet152V2 - 2"]
    assert table.columns == [(f"Rotation - {k}", m) for k in (2, 4, 8) for m in ("Unfrozen", "Frozen")]
    assert table.cell_text("VGG16 - 2", ("Rotation - 2", "Unfrozen")) == "**0.8083**"
    vgg_bold = {("VGG16 - 2", c) for c in table.columns[:5]}
    assert table.bold == vgg_bold | {("ResNet152V2 - 2", ("Rotation - 8", "Frozen"))}
    assert "| VGG16 - 2 | **0.8083** | **0.6957** |" in report.markdown
    assert (tmp_path / "out" / "tables.md").read_text() == report.markdown
    csv_rows = (tmp_path / "out" / "tables.csv").read_text().splitlines()
    assert len(csv_rows) == 1 + 60


def test_published_affine_table_bolding(tmp_path):
    write_reference_results(tmp_path, PUBLISHED_AFFINE, PUBLISHED_AFFINE_COLUMNS)
    table = emit_table(tmp_path).tables[0]
    t5u, t5f, t10u, t10f = [(SET_TITLES[s], m.capitalize()) for s, m in PUBLISHED_AFFINE_COLUMNS]
    expected = {("VGG16 - 1", c) for c in (t5u, t5f, t10u, t10f)} | {("VGG16 - 2", c) for c in (t5u, t5f, t10u, t10f)}
    expected |= {("VGG16 - 3", t5u), ("VGG16 - 3", t10u), ("DenseNet201 - 3", t5f), ("DenseNet201 - 3", t10f),
                 ("VGG16 - 4", t5u), ("VGG16 - 4", t10u), ("ResNet50 - 4", t5f), ("ResNet50 - 4", t10f),
                 ("VGG16 - 5", t5u), ("VGG16 - 5", t10u), ("DenseNet201 - 5", t5f), ("DenseNet201 - 5", t10f)}
    assert table.bold == expected
    assert [g for _, g in table.rows] == sorted(g for _, g in table.rows)


def _stub(out, arch="vgg16", blocks=2, tset="rot2", mode="unfrozen", acc=0.5, aug="none", opt="rmsprop",
          curve=()):
    RunResult(config={"arch": arch, "num_blocks": blocks, "mode": mode, "augmentation": aug, "optimizer": opt},
              train_acc=list(curve), test_acc=list(curve), train_loss=[0.0] * len(curve), final_test_acc=acc,
              config_hash="h", provenance={"transform_set": tset}).write(out)


def test_single_result_gives_one_by_one_table(tmp_path):
    _stub(tmp_path, acc=0.25)
    report = emit_table(tmp_path)
    (table,) = report.tables
    assert len(table.rows) == 1 and len(table.columns) == 1
    assert table.cell_text("VGG16 - 2", ("Rotation - 2", "Unfrozen")) == "**0.2500**"


def test_missing_cells_render_as_dash(tmp_path):
    _stub(tmp_path / "a", tset="rot2", mode="unfrozen")
    _stub(tmp_path / "b", arch="nin", tset="rot4", mode="frozen")
    report = emit_table(tmp_path)
    table = report.tables[0]
    assert table.cell_text("NIN - 2", ("Rotation - 2", "Unfrozen")) == MISSING
    assert f"| NIN - 2 | {MISSING} | **0.5000** |" in report.markdown
    assert f"{MISSING},0,," in report.csv


def test_ties_are_all_bold(tmp_path):
    _stub(tmp_path / "a", acc=0.4)
    _stub(tmp_path / "b", arch="nin", acc=0.4)
    table = emit_table(tmp_path).tables[0]
    assert len(table.bold) == 2


def test_corrupt_and_out_of_range_results_become_warnings(tmp_path):
    _stub(tmp_path / "good")
    (tmp_path / "bad").mkdir()
    (tmp_path / "bad" / "result.json").write_text("{")
    _stub(tmp_path / "range", acc=1.5)
    report = emit_table(tmp_path)
    assert len(report.entries) == 1 and len(report.warnings) == 2
    assert "### Warnings" in report.markdown and "bad" in report.markdown


def test_empty_directory_is_an_error(tmp_path):
    with pytest.raises(IngestionError):
        emit_table(tmp_path)


def test_variant_tables(tmp_path):
    for aug in ("none", "weak", "strong"):
        _stub(tmp_path / aug, aug=aug, acc={"none": 0.5, "weak": 0.6, "strong": 0.55}[aug])
    _stub(tmp_path / "adam", opt="adam", acc=0.7)
    titles = [t.title for t in emit_table(tmp_path).tables]
    assert titles == ["Rotation prediction", "Effect of data augmentation: VGG16 - 2",
                      "Search for the best optimizer: VGG16 - 2"]
    aug_table = emit_table(tmp_path).tables[1]
    assert [r for r, _ in aug_table.rows] == ["Strong", "Weak", "None"]
    assert aug_table.bold == {("Weak", ("Unfrozen", "Rot-2"))}


# -- curves ---------------------------------------------------------------------------

def test_learning_curves(tmp_path):
    rising = np.linspace(0.1, 0.8, 50)
    _stub(tmp_path / "u", mode="unfrozen", curve=rising)
    _stub(tmp_path / "f", mode="frozen", curve=rising * 0.8)
    _stub(tmp_path / "empty", arch="nin", mode="frozen")
    warnings = []
    figs = emit_curves(tmp_path, tmp_path / "plots", warnings)
    assert len(figs) == 1
    fig = figs[0]
    assert set(fig.series) == {"fine tuning (train)", "fine tuning (test)",
                               "feature extracting (train)", "feature extracting (test)"}
    for epochs, acc in fig.series.values():
        assert len(epochs) == len(acc) == 50
        assert all(b > a for a, b in zip(epochs, epochs[1:]))
    assert Image.open(fig.path).format == "PNG"
    assert any("no per-epoch curve" in w for w in warnings)
    index = json.loads((tmp_path / "plots" / "curves_index.json").read_text())
    assert index[0]["path"] == str(fig.path)
    assert not math.isnan(fig.series["fine tuning (test)"][1][-1])
