"""Declarative experiments: one pretext run plus its downstream evaluations.

A config file (YAML or JSON) describes one experiment. Any pretext-level
field given as a list turns the file into a sweep, expanded as a Cartesian
product; the downstream-level fields ``modes``, ``augmentation`` and
``optimizer`` may also be lists, and each combination becomes one
downstream run inside the same experiment.

Run directory layout::

    <run>/config.json
    <run>/pretext/checkpoint.tssl, history.csv, checkpoints/, resume.pt
    <run>/downstream/<mode>-<augmentation>-<optimizer>/result.json, curves.csv
    <run>/baseline/<mode>-<augmentation>-<optimizer>/...   (random-init control)
"""

import hashlib
import itertools
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .dataset import build_pretext_random, build_pretext_separate, load_cifar10
from .downstream import AUGMENTATION_LEVELS, MODES, DownstreamConfig, RunResult, train_downstream
from .errors import ConfigurationError
from .geometry import TRANSFORM_SET_NAMES, make_transform_set
from .io_utils import read_json, write_json
from .models import BackboneSpec, Checkpoint
from .optim import OPTIMIZERS
from .pretext import PretextTrainConfig, train_pretext

log = logging.getLogger(__name__)

# Fields whose list values expand into separate experiments.
SWEEP_FIELDS = ("transform_set", "backbone", "width_multiplier", "method", "copies", "seed",
                "pretext_epochs", "downstream_epochs", "pretext_subset", "downstream_subset")
# Fields whose list values become several downstream runs of one experiment.
DOWNSTREAM_LIST_FIELDS = ("modes", "augmentation", "optimizer")
# Fields that do not affect results and stay out of the config hash.
UNHASHED_FIELDS = ("device", "name")


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    data_dir: str = None
    surrogate: bool = False
    surrogate_train: int = 50_000
    surrogate_test: int = 10_000
    include_test_split: bool = False
    transform_set: object = "rot2"
    backbone: object = "vgg16-2"
    width_multiplier: object = 1.0
    method: object = "separate"
    copies: object = None
    pretext_epochs: object = 100
    pretext_batch_size: int = 128
    pretext_subset: object = None
    downstream_epochs: object = 50
    downstream_batch_size: int = 128
    downstream_subset: object = None
    modes: object = field(default_factory=lambda: ["frozen", "unfrozen"])
    augmentation: object = "none"
    optimizer: object = "rmsprop"
    baseline: bool = False
    seed: object = 0
    device: str = None

    def __post_init__(self):
        for name in DOWNSTREAM_LIST_FIELDS:
            v = getattr(self, name)
            setattr(self, name, list(v) if isinstance(v, (list, tuple)) else [v])
        self._validate()

    def _validate(self):
        def each(v):
            return v if isinstance(v, list) else [v]

        for t in each(self.transform_set):
            if t not in TRANSFORM_SET_NAMES:
                raise ConfigurationError(f"unknown transform set {t!r}")
        for b in each(self.backbone):
            BackboneSpec.parse(b)
        for m in each(self.method):
            if m not in ("separate", "random"):
                raise ConfigurationError(f"method must be 'separate' or 'random', got {m!r}")
        for m in self.modes:
            if m not in MODES:
                raise ConfigurationError(f"unknown mode {m!r}")
        for a in self.augmentation:
            if a not in AUGMENTATION_LEVELS:
                raise ConfigurationError(f"unknown augmentation {a!r}")
        for o in self.optimizer:
            if o not in OPTIMIZERS:
                raise ConfigurationError(f"unknown optimizer {o!r}")
        if self.data_dir is None and not self.surrogate:
            raise ConfigurationError("set data_dir to a CIFAR-10 binary directory or surrogate: true")

    @property
    def is_sweep(self):
        return any(isinstance(getattr(self, f), list) for f in SWEEP_FIELDS)

    def to_dict(self):
        return asdict(self)

    def config_hash(self):
        """SHA-256 of the canonical JSON form; key order and formatting do not matter."""
        d = {k: v for k, v in self.to_dict().items() if k not in UNHASHED_FIELDS}
        return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()

    def downstream_runs(self):
        """``[(mode, augmentation, optimizer), ...]`` for this experiment."""
        return list(itertools.product(self.modes, self.augmentation, self.optimizer))

    def pretext_config(self):
        spec = BackboneSpec.parse(self.backbone, self.width_multiplier)
        return PretextTrainConfig(
            transform_set=self.transform_set, arch=spec.arch, num_blocks=spec.num_blocks,
            width_multiplier=spec.width_multiplier, batch_size=self.pretext_batch_size,
            epochs=self.pretext_epochs, seed=self.seed, device=self.device,
            grouped=self.method == "separate",
        )


def load_config(path, overrides=None):
    """Read a YAML/JSON experiment file and apply ``overrides`` (dict)."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"config {path} is not valid YAML/JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigurationError(f"config {path} must be a mapping")
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return config_from_dict(raw)


def config_from_dict(raw):
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return ExperimentConfig(**raw)


def dump_config(config):
    return yaml.safe_dump(config.to_dict(), sort_keys=True)


def expand_sweep(config):
    """Split list-valued sweep fields into one config per combination."""
    axes = [(f, getattr(config, f)) for f in SWEEP_FIELDS if isinstance(getattr(config, f), list)]
    if not axes:
        return [config]
    out = []
    for combo in itertools.product(*(values for _, values in axes)):
        d = config.to_dict()
        d.update(dict(zip((name for name, _ in axes), combo)))
        out.append(ExperimentConfig(**d))
    return out


def run_dir_name(config):
    return f"{config.name}-{BackboneSpec.parse(config.backbone).label}-{config.transform_set}-{config.config_hash()[:10]}"


def plan_sweep(config, out_dir):
    """Result file paths a sweep would produce, without running anything."""
    out_dir = Path(out_dir)
    paths = []
    for cfg in expand_sweep(config):
        run = out_dir / run_dir_name(cfg)
        paths += [_result_path(run, "downstream", r) for r in cfg.downstream_runs()]
        if cfg.baseline:
            paths += [_result_path(run, "baseline", r) for r in cfg.downstream_runs()]
    return paths


def _result_path(run_dir, kind, run):
    mode, aug, opt = run
    return Path(run_dir) / kind / f"{mode}-{aug}-{opt}" / "result.json"


# -- data ------------------------------------------------------------------------

_DATA_CACHE = {}


def load_data(config):
    """``(train, test)`` splits for ``config`` (cached per process)."""
    key = (config.data_dir, config.surrogate, config.surrogate_train, config.surrogate_test)
    if key not in _DATA_CACHE:
        if config.data_dir is not None:
            _DATA_CACHE[key] = load_cifar10(config.data_dir)
        else:
            from .synthetic import make_surrogate_cifar

            _DATA_CACHE[key] = make_surrogate_cifar(config.surrogate_train, config.surrogate_test, seed=0)
    return _DATA_CACHE[key]


def pretext_sources(config, train, test):
    """Images feeding the pretext dataset: train split, plus test split if asked."""
    images = train.images
    if config.include_test_split:
        images = np.concatenate([train.images, test.images])
    if config.pretext_subset is not None:
        images = images[:config.pretext_subset]
    return images


# -- locking ---------------------------------------------------------------------

class RunLock:
    """Exclusive ownership of a run directory via an ``O_EXCL`` lock file.

    A lock left by a process that no longer exists is taken over.
    """

    def __init__(self, run_dir):
        self.path = Path(run_dir) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        for _ in range(2):
            try:
                fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            except FileExistsError:
                if self._stale():
                    self.path.unlink(missing_ok=True)
                    continue
                raise ConfigurationError(f"{self.path.parent} is locked by another run ({self.path})")
            with os.fdopen(fd, "w") as fh:
                fh.write(str(os.getpid()))
            return self
        raise ConfigurationError(f"could not acquire {self.path}")

    def _stale(self):
        try:
            pid = int(self.path.read_text().strip() or 0)
        except (OSError, ValueError):
            return True
        if pid == os.getpid():
            return False
        try:
            os.kill(pid, 0)
        except ProcessLookupError:
            return True
        except PermissionError:
            return False
        return False

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


# -- running ---------------------------------------------------------------------

@dataclass
class ExperimentRun:
    run_dir: Path
    result_paths: list
    pretext_trained: bool
    downstream_trained: list


def _check_run_dir(run_dir, config):
    cfg_path = run_dir / "config.json"
    if cfg_path.exists():
        stored = read_json(cfg_path)
        if stored.get("config_hash") != config.config_hash():
            raise ConfigurationError(
                f"{run_dir} holds a run of a different configuration "
                f"(hash {stored.get('config_hash', '?')[:10]} != {config.config_hash()[:10]}); "
                "choose another output directory"
            )
    else:
        write_json(cfg_path, {"config_hash": config.config_hash(), "config": config.to_dict()})


STAGES = ("pretext", "downstream")


def run_experiment(config, out_dir, data=None, stages=STAGES):
    """Run one (non-sweep) experiment into ``out_dir``; idempotent.

    Completed steps (a final pretext checkpoint, a downstream ``result.json``
    with the matching config hash) are skipped; an interrupted pretext run
    resumes from its last intermediate checkpoint. ``stages`` restricts the
    work to the pretext step or the downstream step; the downstream step
    still trains the pretext model first if its checkpoint is missing.
    """
    if config.is_sweep:
        raise ConfigurationError("config contains sweep lists; use run_sweep")
    unknown = set(stages) - set(STAGES)
    if unknown:
        raise ConfigurationError(f"unknown stages {sorted(unknown)}")
    run_dir = Path(out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    _check_run_dir(run_dir, config)
    with RunLock(run_dir):
        return _run_locked(config, run_dir, data, "downstream" in stages)


def _pending(config, run_dir, kind):
    return [r for r in config.downstream_runs() if not _is_complete(_result_path(run_dir, kind, r))]


def _run_locked(config, run_dir, data, with_downstream):
    pending = _pending(config, run_dir, "downstream") if with_downstream else []
    pending_base = _pending(config, run_dir, "baseline") if with_downstream and config.baseline else []
    ckpt_path = run_dir / "pretext" / "checkpoint.tssl"
    pretext_trained = False
    trained = []
    if pending or pending_base or not ckpt_path.exists():
        train, test = data if data is not None else load_data(config)
        if not ckpt_path.exists():
            tset = make_transform_set(config.transform_set)
            sources = pretext_sources(config, train, test)
            if config.method == "separate":
                ds = build_pretext_separate(sources, tset)
            else:
                ds = build_pretext_random(sources, tset, config.copies or tset.K, config.seed)
            train_pretext(config.pretext_config(), ds, out_dir=run_dir / "pretext")
            pretext_trained = True
        ckpt = Checkpoint.load(ckpt_path)
        down_train = train.subset(config.downstream_subset)
        for kind, runs, source in (("downstream", pending, ckpt), ("baseline", pending_base, None)):
            for run in runs:
                result = _downstream(config, run, source, ckpt_path if source else None, down_train, test)
                result.write(_result_path(run_dir, kind, run).parent)
                trained.append((kind, *run))
    paths = []
    if with_downstream:
        paths = [_result_path(run_dir, "downstream", r) for r in config.downstream_runs()]
        if config.baseline:
            paths += [_result_path(run_dir, "baseline", r) for r in config.downstream_runs()]
    return ExperimentRun(run_dir, paths, pretext_trained, trained)


def evaluate_checkpoint(config, checkpoint_path, out_dir, data=None):
    """Downstream runs of ``config`` on an existing checkpoint file.

    The backbone comes from the checkpoint; ``config.backbone`` is ignored.
    Results land in ``out_dir/downstream/<mode>-<aug>-<opt>/``; finished
    ones are skipped.
    """
    if config.is_sweep:
        raise ConfigurationError("config contains sweep lists; use run_sweep")
    ckpt = Checkpoint.load(checkpoint_path)
    config = ExperimentConfig(**{**config.to_dict(), "backbone": ckpt.spec.label,
                                 "width_multiplier": ckpt.spec.width_multiplier,
                                 "transform_set": ckpt.provenance.get("transform_set", config.transform_set)})
    run_dir = Path(out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    paths, trained = [], []
    with RunLock(run_dir):
        runs = _pending(config, run_dir, "downstream")
        if runs:
            train, test = data if data is not None else load_data(config)
            down_train = train.subset(config.downstream_subset)
            for run in runs:
                result = _downstream(config, run, ckpt, checkpoint_path, down_train, test)
                result.write(_result_path(run_dir, "downstream", run).parent)
                trained.append(("downstream", *run))
        paths = [_result_path(run_dir, "downstream", r) for r in config.downstream_runs()]
    return ExperimentRun(run_dir, paths, False, trained)


def _downstream(config, run, ckpt, ckpt_path, train, test):
    mode, aug, opt = run
    spec = BackboneSpec.parse(config.backbone, config.width_multiplier)
    dcfg = DownstreamConfig(
        checkpoint=str(ckpt_path) if ckpt_path else None, mode=mode, augmentation=aug, optimizer=opt,
        epochs=config.downstream_epochs, batch_size=config.downstream_batch_size,
        arch=spec.arch, num_blocks=spec.num_blocks, width_multiplier=spec.width_multiplier,
        seed=config.seed, device=config.device,
    )
    result = train_downstream(dcfg, train, test, checkpoint=ckpt)
    result.provenance.setdefault("transform_set", config.transform_set if ckpt else "random-init")
    result.provenance["experiment_hash"] = config.config_hash()
    return result


def _is_complete(path):
    if not path.exists():
        return False
    try:
        RunResult.read(path)
    except (OSError, ValueError, TypeError, KeyError):
        return False
    return True


def _run_one(args):
    config_dict, run_dir = args
    cfg = ExperimentConfig(**config_dict)
    return run_experiment(cfg, run_dir)


def run_sweep(config, out_dir, workers=1):
    """Run every experiment of a sweep under ``out_dir/<run name>``."""
    out_dir = Path(out_dir)
    jobs = [(cfg.to_dict(), out_dir / run_dir_name(cfg)) for cfg in expand_sweep(config)]
    log.info("sweep: %d experiments into %s", len(jobs), out_dir)
    if workers <= 1 or len(jobs) == 1:
        return [_run_one(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one, jobs))
