"""JSON run configuration: five sections, unknown keys rejected, every problem reported at once."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .data import PAIRINGS, AugmentOp, SplitSemanticsSpec
from .errors import ConfigError
from .models import FUSION_KINDS, FusionStrategy
from .objectives import LossConfig
from .trainer import HYPERGRAD_KINDS, HypergradMode

DATASET_KINDS = ("split_semantics", "idx")
IDX_PATHS = ("train_images", "train_labels", "test_images", "test_labels")


@dataclass
class DatasetSection:
    kind: str = "split_semantics"
    num_classes: int = 10
    dim: int = 64
    samples_per_class: int = 500
    center_scale: float = 0.3
    noise_scale: float = 1.0
    mask_width: float = 0.5
    seed: int = 0
    test_fraction: float = 0.2
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    train_limit: int | None = None
    test_limit: int | None = None
    pairing: str = "complementary"
    # None picks per-kind defaults, see augment_ops()
    augment: list | None = None


@dataclass
class ModelSection:
    encoder_hidden: list = field(default_factory=lambda: [256])
    rep_dim: int = 64
    projector_hidden: list = field(default_factory=lambda: [64])
    embed_dim: int = 32
    predictor_hidden: list | None = None


@dataclass
class LossSection:
    base: str = "simclr"
    tau: float = 0.5
    lambda1: float = 0.1
    lambda2: float = 0.01
    mu: float | None = None
    lambda_code: float | None = None
    eps_sq: float | None = None
    taylor_m: int = 4
    bt_offdiag: float = 0.005
    mcr_through_zhat: bool = False
    counterfactual_weight: float = 0.0
    fusion: str = "concat_repr"
    alpha: float | None = None
    sample_alpha: bool = False
    compmod_enabled: bool = True
    bilevel: bool = True


@dataclass
class TrainSection:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.05
    seed: int = 0
    ema_momentum: float = 0.99
    hypergrad: str = "fd_hvp"
    hypergrad_eps: float = 1e-4
    eval_every: int = 1
    knn_k: int = 5
    probe_epochs: int = 500
    probe_lr: float = 0.1


@dataclass
class OutputSection:
    dir: str = "runs/default"
    metrics_format: str = "csv"
    record_wallclock: bool = False


SECTIONS = {
    "dataset": DatasetSection,
    "model": ModelSection,
    "loss": LossSection,
    "train": TrainSection,
    "output": OutputSection,
}


@dataclass
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossSection = field(default_factory=LossSection)
    train: TrainSection = field(default_factory=TrainSection)
    output: OutputSection = field(default_factory=OutputSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def loss_config(self) -> LossConfig:
        keys = {f.name for f in fields(LossConfig)}
        return LossConfig(**{k: v for k, v in asdict(self.loss).items() if k in keys})

    def fusion(self) -> FusionStrategy:
        return FusionStrategy(self.loss.fusion, self.loss.alpha, self.loss.sample_alpha)

    def hypergrad(self) -> HypergradMode:
        return HypergradMode(self.train.hypergrad, self.train.hypergrad_eps)

    def split_spec(self) -> SplitSemanticsSpec:
        d = self.dataset
        return SplitSemanticsSpec(d.num_classes, d.dim, d.samples_per_class, d.center_scale,
                                  d.noise_scale, d.mask_width, d.seed)

    def augment_ops(self) -> tuple[AugmentOp, ...]:
        d = self.dataset
        if d.augment is not None:
            return tuple(AugmentOp(**op) for op in d.augment)
        if d.kind == "split_semantics":
            return (AugmentOp("window_mask", width=d.mask_width),)
        return (AugmentOp("feature_drop", p=0.3), AugmentOp("gaussian_jitter", sigma=0.1))

    def with_overrides(self, changes: dict[str, dict[str, Any]]) -> "RunConfig":
        """Copy with ``{section: {key: value}}`` applied, revalidated."""
        raw = self.to_dict()
        for section, kv in changes.items():
            raw[section].update(kv)
        return from_dict(raw)


def _type_ok(value, name: str, cls) -> bool:
    hint = _hint(cls, name)
    if value is None:
        return "None" in hint
    if "bool" in hint:
        return isinstance(value, bool)
    if "int" in hint and "float" not in hint:
        return isinstance(value, int) and not isinstance(value, bool)
    if "float" in hint:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if "str" in hint:
        return isinstance(value, str)
    if "list" in hint:
        return isinstance(value, list)
    return True


def _section(name: str, cls, raw, problems: list[str]):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        problems.append(f"{name}: section must be a JSON object")
        return cls()
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            problems.append(f"{name}.{key}: unknown key")
        elif not _type_ok(value, key, cls):
            problems.append(f"{name}.{key}: wrong type {type(value).__name__}")
        else:
            kwargs[key] = float(value) if _is_float_field(cls, key) and isinstance(value, int) else value
    return cls(**kwargs)


def _hint(cls, key) -> str:
    return str({f.name: f.type for f in fields(cls)}[key])


def _is_float_field(cls, key) -> bool:
    return "float" in _hint(cls, key)


def _check_ranges(cfg: RunConfig, base_dir: Path, problems: list[str]):
    d, m, lo, t, o = cfg.dataset, cfg.model, cfg.loss, cfg.train, cfg.output
    if d.kind not in DATASET_KINDS:
        problems.append(f"dataset.kind: must be one of {DATASET_KINDS}, got {d.kind!r}")
    if d.pairing not in PAIRINGS:
        problems.append(f"dataset.pairing: must be one of {PAIRINGS}, got {d.pairing!r}")
    if d.kind == "split_semantics":
        try:
            cfg.split_spec()
        except ConfigError as exc:
            problems.extend(f"dataset.{p}" for p in exc.problems)
        if not 0 < d.test_fraction < 1:
            problems.append(f"dataset.test_fraction: must lie in (0, 1), got {d.test_fraction}")
    elif d.kind == "idx":
        for key in IDX_PATHS:
            value = getattr(d, key)
            if value is None:
                problems.append(f"dataset.{key}: required for kind 'idx'")
            elif not (base_dir / value).exists():
                problems.append(f"dataset.{key}: path does not exist: {value}")
    for key in ("train_limit", "test_limit"):
        v = getattr(d, key)
        if v is not None and v < 1:
            problems.append(f"dataset.{key}: must be >= 1, got {v}")
    if d.augment is not None:
        for i, op in enumerate(d.augment):
            if not isinstance(op, dict):
                problems.append(f"dataset.augment[{i}]: must be an object")
                continue
            try:
                AugmentOp(**op)
            except TypeError as exc:
                problems.append(f"dataset.augment[{i}]: {exc}")
            except ConfigError as exc:
                problems.extend(f"dataset.augment[{i}].{p}" for p in exc.problems)
    for key in ("encoder_hidden", "projector_hidden", "predictor_hidden"):
        widths = getattr(m, key)
        if widths is not None and not all(isinstance(w, int) and not isinstance(w, bool) and w >= 1 for w in widths):
            problems.append(f"model.{key}: widths must be positive integers")
    for key in ("rep_dim", "embed_dim"):
        if getattr(m, key) < 1:
            problems.append(f"model.{key}: must be >= 1")
    try:
        cfg.loss_config()
    except ConfigError as exc:
        problems.extend(f"loss.{p}" for p in exc.problems)
    if lo.fusion not in FUSION_KINDS:
        problems.append(f"loss.fusion: must be one of {FUSION_KINDS}, got {lo.fusion!r}")
    else:
        try:
            cfg.fusion()
        except ConfigError as exc:
            problems.extend(f"loss.{p}" for p in exc.problems)
    if t.epochs < 0:
        problems.append(f"train.epochs: must be >= 0, got {t.epochs}")
    if t.batch_size < 2:
        problems.append(f"train.batch_size: must be >= 2, got {t.batch_size}")
    if not (math.isfinite(t.lr) and t.lr > 0):
        problems.append(f"train.lr: must be > 0, got {t.lr}")
    if not 0 <= t.ema_momentum <= 1:
        problems.append(f"train.ema_momentum: must lie in [0, 1], got {t.ema_momentum}")
    if t.hypergrad not in HYPERGRAD_KINDS:
        problems.append(f"train.hypergrad: must be one of {HYPERGRAD_KINDS}, got {t.hypergrad!r}")
    if not 1e-6 <= t.hypergrad_eps <= 1e-3:
        problems.append(f"train.hypergrad_eps: must lie in [1e-6, 1e-3], got {t.hypergrad_eps}")
    if t.eval_every < 0:
        problems.append(f"train.eval_every: must be >= 0, got {t.eval_every}")
    for key in ("knn_k", "probe_epochs"):
        if getattr(t, key) < 1:
            problems.append(f"train.{key}: must be >= 1")
    if not t.probe_lr > 0:
        problems.append(f"train.probe_lr: must be > 0, got {t.probe_lr}")
    if o.metrics_format != "csv":
        problems.append(f"output.metrics_format: only 'csv' is supported, got {o.metrics_format!r}")


def from_dict(raw: dict, base_dir: Path | str = ".") -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a JSON object")
    problems: list[str] = []
    for key in raw:
        if key not in SECTIONS:
            problems.append(f"{key}: unknown section")
    built = {name: _section(name, cls, raw.get(name), problems) for name, cls in SECTIONS.items()}
    cfg = RunConfig(**built)
    # keys with the wrong type fell back to defaults above, so range checks are safe
    _check_ranges(cfg, Path(base_dir), problems)
    if problems:
        raise ConfigError(problems)
    return _resolve_paths(cfg, Path(base_dir))


def _resolve_paths(cfg: RunConfig, base_dir: Path) -> RunConfig:
    if cfg.dataset.kind != "idx":
        return cfg
    paths = {k: str((base_dir / getattr(cfg.dataset, k)).resolve()) for k in IDX_PATHS}
    return replace(cfg, dataset=replace(cfg.dataset, **paths))


def loads(text: str, base_dir: Path | str = ".") -> RunConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return from_dict(raw, base_dir)


def load_config(path) -> RunConfig:
    path = Path(path)
    return loads(path.read_text(), path.parent)


def dumps(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"
