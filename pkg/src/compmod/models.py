"""MLP networks, parameter groups, feature fusion and the checkpoint file format."""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import CompatibilityError, ConfigError, DimensionError, FormatError

NETWORK_GROUPS = {
    "encoder": "theta",
    "projector": "phi",
    "compmod": "xi",
    "embed_fusion": "zeta",
    "predictor": "predictor",
    "target_encoder": "target",
    "target_projector": "target",
}
# target networks start as copies of their online counterparts
TARGET_SOURCES = {"target_encoder": "encoder", "target_projector": "projector"}
FUSION_KINDS = ("concat_repr", "mixup", "concat_embed")

MAGIC = b"CMPD"
VERSION = 1


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple[int, ...]

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        object.__setattr__(self, "widths", widths)
        if len(widths) < 2 or min(widths) < 1:
            raise ConfigError(f"MlpSpec: need at least two widths >= 1, got {list(widths)}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1


@dataclass(frozen=True)
class FusionStrategy:
    kind: str = "concat_repr"
    alpha: float | None = None
    sample_alpha: bool = False

    def __post_init__(self):
        if self.kind not in FUSION_KINDS:
            raise ConfigError(f"fusion: kind must be one of {FUSION_KINDS}, got {self.kind!r}")
        if self.kind == "mixup":
            if self.alpha is None and not self.sample_alpha:
                raise ConfigError("alpha: mixup needs a fixed alpha or sample_alpha=true")
            if self.alpha is not None and not 0.0 <= self.alpha <= 1.0:
                raise ConfigError(f"alpha: must lie in [0, 1], got {self.alpha}")
        elif self.alpha is not None or self.sample_alpha:
            raise ConfigError(f"alpha: only valid for mixup fusion, not {self.kind!r}")

    @property
    def head(self) -> str:
        return "embed_fusion" if self.kind == "concat_embed" else "compmod"

    @property
    def head_group(self) -> str:
        return NETWORK_GROUPS[self.head]


@dataclass
class ModelParams:
    """Named weight matrices ``<net>.<layer>.W`` (fan_in x fan_out) and biases ``<net>.<layer>.b``."""

    specs: dict[str, MlpSpec]
    values: dict[str, np.ndarray] = field(default_factory=dict)

    def group_of(self, name: str) -> str:
        return NETWORK_GROUPS[name.split(".", 1)[0]]

    def names(self, groups=None) -> list[str]:
        if groups is None:
            return list(self.values)
        groups = {groups} if isinstance(groups, str) else set(groups)
        return [k for k in self.values if self.group_of(k) in groups]

    def subset(self, groups) -> dict[str, np.ndarray]:
        return {k: self.values[k] for k in self.names(groups)}

    def assign(self, new: Mapping[str, np.ndarray]):
        for k, v in new.items():
            if self.values[k].shape != v.shape:
                raise DimensionError(f"{k}: shape {v.shape} does not match {self.values[k].shape}")
            self.values[k] = v

    def copy(self) -> "ModelParams":
        return ModelParams(dict(self.specs), {k: v.copy() for k, v in self.values.items()})

    def n_params(self, groups=None) -> int:
        return sum(self.values[k].size for k in self.names(groups))

    def bind(self, trainable=(), overrides: Mapping[str, np.ndarray] | None = None) -> dict[str, T.Node]:
        """Wrap every parameter in a node; groups in ``trainable`` become gradient leaves."""
        trainable = set(trainable)
        overrides = overrides or {}
        out = {}
        for k, v in self.values.items():
            v = overrides.get(k, v)
            out[k] = T.param(v) if self.group_of(k) in trainable else T.const(v)
        return out

    def tobytes(self, groups=None) -> bytes:
        return b"".join(self.values[k].astype("<f8").tobytes() for k in self.names(groups))


def layers(binding: Mapping[str, T.Node], net: str, spec: MlpSpec) -> list[tuple[T.Node, T.Node]]:
    try:
        return [(binding[f"{net}.{i}.W"], binding[f"{net}.{i}.b"]) for i in range(spec.n_layers)]
    except KeyError as exc:
        raise ConfigError(f"network {net!r} has no parameters bound ({exc.args[0]} missing)") from None


def init_params(specs: Mapping[str, MlpSpec], seed: int) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, one seeded stream."""
    unknown = set(specs) - set(NETWORK_GROUPS)
    if unknown:
        raise ConfigError(f"unknown networks: {sorted(unknown)}")
    rng = np.random.default_rng(seed)
    params = ModelParams(dict(specs))
    for net, spec in specs.items():
        if net in TARGET_SOURCES:
            continue
        for i, (fan_in, fan_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            params.values[f"{net}.{i}.W"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            params.values[f"{net}.{i}.b"] = np.zeros((1, fan_out))
    for net, source in TARGET_SOURCES.items():
        if net not in specs:
            continue
        if specs[net] != specs.get(source):
            raise ConfigError(f"{net}: must mirror the widths of {source}")
        for i in range(specs[net].n_layers):
            for part in ("W", "b"):
                params.values[f"{net}.{i}.{part}"] = params.values[f"{source}.{i}.{part}"].copy()
    return params


def mlp_forward(net_layers: list[tuple[T.Node, T.Node]], x: T.Node) -> T.Node:
    """Affine + rectifier on hidden layers, affine output."""
    if x.shape[1] != net_layers[0][0].shape[0]:
        raise DimensionError(
            f"mlp_forward: input width {x.shape[1]} does not match first layer {net_layers[0][0].shape}"
        )
    out = x
    last = len(net_layers) - 1
    for i, (w, b) in enumerate(net_layers):
        out = T.add(T.matmul(out, w), b)
        if i < last:
            out = T.relu(out)
    return out


def fused_input(a: T.Node, b: T.Node, strategy: FusionStrategy, alpha: float | None = None) -> T.Node:
    """The fused vector fed to the fusion head, before the head itself."""
    if a.shape != b.shape:
        raise DimensionError(f"fuse: inputs have shapes {a.shape} and {b.shape}")
    if strategy.kind == "mixup":
        alpha = strategy.alpha if alpha is None else alpha
        if alpha is None:
            raise ConfigError("alpha: mixup with sample_alpha needs a drawn alpha")
        return T.add(T.scale(a, alpha), T.scale(b, 1.0 - alpha))
    return T.concat_cols(a, b)


def fuse(a: T.Node, b: T.Node, strategy: FusionStrategy, params: ModelParams,
         binding: Mapping[str, T.Node], alpha: float | None = None) -> T.Node:
    """Comprehensive embedding from two views.

    ``a, b`` are encoder representations for ``concat_repr``/``mixup`` and
    projector embeddings for ``concat_embed``.
    """
    head = strategy.head
    if head not in params.specs:
        raise ConfigError(f"fusion {strategy.kind!r} needs the {head!r} network, which is not configured")
    x = fused_input(a, b, strategy, alpha)
    spec = params.specs[head]
    if x.shape[1] != spec.widths[0]:
        raise DimensionError(f"fuse: head {head!r} expects width {spec.widths[0]}, fused width is {x.shape[1]}")
    return mlp_forward(layers(binding, head, spec), x)


def default_specs(input_dim: int, rep_dim: int = 64, embed_dim: int = 32,
                  encoder_hidden=(256,), projector_hidden=(64,), predictor_hidden=None,
                  fusion: FusionStrategy | None = None, base: str = "simclr",
                  with_head: bool = True) -> dict[str, MlpSpec]:
    fusion = fusion or FusionStrategy()
    specs = {
        "encoder": MlpSpec((input_dim, *encoder_hidden, rep_dim)),
        "projector": MlpSpec((rep_dim, *projector_hidden, embed_dim)),
    }
    if with_head:
        if fusion.kind == "concat_repr":
            specs["compmod"] = MlpSpec((2 * rep_dim, rep_dim, embed_dim))
        elif fusion.kind == "mixup":
            specs["compmod"] = MlpSpec((rep_dim, rep_dim, embed_dim))
        else:
            specs["embed_fusion"] = MlpSpec((2 * embed_dim, embed_dim, embed_dim))
    if base == "byol":
        hidden = (embed_dim,) if predictor_hidden is None else tuple(predictor_hidden)
        specs["predictor"] = MlpSpec((embed_dim, *hidden, embed_dim))
        specs["target_encoder"] = specs["encoder"]
        specs["target_projector"] = specs["projector"]
    return specs


# ---------------------------------------------------------------------------
# checkpoint format: b"CMPD" | version byte | u32 LE manifest length | JSON | f64 LE blocks


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def config_hash(loss_config: Mapping) -> str:
    return hashlib.sha256(canonical_json(dict(loss_config))).hexdigest()


def atomic_write(path: Path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_checkpoint(params: ModelParams, loss_config: Mapping, extra: Mapping | None = None) -> bytes:
    manifest = {
        "params": [
            {"name": k, "shape": list(v.shape), "group": params.group_of(k)}
            for k, v in params.values.items()
        ],
        "specs": {net: list(spec.widths) for net, spec in params.specs.items()},
        "loss_config": dict(loss_config),
        "loss_config_hash": config_hash(loss_config),
        "extra": dict(extra or {}),
    }
    blob = canonical_json(manifest)
    blocks = b"".join(v.astype("<f8").tobytes() for v in params.values.values())
    return MAGIC + bytes([VERSION]) + struct.pack("<I", len(blob)) + blob + blocks


def decode_checkpoint(data: bytes) -> tuple[ModelParams, dict]:
    if data[:4] != MAGIC:
        raise FormatError(f"checkpoint: bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < 9 or data[4] != VERSION:
        raise FormatError(f"checkpoint: unsupported version {data[4] if len(data) > 4 else None}")
    (length,) = struct.unpack("<I", data[5:9])
    try:
        manifest = json.loads(data[9 : 9 + length])
    except ValueError as exc:
        raise FormatError(f"checkpoint: manifest is not valid JSON ({exc})") from None
    specs = {net: MlpSpec(tuple(w)) for net, w in manifest["specs"].items()}
    params = ModelParams(specs)
    offset = 9 + length
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        nbytes = 8 * int(np.prod(shape))
        chunk = data[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise FormatError(f"checkpoint: truncated block for {entry['name']}")
        params.values[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(data):
        raise FormatError(f"checkpoint: {len(data) - offset} trailing bytes")
    return params, manifest


def save_checkpoint(path, params: ModelParams, loss_config: Mapping, extra: Mapping | None = None):
    atomic_write(Path(path), encode_checkpoint(params, loss_config, extra))


def load_checkpoint(path, expect_loss_config: Mapping | None = None) -> tuple[ModelParams, dict]:
    params, manifest = decode_checkpoint(Path(path).read_bytes())
    if expect_loss_config is not None and manifest["loss_config_hash"] != config_hash(expect_loss_config):
        raise CompatibilityError("checkpoint: loss configuration hash does not match")
    return params, manifest
