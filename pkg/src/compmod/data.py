"""Datasets, IDX ingestion and the paired-view augmentation pipeline."""

from __future__ import annotations

import gzip
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, ContractError, FormatError
from .models import atomic_write, canonical_json

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049
AUGMENT_KINDS = ("window_mask", "gaussian_jitter", "feature_drop", "window_crop")
PAIRINGS = ("independent", "complementary")


class ConsistencyError(FormatError):
    pass


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.x)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def take(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], dict(self.meta))


@dataclass(frozen=True)
class SplitSemanticsSpec:
    num_classes: int = 10
    dim: int = 64
    samples_per_class: int = 500
    center_scale: float = 1.0
    noise_scale: float = 1.0
    mask_width: float = 0.5
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.dim < 2 or self.dim % 2:
            problems.append(f"dim: must be even and >= 2, got {self.dim}")
        if not 0 < self.mask_width < 1:
            problems.append(f"mask_width: must lie in (0, 1), got {self.mask_width}")
        if self.noise_scale < 0:
            problems.append(f"noise_scale: must be >= 0, got {self.noise_scale}")
        if self.num_classes < 2:
            problems.append(f"num_classes: must be >= 2, got {self.num_classes}")
        if self.samples_per_class < 1:
            problems.append(f"samples_per_class: must be >= 1, got {self.samples_per_class}")
        if problems:
            raise ConfigError(problems)


def gen_split_semantics(spec: SplitSemanticsSpec) -> Dataset:
    """Class c sample = [centre_A(c), centre_B(c)] + noise; each half alone carries the label."""
    rng = np.random.default_rng(spec.seed)
    half = spec.dim // 2
    centers_a = rng.normal(size=(spec.num_classes, half)) * spec.center_scale
    centers_b = rng.normal(size=(spec.num_classes, half)) * spec.center_scale
    y = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
    noise = rng.normal(size=(len(y), spec.dim)) * spec.noise_scale
    x = np.hstack([centers_a[y], centers_b[y]]) + noise
    return Dataset(x, y, {"kind": "split_semantics", "spec": asdict(spec)})


def train_test_split(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    if not 0 < test_fraction < 1:
        raise ContractError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    perm = np.random.default_rng(seed).permutation(len(ds))
    n_test = int(round(test_fraction * len(ds)))
    return ds.take(np.sort(perm[n_test:])), ds.take(np.sort(perm[:n_test]))


# ---------------------------------------------------------------------------
# augmentations


@dataclass(frozen=True)
class AugmentOp:
    kind: str
    width: float | None = None
    sigma: float | None = None
    p: float | None = None

    def __post_init__(self):
        if self.kind not in AUGMENT_KINDS:
            raise ConfigError(f"augment: kind must be one of {AUGMENT_KINDS}, got {self.kind!r}")
        if self.kind in ("window_mask", "window_crop"):
            if self.width is None or not 0 < self.width <= 1:
                raise ConfigError(f"augment {self.kind}: width must lie in (0, 1], got {self.width}")
        if self.kind == "gaussian_jitter" and (self.sigma is None or self.sigma < 0):
            raise ConfigError(f"augment gaussian_jitter: sigma must be >= 0, got {self.sigma}")
        if self.kind == "feature_drop" and (self.p is None or not 0 <= self.p <= 1):
            raise ConfigError(f"augment feature_drop: p must lie in [0, 1], got {self.p}")

    def window(self, dim: int) -> int:
        return min(dim, max(1, math.ceil(self.width * dim)))

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def default_view_ops(mask_width: float = 0.5, jitter: float = 0.1) -> tuple[AugmentOp, ...]:
    return (AugmentOp("window_mask", width=mask_width), AugmentOp("gaussian_jitter", sigma=jitter))


def _apply(x: np.ndarray, op: AugmentOp, rng: np.random.Generator, offset: int | None = None,
           complement: bool = False) -> tuple[np.ndarray, tuple]:
    dim = x.shape[-1]
    if op.kind in ("window_mask", "window_crop"):
        width = op.window(dim)
        if offset is None:
            offset = int(rng.integers(0, dim - width + 1))
        out = x.copy()
        keep_window = op.kind == "window_crop" or complement
        if keep_window:
            out[:offset] = 0.0
            out[offset + width:] = 0.0
            if op.kind == "window_crop":
                out[offset:offset + width] *= dim / width
        else:
            out[offset:offset + width] = 0.0
        return out, (op.kind + ("_complement" if complement else ""), offset)
    if op.kind == "gaussian_jitter":
        return x + op.sigma * rng.normal(size=dim), (op.kind,)
    drop = rng.random(dim) < op.p
    out = x.copy()
    out[drop] = 0.0
    return out, (op.kind, int(drop.sum()))


def augment(x: np.ndarray, op: AugmentOp, rng: np.random.Generator) -> np.ndarray:
    """One random draw of ``op`` applied to a single feature row; shape is preserved."""
    return _apply(np.asarray(x, dtype=np.float64), op, rng)[0]


def augment_pair(x: np.ndarray, ops: Sequence[AugmentOp], rng: np.random.Generator,
                 pairing: str = "independent") -> tuple[np.ndarray, np.ndarray, tuple]:
    """Two views of one row.

    With ``pairing="complementary"`` the second view keeps exactly the window
    the first view's ``window_mask`` removed; every other op is drawn
    independently per view.
    """
    v1, v2 = x, x
    d1, d2 = [], []
    for op in ops:
        v1, desc = _apply(v1, op, rng)
        d1.append(desc)
        if pairing == "complementary" and op.kind == "window_mask":
            v2, desc2 = _apply(v2, op, rng, offset=desc[1], complement=True)
        else:
            v2, desc2 = _apply(v2, op, rng)
        d2.append(desc2)
    return v1, v2, (tuple(d1), tuple(d2))


@dataclass
class ViewBatch:
    x1: np.ndarray
    x2: np.ndarray
    labels: np.ndarray
    indices: np.ndarray
    descriptors: list = field(default_factory=list)

    def __len__(self):
        return len(self.x1)


def batch_iter(ds: Dataset, batch_size: int, seed, ops: Sequence[AugmentOp] | None = None,
               pairing: str = "independent") -> Iterator[ViewBatch]:
    """Seeded shuffle then two augmentation draws per sample; the last partial batch is dropped."""
    if batch_size < 2:
        raise ContractError(f"batch size must be >= 2, got {batch_size}")
    if len(ds) < batch_size:
        raise ContractError(f"dataset has {len(ds)} samples, fewer than the batch size {batch_size}")
    if pairing not in PAIRINGS:
        raise ConfigError(f"pairing: must be one of {PAIRINGS}, got {pairing!r}")
    ops = default_view_ops() if ops is None else tuple(ops)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ds))
    for b in range(len(ds) // batch_size):
        idx = perm[b * batch_size:(b + 1) * batch_size]
        x1 = np.empty((batch_size, ds.dim))
        x2 = np.empty((batch_size, ds.dim))
        descs = []
        for r, i in enumerate(idx):
            x1[r], x2[r], desc = augment_pair(ds.x[i], ops, rng, pairing)
            descs.append(desc)
        yield ViewBatch(x1, x2, ds.y[idx], idx, descs)


# ---------------------------------------------------------------------------
# IDX files


def _open(path: Path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path, expect_magic: int) -> np.ndarray:
    with _open(path) as fh:
        data = fh.read()
    if len(data) < 4:
        raise FormatError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expect_magic:
        raise FormatError(f"{path}: bad IDX magic {magic} (0x{magic:08x}), expected {expect_magic}")
    ndim = magic & 0xFF
    dims = struct.unpack(f">{ndim}I", data[4:4 + 4 * ndim])
    body = data[4 + 4 * ndim:]
    expected = int(np.prod(dims))
    if len(body) != expected:
        raise FormatError(f"{path}: header promises {expected} bytes of data, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    images = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if len(images) != len(labels):
        raise ConsistencyError(f"{len(images)} images but {len(labels)} labels")
    x = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64),
                   {"kind": "idx", "images": str(images_path), "shape": list(images.shape[1:])})


def write_idx(path, array: np.ndarray):
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise FormatError(f"write_idx: only unsigned bytes are supported, got {array.dtype}")
    header = struct.pack(">I", 0x0800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    payload = header + array.tobytes()
    if str(path).endswith(".gz"):
        payload = gzip.compress(payload, mtime=0)
    atomic_write(Path(path), payload)


# ---------------------------------------------------------------------------
# dataset cache: raw little-endian doubles (features, then labels) + JSON sidecar


def save_dataset_cache(path, ds: Dataset):
    path = Path(path)
    blob = ds.x.astype("<f8").tobytes() + ds.y.astype("<f8").tobytes()
    atomic_write(path, blob)
    sidecar = {"shape": list(ds.x.shape), "seed": ds.meta.get("spec", {}).get("seed"), "meta": ds.meta}
    atomic_write(path.with_suffix(path.suffix + ".json"), canonical_json(sidecar))


def load_dataset_cache(path) -> Dataset:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_bytes())
    n, d = sidecar["shape"]
    raw = np.frombuffer(path.read_bytes(), dtype="<f8")
    if raw.size != n * d + n:
        raise ConsistencyError(f"{path}: expected {n * d + n} doubles, found {raw.size}")
    return Dataset(raw[: n * d].reshape(n, d).copy(), raw[n * d:].astype(np.int64), sidecar["meta"])


# ---------------------------------------------------------------------------
# MNIST-format stand-in built from scikit-learn's bundled handwritten digits


def write_digits_idx(out_dir, n_train: int = 8000, n_test: int = 2000, seed: int = 0) -> dict:
    """Write 28x28 IDX files from randomly warped 8x8 handwritten digits.

    Train and test images come from disjoint sets of source digits.
    """
    from scipy import ndimage
    from sklearn.datasets import load_digits

    digits = load_digits()
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(digits.target))
    cut = int(0.8 * len(order))
    out_dir = Path(out_dir)
    paths = {}
    for split, pool, count in (("train", order[:cut], n_train), ("t10k", order[cut:], n_test)):
        picks = rng.choice(pool, size=count, replace=True)
        images = np.empty((count, 28, 28), dtype=np.uint8)
        for j, src in enumerate(picks):
            base = ndimage.zoom(digits.images[src] / 16.0, 20 / 8, order=1)
            canvas = np.zeros((28, 28))
            canvas[4:24, 4:24] = np.clip(base, 0, 1)
            angle = np.deg2rad(rng.uniform(-15, 15))
            zoom = rng.uniform(0.85, 1.15)
            rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]]) / zoom
            centre = np.array([13.5, 13.5])
            shift = rng.uniform(-2, 2, size=2)
            warped = ndimage.affine_transform(canvas, rot, offset=centre - rot @ (centre + shift), order=1)
            images[j] = np.clip(np.round(warped * 255), 0, 255).astype(np.uint8)
        labels = digits.target[picks].astype(np.uint8)
        img_path = out_dir / f"{split}-images-idx3-ubyte"
        lab_path = out_dir / f"{split}-labels-idx1-ubyte"
        write_idx(img_path, images)
        write_idx(lab_path, labels)
        paths[split] = (img_path, lab_path)
    return paths
