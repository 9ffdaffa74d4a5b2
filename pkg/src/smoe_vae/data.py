"""QuickDraw bitmap ingestion, balanced subsampling, batching, and synthetic sketches.

QuickDraw's "numpy bitmap" distribution ships one ``.npy`` file per category
holding ``uint8`` rows of 784 pixels (ink = 255). ``load_npy`` parses the
NPY container directly so malformed files fail with specific errors.
"""
from __future__ import annotations

import ast
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .backbone import make_rng

SIDE = 28
NPY_MAGIC = b"\x93NUMPY"
SYNTHETIC_CLASSES = ("disk", "cross", "hbar", "vbar", "ring")


class NpyFormatError(ValueError):
    pass


class UnsupportedDtypeError(NpyFormatError):
    pass


class UnsupportedLayoutError(NpyFormatError):
    pass


class InsufficientDataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# NPY

def parse_npy(buf: bytes) -> np.ndarray:
    if buf[:6] != NPY_MAGIC:
        raise NpyFormatError(f"bad magic {buf[:6]!r}, expected {NPY_MAGIC!r}")
    if len(buf) < 10:
        raise NpyFormatError("file ends inside the NPY preamble")
    major = buf[6]
    if major == 1:
        (hlen,), start = struct.unpack("<H", buf[8:10]), 10
    elif major in (2, 3):
        if len(buf) < 12:
            raise NpyFormatError("file ends inside the NPY preamble")
        (hlen,), start = struct.unpack("<I", buf[8:12]), 12
    else:
        raise NpyFormatError(f"unsupported NPY version {major}.{buf[7]}")
    if len(buf) < start + hlen:
        raise NpyFormatError(f"header promises {hlen} bytes, only {len(buf) - start} present")
    try:
        header = ast.literal_eval(buf[start:start + hlen].decode("latin1"))
    except (ValueError, SyntaxError) as exc:
        raise NpyFormatError(f"unreadable NPY header: {exc}") from None
    if not isinstance(header, dict) or not {"descr", "fortran_order", "shape"} <= header.keys():
        raise NpyFormatError(f"NPY header lacks descr/fortran_order/shape: {header!r}")
    if header["descr"] not in ("|u1", "<u1", ">u1", "u1"):
        raise UnsupportedDtypeError(f"expected unsigned bytes (|u1), got descr {header['descr']!r}")
    if header["fortran_order"]:
        raise UnsupportedLayoutError("fortran_order=True arrays are not supported")
    shape = tuple(header["shape"])
    expected = int(np.prod(shape, dtype=np.int64))
    payload = buf[start + hlen:]
    if len(payload) != expected:
        raise NpyFormatError(f"payload length mismatch: expected {expected} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(shape)


def load_npy(path) -> np.ndarray:
    """Read a QuickDraw bitmap file as an ``M x 28 x 28`` uint8 array."""
    arr = parse_npy(Path(path).read_bytes())
    if arr.ndim == 2 and arr.shape[1] == SIDE * SIDE or arr.ndim == 3 and arr.shape[1:] == (SIDE, SIDE):
        return arr.reshape(-1, SIDE, SIDE)
    raise NpyFormatError(f"expected shape (M, 784) or (M, 28, 28), got {arr.shape}")


def npy_bytes(arr: np.ndarray) -> bytes:
    """Canonical NPY v1.0 encoding of a C-ordered uint8 array."""
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    shape = repr(tuple(int(s) for s in arr.shape))
    header = "{'descr': '|u1', 'fortran_order': False, 'shape': %s, }" % shape
    # total preamble length is a multiple of 64, header ends in newline
    pad = 64 - (10 + len(header) + 1) % 64
    header = (header + " " * (pad % 64) + "\n").encode("latin1")
    return NPY_MAGIC + b"\x01\x00" + struct.pack("<H", len(header)) + header + arr.tobytes()


def write_npy(path, arr: np.ndarray):
    Path(path).write_bytes(npy_bytes(arr))


# ---------------------------------------------------------------------------
# datasets

@dataclass
class Dataset:
    images: np.ndarray          # uint8, M x 28 x 28
    labels: np.ndarray          # int64, M
    class_names: list
    split: str = "train"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 3 or self.images.shape[1:] != (SIDE, SIDE):
            raise ValueError(f"images must be M x {SIDE} x {SIDE}, got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ValueError("labels outside [0, num_classes)")

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self):
        return len(self.class_names)

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, idx, split=None) -> "Dataset":
        idx = np.asarray(idx)
        prov = dict(self.provenance, parent_split=self.split, n_selected=int(len(idx)))
        return Dataset(self.images[idx], self.labels[idx], list(self.class_names),
                       split or self.split, prov)

    def floats(self):
        return self.images.astype(np.float32)[:, None] / 255.0


def build_dataset(sources: Mapping[str, object], per_class: int, fraction: float = 1.0, seed: int = 0,
                  test_fraction: float = 0.1) -> tuple[Dataset, Dataset]:
    """Balanced, seeded subsample split per class into train/test.

    ``sources`` maps class name to an NPY path or an already-loaded uint8 array.
    Only the first ``per_class`` rows of each source are eligible; a fixed
    seeded permutation of them is truncated to ``round(per_class * fraction)``,
    so smaller fractions are nested inside larger ones.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    take = int(round(per_class * fraction))
    if per_class * fraction < 10:
        raise ValueError(f"per_class * fraction = {per_class * fraction:g} < 10 samples per class")
    n_test = int(round(take * test_fraction))
    names = list(sources)
    tr_img, tr_lab, te_img, te_lab = [], [], [], []
    for c, name in enumerate(names):
        src = sources[name]
        arr = load_npy(src) if isinstance(src, (str, Path)) else np.asarray(src, dtype=np.uint8).reshape(-1, SIDE, SIDE)
        if len(arr) < per_class:
            raise InsufficientDataError(f"class {name!r} has {len(arr)} samples, {per_class} requested")
        order = make_rng([seed, c]).permutation(per_class)[:take]
        te_idx, tr_idx = order[:n_test], order[n_test:]
        tr_img.append(arr[tr_idx]), te_img.append(arr[te_idx])
        tr_lab.append(np.full(len(tr_idx), c)), te_lab.append(np.full(len(te_idx), c))
    prov = {"sources": {k: str(v) if isinstance(v, (str, Path)) else "<array>" for k, v in sources.items()},
            "per_class": per_class, "fraction": fraction, "seed": seed, "test_fraction": test_fraction}
    train = Dataset(np.concatenate(tr_img), np.concatenate(tr_lab), names, "train", dict(prov))
    test = Dataset(np.concatenate(te_img), np.concatenate(te_lab), names, "test", dict(prov))
    return train, test


# ---------------------------------------------------------------------------
# synthetic sketches

@dataclass
class SyntheticSpec:
    classes: tuple = SYNTHETIC_CLASSES
    samples_per_class: int = 200
    center_jitter: float = 2.0
    size_jitter: float = 2.0
    stroke_range: tuple = (1.0, 2.0)
    radius: float = 8.0          # disks and rings
    half_length: float = 9.0     # bars and cross arms
    seed: int = 0

    def __post_init__(self):
        unknown = set(self.classes) - set(SYNTHETIC_CLASSES)
        if unknown:
            raise ValueError(f"unknown synthetic classes {sorted(unknown)}")


_YY, _XX = np.mgrid[0:SIDE, 0:SIDE].astype(np.float64)


def _segment_dist(cx, cy, half, horizontal):
    if horizontal:
        dx = np.maximum(np.abs(_XX - cx) - half, 0)
        return np.hypot(dx, _YY - cy)
    dy = np.maximum(np.abs(_YY - cy) - half, 0)
    return np.hypot(_XX - cx, dy)


def render_shape(kind, cx, cy, size, stroke):
    """Anti-aliased ink coverage in [0, 1] for one shape."""
    r = np.hypot(_XX - cx, _YY - cy)
    if kind == "disk":
        dist = np.maximum(r - size, 0) - stroke / 2  # filled interior
    elif kind == "ring":
        dist = np.abs(r - size) - stroke / 2
    elif kind == "hbar":
        dist = _segment_dist(cx, cy, size, True) - stroke / 2
    elif kind == "vbar":
        dist = _segment_dist(cx, cy, size, False) - stroke / 2
    elif kind == "cross":
        dist = np.minimum(_segment_dist(cx, cy, size, True), _segment_dist(cx, cy, size, False)) - stroke / 2
    else:
        raise ValueError(f"unknown shape {kind!r}")
    return np.clip(0.5 - dist, 0.0, 1.0)


def synthesize(spec: SyntheticSpec) -> Dataset:
    rng = make_rng(spec.seed)
    center = (SIDE - 1) / 2
    images, labels = [], []
    for c, kind in enumerate(spec.classes):
        nominal = spec.radius if kind in ("disk", "ring") else spec.half_length
        for _ in range(spec.samples_per_class):
            cx, cy = center + rng.uniform(-spec.center_jitter, spec.center_jitter, size=2)
            size = nominal + rng.uniform(-spec.size_jitter, spec.size_jitter)
            stroke = rng.uniform(*spec.stroke_range)
            img = render_shape(kind, cx, cy, size, stroke)
            images.append(np.round(img * 255).astype(np.uint8))
            labels.append(c)
    prov = {"synthetic": True, "seed": spec.seed, "samples_per_class": spec.samples_per_class}
    return Dataset(np.stack(images), np.array(labels), list(spec.classes), "train", prov)


def synthetic_sources(spec: SyntheticSpec) -> dict:
    """Per-class arrays from ``synthesize``, usable as ``build_dataset`` sources."""
    ds = synthesize(spec)
    return {name: ds.images[ds.labels == c] for c, name in enumerate(ds.class_names)}


# ---------------------------------------------------------------------------
# batching

@dataclass
class BatchPlan:
    batch_size: int = 128
    seed: int = 0
    drop_last: bool = True
    shuffle: bool = True


def batch_order(n, plan: BatchPlan, epoch: int) -> list[np.ndarray]:
    if plan.batch_size > n:
        raise ValueError(f"batch size {plan.batch_size} exceeds dataset size {n}")
    order = make_rng([plan.seed, epoch]).permutation(n) if plan.shuffle else np.arange(n)
    stop = n - n % plan.batch_size if plan.drop_last else n
    return [order[i:i + plan.batch_size] for i in range(0, stop, plan.batch_size)]


def batches(dataset: Dataset, plan: BatchPlan, epoch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(x, labels)`` with x scaled to [0, 1], shaped N x 1 x 28 x 28."""
    for idx in batch_order(len(dataset), plan, epoch):
        x = dataset.images[idx].astype(np.float32)[:, None] / np.float32(255.0)
        yield x, dataset.labels[idx]
