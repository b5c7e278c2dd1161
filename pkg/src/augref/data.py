"""Tensor files, dataset layout, resizing, synthetic imagery and batch planning.

A ``.tns`` file is the magic ``TNS1``, one unsigned byte of rank, ``rank``
little-endian uint32 dims, then the float32 little-endian payload in row-major
order. Datasets live under ``root/{train,test}/<class>/<id>.tns`` with class
ids assigned in lexicographic order of the class directory names.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"TNS1"
MAX_RANK = 4
MAX_ELEMENTS = 2**40
SPLITS = ("train", "test")


class TnsError(ValueError):
    pass


class BadMagicError(TnsError):
    pass


class TruncatedError(TnsError):
    pass


class RankError(TnsError):
    pass


class SizeOverflowError(TnsError):
    pass


# Hardware float conversion quiets signalling NaNs, so NaN payloads are moved
# between widths bit by bit to keep round trips exact.
_F32_MANTISSA_SHIFT = 52 - 23


def widen_f32(a: np.ndarray) -> np.ndarray:
    bits = np.asarray(a, dtype="<f4").view(np.uint32)
    nan = (bits & 0x7F800000 == 0x7F800000) & (bits & 0x007FFFFF != 0)
    with np.errstate(invalid="ignore"):
        out = bits.view(np.float32).astype(np.float64)
    if nan.any():
        b = bits[nan].astype(np.uint64)
        wide = ((b >> 31) << 63) | (np.uint64(0x7FF) << 52) | ((b & 0x007FFFFF) << _F32_MANTISSA_SHIFT)
        out.view(np.uint64)[nan] = wide
    return out


def narrow_f64(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    with np.errstate(invalid="ignore", over="ignore"):
        out = a.astype("<f4")
    nan = np.isnan(a)
    if nan.any():
        b = a[nan].view(np.uint64)
        mant = (b >> _F32_MANTISSA_SHIFT) & 0x007FFFFF
        # payloads living only in the low bits would read back as infinity
        mant = np.where(mant == 0, 0x00400000, mant)
        narrow = ((b >> 63) << 31) | (0xFF << 23) | mant
        out.view(np.uint32)[nan] = narrow.astype(np.uint32)
    return out


def tns_encode(t) -> bytes:
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if data.ndim > MAX_RANK:
        raise RankError(f"rank {data.ndim} exceeds {MAX_RANK}")
    if any(d < 1 or d >= 2**32 for d in data.shape):
        raise SizeOverflowError(f"dims {data.shape} not representable")
    header = MAGIC + struct.pack(f"<B{data.ndim}I", data.ndim, *data.shape)
    payload = narrow_f64(data) if data.dtype != np.float32 else data.astype("<f4")
    return header + np.ascontiguousarray(payload).tobytes()


def tns_decode(buf: bytes) -> Tensor:
    if len(buf) < 5:
        raise TruncatedError(f"header needs 5 bytes, file has {len(buf)}")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}")
    rank = buf[4]
    if rank > MAX_RANK:
        raise RankError(f"rank {rank} exceeds {MAX_RANK}")
    end = 5 + 4 * rank
    if len(buf) < end:
        raise TruncatedError(f"header declares rank {rank} but file has {len(buf)} bytes")
    dims = struct.unpack(f"<{rank}I", buf[5:end])
    if any(d == 0 for d in dims):
        raise TnsError(f"zero-sized dimension in {dims}")
    count = math.prod(dims)
    if count > MAX_ELEMENTS:
        raise SizeOverflowError(f"{count} elements exceeds the {MAX_ELEMENTS} limit")
    if len(buf) - end < 4 * count:
        raise TruncatedError(f"payload needs {4 * count} bytes, file has {len(buf) - end}")
    if len(buf) - end > 4 * count:
        raise TnsError(f"{len(buf) - end - 4 * count} trailing bytes after payload")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=end)
    return Tensor(widen_f32(data).reshape(dims))


def tns_write(path, t) -> None:
    Path(path).write_bytes(tns_encode(t))


def tns_read(path) -> Tensor:
    return tns_decode(Path(path).read_bytes())


# ---------------------------------------------------------------- resizing


def _axis_weights(n_src: int, n_dst: int):
    x = (np.arange(n_dst) + 0.5) * n_src / n_dst - 0.5
    x = np.clip(x, 0, n_src - 1)
    lo = np.floor(x).astype(int)
    hi = np.minimum(lo + 1, n_src - 1)
    return lo, hi, x - lo


def bilinear_resize(img, target: tuple[int, int]) -> Tensor:
    """Half-pixel-centre bilinear resampling of a ``1 x H x W`` image."""
    data = img.data if isinstance(img, Tensor) else np.asarray(img, dtype=np.float64)
    h, w = target
    if h < 1 or w < 1:
        raise ValueError(f"target size must be positive, got {target}")
    if data.ndim != 3 or min(data.shape) < 1:
        raise ValueError(f"expected a 1 x H x W image, got {data.shape}")
    r0, r1, fy = _axis_weights(data.shape[1], h)
    c0, c1, fx = _axis_weights(data.shape[2], w)
    fy, fx = fy[:, None], fx[None, :]
    top = data[:, r0][:, :, c0] * (1 - fx) + data[:, r0][:, :, c1] * fx
    bot = data[:, r1][:, :, c0] * (1 - fx) + data[:, r1][:, :, c1] * fx
    return Tensor(top * (1 - fy) + bot * fy)


# ---------------------------------------------------------------- dataset index


@dataclass
class DatasetIndex:
    root: Path
    classes: list[str]
    samples: dict[str, list[list[Path]]] = field(default_factory=dict)  # split -> per-class files

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def count(self, split: str) -> int:
        return sum(len(s) for s in self.samples[split])


def load_index(root) -> DatasetIndex:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    split_classes = {}
    for split in SPLITS:
        d = root / split
        if not d.is_dir():
            raise FileNotFoundError(f"missing split directory {d}")
        split_classes[split] = sorted(p.name for p in d.iterdir() if p.is_dir())
    classes = split_classes["train"]
    if split_classes["test"] != classes:
        raise ValueError(f"train classes {classes} differ from test classes {split_classes['test']}")
    if len(classes) < 2:
        raise ValueError(f"need at least 2 classes under {root}, found {len(classes)}")
    samples = {
        split: [sorted((root / split / c).glob("*.tns")) for c in classes] for split in SPLITS
    }
    return DatasetIndex(root, classes, samples)


def load_split(index: DatasetIndex, split: str, size: int | None = None):
    """Read every image of a split into an ``N x 1 x S x S`` array plus labels."""
    images, labels = [], []
    for label, files in enumerate(index.samples[split]):
        for path in files:
            try:
                img = tns_read(path)
            except TnsError as exc:
                raise TnsError(f"{path}: {exc}") from exc
            if img.ndim == 2:
                img = Tensor(img.data[None])
            if size is not None and img.shape[1:] != (size, size):
                img = bilinear_resize(img, (size, size))
            images.append(img.data)
            labels.append(label)
    return np.stack(images), np.array(labels, dtype=np.int64)


# ---------------------------------------------------------------- synthetic data

_LAYOUT_SALT = 0x5A12


def class_layout(c: int) -> np.ndarray:
    """Scatterer rows ``(y, x, amplitude, width)`` in unit coordinates for class ``c``.

    Every class shares a two-scatterer body and adds one to three of its own on
    a ring around it, at angles offset by the golden angle per class.
    """
    rng = np.random.default_rng([_LAYOUT_SALT, c])
    shared = np.array([[0.5, 0.4, 0.55, 0.07], [0.5, 0.6, 0.55, 0.07]])
    k = 1 + c % 3
    theta = c * 2.399963 + 2 * np.pi * np.arange(k) / k
    radius = rng.uniform(0.2, 0.28, k)
    own = np.column_stack(
        [
            0.5 + radius * np.sin(theta),
            0.5 + radius * np.cos(theta),
            rng.uniform(0.4, 0.6, k),
            rng.uniform(0.05, 0.08, k),
        ]
    )
    return np.vstack([shared, own])


def render(layout: np.ndarray, size: int, shift=(0.0, 0.0), background: float = 0.08) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    img = np.full((size, size), background)
    for y, x, amp, width in layout:
        cy, cx = y * size + shift[0], x * size + shift[1]
        s = width * size
        img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    return img


def speckle_sample(layout: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    shift = rng.uniform(-size / 16, size / 16, size=2)
    template = render(layout, size, shift)
    return np.clip(template * rng.exponential(1.0, size=template.shape), 0.0, 1.0)


def generate_synthetic(
    root, num_classes: int = 4, n_train: int = 20, n_test: int = 50, size: int = 32, seed: int = 0
) -> DatasetIndex:
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if size < 16:
        raise ValueError(f"image size must be at least 16, got {size}")
    root = Path(root)
    width = len(str(num_classes - 1))
    rng = np.random.default_rng(seed)
    for c in range(num_classes):
        name = f"class_{c:0{width}d}"
        layout = class_layout(c)
        for split, n in (("train", n_train), ("test", n_test)):
            d = root / split / name
            d.mkdir(parents=True, exist_ok=True)
            for i in range(n):
                img = speckle_sample(layout, size, rng)
                tns_write(d / f"{i:05d}.tns", img[None])
    return load_index(root)


# ---------------------------------------------------------------- batch planning


@dataclass
class BatchPlan:
    seed: int
    epoch: int
    P: int
    Q: int
    batches: list[list[tuple[int, int]]]


def plan_batches(index, P: int, Q: int, seed: int, epoch: int = 0) -> BatchPlan:
    """Shuffled class-balanced batches of ``P`` classes x ``Q`` samples.

    ``index`` is a :class:`DatasetIndex` or a list of per-class train counts.
    Each class is cut into shuffled chunks of ``Q`` (the last chunk topped up
    with other samples of that class), so every sample appears at least once
    per epoch.
    """
    counts = [len(s) for s in index.samples["train"]] if isinstance(index, DatasetIndex) else list(index)
    K = len(counts)
    if P < 2 or Q < 2:
        raise ValueError(f"need P >= 2 and Q >= 2, got P={P}, Q={Q}")
    if P > K:
        raise ValueError(f"P={P} exceeds the {K} available classes")
    short = [c for c, n in enumerate(counts) if n < Q]
    if short:
        raise ValueError(f"classes {short} have fewer than Q={Q} training samples")

    rng = np.random.default_rng([seed, epoch])
    chunks: list[list[list[int]]] = []
    for n in counts:
        order = rng.permutation(n)
        parts = [list(order[i : i + Q]) for i in range(0, n, Q)]
        if len(parts[-1]) < Q:
            pool = np.setdiff1d(np.arange(n), parts[-1])
            parts[-1] += list(rng.choice(pool, Q - len(parts[-1]), replace=False))
        chunks.append([[int(i) for i in p] for p in parts])

    batches = []
    while any(chunks):
        remaining = np.array([len(c) for c in chunks])
        # classes with the most chunks left go first; random tie order
        order = sorted(range(K), key=lambda c: (-remaining[c], rng.random()))
        picked = order[:P]
        batch = []
        for c in picked:
            if chunks[c]:
                idx = chunks[c].pop()
            else:
                idx = [int(i) for i in rng.choice(counts[c], Q, replace=False)]
            batch.extend((c, i) for i in idx)
        batches.append(batch)
    perm = rng.permutation(len(batches))
    return BatchPlan(seed, epoch, P, Q, [batches[i] for i in perm])
