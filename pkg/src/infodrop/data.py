"""Dataset readers (IDX, CIFAR-10 binary), nuisance datasets and batching.

Generated datasets can be cached in a flat little-endian container:

    b"IDRP"            magic
    u32                version (1)
    u32                number of arrays
    per array:
        u32            name length, then the UTF-8 name
        u32            rank, then rank x u64 dimensions
        f64 * prod     row-major payload
"""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .tensor import Rng

DATA_DIR_ENV = "INFODROP_DATA_DIR"

IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}

CIFAR_RECORD = 1 + 3 * 32 * 32


@dataclass
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    nuisance_labels: np.ndarray | None = None
    n_classes: int = 10
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be [n, c, h, w], got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataError(f"labels outside [0, {self.n_classes})")
        if self.nuisance_labels is not None:
            self.nuisance_labels = np.asarray(self.nuisance_labels, dtype=np.int64)
            if len(self.nuisance_labels) != len(self.labels):
                raise DataError("nuisance labels do not match the number of images")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx)
        nl = None if self.nuisance_labels is None else self.nuisance_labels[idx]
        return LabeledDataset(self.images[idx], self.labels[idx], nl, self.n_classes, dict(self.meta))

    def split(self, n_first: int) -> tuple["LabeledDataset", "LabeledDataset"]:
        return self.subset(np.arange(n_first)), self.subset(np.arange(n_first, len(self)))


def data_root(root: str | os.PathLike | None = None) -> Path:
    if root is not None:
        return Path(root)
    env = os.environ.get(DATA_DIR_ENV)
    if not env:
        raise DataError(f"no data directory given and ${DATA_DIR_ENV} is unset")
    return Path(env)


# ---------------------------------------------------------------- IDX


def _read_bytes(path: str | os.PathLike) -> bytes:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    with opener(path, "rb") as fh:
        return fh.read()


def load_idx(path: str | os.PathLike, scale: bool = True) -> np.ndarray:
    """Parse an IDX file (optionally gzipped).

    Unsigned-byte payloads are scaled to [0, 1] unless ``scale`` is false;
    label files (rank 1) are returned as integers.
    """
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for an IDX header (offset 0)")
    if raw[0] != 0 or raw[1] != 0:
        raise FormatError(f"{path}: bad magic bytes {raw[:2].hex()} at offset 0")
    code, rank = raw[2], raw[3]
    if code not in IDX_DTYPES:
        raise FormatError(f"{path}: unknown IDX type code 0x{code:02x} at offset 2")
    header = 4 + 4 * rank
    if len(raw) < header:
        raise FormatError(f"{path}: truncated dimension header at offset 4 (need {header} bytes, have {len(raw)})")
    dims = struct.unpack(f">{rank}I", raw[4:header])
    dtype = IDX_DTYPES[code]
    expected = header + int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, got {len(raw)} (payload starts at offset {header})")
    arr = np.frombuffer(raw, dtype=dtype, offset=header).reshape(dims)
    if rank == 1:
        return arr.astype(np.int64)
    if code == 0x08 and scale:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.float64)


def write_idx(path: str | os.PathLike, arr: np.ndarray) -> None:
    """Write a uint8 array as an IDX file (used for test fixtures and caches)."""
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise FormatError("write_idx only writes unsigned-byte payloads")
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, 0x08, arr.ndim]))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(directory: Path, stem: str) -> Path:
    for cand in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        p = directory / cand
        if p.exists():
            return p
    raise DataError(f"{stem} not found in {directory}")


def load_mnist(root: str | os.PathLike | None = None, split: str = "train") -> LabeledDataset:
    """MNIST from IDX files in ``root`` or ``root/mnist``."""
    base = data_root(root)
    directory = base / "mnist" if (base / "mnist").is_dir() else base
    img_name, lab_name = MNIST_FILES[split]
    images = load_idx(_find(directory, img_name))
    labels = load_idx(_find(directory, lab_name))
    return LabeledDataset(images[:, None, :, :], labels)


# ---------------------------------------------------------------- CIFAR-10


def read_cifar10_batch(path: str | os.PathLike) -> LabeledDataset:
    raw = Path(path).read_bytes()
    if len(raw) % CIFAR_RECORD:
        raise FormatError(f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return LabeledDataset(images, rec[:, 0].astype(np.int64))


def load_cifar10_bin(directory: str | os.PathLike | None = None, split: str = "train") -> LabeledDataset:
    """CIFAR-10 binary version: data_batch_1..5 (train) or test_batch."""
    base = data_root(directory)
    if (base / "cifar-10-batches-bin").is_dir():
        base = base / "cifar-10-batches-bin"
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
    parts = []
    for name in names:
        p = base / name
        if not p.exists():
            raise DataError(f"missing CIFAR-10 file {p}")
        parts.append(read_cifar10_batch(p))
    return LabeledDataset(np.concatenate([d.images for d in parts]), np.concatenate([d.labels for d in parts]))


# ---------------------------------------------------------------- nuisance datasets


def make_cluttered(base: LabeledDataset, n_out: int, rng: Rng, canvas: int = 96, n_distractors: int = 21,
                   crop: int = 8) -> LabeledDataset:
    """Cluttered MNIST: one digit plus random crops of other digits on a blank canvas.

    Overlaps are composited with a pixelwise max.  ``meta["placements"]``
    lists, per image, the digit offset and the distractor placements.
    """
    src = base.images[:, 0]
    n_src, h, w = src.shape
    if canvas < max(h, w):
        raise ConfigError(f"canvas {canvas} smaller than the {h}x{w} digit")
    if n_distractors and n_src < 2:
        raise ConfigError("distractors need at least two source digits")
    out = np.zeros((n_out, 1, canvas, canvas))
    labels = np.empty(n_out, dtype=np.int64)
    placements = []
    for i in range(n_out):
        k = int(rng.integers(n_src))
        r, c = (int(v) for v in rng.integers(0, canvas - h + 1, size=2))
        img = out[i, 0]
        img[r:r + h, c:c + w] = np.maximum(img[r:r + h, c:c + w], src[k])
        labels[i] = base.labels[k]
        log = {"digit": (k, r, c), "distractors": []}
        for _ in range(n_distractors):
            other = int(rng.integers(n_src - 1))
            other += other >= k
            sr, sc = (int(v) for v in rng.integers(0, h - crop + 1, size=2))
            dr, dc = (int(v) for v in rng.integers(0, canvas - crop + 1, size=2))
            patch = src[other, sr:sr + crop, sc:sc + crop]
            img[dr:dr + crop, dc:dc + crop] = np.maximum(img[dr:dr + crop, dc:dc + crop], patch)
            log["distractors"].append((other, sr, sc, dr, dc))
        placements.append(log)
    return LabeledDataset(out, labels, None, base.n_classes,
                          {"kind": "cluttered", "canvas": canvas, "n_distractors": n_distractors, "crop": crop,
                           "placements": placements})


def make_occluded(cifar: LabeledDataset, mnist: LabeledDataset, n_out: int, rng: Rng) -> LabeledDataset:
    """Occluded CIFAR: an MNIST digit pasted in white over a CIFAR image.

    Labels are the CIFAR classes, nuisance labels the MNIST classes.
    """
    size = cifar.images.shape[-1]
    digits = mnist.images[:, 0]
    dh, dw = digits.shape[1:]
    if dh > size or dw > size:
        raise ConfigError("digit larger than the CIFAR frame")
    out = np.empty((n_out,) + cifar.images.shape[1:])
    labels = np.empty(n_out, dtype=np.int64)
    nuisance = np.empty(n_out, dtype=np.int64)
    for i in range(n_out):
        ci = int(rng.integers(len(cifar)))
        mi = int(rng.integers(len(mnist)))
        r, c = (int(v) for v in rng.integers(0, size - dh + 1, size=2))
        img = cifar.images[ci].copy()
        img[:, r:r + dh, c:c + dw] = np.maximum(img[:, r:r + dh, c:c + dw], digits[mi][None])
        out[i] = img
        labels[i] = cifar.labels[ci]
        nuisance[i] = mnist.labels[mi]
    return LabeledDataset(out, labels, nuisance, cifar.n_classes, {"kind": "occluded"})


def batch_iter(ds: LabeledDataset, batch: int, shuffle_seed: int | None = None,
               epoch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield ``(images, labels, indices)``; the last partial batch is kept.

    The order is a function of (shuffle_seed, epoch); ``None`` keeps the
    original order.
    """
    n = len(ds)
    if batch < 1 or batch > n:
        raise ConfigError(f"batch size {batch} must be in [1, {n}]")
    order = np.arange(n) if shuffle_seed is None else Rng(shuffle_seed, (epoch,)).permutation(n)
    for start in range(0, n, batch):
        idx = order[start:start + batch]
        yield ds.images[idx], ds.labels[idx], idx


# ---------------------------------------------------------------- IDRP container

IDRP_MAGIC = b"IDRP"
IDRP_VERSION = 1


def save_arrays(path: str | os.PathLike, arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(IDRP_MAGIC)
        fh.write(struct.pack("<II", IDRP_VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype="<f8", order="C")
            key = name.encode("utf-8")
            fh.write(struct.pack("<I", len(key)) + key)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_arrays(path: str | os.PathLike) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != IDRP_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r} at offset 0")
    pos = 4

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise FormatError(f"{path}: truncated at offset {pos}")
        vals = struct.unpack(fmt, raw[pos:pos + size])
        pos += size
        return vals

    version, count = take("<II")
    if version != IDRP_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    out = {}
    for _ in range(count):
        (klen,) = take("<I")
        if pos + klen > len(raw):
            raise FormatError(f"{path}: truncated name at offset {pos}")
        name = raw[pos:pos + klen].decode("utf-8")
        pos += klen
        (rank,) = take("<I")
        dims = take(f"<{rank}Q")
        nbytes = 8 * int(np.prod(dims, dtype=np.int64))
        if pos + nbytes > len(raw):
            raise FormatError(f"{path}: payload of {name!r} truncated at offset {pos}")
        out[name] = np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=pos).reshape(dims).astype(np.float64)
        pos += nbytes
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes at offset {pos}")
    return out


def save_dataset(path: str | os.PathLike, ds: LabeledDataset) -> None:
    arrays = {"images": ds.images, "labels": ds.labels.astype(np.float64)}
    if ds.nuisance_labels is not None:
        arrays["nuisance_labels"] = ds.nuisance_labels.astype(np.float64)
    save_arrays(path, arrays)


def load_dataset(path: str | os.PathLike, n_classes: int = 10) -> LabeledDataset:
    a = load_arrays(path)
    nl = a.get("nuisance_labels")
    return LabeledDataset(a["images"], a["labels"].astype(np.int64),
                          None if nl is None else nl.astype(np.int64), n_classes)
