"""MNIST IDX ingestion, synthetic rotated-MNIST, splits and batching."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.ndimage import map_coordinates

from .groups import make_group

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049
ANGLE_MODES = ("exact90", "bilinear")

DATA_DIR = Path(__file__).resolve().parents[2] / "data"
BUNDLED_IMAGES = DATA_DIR / "mnist5k-images-idx3-ubyte.gz"
BUNDLED_LABELS = DATA_DIR / "mnist5k-labels-idx1-ubyte.gz"


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray          # (N, S, S) float64 in [0, 1]
    labels: np.ndarray          # (N,) int64
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("image intensities must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx, **prov) -> Dataset:
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], {**self.provenance, **prov})


def _read(path) -> bytes:
    path = Path(path)
    with (gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")) as fh:
        return fh.read()


def _parse_idx(buf: bytes, magic: int, ndim: int, what: str) -> np.ndarray:
    if len(buf) < 4 + 4 * ndim:
        raise IdxFormatError(f"{what}: file too short for an IDX header ({len(buf)} bytes)")
    got = struct.unpack_from(">I", buf, 0)[0]
    if got != magic:
        raise IdxFormatError(f"{what}: magic {got}, expected {magic}")
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    start = 4 + 4 * ndim
    need = int(np.prod(dims))
    if len(buf) - start != need:
        raise IdxFormatError(f"{what}: header declares {dims} ({need} bytes) "
                             f"but {len(buf) - start} data bytes follow")
    return np.frombuffer(buf, dtype=np.uint8, offset=start).reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    """Parse a big-endian IDX image/label pair; intensities are scaled by 1/255."""
    imgs = _parse_idx(_read(images_path), IMAGE_MAGIC, 3, str(images_path))
    labs = _parse_idx(_read(labels_path), LABEL_MAGIC, 1, str(labels_path))
    if len(imgs) != len(labs):
        raise IdxFormatError(f"image count {len(imgs)} != label count {len(labs)}")
    if labs.size and labs.max() > 9:
        raise IdxFormatError(f"label value {labs.max()} outside [0, 10)")
    return Dataset(imgs.astype(np.float64) / 255.0, labs.astype(np.int64),
                   {"images": str(images_path), "labels": str(labels_path)})


def write_idx(images_path, labels_path, d: Dataset) -> None:
    """Write ``d`` as IDX (gzip if the name ends in ``.gz``); intensities are rounded to bytes."""
    n, h, w = d.images.shape
    img = np.clip(np.rint(d.images * 255), 0, 255).astype(np.uint8)
    blobs = [(images_path, struct.pack(">IIII", IMAGE_MAGIC, n, h, w) + img.tobytes()),
             (labels_path, struct.pack(">II", LABEL_MAGIC, n) + d.labels.astype(np.uint8).tobytes())]
    for path, blob in blobs:
        path = Path(path)
        if path.suffix == ".gz":
            with gzip.GzipFile(path, "wb", mtime=0) as fh:
                fh.write(blob)
        else:
            path.write_bytes(blob)


def load_bundled() -> Dataset:
    """The 5000-digit MNIST subset shipped in ``data/``."""
    return load_idx(BUNDLED_IMAGES, BUNDLED_LABELS)


_C4 = make_group("cyclic", 4)


def rotate_image(img: np.ndarray, angle_degrees: float, mode: str = "bilinear") -> np.ndarray:
    """Rotate about the image center, with the same convention as grid actions.

    ``exact90`` is a pixel permutation; ``bilinear`` interpolates with zero fill.
    """
    img = np.asarray(img)
    h, w = img.shape
    if mode == "exact90":
        a = float(angle_degrees) % 360.0
        if a not in (0.0, 90.0, 180.0, 270.0):
            raise ValueError(f"exact90 rotation needs a multiple of 90 degrees, got {angle_degrees}")
        perm = _C4.grid_permutation(int(a) // 90, w, h)
        out = np.empty_like(img).reshape(-1)
        out[perm] = img.reshape(-1)
        return out.reshape(h, w)
    if mode != "bilinear":
        raise ValueError(f"unknown rotation mode {mode!r}; expected one of {ANGLE_MODES}")
    th = np.deg2rad(angle_degrees)
    c, s = np.cos(th), np.sin(th)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    rows, cols = np.mgrid[0:h, 0:w].astype(float)
    # pull back output coordinates through the inverse rotation
    x, y = cols - cx, rows - cy
    src_x = c * x + s * y + cx
    src_y = -s * x + c * y + cy
    out = map_coordinates(img.astype(float), [src_y, src_x], order=1, mode="constant", cval=0.0)
    return np.clip(out, 0.0, 1.0) if img.dtype.kind == "f" else out


def downsample(d: Dataset, factor: int) -> Dataset:
    """Mean-pool ``factor x factor`` blocks (commutes with 90-degree rotations)."""
    if factor == 1:
        return d
    n, h, w = d.images.shape
    if h % factor or w % factor:
        raise ValueError(f"{h}x{w} images are not divisible by {factor}")
    pooled = d.images.reshape(n, h // factor, factor, w // factor, factor).mean(axis=(2, 4))
    return Dataset(pooled, d.labels.copy(), {**d.provenance, "downsample": factor})


def make_rotmnist(base: Dataset, seed: int, count: int, angle_mode: str = "bilinear") -> Dataset:
    """Draw ``count`` digits without replacement and rotate each by a uniform random angle."""
    if count > len(base):
        raise ValueError(f"requested {count} samples but base has only {len(base)}")
    if angle_mode not in ANGLE_MODES:
        raise ValueError(f"unknown angle mode {angle_mode!r}")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(base), size=count, replace=False))
    if angle_mode == "exact90":
        angles = 90.0 * rng.integers(0, 4, size=count)
    else:
        angles = rng.uniform(0.0, 360.0, size=count)
    imgs = np.stack([rotate_image(base.images[i], a, angle_mode) for i, a in zip(idx, angles)])
    prov = {**base.provenance, "seed": seed, "count": count, "angle_mode": angle_mode}
    out = Dataset(imgs, base.labels[idx].copy(), prov)
    out.provenance["source_index"] = idx
    out.provenance["angles"] = angles
    return out


def regenerate(provenance: dict) -> Dataset:
    """Rebuild a :func:`make_rotmnist` dataset from its provenance record."""
    base = load_idx(provenance["images"], provenance["labels"])
    out = make_rotmnist(base, provenance["seed"], provenance["count"], provenance["angle_mode"])
    return downsample(out, provenance.get("downsample", 1))


def split(d: Dataset, sizes: list[int], seed: int) -> list[Dataset]:
    """Disjoint seeded splits of the given sizes."""
    if sum(sizes) > len(d):
        raise ValueError(f"split sizes {sizes} exceed dataset size {len(d)}")
    perm = np.random.default_rng(seed).permutation(len(d))
    out, start = [], 0
    for i, n in enumerate(sizes):
        out.append(d.subset(np.sort(perm[start:start + n]), split=i))
        start += n
    return out


def batches(d: Dataset, batch_size: int, seed: int, epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Shuffled batches keyed on ``(seed, epoch)``; the last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng([seed, epoch]).permutation(len(d))
    for start in range(0, len(d), batch_size):
        sel = order[start:start + batch_size]
        yield d.images[sel], d.labels[sel]


def describe(d: Dataset) -> str:
    """Human-readable provenance header for run logs."""
    lines = [f"# dataset: {len(d)} images {d.images.shape[1]}x{d.images.shape[2]}"]
    for key, val in d.provenance.items():
        if isinstance(val, np.ndarray):
            continue
        lines.append(f"# {key}: {val}")
    lines.append("# label histogram: " + " ".join(str(c) for c in np.bincount(d.labels, minlength=10)))
    return "\n".join(lines)
