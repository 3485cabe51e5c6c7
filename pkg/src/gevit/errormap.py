"""Feature-map equivariance error maps and 8-bit PGM output.

For a lifted feature map ``F`` of an image and ``F'`` of the transformed
image, the ground truth ``F''`` moves ``F`` spatially and permutes its group
axis; ``E = F'' - F'`` is zero for an exactly equivariant network.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autograd import no_grad
from .certify import transform_lifted, transform_planar
from .model import GEViT


@dataclass
class ErrorMap:
    element: int
    depth: int
    original: np.ndarray       # F   (P, |H|, C)
    transformed: np.ndarray    # F'  features of the transformed image
    expected: np.ndarray       # F'' F moved by the group action
    width: int

    @property
    def error(self) -> np.ndarray:
        return self.expected - self.transformed

    @property
    def mean_abs_error(self) -> float:
        return float(np.abs(self.error).mean())

    def channel_image(self, c: int) -> np.ndarray:
        """Error of channel ``c`` with the group slices tiled left to right: ``(S, S * |H|)``."""
        p, g, _ = self.error.shape
        s = self.width
        tiles = self.error[:, :, c].reshape(p // s, s, g)
        return np.concatenate([tiles[:, :, k] for k in range(g)], axis=1)


def compute(model: GEViT, image: np.ndarray, element: int, depth: int | None = None) -> ErrorMap:
    """Raises ``ExactActionUnavailable`` for elements that do not map the pixel grid to itself."""
    s = model.config.image_size
    image = np.asarray(image, dtype=np.float64).reshape(s, s)
    g = model.group
    moved = transform_planar(image.reshape(1, s * s, 1), g, element, s, s).reshape(1, s, s)
    depth = len(model.blocks) if depth is None else depth
    model.eval()
    with no_grad():
        f = model.features(image[None], depth).data.astype(np.float64)
        f1 = model.features(moved, depth).data.astype(np.float64)
    f2 = transform_lifted(f, g, element, s, s)
    return ErrorMap(element, depth, f[0], f1[0], f2[0], s)


def to_uint8(a: np.ndarray) -> np.ndarray:
    """Min-max normalization to 0..255; a constant map becomes all zeros."""
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi <= lo:
        return np.zeros(a.shape, dtype=np.uint8)
    return np.rint((a - lo) / (hi - lo) * 255).astype(np.uint8)


def write_pgm(path, a: np.ndarray) -> None:
    img = to_uint8(a)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path) -> np.ndarray:
    """Binary 8-bit PGM -> float image in [0, 1]."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    data = raw[pos + 1:pos + 1 + w * h]
    if len(data) != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w) / float(maxval)


def write_outputs(em: ErrorMap, out_dir) -> list[Path]:
    """One PGM per channel plus ``errors.csv`` holding the raw values."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for c in range(em.error.shape[2]):
        path = out / f"error_c{c:02d}.pgm"
        write_pgm(path, em.channel_image(c))
        paths.append(path)
    lines = ["row,col,element,channel,expected,transformed,error"]
    s = em.width
    for i, hh, c in np.ndindex(em.error.shape):
        r, col = divmod(i, s)
        vals = (em.expected[i, hh, c], em.transformed[i, hh, c], em.error[i, hh, c])
        lines.append(f"{r},{col},{hh},{c}," + ",".join(repr(float(v)) for v in vals))
    csv_path = out / "errors.csv"
    csv_path.write_text("\n".join(lines) + "\n")
    paths.append(csv_path)
    return paths
