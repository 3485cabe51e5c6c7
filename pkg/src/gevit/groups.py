"""Finite point groups (cyclic C_n, dihedral D_n) and their planar actions.

Elements are plain integer indices into precomputed Cayley tables. Element 0
is always the identity. For D_n, elements ``0..n-1`` are rotations ``r_k`` and
element ``n + k`` is ``m ∘ r_k`` where ``m`` is the reflection about the x-axis.

Pixel coordinates are ``(col, row)`` pairs; grid indices are row-major
(``idx = row * width + col``). Grid actions rotate about the geometric center
``((W - 1) / 2, (H - 1) / 2)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

__all__ = [
    "ExactActionUnavailable",
    "FiniteGroup",
    "AffineElement",
    "make_group",
    "parse_group",
    "GROUP_SPECS",
]

GROUP_SPECS = ("c1", "c4", "c8", "c12", "c16", "d4", "d8")

_SNAP_VALUES = (-1.0, -0.5, 0.0, 0.5, 1.0)


class ExactActionUnavailable(ValueError):
    """Raised when a group element does not map the pixel lattice onto itself."""


def _snap(m: np.ndarray) -> np.ndarray:
    # cos/sin of multiples of 30/90 degrees come out of libm with ~1e-16 noise
    out = m.copy()
    for v in _SNAP_VALUES:
        out[np.abs(out - v) < 1e-13] = v
    return out


def _rotation(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return _snap(np.array([[c, -s], [s, c]]))


@dataclass(frozen=True, eq=False)
class FiniteGroup:
    kind: str
    n: int
    planar_matrices: np.ndarray = field(repr=False)
    compose_table: np.ndarray = field(repr=False)
    inverse_table: np.ndarray = field(repr=False)

    @property
    def order(self) -> int:
        return len(self.planar_matrices)

    @property
    def name(self) -> str:
        return f"{self.kind[0]}{self.n}"

    @property
    def identity(self) -> int:
        return 0

    @property
    def elements(self) -> range:
        return range(self.order)

    def _check(self, *elems: int) -> None:
        for g in elems:
            if not 0 <= int(g) < self.order:
                raise IndexError(f"element {g} out of range for {self.name} (order {self.order})")

    def compose(self, a: int, b: int) -> int:
        self._check(a, b)
        return int(self.compose_table[a, b])

    def inverse(self, g: int) -> int:
        self._check(g)
        return int(self.inverse_table[g])

    def twist(self, h_query: int, h_key: int) -> int:
        """Return ``h_query ∘ h_key⁻¹ ∘ h_query``."""
        self._check(h_query, h_key)
        return self.compose(self.compose(h_query, self.inverse(h_key)), h_query)

    @cached_property
    def twist_table(self) -> np.ndarray:
        n = self.order
        return np.array([[self.twist(a, b) for b in range(n)] for a in range(n)], dtype=np.int64)

    def matrix(self, g: int) -> np.ndarray:
        self._check(g)
        return self.planar_matrices[g]

    def angle(self, g: int) -> float:
        """Rotation angle of the rotational part of ``g`` in radians."""
        self._check(g)
        return 2.0 * np.pi * (g % self.n) / self.n

    def is_reflection(self, g: int) -> bool:
        self._check(g)
        return g >= self.n

    def embedding(self, g: int) -> np.ndarray:
        """``(cos θ, sin θ, reflection bit)`` feature vector of ``g``."""
        th = self.angle(g)
        return np.array([np.cos(th), np.sin(th), float(self.is_reflection(g))])

    def act_point(self, g: int, p) -> np.ndarray:
        return self.matrix(g) @ np.asarray(p, dtype=float)

    def regular_permutation(self, g: int) -> np.ndarray:
        """``perm[k]`` is the index of ``g⁻¹ ∘ k``.

        Transforming a lifted map along its group axis is ``F[..., perm, :]``.
        """
        gi = self.inverse(g)
        return self.compose_table[gi].copy()

    def grid_permutation(self, g: int, width: int, height: int) -> np.ndarray:
        """``perm[idx]`` is the grid index that ``idx`` is moved to by ``g``.

        Raises:
            ExactActionUnavailable: if ``g`` does not map the lattice onto itself.
        """
        self._check(g)
        rows, cols = np.divmod(np.arange(width * height), width)
        center = np.array([(width - 1) / 2.0, (height - 1) / 2.0])
        pts = np.stack([cols, rows], axis=0).astype(float) - center[:, None]
        moved = self.matrix(g) @ pts + center[:, None]
        rounded = np.rint(moved)
        if np.max(np.abs(moved - rounded), initial=0.0) > 1e-9:
            raise ExactActionUnavailable(
                f"{self.name} element {g} does not act exactly on a {width}x{height} grid")
        c, r = rounded.astype(np.int64)
        if c.min() < 0 or r.min() < 0 or c.max() >= width or r.max() >= height:
            raise ExactActionUnavailable(
                f"{self.name} element {g} moves pixels off a {width}x{height} grid")
        return r * width + c

    def act_grid(self, g: int, idx: int, width: int, height: int) -> int:
        return int(self.grid_permutation(g, width, height)[idx])

    def exact_elements(self, width: int, height: int) -> list[int]:
        """Elements whose action on a ``width x height`` grid is an exact permutation."""
        out = []
        for g in self.elements:
            try:
                self.grid_permutation(g, width, height)
            except ExactActionUnavailable:
                continue
            out.append(g)
        return out


@dataclass(frozen=True)
class AffineElement:
    """Element ``(y, h)`` of the affine group: point part ``h`` then translation ``y``."""

    translation: tuple[int, int]
    point_part: int


def make_group(kind: str, n: int) -> FiniteGroup:
    """Build C_n (``kind="cyclic"``) or D_n (``kind="dihedral"``)."""
    if kind not in ("cyclic", "dihedral"):
        raise ValueError(f"unknown group kind {kind!r}; expected 'cyclic' or 'dihedral'")
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise ValueError(f"group size must be a positive integer, got {n!r}")
    n = int(n)
    mats = [_rotation(2.0 * np.pi * k / n) for k in range(n)]
    if kind == "dihedral":
        flip = np.diag([1.0, -1.0])
        mats += [_snap(flip @ mats[k]) for k in range(n)]
    mats = np.array(mats)
    order = len(mats)

    flat = mats.reshape(order, 4)
    products = _snap(np.einsum("aij,bjk->abik", mats, mats)).reshape(order, order, 4)
    dist = np.abs(products[:, :, None, :] - flat[None, None, :, :]).max(axis=-1)
    table = dist.argmin(axis=-1)
    if dist.min(axis=-1).max() > 1e-9:
        raise RuntimeError("planar matrices are not closed under multiplication")
    inverse = np.array([int(np.flatnonzero(table[g] == 0)[0]) for g in range(order)])
    return FiniteGroup(kind, n, mats, table.astype(np.int64), inverse.astype(np.int64))


def parse_group(spec: str) -> FiniteGroup:
    """Parse a group spec string such as ``"c4"`` or ``"d8"``."""
    s = spec.strip().lower()
    if len(s) < 2 or s[0] not in "cd" or not s[1:].isdigit():
        raise ValueError(f"bad group spec {spec!r}; expected one of {', '.join(GROUP_SPECS)}")
    return make_group("cyclic" if s[0] == "c" else "dihedral", int(s[1:]))
