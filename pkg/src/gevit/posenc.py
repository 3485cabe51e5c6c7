"""Learnable relative positional encoder and its group actions.

The encoder is a two-layer perceptron. Its input is the relative offset
``x(j) - x(i)`` divided by the neighborhood radius and, for encoders that feed
group self-attention, the ``(cos θ, sin θ, reflection)`` embedding of a group
element.

For group self-attention the element fed to the encoder is the twist
``h̃ ĥ⁻¹ h̃`` of the query fiber ``h̃`` and key fiber ``ĥ``; acting with ``h``
maps ``(Δ, t)`` to ``(h⁻¹Δ, h⁻¹t)``. Under a global transformation by ``g``
the twist picks up a left factor ``g`` (``twist(g a, g b) = g twist(a, b)``),
which is what makes the layer equivariant. The ``baseline`` variant feeds
``h̃⁻¹ ĥ`` instead, which is invariant under the same substitution and
therefore breaks equivariance.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, swish
from .groups import FiniteGroup
from .nn import Linear, Module

PE_VARIANTS = ("gevit", "baseline")


@dataclass(frozen=True)
class RelPos:
    offset: tuple[float, float]
    twist_elem: int | None = None


class EncoderNet(Module):
    """``ρ^P``: (offset[, group element]) -> channel vector.

    Args:
        group: the point group; used for element embeddings and actions.
        out_dim: output width (the consuming layer's key input width).
        hidden: hidden width.
        radius: neighborhood radius used to normalize offsets.
        with_element: True for encoders that feed group self-attention.
        rng: generator for initialization.
        zero_final: zero the last affine map so the initial encoding is 0.
    """

    def __init__(self, group: FiniteGroup, out_dim: int, hidden: int, radius: float,
                 with_element: bool, rng: np.random.Generator, zero_final: bool = True):
        self.group = group
        self.out_dim = out_dim
        self.radius = float(max(radius, 1.0))
        self.with_element = with_element
        n_in = 5 if with_element else 2
        self.fc1 = Linear(n_in, hidden, rng)
        self.fc2 = Linear(hidden, out_dim, rng, zero=zero_final)

    def features(self, offsets: np.ndarray, elems: np.ndarray | None) -> np.ndarray:
        offsets = np.asarray(offsets, dtype=float).reshape(-1, 2) / self.radius
        if self.with_element != (elems is not None):
            raise ValueError("group-layer encoders need an element per offset; "
                             "lifting encoders take none")
        if elems is None:
            return offsets
        elems = np.asarray(elems).reshape(-1)
        if len(elems) != len(offsets):
            raise ValueError("offsets and elements differ in length")
        emb = np.stack([self.group.embedding(int(t)) for t in range(self.group.order)])
        return np.concatenate([offsets, emb[elems]], axis=1)

    def __call__(self, offsets: np.ndarray, elems: np.ndarray | None = None) -> Tensor:
        """Encode a batch: offsets ``(N, 2)`` and optional elements ``(N,)`` -> ``(N, out_dim)``."""
        x = Tensor(self.features(offsets, elems), dtype=self.fc1.weight.dtype)
        return self.fc2(swish(self.fc1(x)))


def encode(net: EncoderNet, r: RelPos) -> Tensor:
    elems = None if r.twist_elem is None else np.array([r.twist_elem])
    return net(np.array([r.offset], dtype=float), elems).reshape(net.out_dim)


def pair_elements(group: FiniteGroup, variant: str = "gevit") -> np.ndarray:
    """Table ``T[h̃, ĥ]`` of the group element fed to the encoder."""
    if variant == "gevit":
        return group.twist_table
    if variant == "baseline":
        inv = group.inverse_table
        return group.compose_table[inv[:, None], np.arange(group.order)[None, :]]
    raise ValueError(f"unknown pe_variant {variant!r}; expected one of {PE_VARIANTS}")


def lifting_action(net: EncoderNet, h: int, offset) -> Tensor:
    """``L_h[ρ](i, j) = ρ^P(h⁻¹ (x(j) - x(i)))`` for ``offset = x(j) - x(i)``."""
    g = net.group
    return encode(net, RelPos(tuple(g.act_point(g.inverse(h), offset))))


def group_action(net: EncoderNet, h: int, h_query: int, h_key: int, offset,
                 variant: str = "gevit") -> Tensor:
    """``ρ^P(h⁻¹Δ, h⁻¹ T(h̃, ĥ))`` with ``T`` the twist (or the baseline pairing)."""
    g = net.group
    hi = g.inverse(h)
    t = int(pair_elements(g, variant)[h_query, h_key])
    return encode(net, RelPos(tuple(g.act_point(hi, offset)), g.compose(hi, t)))


def baseline_group_action(net: EncoderNet, h: int, h_query: int, h_key: int, offset) -> Tensor:
    return group_action(net, h, h_query, h_key, offset, variant="baseline")


def lifting_table(net: EncoderNet, offsets: np.ndarray) -> Tensor:
    """Encodings for every action element and window offset: ``(|H|, K, out_dim)``."""
    g = net.group
    offsets = np.asarray(offsets, dtype=float)
    moved = np.concatenate([offsets @ g.matrix(g.inverse(h)).T for h in g.elements])
    return net(moved).reshape(g.order, len(offsets), net.out_dim)


def group_table(net: EncoderNet, offsets: np.ndarray) -> Tensor:
    """Encodings ``ρ^P(h⁻¹Δ_k, h⁻¹t)`` for all ``h``, offsets ``k`` and elements ``t``.

    Shape ``(|H|, K, |H|, out_dim)``; attention picks ``t`` per (query, key)
    fiber pair from :func:`pair_elements`.
    """
    g = net.group
    n, k = g.order, len(offsets)
    offsets = np.asarray(offsets, dtype=float)
    all_off, all_el = [], []
    for h in g.elements:
        hi = g.inverse(h)
        moved = offsets @ g.matrix(hi).T
        all_off.append(np.repeat(moved, n, axis=0))
        all_el.append(np.tile(g.compose_table[hi], k))
    out = net(np.concatenate(all_off), np.concatenate(all_el))
    return out.reshape(n, k, n, net.out_dim)
