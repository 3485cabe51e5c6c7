"""Local multi-head self-attention: plain, absolute-PE, relative-PE, lifting, group.

Feature layouts (batch first):

* planar maps ``(B, P, C)`` with ``P = width * height`` pixels, row-major;
* lifted maps ``(B, P, |H|, C)`` with the group axis third.

Scores are ``<W_qry f(i), W_key (f(j) + ρ)>`` with no ``1/sqrt(C_h)`` factor
unless ``scale=True``. Group self-attention normalizes each query fiber
``(i, h̃)`` over its whole ``n x n x |H|`` neighborhood and then sums the
completed outputs over ``h̃``; the output group axis indexes the action
element ``h`` of the positional encoding.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, concat, dropout, softmax, take
from .groups import FiniteGroup
from .nn import Module, param, uniform_fan_in
from .posenc import EncoderNet, group_table, lifting_table, pair_elements

BOUNDARIES = ("torus", "clamp")


@dataclass(frozen=True, eq=False)
class Neighborhood:
    """Square ``size x size`` windows on a ``width x height`` pixel grid.

    ``index[p, k]`` is the pixel seen by query ``p`` at window offset ``k``.
    With ``boundary="clamp"`` positions outside the image map to ``P``, a zero
    padding row appended by the attention layers.
    """

    width: int
    height: int
    size: int
    boundary: str = "torus"
    offsets: np.ndarray = field(init=False, repr=False)
    index: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.size < 1 or self.size % 2 == 0:
            raise ValueError(f"neighborhood size must be odd and >= 1, got {self.size}")
        if self.boundary not in BOUNDARIES:
            raise ValueError(f"boundary must be one of {BOUNDARIES}, got {self.boundary!r}")
        r = self.size // 2
        dy, dx = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
        offsets = np.stack([dx.ravel(), dy.ravel()], axis=1)
        rows, cols = np.divmod(np.arange(self.width * self.height), self.width)
        c = cols[:, None] + offsets[None, :, 0]
        rr = rows[:, None] + offsets[None, :, 1]
        if self.boundary == "torus":
            index = (rr % self.height) * self.width + (c % self.width)
        else:
            inside = (c >= 0) & (c < self.width) & (rr >= 0) & (rr < self.height)
            index = np.where(inside, rr * self.width + c, self.width * self.height)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "index", index)

    @property
    def radius(self) -> int:
        return self.size // 2

    @property
    def num_pixels(self) -> int:
        return self.width * self.height

    @property
    def padded(self) -> bool:
        return self.boundary == "clamp"


@dataclass(frozen=True, eq=False)
class GlobalNeighborhood:
    """Every token attends to every token; no spatial offsets."""

    num_tokens: int

    @property
    def index(self) -> np.ndarray:
        return np.tile(np.arange(self.num_tokens), (self.num_tokens, 1))

    @property
    def num_pixels(self) -> int:
        return self.num_tokens

    padded = False
    offsets = None


def _pad_pixels(x: Tensor) -> Tensor:
    zeros = Tensor(np.zeros((x.shape[0], 1) + x.shape[2:], dtype=x.dtype))
    return concat([x, zeros], axis=1)


class AttentionParams(Module):
    """Per-head ``W_qry``, ``W_key``, ``W_val`` (stored side by side) and ``W_out``."""

    def __init__(self, c_in: int, heads: int, c_head: int, c_out: int, rng: np.random.Generator):
        if min(c_in, heads, c_head, c_out) < 1:
            raise ValueError("attention dimensions must be >= 1")
        self.c_in, self.heads, self.c_head, self.c_out = c_in, heads, c_head, c_out
        hc = heads * c_head
        self.w_qry = param(uniform_fan_in(rng, c_in, (c_in, hc)))
        self.w_key = param(uniform_fan_in(rng, c_in, (c_in, hc)))
        self.w_val = param(uniform_fan_in(rng, c_in, (c_in, hc)))
        self.w_out = param(uniform_fan_in(rng, hc, (hc, c_out)))

    def head(self, name: str, h: int) -> np.ndarray:
        """``C_in x C_h`` matrix of one head (``name`` in qry/key/val)."""
        w = getattr(self, f"w_{name}").data
        return w[:, h * self.c_head:(h + 1) * self.c_head]

    def key_encoding(self, pe: Tensor) -> Tensor:
        """Project encoder outputs ``(..., C_in)`` or ``(..., heads*C_in)`` to ``(..., heads, C_h)``."""
        lead = pe.shape[:-1]
        h, ch, c = self.heads, self.c_head, self.c_in
        if pe.shape[-1] == c:
            return (pe @ self.w_key).reshape(lead + (h, ch))
        if pe.shape[-1] != h * c:
            raise ValueError(f"encoder width {pe.shape[-1]} matches neither C_in={c} "
                             f"nor heads*C_in={h * c}")
        per_head = pe.reshape(-1, h, c).transpose(1, 0, 2)
        wk = self.w_key.reshape(c, h, ch).transpose(1, 0, 2)
        return (per_head @ wk).transpose(1, 0, 2).reshape(lead + (h, ch))


class LocalAttention(Module):
    """All attention variants share projections and the neighborhood gather."""

    def __init__(self, params: AttentionParams, scale: bool = False,
                 attn_dropout: float = 0.0, value_dropout: float = 0.0):
        self.p = params
        self.scale = scale
        self.attn_dropout = attn_dropout
        self.value_dropout = value_dropout
        self.rng: np.random.Generator | None = None

    def _split(self, x: Tensor, w: Tensor) -> Tensor:
        y = x @ w
        return y.reshape(x.shape[:-1] + (self.p.heads, self.p.c_head))

    def _check_in(self, f: Tensor, nb, lifted: bool) -> None:
        want = 4 if lifted else 3
        if f.ndim != want or f.shape[1] != nb.num_pixels or f.shape[-1] != self.p.c_in:
            kind = "(B, P, |H|, C_in)" if lifted else "(B, P, C_in)"
            raise ValueError(f"expected features {kind} with P={nb.num_pixels}, "
                             f"C_in={self.p.c_in}; got {f.shape}")

    def _finish(self, heads_out: Tensor) -> Tensor:
        # heads_out: (B, P, H, G, Ch) -> (B, P, G, C_out)
        b, p, h, g, ch = heads_out.shape
        merged = heads_out.transpose(0, 1, 3, 2, 4).reshape(b, p, g, h * ch)
        return merged @ self.p.w_out

    # -- planar --------------------------------------------------------------
    def planar(self, f: Tensor, nb, pos_keys: Tensor | None = None,
               query_in: Tensor | None = None, key_in: Tensor | None = None) -> Tensor:
        """Planar attention core.

        ``pos_keys`` is ``(G, K, heads, C_h)``: projected positional key terms per
        output slice. Returns ``(B, P, G, C_out)`` (``G = 1`` without ``pos_keys``).
        ``query_in``/``key_in`` override the inputs of the query/key projections.
        """
        self._check_in(f, nb, lifted=False)
        q = self._split(f if query_in is None else query_in, self.p.w_qry)
        k = self._split(f if key_in is None else key_in, self.p.w_key)
        v = dropout(self._split(f, self.p.w_val), self.value_dropout, self.rng, self.training)
        if nb.padded:
            k, v = _pad_pixels(k), _pad_pixels(v)
        kn = take(k, nb.index, axis=1)          # (B, P, K, H, Ch)
        vn = take(v, nb.index, axis=1)
        b, p, kk, h, ch = kn.shape
        qh = q.reshape(b, p, h, 1, ch)
        scores = qh @ kn.transpose(0, 1, 3, 4, 2)       # (B, P, H, 1, K)
        if pos_keys is not None:
            g = pos_keys.shape[0]
            pk = pos_keys.transpose(2, 3, 0, 1).reshape(h, ch, g * kk)
            # (H, B*P, Ch) @ (H, Ch, G*K): one GEMM per head
            qf = q.transpose(2, 0, 1, 3).reshape(h, b * p, ch)
            pos = (qf @ pk).reshape(h, b, p, 1, g, kk).transpose(1, 2, 0, 3, 4, 5)
            scores = scores + pos.reshape(b, p, h, g, kk)
        if self.scale:
            scores = scores * (1.0 / np.sqrt(ch))
        attn = softmax(scores, axis=-1)
        attn = dropout(attn, self.attn_dropout, self.rng, self.training)
        out = attn @ vn.transpose(0, 1, 3, 2, 4)       # (B, P, H, G, Ch)
        return self._finish(out)

    def plain(self, f: Tensor, nb) -> Tensor:
        return self.planar(f, nb).reshape(f.shape[:2] + (self.p.c_out,))

    def abs_pe(self, f: Tensor, nb, pe: Tensor) -> Tensor:
        if tuple(pe.shape) != (f.shape[1], f.shape[2]):
            raise ValueError(f"absolute encoding must be {(f.shape[1], f.shape[2])}, got {pe.shape}")
        fp = f + pe
        return self.planar(f, nb, query_in=fp, key_in=fp).reshape(f.shape[:2] + (self.p.c_out,))

    def rel_pe(self, f: Tensor, nb, net: EncoderNet) -> Tensor:
        self._check_encoder(net, lifted=False)
        pos = self.p.key_encoding(net(nb.offsets.astype(float)))
        return self.planar(f, nb, pos.reshape((1,) + pos.shape)).reshape(f.shape[:2] + (self.p.c_out,))

    def lifting(self, f: Tensor, nb, net: EncoderNet) -> Tensor:
        self._check_encoder(net, lifted=False)
        pos = self.p.key_encoding(lifting_table(net, nb.offsets))
        return self.planar(f, nb, pos)

    def _check_encoder(self, net: EncoderNet, lifted: bool) -> None:
        if net.with_element != lifted:
            raise ValueError("group self-attention needs an element-aware encoder; "
                             "planar/lifting attention needs an offset-only encoder")
        if net.out_dim not in (self.p.c_in, self.p.heads * self.p.c_in):
            raise ValueError(f"encoder width {net.out_dim} does not match key input width {self.p.c_in}")

    # -- group ---------------------------------------------------------------
    def group(self, f: Tensor, nb, net: EncoderNet, variant: str = "gevit") -> Tensor:
        """Group self-attention on a lifted map ``(B, P, |H|, C_in)``."""
        self._check_in(f, nb, lifted=True)
        self._check_encoder(net, lifted=True)
        grp: FiniteGroup = net.group
        n = grp.order
        if f.shape[2] != n:
            raise ValueError(f"feature group axis {f.shape[2]} does not match {grp.name} order {n}")
        q = self._split(f, self.p.w_qry)                 # (B, P, G, H, Ch)
        k = self._split(f, self.p.w_key)
        v = dropout(self._split(f, self.p.w_val), self.value_dropout, self.rng, self.training)
        if nb.padded:
            k, v = _pad_pixels(k), _pad_pixels(v)
        kn = take(k, nb.index, axis=1)                   # (B, P, K, G, H, Ch)
        vn = take(v, nb.index, axis=1)
        b, p, kk, _, h, ch = kn.shape
        m = kk * n
        qh = q.transpose(0, 1, 3, 2, 4)                  # (B, P, H, Gq, Ch)
        content = qh @ kn.transpose(0, 1, 4, 5, 2, 3).reshape(b, p, h, ch, m)   # (B,P,H,Gq,K*G)

        # positional keys (Gout, K, Gt, H, Ch) -> per query fiber (H, Gq, Ch, Gout*K*Gk)
        pos = self.p.key_encoding(group_table(net, nb.offsets))
        pair = pair_elements(grp, variant)               # (Gq, Gk) -> t
        pos_q = take(pos, pair, axis=2)                  # (Gout, K, Gq, Gk, H, Ch)
        pos_q = pos_q.transpose(4, 2, 5, 0, 1, 3).reshape(h, n, ch, n * m)
        qf = q.transpose(3, 2, 0, 1, 4).reshape(h, n, b * p, ch)
        pos_scores = (qf @ pos_q).reshape(h, n, b, p, n, m).transpose(2, 3, 0, 1, 4, 5)
        scores = pos_scores + content.reshape(b, p, h, n, 1, m)
        if self.scale:
            scores = scores * (1.0 / np.sqrt(ch))
        attn = softmax(scores, axis=-1)                  # (B, P, H, Gq, Gout, K*G)
        attn = dropout(attn, self.attn_dropout, self.rng, self.training)
        attn = attn.sum(axis=3)                          # sum over query fibers
        out = attn @ vn.transpose(0, 1, 4, 2, 3, 5).reshape(b, p, h, m, ch)   # (B,P,H,Gout,Ch)
        return self._finish(out)
