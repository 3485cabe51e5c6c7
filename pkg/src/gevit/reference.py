"""Literal loop-based evaluations used as oracles for the batched layers.

Nothing here is vectorized across tokens: every score, softmax and weighted
sum is formed explicitly, one query at a time, with per-head weight slices.
Slow by design; meant for grids of a few pixels.
"""
from __future__ import annotations

import numpy as np

from .attention import AttentionParams
from .posenc import EncoderNet, group_action, lifting_action


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def _heads(p: AttentionParams):
    return [(p.head("qry", h), p.head("key", h), p.head("val", h)) for h in range(p.heads)]


def dense_mhsa(x: np.ndarray, p: AttentionParams) -> np.ndarray:
    """Global multi-head attention in matrix form: ``concat_h[softmax(XWq (XWk)^T) XWv] Wout``."""
    outs = []
    for wq, wk, wv in _heads(p):
        a = (x @ wq) @ (x @ wk).T
        a = np.exp(a - a.max(axis=1, keepdims=True))
        a /= a.sum(axis=1, keepdims=True)
        outs.append(a @ (x @ wv))
    return np.concatenate(outs, axis=1) @ p.w_out.data


def _window(width: int, height: int, size: int, i: int):
    r = size // 2
    row, col = divmod(i, width)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            j = ((row + dy) % height) * width + (col + dx) % width
            yield j, (dx, dy)


def lifting_attention_loops(f: np.ndarray, p: AttentionParams, net: EncoderNet,
                            width: int, height: int, size: int) -> np.ndarray:
    """Lifting attention on a torus. ``f``: ``(P, C_in)`` -> ``(P, |H|, C_out)``."""
    g = net.group
    out = np.zeros((width * height, g.order, p.c_out))
    for h in g.elements:
        for i in range(width * height):
            cat = []
            for head, (wq, wk, wv) in enumerate(_heads(p)):
                q = f[i] @ wq
                keys = list(_window(width, height, size, i))
                scores = []
                for j, d in keys:
                    rho = _head_slice(lifting_action(net, h, d).data, p, head)
                    scores.append(q @ ((f[j] + rho) @ wk))
                w = _softmax(np.array(scores))
                cat.append(sum(wt * (f[j] @ wv) for wt, (j, _) in zip(w, keys)))
            out[i, h] = np.concatenate(cat) @ p.w_out.data
    return out


def group_attention_loops(f: np.ndarray, p: AttentionParams, net: EncoderNet,
                          width: int, height: int, size: int, variant: str = "gevit") -> np.ndarray:
    """Group self-attention on a torus, one term at a time.

    ``f``: ``(P, |H|, C_in)`` -> ``(P, |H|, C_out)``. For output ``(i, h)``: for each
    head and each query fiber ``h̃`` a softmax over all ``(j, ĥ)`` in the window,
    the weighted value sum, summed over ``h̃``; heads concatenated, then ``W_out``.
    """
    g = net.group
    n = g.order
    out = np.zeros((width * height, n, p.c_out))
    for i in range(width * height):
        keys = [(j, d, hk) for j, d in _window(width, height, size, i) for hk in range(n)]
        for h in g.elements:
            cat = []
            for head, (wq, wk, wv) in enumerate(_heads(p)):
                acc = np.zeros(p.c_head)
                for hq in range(n):
                    q = f[i, hq] @ wq
                    scores = []
                    for j, d, hk in keys:
                        rho = _head_slice(group_action(net, h, hq, hk, d, variant).data, p, head)
                        scores.append(q @ ((f[j, hk] + rho) @ wk))
                    w = _softmax(np.array(scores))
                    acc += sum(wt * (f[j, hk] @ wv) for wt, (j, _, hk) in zip(w, keys))
                cat.append(acc)
            out[i, h] = np.concatenate(cat) @ p.w_out.data
    return out


def _head_slice(rho: np.ndarray, p: AttentionParams, head: int) -> np.ndarray:
    if rho.shape[-1] == p.c_in:
        return rho
    return rho[head * p.c_in:(head + 1) * p.c_in]
