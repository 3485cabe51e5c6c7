"""Adam with decoupled weight decay, and the supervised training step."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor
from .model import GEViT, loss as ce_loss


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class HyperParams:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 10


@dataclass
class AdamState:
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


class Adam:
    """``p <- p (1 - lr wd) - lr m̂ / (sqrt(v̂) + eps)``."""

    def __init__(self, params: list[Tensor], hp: HyperParams | None = None, state: AdamState | None = None):
        self.params = list(params)
        self.hp = hp or HyperParams()
        self.state = state or AdamState()

    def step(self) -> None:
        hp, st = self.hp, self.state
        st.step += 1
        bc1 = 1.0 - hp.beta1 ** st.step
        bc2 = 1.0 - hp.beta2 ** st.step
        for i, p in enumerate(self.params):
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            m = st.m.get(i, np.zeros_like(p.data))
            v = st.v.get(i, np.zeros_like(p.data))
            m = hp.beta1 * m + (1 - hp.beta1) * g
            v = hp.beta2 * v + (1 - hp.beta2) * g * g
            st.m[i], st.v[i] = m, v
            update = (m / bc1) / (np.sqrt(v / bc2) + hp.eps)
            p.data = (p.data * (1 - hp.lr * hp.weight_decay) - hp.lr * update).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def train_step(model: GEViT, images: np.ndarray, labels: np.ndarray, opt: Adam,
               rng: np.random.Generator) -> float:
    """One optimizer step on a batch; dropout masks come from ``rng``."""
    model.train()
    model.set_rng(rng)
    opt.zero_grad()
    out = ce_loss(model(images), np.asarray(labels, dtype=np.int64))
    value = float(out.data)
    if not np.isfinite(value):
        raise TrainingDiverged(f"non-finite loss {value} at step {opt.state.step + 1}")
    out.backward()
    opt.step()
    model.eval()
    return value
