"""Adam optimizer with bias correction.

Only the learning rates appear in the training recipe this package
follows; the momentum constants default to the adversarial-training
convention beta1=0.5, beta2=0.999.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .tensor import Tensor


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState):
    """One bias-corrected Adam update; parameters are reassigned, not mutated
    in place, so tensors captured by an earlier forward pass keep their values."""
    if state.m == []:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data = p.data - (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype)


class Adam:
    """Stateful wrapper binding an AdamState to a fixed parameter list."""

    def __init__(self, params: list[Tensor], lr: float,
                 beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def state_dict(self) -> dict:
        s = self.state
        return {
            "lr": s.lr, "beta1": s.beta1, "beta2": s.beta2, "eps": s.eps,
            "step_count": s.step_count,
            "m": [a.copy() for a in s.m], "v": [a.copy() for a in s.v],
        }

    def load_state_dict(self, d: dict):
        self.state = AdamState(
            lr=d["lr"], beta1=d["beta1"], beta2=d["beta2"], eps=d["eps"],
            step_count=d["step_count"],
            m=[np.asarray(a) for a in d["m"]], v=[np.asarray(a) for a in d["v"]],
        )
