"""Adam with bias-corrected moments."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ddsr.tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    skipped: int = 0


def adam_step(params: list[np.ndarray], grads: list[np.ndarray | None], state: AdamState) -> None:
    """Update ``params`` in place and advance ``state`` by one step.

    A parameter whose gradient is missing or non-finite keeps its value and
    moments; ``state.skipped`` counts those.
    """
    if state.lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {state.lr}")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(params) != len(state.m):
        raise ValueError("parameter count changed between Adam steps")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            state.skipped += 1
            continue
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
