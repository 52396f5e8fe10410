"""Adam optimizer and global-norm gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteError, ShapeError
from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    A missing gradient counts as zero. If any gradient is non-finite the
    step is aborted before anything is modified.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter is {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")

    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            v = state.v[name] = np.zeros_like(p.data)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        denom = np.sqrt(v / c2)
        denom += state.eps
        p.data = p.data - (state.lr / c1) * m / denom


def clip_grad_norm(grads: dict[str, np.ndarray | None], max_norm: float) -> tuple[dict[str, np.ndarray | None], float]:
    """Scale all gradients jointly so their global L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values() if g is not None)))
    if max_norm <= 0 or total <= max_norm:
        return grads, total
    scale = max_norm / (total + 1e-12)
    return {k: (None if g is None else g * scale) for k, g in grads.items()}, total


class Adam:
    """Thin stateful wrapper over :func:`adam_step` bound to a parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray | None]:
        return {k: p.grad for k, p in self.params.items()}

    def step(self, grads: dict[str, np.ndarray | None] | None = None) -> None:
        adam_step(self.params, self.grads() if grads is None else grads, self.state)
