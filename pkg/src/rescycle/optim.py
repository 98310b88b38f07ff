"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: Tensor, **hyper) -> AdamState:
        return cls(np.zeros_like(param.data), np.zeros_like(param.data), **hyper)


def adam_step(param: Tensor, grad: np.ndarray, state: AdamState) -> None:
    """Apply one bias-corrected Adam update to ``param.data`` in place."""
    if grad.shape != param.shape:
        raise ValueError(f"gradient shape {grad.shape} != parameter shape {param.shape}")
    dt = param.dtype
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= dt.type(b1)
    state.m += dt.type(1 - b1) * grad
    state.v *= dt.type(b2)
    state.v += dt.type(1 - b2) * grad * grad
    m_hat = state.m / dt.type(1 - b1 ** state.step)
    v_hat = state.v / dt.type(1 - b2 ** state.step)
    param.data -= dt.type(state.lr) * m_hat / (np.sqrt(v_hat) + dt.type(state.eps))


@dataclass
class Adam:
    """Adam over a named parameter list; missing grads count as zero."""

    params: list[tuple[str, Tensor]]
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    states: dict[str, AdamState] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params:
            self.states[name] = AdamState.for_param(p, lr=self.lr, beta1=self.beta1,
                                                    beta2=self.beta2, eps=self.eps)

    def set_lr(self, lr: float) -> None:
        self.lr = lr
        for st in self.states.values():
            st.lr = lr

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> None:
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            adam_step(p, g, self.states[name])
