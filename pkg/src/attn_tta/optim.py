from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

OPTIMIZERS = ("sgd", "adam")


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-4
    beta1: float = 0.99
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in OPTIMIZERS:
            raise ValueError(f"optimizer kind must be one of {OPTIMIZERS}, got {self.kind!r}")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")


@dataclass
class OptimizerState:
    """Adam moments and step counter; SGD keeps nothing between steps."""

    kind: str
    lr: float
    beta1: float = 0.99
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def fresh(cls, cfg: OptimizerConfig) -> "OptimizerState":
        return cls(cfg.kind, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)

    def copy(self) -> "OptimizerState":
        return copy.deepcopy(self)


def _check_keys(params: Mapping, grads: Mapping) -> None:
    if set(params) != set(grads):
        missing = sorted(set(params) - set(grads))
        extra = sorted(set(grads) - set(params))
        raise KeyError(f"gradient keys do not match parameters: missing {missing}, extra {extra}")


def sgd_step(state: OptimizerState, params: Mapping[str, np.ndarray],
             grads: Mapping[str, np.ndarray]) -> OptimizerState:
    _check_keys(params, grads)
    for name, p in params.items():
        p -= state.lr * grads[name]
    return state


def adam_step(state: OptimizerState, params: Mapping[str, np.ndarray],
              grads: Mapping[str, np.ndarray]) -> OptimizerState:
    """One bias-corrected Adam step, updating ``params`` and ``state`` in place.

    m <- b1 m + (1-b1) g ;  v <- b2 v + (1-b2) g^2
    p <- p - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
    """
    if state.kind != "adam":
        raise ValueError(f"adam_step on a {state.kind!r} state")
    _check_keys(params, grads)
    if state.m and set(state.m) != set(params):
        raise KeyError(f"optimizer state tracks {sorted(state.m)} but got {sorted(params)}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return state


def optimizer_step(state: OptimizerState, params, grads) -> OptimizerState:
    if state.kind == "adam":
        return adam_step(state, params, grads)
    return sgd_step(state, params, grads)
