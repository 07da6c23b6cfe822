"""SGD (with momentum) and Adam.  Frozen parameters are never touched."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Parameter


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        self.betas = tuple(self.betas)

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        return cls(**d)


class Optimizer:
    def __init__(self, params: Sequence[Parameter], config: OptimizerConfig):
        self.params = list(params)
        self.config = config
        self.steps = 0
        self._state: dict[int, dict[str, np.ndarray]] = {}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def _live(self) -> list[Parameter]:
        live = [p for p in self.params if not p.frozen and p.grad is not None]
        for p in live:
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradientError(f"non-finite gradient in {p.name or p.shape}; step aborted")
        return live

    def step(self) -> None:
        live = self._live()
        self.steps += 1
        cfg = self.config
        for p in live:
            g = p.grad
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p.data
            if cfg.kind == "sgd":
                self._sgd(p, g)
            else:
                self._adam(p, g)

    def _sgd(self, p: Parameter, g: np.ndarray) -> None:
        cfg = self.config
        if cfg.momentum:
            state = self._state.setdefault(id(p), {})
            buf = state.get("velocity")
            buf = g.copy() if buf is None else cfg.momentum * buf + g
            state["velocity"] = buf
            g = buf
        p.data -= cfg.lr * g

    def _adam(self, p: Parameter, g: np.ndarray) -> None:
        cfg = self.config
        b1, b2 = cfg.betas
        state = self._state.setdefault(id(p), {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0})
        state["t"] += 1
        t = state["t"]
        state["m"] = b1 * state["m"] + (1 - b1) * g
        state["v"] = b2 * state["v"] + (1 - b2) * g * g
        m_hat = state["m"] / (1 - b1 ** t)
        v_hat = state["v"] / (1 - b2 ** t)
        p.data -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


def optimizer_step(params: Sequence[Parameter], config: OptimizerConfig, optimizer: Optimizer | None = None) -> Optimizer:
    """One update of ``params`` from their current ``.grad``; returns the (stateful) optimizer."""
    opt = optimizer or Optimizer(params, config)
    opt.step()
    return opt
