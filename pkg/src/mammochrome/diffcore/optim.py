"""SGD and Adam updates over a ParamSet.

Freezing is enforced here: gradients may exist for frozen parameters (the
tape computes them all), but step() never touches a non-trainable Param.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParamSet


@dataclass
class OptimizerConfig:
    kind: str = "adam"  # "sgd" | "adam"
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0

    def to_dict(self) -> dict:
        return {"kind": self.kind, "lr": self.lr, "betas": list(self.betas),
                "eps": self.eps, "weight_decay": self.weight_decay}

    @staticmethod
    def from_dict(d: dict) -> "OptimizerConfig":
        return OptimizerConfig(kind=d["kind"], lr=d["lr"], betas=tuple(d["betas"]),
                               eps=d["eps"], weight_decay=d["weight_decay"])


@dataclass
class Optimizer:
    config: OptimizerConfig
    _t: int = 0
    _m: dict[str, np.ndarray] = field(default_factory=dict)
    _v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: ParamSet, grads: dict[str, np.ndarray]) -> None:
        """Apply one update to every trainable parameter.

        Raises KeyError if a trainable parameter has no gradient; silently
        ignores gradients supplied for frozen parameters.
        """
        cfg = self.config
        missing = [n for n in params.trainable_names() if n not in grads]
        if missing:
            raise KeyError(f"missing gradients for trainable parameters: {missing}")
        self._t += 1
        for name, p in params.items():
            if not p.trainable:
                continue
            g = np.asarray(grads[name], dtype=np.float64)
            if g.shape != p.value.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.value.shape} for {name!r}")
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p.value
            if cfg.kind == "sgd":
                p.value -= cfg.lr * g
            elif cfg.kind == "adam":
                b1, b2 = cfg.betas
                m = self._m.setdefault(name, np.zeros_like(p.value))
                v = self._v.setdefault(name, np.zeros_like(p.value))
                m *= b1
                m += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * g * g
                mhat = m / (1.0 - b1 ** self._t)
                vhat = v / (1.0 - b2 ** self._t)
                p.value -= cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)
            else:
                raise ValueError(f"unknown optimizer kind {cfg.kind!r}")
