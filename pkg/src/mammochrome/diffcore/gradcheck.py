"""Finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Var
from .params import ParamSet


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    max_abs_err: float
    worst_analytic: float
    worst_numeric: float


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    tolerance: float

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def _rel_err(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def _forward_value(loss_fn) -> float:
    # forward-only evaluation; release the tape so FD sweeps don't pile up
    # unreachable graphs faster than cycle collection reclaims them
    tape = Tape()
    value = float(loss_fn(tape).value)
    tape.release()
    return value


def grad_check(loss_fn, params: ParamSet, tolerance: float = 1e-4,
               h: float = 1e-5, rel_floor: float = 1e-6,
               names: list[str] | None = None) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``loss_fn(tape)`` must rebuild the forward pass from the current
    parameter values and return a scalar Var. Every scalar of every checked
    parameter is perturbed by +/- h, so keep the model desk-sized.
    """
    tape = Tape()
    loss = loss_fn(tape)
    tape.backward(loss)
    analytic = {n: (p_var.grad.copy() if p_var.grad is not None else None)
                for n, p_var in loss_fn.param_vars.items()} if hasattr(loss_fn, "param_vars") else None
    if analytic is None:
        raise ValueError("loss_fn must expose param_vars mapping names to tape Vars")

    entries = []
    for name in (names if names is not None else params.names()):
        p = params[name]
        a = analytic.get(name)
        if a is None:
            a = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        worst = (0.0, 0.0, 0.0, 0.0)  # rel, abs, analytic, numeric
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(_forward_value(loss_fn))
            flat[i] = orig - h
            f_minus = float(_forward_value(loss_fn))
            flat[i] = orig
            num = (f_plus - f_minus) / (2.0 * h)
            if not np.isfinite(num):
                raise FloatingPointError(f"non-finite finite-difference value for {name}[{i}]")
            ana = float(a.reshape(-1)[i])
            rel = _rel_err(ana, num, rel_floor)
            if rel > worst[0]:
                worst = (rel, abs(ana - num), ana, num)
        entries.append(GradCheckEntry(name, worst[0], worst[1], worst[2], worst[3]))
    return GradCheckReport(entries, tolerance)


class ModelLoss:
    """Adapter giving grad_check a rebuildable forward pass.

    ``forward(tape) -> (loss Var, {name: param Var})`` is evaluated from the
    live ParamSet each call, so finite-difference perturbations are seen.
    """

    def __init__(self, forward):
        self._forward = forward
        self.param_vars: dict[str, Var] = {}

    def __call__(self, tape: Tape) -> Var:
        loss, param_vars = self._forward(tape)
        self.param_vars = param_vars
        return loss
