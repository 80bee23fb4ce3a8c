"""Named parameter collections with per-parameter freeze flags."""

from __future__ import annotations

import hashlib

import numpy as np


class Param:
    """A named array plus an immutable trainable flag.

    The value array is mutated in place by optimizers; the flag is fixed at
    construction so a training run cannot silently unfreeze anything.
    """

    __slots__ = ("value", "_trainable")

    def __init__(self, value: np.ndarray, trainable: bool = True):
        self.value = np.ascontiguousarray(value, dtype=np.float64)
        self._trainable = bool(trainable)

    @property
    def trainable(self) -> bool:
        return self._trainable


class ParamSet:
    """Ordered mapping of unique names to Params."""

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> Param:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Param(value, trainable)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def trainable_names(self) -> list[str]:
        return [n for n, p in self._params.items() if p.trainable]

    def frozen_names(self) -> list[str]:
        return [n for n, p in self._params.items() if not p.trainable]

    def n_scalars(self, trainable_only: bool = False) -> int:
        return sum(p.value.size for p in self._params.values()
                   if p.trainable or not trainable_only)

    def subset_hash(self, names: list[str] | None = None) -> str:
        """SHA-256 over the exact bytes of the named parameters (all if None)."""
        h = hashlib.sha256()
        for name in sorted(names if names is not None else self._params):
            p = self._params[name]
            h.update(name.encode())
            h.update(str(p.value.shape).encode())
            h.update(np.ascontiguousarray(p.value).tobytes())
        return h.hexdigest()
