"""Named parameter storage and a masked Adam update."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .tensor import NonFiniteError, Tensor


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


@dataclass
class ParamStore:
    """Hierarchically named parameters plus per-parameter Adam moments."""

    params: dict = field(default_factory=dict)
    state: dict = field(default_factory=dict)

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list:
        return list(self.params)

    def count(self, names=None) -> int:
        keys = self.params if names is None else names
        return int(np.sum([self.params[k].size for k in keys]))

    def snapshot(self) -> dict:
        return {k: t.data.copy() for k, t in self.params.items()}

    def set(self, name: str, data: np.ndarray) -> None:
        """Rebind a parameter's value; shape and dtype must not change."""
        t = self.params[name]
        data = np.asarray(data, dtype=t.dtype)
        if data.shape != t.shape:
            raise ValueError(f"{name}: shape {data.shape} != {t.shape}")
        t.data = data


def adam_step(
    store: ParamStore,
    grads: dict,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam applied only to the keys present in ``grads``."""
    unknown = set(grads) - set(store.params)
    if unknown:
        raise KeyError(f"gradients for unknown parameters: {sorted(unknown)}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    for name, g in grads.items():
        p = store.params[name]
        st = store.state.get(name)
        if st is None:
            st = store.state[name] = AdamState(np.zeros_like(p.data), np.zeros_like(p.data))
        g = np.asarray(g, dtype=p.dtype)
        st.t += 1
        st.m = beta1 * st.m + (1.0 - beta1) * g
        st.v = beta2 * st.v + (1.0 - beta2) * g * g
        mhat = st.m / (1.0 - beta1**st.t)
        vhat = st.v / (1.0 - beta2**st.t)
        p.data = (p.data - lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype, copy=False)
