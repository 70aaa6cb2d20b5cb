"""Central finite-difference checks of reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from deflect.tensor import Tensor

DENOM_FLOOR = 1e-6


@dataclass
class GradReport:
    name: str
    size: int
    checked: int
    max_rel_error: float
    max_abs_error: float

    def passed(self, tol: float) -> bool:
        return self.max_rel_error <= tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = DENOM_FLOOR) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps exact zeros from dividing by zero."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def numerical_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-5, indices=None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. the array ``x`` (mutated in place, then restored)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size) if indices is None else indices:
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> list[GradReport]:
    """Compare backward() against central differences for every entry of every parameter.

    ``max_entries`` caps the entries probed per parameter (a seeded random subset).
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in params.items()}
    rng = np.random.default_rng(seed)

    def value() -> float:
        return float(loss_fn().data)

    reports = []
    for name, p in params.items():
        idx = None
        if max_entries is not None and p.data.size > max_entries:
            idx = rng.choice(p.data.size, max_entries, replace=False)
        num = numerical_gradient(value, p.data, h, idx)
        a = analytic[name].reshape(-1)
        n = num.reshape(-1)
        sel = np.arange(a.size) if idx is None else idx
        rel = relative_error(a[sel], n[sel])
        reports.append(GradReport(name, p.data.size, len(sel), float(rel.max()), float(np.abs(a[sel] - n[sel]).max())))
    for p in params.values():
        p.grad = None
    return reports
