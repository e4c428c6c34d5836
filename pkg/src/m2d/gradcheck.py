"""Central finite-difference gradient checking.

The numeric side never touches the tape: it re-evaluates the loss with a
coordinate nudged by +/-h, so it stays independent of the autodiff path
it is checking.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .autodiff import GradTape, Tensor, backward


def fd_gradient(f: Callable[[], float], arr: np.ndarray, coords: Iterable[tuple], h: float = 1e-4) -> dict[tuple, float]:
    """Central differences of f w.r.t. selected coordinates of arr."""
    out = {}
    for coord in coords:
        orig = arr[coord]
        arr[coord] = orig + h
        f_plus = f()
        arr[coord] = orig - h
        f_minus = f()
        arr[coord] = orig
        out[coord] = (f_plus - f_minus) / (2 * h)
    return out


def rel_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1.0)


def gradient_check(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-4,
    samples_per_param: int = 4,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between tape gradients and finite differences.

    ``loss_fn`` must rebuild the graph from ``params`` on every call.
    Parameters should be float64 for the comparison to be meaningful.
    """
    rng = rng or np.random.default_rng(0)
    with GradTape() as tape:
        loss = loss_fn()
    grads = backward(loss, tape, params.values())

    def eval_loss() -> float:
        return loss_fn().item()

    worst = 0.0
    for name, p in params.items():
        n = p.data.size
        k = min(samples_per_param, n)
        flat_idx = rng.choice(n, size=k, replace=False)
        coords = [np.unravel_index(i, p.data.shape) for i in flat_idx]
        numeric = fd_gradient(eval_loss, p.data, coords, h=h)
        analytic = grads[p].data
        for coord, fd in numeric.items():
            worst = max(worst, rel_error(float(analytic[coord]), fd))
    return worst
