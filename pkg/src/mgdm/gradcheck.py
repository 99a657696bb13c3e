"""Central finite-difference probes for verifying analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, backward, no_grad


def finite_difference(
    f: Callable[[Sequence[np.ndarray]], float],
    arrays: Sequence[np.ndarray],
    h: float = 1e-5,
) -> list[np.ndarray]:
    """Central finite-difference gradient of a scalar function.

    ``f`` receives the list of arrays and returns a float; every array
    entry is perturbed by +-h in turn.
    """
    grads = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = f(arrays)
            flat[j] = orig - h
            fm = f(arrays)
            flat[j] = orig
            gflat[j] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise |a - n| / max(1, |a|, |n|)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(
    build: Callable[[Sequence[Tensor]], Tensor],
    arrays: Sequence[np.ndarray],
    h: float = 1e-5,
) -> float:
    """Compare autodiff gradients of ``build`` against finite differences.

    ``build`` maps leaf tensors to a scalar loss tensor. Returns the worst
    relative error over all inputs.
    """
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build(leaves)
    backward(loss)

    def eval_f(arrs: Sequence[np.ndarray]) -> float:
        with no_grad():
            probe = [Tensor(a) for a in arrs]
            return build(probe).item()

    numeric = finite_difference(eval_f, [a.copy() for a in arrays], h=h)
    worst = 0.0
    for leaf, num in zip(leaves, numeric):
        an = leaf.grad if leaf.grad is not None else np.zeros_like(num)
        worst = max(worst, relative_error(an, num))
    return worst
