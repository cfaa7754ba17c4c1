"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from mmasd.autograd.tensor import Tensor, backward


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def numeric_grad(f: Callable[[], Tensor], point: Tensor, h: float = 1e-5,
                 coords: Iterable[tuple[int, ...]] | None = None) -> dict[tuple[int, ...], float]:
    """Central-difference derivative of scalar ``f()`` w.r.t. entries of ``point``.

    ``point.data`` is perturbed in place and restored.
    """
    if h <= 0:
        raise ValueError(f"finite-difference step must be positive, got {h}")
    if coords is None:
        coords = list(np.ndindex(*point.shape))
    out = {}
    for idx in coords:
        orig = point.data[idx]
        point.data[idx] = orig + h
        fp = f().item()
        point.data[idx] = orig - h
        fm = f().item()
        point.data[idx] = orig
        out[idx] = (fp - fm) / (2 * h)
    return out


def grad_check(f: Callable[[Tensor], Tensor], point: Tensor, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients of ``f`` at ``point``.

    ``f`` maps the point tensor to a scalar tensor. Relative error per
    coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if h <= 0:
        raise ValueError(f"finite-difference step must be positive, got {h}")
    x = Tensor(np.array(point.data, dtype=np.float64), requires_grad=True)
    backward(f(x))
    analytic = x.grad.copy()
    numeric = numeric_grad(lambda: f(x), x, h)
    num = np.zeros_like(analytic)
    for idx, val in numeric.items():
        num[idx] = val
    return float(relative_error(analytic, num).max()) if analytic.size else 0.0


def grad_check_params(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
                      coords: Sequence[tuple[int, tuple[int, ...]]], h: float = 1e-5) -> float:
    """Finite-difference probe of selected ``(param_index, element_index)`` pairs.

    Used for whole-model checks where a full sweep would be too slow.
    """
    for p in params:
        p.zero_grad()
    backward(loss_fn())
    worst = 0.0
    for pi, idx in coords:
        p = params[pi]
        n = numeric_grad(loss_fn, p, h, [idx])[idx]
        worst = max(worst, float(relative_error(p.grad[idx], n)))
    return worst
