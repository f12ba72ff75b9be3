"""Central finite-difference checks for tape gradients.

Run inside ``tensor.default_dtype(np.float64)`` (and ``neuron.relaxed()``
for spiking models) so that the function being differentiated is smooth
and the difference quotient is accurate.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheck:
    coords: int
    max_rel_error: float
    errors: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray

    def passed(self, tol: float = 1e-3) -> bool:
        return bool(self.max_rel_error <= tol)


def rel_error(a, b, floor: float = 1e-8) -> np.ndarray:
    """``|a - b| / max(|a|, |b|, floor)``; ``floor`` guards coordinates where both vanish."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def check_gradients(loss_fn, params, n_coords: int = 50, eps: float = 1e-5, seed=0,
                    floor: float = 1e-8) -> GradCheck:
    """Compare backward gradients with central differences on random coordinates.

    ``loss_fn()`` must rebuild the graph from the current parameter values
    and return a scalar Tensor. Coordinates are drawn uniformly over all
    parameter entries (without replacement when possible).
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    grads = [p.grad if p.grad is not None else np.zeros(p.shape) for p in params]
    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat = rng.choice(total, size=min(n_coords, total), replace=n_coords > total)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    analytic, numeric = [], []
    for f in flat:
        i = int(np.searchsorted(offsets, f, side="right") - 1)
        j = int(f - offsets[i])
        p = params[i]
        view = p.data.reshape(-1)
        old = view[j]
        view[j] = old + eps
        up = float(loss_fn().item())
        view[j] = old - eps
        down = float(loss_fn().item())
        view[j] = old
        numeric.append((up - down) / (2 * eps))
        analytic.append(float(grads[i].reshape(-1)[j]))
    analytic, numeric = np.array(analytic), np.array(numeric)
    errs = rel_error(analytic, numeric, floor)
    return GradCheck(len(flat), float(errs.max()), errs, analytic, numeric)


def check_input_gradient(fn, x: np.ndarray, n_coords: int = 50, eps: float = 1e-5, seed=0,
                         weights=None, floor: float = 1e-8) -> GradCheck:
    """Gradient check of ``sum(weights * fn(x))`` with respect to the input array."""
    xt = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    rng = np.random.default_rng(seed)
    w = weights
    if w is None:
        w = rng.standard_normal(np.shape(fn(Tensor(xt.data)).data))

    def loss():
        return (fn(xt) * w).sum()

    return check_gradients(loss, [xt], n_coords, eps, seed, floor)
