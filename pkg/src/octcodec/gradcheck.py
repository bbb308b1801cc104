"""Central finite-difference gradient oracle."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import Tensor


def grad_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    samples_per_param: Optional[int] = 8,
    seed: int = 0,
    floor_scale: float = 1e-7,
    retry_eps: Optional[float] = None,
    retry_above: float = 1e-5,
) -> float:
    """Return the max relative error between backprop and central differences.

    ``fn`` must rebuild the graph from ``params`` on every call and return a
    scalar. Coordinates are sampled per parameter (all of them when
    ``samples_per_param`` is None). A non-finite evaluation yields ``inf``.

    The error is ``|a - n| / max(|a| + |n|, floor)`` with
    ``floor = floor_scale * max(1, |f|)``: partials far below the loss scale are
    under the resolution of float64 differences and are compared absolutely.

    With ``retry_eps``, a coordinate whose error exceeds ``retry_above`` is
    measured again at that step and keeps the smaller error. A wrong gradient
    fails at both steps; a ReLU-type kink closer than ``eps`` passes at the
    smaller one.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        p.grad = None
    out = fn()
    if not np.all(np.isfinite(out.data)):
        return float("inf")
    out.backward()
    floor = max(1e-8, floor_scale * max(1.0, abs(float(out.data))))
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        if samples_per_param is None or samples_per_param >= n:
            idx = np.arange(n)
        else:
            idx = rng.choice(n, size=samples_per_param, replace=False)
        for i in idx:
            a = float(ga.reshape(-1)[i])
            err = _coordinate_error(fn, flat, i, a, eps, floor)
            if retry_eps is not None and err > retry_above:
                err = min(err, _coordinate_error(fn, flat, i, a, retry_eps, floor))
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst


def _coordinate_error(fn, flat: np.ndarray, i: int, analytic: float, eps: float, floor: float) -> float:
    orig = flat[i]
    flat[i] = orig + eps
    f_plus = float(fn().data)
    flat[i] = orig - eps
    f_minus = float(fn().data)
    flat[i] = orig
    if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
        return float("inf")
    numeric = (f_plus - f_minus) / (2.0 * eps)
    return abs(analytic - numeric) / max(floor, abs(analytic) + abs(numeric))
