"""Central finite differences for checking reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad

# x87 extended precision where the platform has it (eps ~1e-19), float64 otherwise
EXTENDED = np.longdouble


def numerical_grad(fn: Callable[[], Tensor], param: Tensor, step: float = 1e-6,
                   precision=None) -> np.ndarray:
    """d fn() / d param by central differences, perturbing ``param.data`` in place.

    With ``precision`` set, the parameter is lifted to that dtype while it is
    perturbed. Every op preserves dtype, so everything downstream of it (and
    hence the loss) is evaluated at that precision. That shrinks the roundoff
    term eps * |loss| / step, which at float64 and step 1e-6 is ~1e-10 and
    swamps parameters whose true gradient is itself that small.
    """
    saved = param.data
    if precision is not None:
        param.data = saved.astype(precision)
    try:
        grad = np.zeros_like(param.data)
        flat = param.data.reshape(-1)
        gflat = grad.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                # keep the loss in its own dtype; .item() would round to float64
                fp = fn().data.reshape(())[()]
                flat[i] = orig - step
                fm = fn().data.reshape(())[()]
                flat[i] = orig
                gflat[i] = (fp - fm) / (2 * step)
    finally:
        param.data = saved
    return grad.astype(saved.dtype)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise.

    ``floor`` keeps entries whose true gradient is ~0 from dividing roundoff
    noise by roundoff noise.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def norm_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """||a - n|| / max(||a||, ||n||) over a whole parameter tensor."""
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / denom)


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-6,
                    floor: float = 1e-6, mode: str = "elementwise", precision=None) -> list[float]:
    """Relative error per parameter tensor between backward() and finite differences.

    ``mode="elementwise"`` returns the max entrywise error (see
    ``relative_error``); ``mode="norm"`` returns ``norm_relative_error``.
    ``precision`` is forwarded to ``numerical_grad``.
    """
    if mode not in ("elementwise", "norm"):
        raise ValueError(f"unknown mode {mode!r}")
    for p in params:
        p.grad = None
    backward(fn(), params)
    analytic = [p.grad.copy() for p in params]
    out = []
    for a, p in zip(analytic, params):
        n = numerical_grad(fn, p, step, precision)
        out.append(norm_relative_error(a, n) if mode == "norm" else float(relative_error(a, n, floor).max()))
    return out
