"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import GradTape, Tensor, backward


class GradCheckError(ArithmeticError):
    """A non-finite value appeared while probing a parameter."""

    def __init__(self, message: str, param_index: int, element: int):
        super().__init__(message)
        self.param_index = param_index
        self.element = element


@dataclass
class GradCheckResult:
    max_rel_error: float
    param_index: int
    element: int
    analytic: float
    numeric: float

    def __float__(self):
        return self.max_rel_error


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
               analytic_hook: Optional[Callable[[list], list]] = None) -> GradCheckResult:
    """Compare reverse-mode gradients of ``fn()`` against central differences.

    ``fn`` must rebuild its scalar output from ``params`` on every call and be
    deterministic.  Parameters are perturbed in place and restored.  Returns
    the worst ``|a - n| / max(1e-8, |a| + |n|)`` over all parameter elements.
    ``analytic_hook`` may rewrite the analytic gradients (fault injection).
    """
    tape = GradTape(params)
    tape.zero()
    out = fn()
    if not np.isfinite(out.data).all():
        raise GradCheckError("non-finite function value at the base point", -1, -1)
    backward(out, tape)
    analytic = [tape.grad(p).copy() for p in params]
    if analytic_hook is not None:
        analytic = analytic_hook(analytic)

    worst = GradCheckResult(0.0, -1, -1, 0.0, 0.0)
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        if not flat.flags.writeable or not np.shares_memory(flat, p.data):
            raise ValueError(f"parameter {pi} data is not writable in place")
        numeric = np.empty(flat.size)
        for e in range(flat.size):
            orig = flat[e]
            flat[e] = orig + eps
            fp = float(fn().data)
            flat[e] = orig - eps
            fm = float(fn().data)
            flat[e] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise GradCheckError(f"non-finite value probing parameter {pi} element {e}", pi, e)
            numeric[e] = (fp - fm) / (2 * eps)
        a = analytic[pi].reshape(-1)
        err = relative_error(a, numeric)
        if err.size and err.max() > worst.max_rel_error:
            k = int(err.argmax())
            worst = GradCheckResult(float(err[k]), pi, k, float(a[k]), float(numeric[k]))
    return worst
