"""Central finite-difference gradient checks."""
from __future__ import annotations

import numpy as np

from .tape import NonFiniteError, Tape, float64_mode


class GradientCheckError(AssertionError):
    pass


def finite_diff_check(f, x, h: float = 1e-5, tol: float | None = 1e-4) -> float:
    """Compare the tape gradient of scalar ``f`` at ``x`` to central differences.

    ``f`` takes a Tensor and returns a scalar Tensor. Everything runs in
    float64. Returns the max over coordinates of
    ``|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)``; raises
    :class:`GradientCheckError` when that exceeds ``tol`` (pass ``tol=None``
    to only measure).
    """
    x0 = np.array(x, dtype=np.float64)
    with float64_mode():
        tape = Tape()
        leaf = tape.leaf(x0)
        out = f(leaf)
        value = out.item()
        if not np.isfinite(value):
            raise NonFiniteError(f"f returned non-finite value {value}")
        (g_ad,) = tape.grad(out, [leaf])

        def scalar(v):
            y = f(tape_free(v)).item()
            if not np.isfinite(y):
                raise NonFiniteError(f"f returned non-finite value {y}")
            return y

        g_fd = np.zeros_like(x0)
        flat = g_fd.reshape(-1)
        for i in range(x0.size):
            xp = x0.copy().reshape(-1)
            xm = x0.copy().reshape(-1)
            xp[i] += h
            xm[i] -= h
            flat[i] = (scalar(xp.reshape(x0.shape)) - scalar(xm.reshape(x0.shape))) / (2 * h)

    if not np.all(np.isfinite(g_ad)):
        raise NonFiniteError("non-finite analytic gradient")
    denom = np.maximum(1.0, np.maximum(np.abs(g_ad), np.abs(g_fd)))
    err = float(np.max(np.abs(g_ad - g_fd) / denom)) if x0.size else 0.0
    if tol is not None and err > tol:
        raise GradientCheckError(f"gradient mismatch: max rel error {err:.3e} > {tol:.1e}")
    return err


def tape_free(v):
    # a fresh tape per probe keeps the recorded graph small
    return Tape().leaf(v)
