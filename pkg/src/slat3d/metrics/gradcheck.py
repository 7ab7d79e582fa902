"""Central finite-difference gradient checking."""

from __future__ import annotations

import numpy as np


class GradcheckError(ArithmeticError):
    pass


def fd_gradcheck(f, grad, theta, h: float = 1e-5, floor: float = 1e-8):
    """Compare ``grad(theta)`` against central differences of scalar ``f``.

    Returns ``(max_rel_err, report)`` where ``report`` is an (n, 3) array of
    (finite difference, analytic, relative error) per coordinate. The
    relative error is ``|fd - an| / max(|fd|, |an|, floor)``.
    """
    theta = np.asarray(theta, dtype=np.float64).ravel()
    analytic = np.asarray(grad(theta.copy()), dtype=np.float64).ravel()
    if analytic.shape != theta.shape:
        raise ValueError(f"gradient shape {analytic.shape} != parameter shape {theta.shape}")
    fd = np.empty_like(theta)
    for i in range(theta.size):
        tp = theta.copy()
        tm = theta.copy()
        tp[i] += h
        tm[i] -= h
        fp, fm = float(f(tp)), float(f(tm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise GradcheckError(f"non-finite evaluation at coordinate {i}")
        fd[i] = (fp - fm) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(fd), np.abs(analytic)), floor)
    rel = np.abs(fd - analytic) / denom
    return float(rel.max(initial=0.0)), np.stack([fd, analytic, rel], axis=1)
