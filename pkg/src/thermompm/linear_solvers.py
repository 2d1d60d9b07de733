"""Jacobi-preconditioned conjugate gradients for the pressure and heat systems."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ConvergenceError(RuntimeError):
    def __init__(self, what: str, iterations: int, residual: float, target: float):
        self.iterations = iterations
        self.residual = residual
        super().__init__(f"{what}: CG did not converge in {iterations} iterations "
                         f"(residual {residual:.3e}, target {target:.3e})")


@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    residual: float


def conjugate_gradient(A, b, x0=None, tol: float = 1e-6, max_iter: int = 1000,
                       diag=None, what: str = "linear solve") -> CGResult:
    """Solve ``A x = b`` for symmetric positive (semi-)definite ``A``.

    Hestenes-Stiefel recurrences with an optional Jacobi preconditioner.
    Stops when ``max|b - A x| <= tol * max|b|``; a zero right-hand side
    returns zero immediately.  ``A`` is anything supporting ``A @ v``.
    """
    b = np.asarray(b, float)
    x = np.zeros_like(b) if x0 is None else np.array(x0, float)
    scale = np.abs(b).max() if b.size else 0.0
    if scale == 0.0:
        return CGResult(np.zeros_like(b), 0, 0.0)
    target = tol * scale
    r = b - A @ x
    res = np.abs(r).max()
    if res <= target:
        return CGResult(x, 0, float(res / scale))
    inv_diag = None
    if diag is not None:
        diag = np.asarray(diag, float)
        inv_diag = np.where(diag > 0, 1.0 / np.where(diag > 0, diag, 1.0), 1.0)
    z = r * inv_diag if inv_diag is not None else r
    p = z.copy()
    rz = r @ z
    for it in range(1, max_iter + 1):
        Ap = A @ p
        pAp = p @ Ap
        if pAp <= 0:
            break
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        res = np.abs(r).max()
        if res <= target:
            return CGResult(x, it, float(res / scale))
        z = r * inv_diag if inv_diag is not None else r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    else:
        it = max_iter
    raise ConvergenceError(what, it, float(res), float(target))
