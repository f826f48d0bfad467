"""Small dense symmetric-matrix routines used for submatrix fingerprints."""

from __future__ import annotations

import numpy as np


class SymmetryError(ValueError):
    pass


def determinant(m) -> float:
    """Determinant by Doolittle LU with partial pivoting.

    Parameters
    ----------
    m : array_like, shape (n, n)

    Returns
    -------
    float
        ``0.0`` when a pivot column is exactly zero.
    """
    a = np.array(m, dtype=np.float64, copy=True)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"determinant needs a square matrix, got shape {a.shape}")
    n = a.shape[0]
    sign = 1.0
    for k in range(n):
        p = k + int(np.argmax(np.abs(a[k:, k])))
        if a[p, k] == 0.0:
            return 0.0
        if p != k:
            a[[k, p]] = a[[p, k]]
            sign = -sign
        if k + 1 < n:
            factors = a[k + 1:, k] / a[k, k]
            a[k + 1:, k + 1:] -= np.outer(factors, a[k, k + 1:])
    return float(sign * np.prod(np.diag(a)))


def jacobi_eigenvalues(m, tol: float = 1e-10, max_sweeps: int = 100) -> np.ndarray:
    """Eigenvalues of a real symmetric matrix by cyclic Jacobi rotations.

    Sweeps over all upper-triangle pairs until the largest off-diagonal
    magnitude drops below ``tol``. Returns eigenvalues in ascending order.
    """
    a = np.array(m, dtype=np.float64, copy=True)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"eigenvalues need a square matrix, got shape {a.shape}")
    if not np.allclose(a, a.T, rtol=0.0, atol=1e-12):
        raise SymmetryError("matrix is not symmetric within 1e-12")
    n = a.shape[0]
    if n == 1:
        return a.diagonal().copy()
    a = 0.5 * (a + a.T)
    iu = np.triu_indices(n, 1)

    for _ in range(max_sweeps):
        if np.max(np.abs(a[iu])) < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < 1e-300:
                    continue
                app, aqq = a[p, p], a[q, q]
                theta = (aqq - app) / (2.0 * apq)
                t = np.copysign(1.0, theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                # A <- J^T A J restricted to rows/cols p, q
                rp = a[p, :].copy()
                rq = a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                cp = a[:, p].copy()
                cq = a[:, q].copy()
                a[:, p] = c * cp - s * cq
                a[:, q] = s * cp + c * cq
                a[p, q] = a[q, p] = 0.0
    else:
        raise RuntimeError("Jacobi iteration did not converge")
    return np.sort(a.diagonal())
