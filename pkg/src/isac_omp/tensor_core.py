"""Complex tensor kernels shared by every detector.

Complex tensors are plain ``numpy`` arrays of dtype ``complex128`` (row-major,
real/imaginary float64 pairs), so they serialize bit-exactly with ``tobytes``.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "DimensionError",
    "PreconditionError",
    "as_complex",
    "contract_first",
    "outer3",
    "lstsq",
    "hermitian_eig",
    "magnitude",
]


class DimensionError(ValueError):
    """Raised when operand extents do not line up."""


class PreconditionError(ValueError):
    """Raised when an input violates an operation's precondition."""


def as_complex(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.complex128)
    if arr.ndim > 3:
        raise DimensionError(f"tensors are at most rank 3, got shape {arr.shape}")
    return arr


def contract_first(Z, D) -> np.ndarray:
    """Contract the leading axis of ``Z`` against the rows of ``D``.

    ``out[i, j, k] = sum_m Z[m, i, j] * D[m, k]``. No conjugation is applied;
    pass ``D.conj()`` for a matched-filter correlation. Applying this three
    times to a rank-3 tensor cycles every axis into dictionary space.
    """
    Z = np.asarray(Z)
    D = np.asarray(D)
    if D.ndim != 2:
        raise DimensionError(f"dictionary must be a matrix, got shape {D.shape}")
    if Z.shape[0] != D.shape[0]:
        raise DimensionError(
            f"leading extent of tensor ({Z.shape[0]}) != dictionary rows ({D.shape[0]})"
        )
    return np.tensordot(Z, D, axes=([0], [0]))


def outer3(a, b, c) -> np.ndarray:
    """Rank-1 tensor ``out[m, i, j] = a[m] * b[i] * c[j]``."""
    a, b, c = (np.asarray(x, dtype=np.complex128).ravel() for x in (a, b, c))
    if min(a.size, b.size, c.size) == 0:
        raise DimensionError("outer3 factors must be non-empty")
    return a[:, None, None] * b[None, :, None] * c[None, None, :]


def lstsq(A, b) -> tuple[np.ndarray, bool]:
    """Regularized normal-equation least squares.

    Solves ``(A^H A + eps I) x = A^H b`` with ``eps = 1e-12 * trace(A^H A) / m``.

    Returns:
        x: the minimizer, shape ``(m,)`` (or ``(m, k)`` for a matrix ``b``).
        flagged: True when ``A^H A`` is numerically rank deficient, i.e. the
            regularizer rather than the data decides part of the solution.
    """
    A = np.asarray(A, dtype=np.complex128)
    b = np.asarray(b, dtype=np.complex128)
    if A.ndim != 2:
        raise DimensionError(f"A must be a matrix, got shape {A.shape}")
    n, m = A.shape
    if n < m:
        raise PreconditionError(f"lstsq needs n >= m, got {n}x{m}")
    if b.shape[0] != n:
        raise DimensionError(f"rhs length {b.shape[0]} != rows of A ({n})")
    gram = A.conj().T @ A
    scale = np.trace(gram).real / m
    eps = 1e-12 * scale if scale > 0 else 1e-300
    reg = gram + eps * np.eye(m)
    x = np.linalg.solve(reg, A.conj().T @ b)
    if scale == 0:
        return x, True
    sv = np.linalg.svd(gram, compute_uv=False)
    flagged = bool(sv[-1] <= 1e-10 * sv[0])
    return x, flagged


def _off_norm(A: np.ndarray) -> float:
    # direct sum; the difference of squared norms loses ~8 digits to cancellation
    return float(np.linalg.norm(A - np.diag(np.diag(A))))


def _jacobi(H: np.ndarray, tol: float, max_sweeps: int):
    n = H.shape[0]
    A = H.copy()
    V = np.eye(n, dtype=np.complex128)
    norm = np.linalg.norm(A)
    if norm == 0:
        return np.zeros(n), V
    target = tol * norm
    for _ in range(max_sweeps):
        off = _off_norm(A)
        if off < target:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                mag = abs(apq)
                if mag <= 1e-300 or mag < 1e-18 * norm:
                    continue
                # unitary phase on column q makes the pivot real and positive
                ph = apq / mag
                A[:, q] *= np.conj(ph)
                A[q, :] *= ph
                V[:, q] *= np.conj(ph)
                app, aqq = A[p, p].real, A[q, q].real
                theta = (aqq - app) / (2.0 * mag)
                t = (1.0 if theta >= 0 else -1.0) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                R = np.array([[c, s], [-s, c]])
                idx = [p, q]
                A[:, idx] = A[:, idx] @ R
                A[idx, :] = R.T @ A[idx, :]
                V[:, idx] = V[:, idx] @ R
                A[p, q] = A[q, p] = 0.0
    else:
        off = _off_norm(A)
        if off >= target:
            raise RuntimeError(f"Jacobi did not converge in {max_sweeps} sweeps (off={off:.3e})")
    return np.diag(A).real.copy(), V


def hermitian_eig(M, method: str = "jacobi", tol: float = 1e-12, max_sweeps: int = 100):
    """Eigen-decomposition of a Hermitian matrix, eigenvalues descending.

    ``method="jacobi"`` runs cyclic complex Jacobi rotations until the
    off-diagonal Frobenius norm falls below ``tol * ||M||``; ``"lapack"``
    delegates to ``numpy.linalg.eigh`` for large matrices.
    """
    M = np.asarray(M, dtype=np.complex128)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {M.shape}")
    norm = np.linalg.norm(M)
    if np.linalg.norm(M - M.conj().T) > 1e-9 * max(norm, 1e-300):
        raise PreconditionError("matrix is not Hermitian within 1e-9 relative tolerance")
    H = 0.5 * (M + M.conj().T)
    if method == "jacobi":
        w, V = _jacobi(H, tol, max_sweeps)
    elif method == "lapack":
        w, V = np.linalg.eigh(H)
    else:
        raise ValueError(f"unknown eigensolver {method!r}")
    order = np.argsort(-w, kind="stable")
    return w[order], V[:, order]


def magnitude(T) -> np.ndarray:
    return np.abs(np.asarray(T))
