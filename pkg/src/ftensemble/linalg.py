"""Dense linear algebra and seeded randomness underpinning every other module.

Matrices are plain float64 numpy arrays (row-major). The symmetric
eigensolver runs cyclic Jacobi sweeps — compiled kernel when available,
numpy fallback otherwise (see ``_backend``). Singular values come from the
eigenvalues of the smaller Gram matrix, and linear systems are solved by
Gaussian elimination with partial pivoting. Matrix sizes stay in the low
hundreds here, so robustness and reproducibility win over asymptotic speed.

Randomness is counter-based: a stream is a numpy Philox generator keyed by
``(seed, stream_id)``. The same pair yields the same sequence on every
platform (for a fixed numpy version), and distinct stream ids from one seed
give independent-looking sequences, so parallel workers derive their own
streams with no coordination. A stream must not be shared between
concurrent consumers; derive a fresh id instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._backend import BACKEND, jacobi_sweeps
from .errors import (
    ContractError,
    InvalidDimensionError,
    NumericalError,
    SingularMatrixError,
)

__all__ = [
    "BACKEND",
    "RngStream",
    "as_generator",
    "random_symmetric",
    "sym_eig",
    "singular_values",
    "solve",
]

SYMMETRY_TOL = 1e-12
SIGN_TOL = 1e-12
PIVOT_TOL = 1e-12
JACOBI_TOL_FACTOR = 1e-14
JACOBI_MAX_SWEEPS = 60

_U64 = (1 << 64) - 1


@dataclass(frozen=True)
class RngStream:
    """Identity of one reproducible random stream: (seed, stream id)."""

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        key = [self.seed & _U64, self.stream_id & _U64]
        return np.random.Generator(np.random.Philox(key=key))

    def derive(self, offset: int) -> "RngStream":
        """Stream with the same seed and a shifted stream id."""
        return RngStream(self.seed, (self.stream_id + offset) & _U64)


def as_generator(rng: RngStream | np.random.Generator) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    return rng


def random_symmetric(m: int, rng: RngStream | np.random.Generator) -> np.ndarray:
    """Symmetric m x m matrix with upper triangle (incl. diagonal) i.i.d.
    uniform on [0, 1], mirrored to the lower triangle."""
    if m < 2:
        raise InvalidDimensionError(f"random_symmetric needs m >= 2, got {m}")
    g = as_generator(rng)
    u = g.uniform(size=(m, m))
    z = np.triu(u)
    return z + np.triu(u, 1).T


def _check_square_symmetric(s: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ContractError(f"expected a square matrix, got shape {s.shape}")
    if s.shape[0] == 0:
        raise InvalidDimensionError("empty matrix")
    asym = float(np.abs(s - s.T).max())
    if asym > SYMMETRY_TOL:
        raise ContractError(
            f"matrix not symmetric: max |S - S^T| entry is {asym:.3e} "
            f"(tolerance {SYMMETRY_TOL:.0e})"
        )
    return s


def sym_eig(s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (descending) and orthonormal eigenvector columns of a
    symmetric matrix.

    Cyclic Jacobi; ties in the eigenvalue sort keep original index order,
    and each eigenvector is flipped so its first entry with absolute value
    above 1e-12 is positive, making the decomposition deterministic.
    """
    s = _check_square_symmetric(s)
    n = s.shape[0]
    a = np.ascontiguousarray((s + s.T) / 2.0)
    v = np.eye(n)
    scale = float(np.abs(a).max())
    if scale > 0.0:
        tol = JACOBI_TOL_FACTOR * scale
        sweeps = jacobi_sweeps(a, v, tol, JACOBI_MAX_SWEEPS)
        if sweeps < 0:
            raise NumericalError(
                f"Jacobi eigensolver did not converge in {JACOBI_MAX_SWEEPS} "
                f"sweeps (n={n})"
            )
    eigvals = np.diagonal(a).copy()
    order = np.argsort(-eigvals, kind="stable")
    eigvals = eigvals[order]
    v = np.ascontiguousarray(v[:, order])
    for j in range(n):
        col = v[:, j]
        nz = np.flatnonzero(np.abs(col) > SIGN_TOL)
        if nz.size and col[nz[0]] < 0.0:
            v[:, j] = -col
    return eigvals, v


def singular_values(a: np.ndarray) -> np.ndarray:
    """Singular values of any matrix, descending, length min(m, b).

    Computed as square roots of the eigenvalues of the smaller Gram matrix,
    clamped at zero; accurate enough at the sizes used here.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise InvalidDimensionError(f"expected a non-empty matrix, got shape {a.shape}")
    if a.shape[0] <= a.shape[1]:
        gram = a @ a.T
    else:
        gram = a.T @ a
    gram = (gram + gram.T) / 2.0
    eigvals, _ = sym_eig(gram)
    return np.sqrt(np.maximum(eigvals, 0.0))


def solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve A X = B by Gaussian elimination with partial pivoting.

    Raises SingularMatrixError when a pivot falls below 1e-12 in absolute
    value. B may be a vector or a matrix; the result matches its shape.
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ContractError(f"expected a square system matrix, got shape {a.shape}")
    n = a.shape[0]
    b = np.asarray(b, dtype=np.float64)
    vector_rhs = b.ndim == 1
    b = b.reshape(n, -1).copy() if vector_rhs else b.copy()
    if b.ndim != 2 or b.shape[0] != n:
        raise ContractError(
            f"right-hand side rows ({b.shape[0]}) do not match system size ({n})"
        )
    for col in range(n):
        piv = col + int(np.argmax(np.abs(a[col:, col])))
        if abs(a[piv, col]) < PIVOT_TOL:
            raise SingularMatrixError(
                f"matrix is singular to working precision (pivot "
                f"{abs(a[piv, col]):.3e} at column {col})"
            )
        if piv != col:
            a[[col, piv]] = a[[piv, col]]
            b[[col, piv]] = b[[piv, col]]
        mult = a[col + 1 :, col] / a[col, col]
        a[col + 1 :, col + 1 :] -= np.outer(mult, a[col, col + 1 :])
        a[col + 1 :, col] = 0.0
        b[col + 1 :] -= np.outer(mult, b[col])
    x = np.empty_like(b)
    for i in range(n - 1, -1, -1):
        x[i] = (b[i] - a[i, i + 1 :] @ x[i + 1 :]) / a[i, i]
    return x[:, 0] if vector_rhs else x
