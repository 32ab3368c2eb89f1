"""Pure-numpy fallback for the compiled Jacobi kernel.

Same algorithm, same constants, same operation order as ``_kernels.pyx`` —
the elementwise arithmetic is arranged so that both backends produce
bit-identical results (the extension is compiled with FMA contraction off).
Slower than the compiled kernel by roughly two orders of magnitude at
m ~ 64, but dependency-free.
"""

import math

import numpy as np


def _max_offdiag(a: np.ndarray) -> float:
    m = np.abs(a)
    np.fill_diagonal(m, 0.0)
    return float(m.max()) if m.size else 0.0


def jacobi_sweeps(a: np.ndarray, v: np.ndarray, tol: float, max_sweeps: int) -> int:
    """Diagonalize symmetric ``a`` in place by cyclic-by-rows Jacobi rotations.

    ``v`` must be the identity on entry; its columns accumulate the
    eigenvectors. Returns the number of sweeps performed, or -1 if the
    largest off-diagonal entry is still above ``tol`` after ``max_sweeps``
    sweeps.
    """
    n = a.shape[0]
    for sweep in range(max_sweeps + 1):
        if _max_offdiag(a) <= tol:
            return sweep
        if sweep == max_sweeps:
            return -1
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= tol:
                    continue
                app = a[p, p]
                aqq = a[q, q]
                tau = (aqq - app) / (2.0 * apq)
                t = 1.0 / (abs(tau) + math.sqrt(1.0 + tau * tau))
                if tau < 0.0:
                    t = -t
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c
                colp = a[:, p].copy()
                colq = a[:, q].copy()
                newp = c * colp - s * colq
                newq = s * colp + c * colq
                a[:, p] = newp
                a[p, :] = newp
                a[:, q] = newq
                a[q, :] = newq
                a[p, p] = c * c * app - 2.0 * s * c * apq + s * s * aqq
                a[q, q] = s * s * app + 2.0 * s * c * apq + c * c * aqq
                a[p, q] = 0.0
                a[q, p] = 0.0
                vcp = v[:, p].copy()
                vcq = v[:, q].copy()
                v[:, p] = c * vcp - s * vcq
                v[:, q] = s * vcp + c * vcq
    return -1
