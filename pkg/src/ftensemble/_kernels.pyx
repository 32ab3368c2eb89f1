# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled cyclic Jacobi rotation sweeps.

This is the hot kernel behind sym_eig (and therefore behind every random
orthogonal projection and the Gram-matrix SVD path). The pure-numpy twin in
``_kernels_py`` performs the identical arithmetic in the identical order;
keep the two in lockstep when editing either.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport fabs, sqrt

cnp.import_array()


def jacobi_sweeps(double[:, ::1] a, double[:, ::1] v, double tol, int max_sweeps):
    """Diagonalize symmetric ``a`` in place by cyclic-by-rows Jacobi rotations.

    ``v`` must be the identity on entry; its columns accumulate the
    eigenvectors. Returns the number of sweeps performed, or -1 if the
    largest off-diagonal entry is still above ``tol`` after ``max_sweeps``
    sweeps.
    """
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t p, q, k
    cdef int sweep
    cdef double off, apq, app, aqq, tau, t, c, s, vkp, vkq
    cdef double[::1] wp = np.empty(n)
    cdef double[::1] wq = np.empty(n)

    for sweep in range(max_sweeps + 1):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                if fabs(a[p, q]) > off:
                    off = fabs(a[p, q])
        if off <= tol:
            return sweep
        if sweep == max_sweeps:
            return -1
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if fabs(apq) <= tol:
                    continue
                app = a[p, p]
                aqq = a[q, q]
                tau = (aqq - app) / (2.0 * apq)
                t = 1.0 / (fabs(tau) + sqrt(1.0 + tau * tau))
                if tau < 0.0:
                    t = -t
                c = 1.0 / sqrt(1.0 + t * t)
                s = t * c
                for k in range(n):
                    wp[k] = c * a[k, p] - s * a[k, q]
                    wq[k] = s * a[k, p] + c * a[k, q]
                for k in range(n):
                    a[k, p] = wp[k]
                    a[p, k] = wp[k]
                    a[k, q] = wq[k]
                    a[q, k] = wq[k]
                a[p, p] = c * c * app - 2.0 * s * c * apq + s * s * aqq
                a[q, q] = s * s * app + 2.0 * s * c * apq + c * c * aqq
                a[p, q] = 0.0
                a[q, p] = 0.0
                for k in range(n):
                    vkp = v[k, p]
                    vkq = v[k, q]
                    v[k, p] = c * vkp - s * vkq
                    v[k, q] = s * vkp + c * vkq
    return -1
