# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for bootstrap resampling and token-set Jaccard scans.

Signatures and semantics mirror :mod:`psypipe._fallback` exactly; the two are
checked against each other in the test suite.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, NAN

cnp.import_array()


def bootstrap_mean_r(const double[:, ::1] truth,
                     const double[:, ::1] recovered,
                     const cnp.int64_t[:, ::1] idx):
    """Mean Pearson r across columns for every resample row of ``idx``.

    A resample in which any column of either matrix is constant yields NaN.
    """
    cdef Py_ssize_t n_boot = idx.shape[0]
    cdef Py_ssize_t n = idx.shape[1]
    cdef Py_ssize_t d = truth.shape[1]
    cdef Py_ssize_t b, i, j, k
    cdef double x, y, sx, sy, sxx, syy, sxy, vx, vy, r, acc
    cdef double xmin, xmax, ymin, ymax
    cdef bint degenerate
    out = np.empty(n_boot, dtype=np.float64)
    cdef double[::1] res = out

    with nogil:
        for b in range(n_boot):
            acc = 0.0
            degenerate = False
            for j in range(d):
                sx = 0.0
                sy = 0.0
                sxx = 0.0
                syy = 0.0
                sxy = 0.0
                k = idx[b, 0]
                xmin = truth[k, j]
                xmax = xmin
                ymin = recovered[k, j]
                ymax = ymin
                for i in range(n):
                    k = idx[b, i]
                    x = truth[k, j]
                    y = recovered[k, j]
                    if x < xmin:
                        xmin = x
                    elif x > xmax:
                        xmax = x
                    if y < ymin:
                        ymin = y
                    elif y > ymax:
                        ymax = y
                    sx = sx + x
                    sy = sy + y
                    sxx = sxx + x * x
                    syy = syy + y * y
                    sxy = sxy + x * y
                if xmin == xmax or ymin == ymax:
                    degenerate = True
                    break
                vx = n * sxx - sx * sx
                vy = n * syy - sy * sy
                r = (n * sxy - sx * sy) / sqrt(vx * vy)
                if r > 1.0:
                    r = 1.0
                elif r < -1.0:
                    r = -1.0
                acc = acc + r
            if degenerate:
                res[b] = NAN
            else:
                res[b] = acc / d
    return out


def jaccard_best(const cnp.int32_t[::1] sent_ptr,
                 const cnp.int32_t[::1] sent_tok,
                 const cnp.int32_t[::1] stem_ptr,
                 const cnp.int32_t[::1] stem_tok):
    """Best-matching stem and its Jaccard similarity for every sentence.

    Token ids inside each CSR row must be sorted and unique. Ties resolve to
    the lowest stem position.
    """
    cdef Py_ssize_t n_sent = sent_ptr.shape[0] - 1
    cdef Py_ssize_t n_stem = stem_ptr.shape[0] - 1
    cdef Py_ssize_t s, t, a, a_end, c, c_end, inter, union_
    cdef double jac, best
    cdef Py_ssize_t best_t
    best_stem = np.full(n_sent, -1, dtype=np.int64)
    best_val = np.zeros(n_sent, dtype=np.float64)
    cdef cnp.int64_t[::1] bs = best_stem
    cdef double[::1] bv = best_val

    with nogil:
        for s in range(n_sent):
            best = -1.0
            best_t = -1
            for t in range(n_stem):
                a = sent_ptr[s]
                a_end = sent_ptr[s + 1]
                c = stem_ptr[t]
                c_end = stem_ptr[t + 1]
                inter = 0
                while a < a_end and c < c_end:
                    if sent_tok[a] == stem_tok[c]:
                        inter = inter + 1
                        a = a + 1
                        c = c + 1
                    elif sent_tok[a] < stem_tok[c]:
                        a = a + 1
                    else:
                        c = c + 1
                union_ = (sent_ptr[s + 1] - sent_ptr[s]) + (stem_ptr[t + 1] - stem_ptr[t]) - inter
                if union_ == 0:
                    jac = 0.0
                else:
                    jac = <double>inter / <double>union_
                if jac > best:
                    best = jac
                    best_t = t
            bs[s] = best_t
            bv[s] = best if best_t >= 0 else 0.0
    return best_stem, best_val
