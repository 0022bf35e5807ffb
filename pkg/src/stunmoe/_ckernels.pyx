# cython: language_level=3, boundscheck=False, wraparound=False, initializedcheck=False
"""Compiled kernels.

Twin of _pykernels -- see that module's docstring for the shared
reduction-order contract.  Compiled with -ffp-contract=off so each
``acc = acc + a * b`` below is one IEEE multiply and one IEEE add, never an
FMA, keeping matmul / frobenius / central_moments / topk bit-identical to
the fallback.  exp comes from libm, so softmax and silu may differ from the
numpy fallback in the last ulp.
"""

from libc.math cimport exp as c_exp, sqrt as c_sqrt

import numpy as np

ACT_RELU = 0
ACT_SILU = 1

name = "compiled"


def matmul(double[:, ::1] a, double[:, ::1] b):
    cdef Py_ssize_t m = a.shape[0]
    cdef Py_ssize_t p = a.shape[1]
    cdef Py_ssize_t q = b.shape[1]
    out_arr = np.zeros((m, q))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, k
    cdef double acc
    for i in range(m):
        for j in range(q):
            acc = 0.0
            for k in range(p):
                acc = acc + a[i, k] * b[k, j]
            out[i, j] = acc
    return out_arr


def softmax(double[::1] v):
    cdef Py_ssize_t n = v.shape[0]
    out_arr = np.empty(n)
    cdef double[::1] out = out_arr
    cdef double m = v[0]
    cdef Py_ssize_t i
    for i in range(1, n):
        if v[i] > m:
            m = v[i]
    cdef double s = 0.0
    cdef double e
    for i in range(n):
        e = c_exp(v[i] - m)
        out[i] = e
        s = s + e
    for i in range(n):
        out[i] = out[i] / s
    return out_arr


def topk(double[::1] v, Py_ssize_t k):
    cdef Py_ssize_t n = v.shape[0]
    used_arr = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[::1] used = used_arr
    result = []
    cdef Py_ssize_t s, i, best
    cdef double bv
    for s in range(k):
        best = -1
        bv = 0.0
        for i in range(n):
            if used[i]:
                continue
            if best < 0 or v[i] > bv:
                best = i
                bv = v[i]
        used[best] = 1
        result.append(best)
    return result


def frobenius(double[::1] flat):
    cdef Py_ssize_t n = flat.shape[0]
    cdef double acc = 0.0
    cdef Py_ssize_t i
    for i in range(n):
        acc = acc + flat[i] * flat[i]
    return c_sqrt(acc)


def central_moments(double[::1] flat):
    cdef Py_ssize_t n = flat.shape[0]
    cdef double acc = 0.0
    cdef Py_ssize_t i
    for i in range(n):
        acc = acc + flat[i]
    cdef double mean = acc / n
    cdef double s2 = 0.0
    cdef double s4 = 0.0
    cdef double d, dd
    for i in range(n):
        d = flat[i] - mean
        dd = d * d
        s2 = s2 + dd
        s4 = s4 + dd * dd
    return mean, s2 / n, s4 / n


def layer_forward_batch(double[:, ::1] router, double[:, :, ::1] w_in,
                        double[:, :, ::1] w_out, double[:, ::1] x,
                        Py_ssize_t top_k, bint renorm, int act):
    cdef Py_ssize_t t_count = x.shape[0]
    cdef Py_ssize_t d = x.shape[1]
    cdef Py_ssize_t n = router.shape[0]
    cdef Py_ssize_t h = w_in.shape[1]
    out_arr = np.zeros((t_count, d))
    sel_arr = np.zeros((t_count, top_k), dtype=np.intp)
    selw_arr = np.zeros((t_count, top_k))
    if t_count == 0:
        return out_arr, sel_arr, selw_arr
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t[:, ::1] sel = sel_arr
    cdef double[:, ::1] selw = selw_arr
    probs_arr = np.empty(n)
    hid_arr = np.empty(h)
    used_arr = np.zeros(n, dtype=np.uint8)
    cdef double[::1] probs = probs_arr
    cdef double[::1] hid = hid_arr
    cdef unsigned char[::1] used = used_arr
    cdef Py_ssize_t t, i, j, r, c, s, best, e_idx
    cdef double acc, m, ssum, e, w, wsum, bv
    for t in range(t_count):
        for i in range(n):
            acc = 0.0
            for j in range(d):
                acc = acc + router[i, j] * x[t, j]
            probs[i] = acc
        m = probs[0]
        for i in range(1, n):
            if probs[i] > m:
                m = probs[i]
        ssum = 0.0
        for i in range(n):
            e = c_exp(probs[i] - m)
            probs[i] = e
            ssum = ssum + e
        for i in range(n):
            probs[i] = probs[i] / ssum
        for i in range(n):
            used[i] = 0
        for s in range(top_k):
            best = -1
            bv = 0.0
            for i in range(n):
                if used[i]:
                    continue
                if best < 0 or probs[i] > bv:
                    best = i
                    bv = probs[i]
            used[best] = 1
            sel[t, s] = best
            selw[t, s] = probs[best]
        if renorm:
            wsum = 0.0
            for s in range(top_k):
                wsum = wsum + selw[t, s]
            for s in range(top_k):
                selw[t, s] = selw[t, s] / wsum
        for s in range(top_k):
            e_idx = sel[t, s]
            w = selw[t, s]
            for r in range(h):
                acc = 0.0
                for j in range(d):
                    acc = acc + w_in[e_idx, r, j] * x[t, j]
                if act == ACT_RELU:
                    hid[r] = acc if acc > 0.0 else 0.0
                else:
                    hid[r] = acc / (1.0 + c_exp(-acc))
            for c in range(d):
                acc = 0.0
                for r in range(h):
                    acc = acc + w_out[e_idx, c, r] * hid[r]
                out[t, c] = out[t, c] + w * acc
    return out_arr, sel_arr, selw_arr
