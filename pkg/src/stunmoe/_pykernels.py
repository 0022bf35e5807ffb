"""Numpy fallback kernels.

Both backends implement the same reduction-order contract so results do not
depend on which one is loaded:

* matmul: out[i, j] accumulates a[i, k] * b[k, j] with k strictly ascending,
  one multiply and one add per term (no FMA, no blocking, no BLAS).
* softmax: subtract the max, exponentiate, divide by the left-to-right sum.
* topk: indices ordered by value descending, ties broken by lower index.
* frobenius / central_moments: left-to-right sums over row-major order.
* layer_forward_batch: per token -> logits, softmax, topk, then expert
  outputs accumulated in selection order.

matmul, frobenius, central_moments and topk are bit-identical across
backends.  Paths through exp (softmax, silu) may differ in the last ulp
because numpy's vectorised exp and libm's exp are distinct implementations;
everything downstream tolerates that.

Here the sequential sums are expressed as cumsum (numpy's cumsum is a
running left-to-right accumulation) and matmul as an outer-product update
per k, which performs the identical IEEE operation sequence per element.
"""

import numpy as np

ACT_RELU = 0
ACT_SILU = 1

name = "python"


def matmul(a, b):
    m, p = a.shape
    q = b.shape[1]
    out = np.zeros((m, q))
    for k in range(p):
        out += a[:, k, None] * b[None, k, :]
    return out


def softmax(v):
    m = np.max(v)
    e = np.exp(v - m)
    return e / np.cumsum(e)[-1]


def topk(v, k):
    order = np.argsort(-v, kind="stable")
    return [int(i) for i in order[:k]]


def frobenius(flat):
    if flat.size == 0:
        return 0.0
    sq = flat * flat
    return float(np.sqrt(np.cumsum(sq)[-1]))


def central_moments(flat):
    """Mean and the second/fourth central moments (population, sequential sums)."""
    n = flat.size
    mean = float(np.cumsum(flat)[-1]) / n
    d = flat - mean
    dd = d * d
    m2 = float(np.cumsum(dd)[-1]) / n
    m4 = float(np.cumsum(dd * dd)[-1]) / n
    return mean, m2, m4


def _activate(x, act):
    if act == ACT_RELU:
        return np.maximum(x, 0.0)
    with np.errstate(over="ignore"):
        return x / (1.0 + np.exp(-x))


def layer_forward_batch(router, w_in, w_out, x, top_k, renorm, act):
    """Forward a token batch through one expert layer.

    Returns (out, sel, selw): layer outputs (t, d), selected expert indices
    (t, top_k) in descending-probability order, and the coefficients applied
    to each selected expert's output.
    """
    t_count, d = x.shape
    sel = np.zeros((t_count, top_k), dtype=np.intp)
    selw = np.zeros((t_count, top_k))
    out = np.zeros((t_count, d))
    if t_count == 0:
        return out, sel, selw

    logits = matmul(x, np.ascontiguousarray(router.T))
    m = np.max(logits, axis=1, keepdims=True)
    e = np.exp(logits - m)
    probs = e / np.cumsum(e, axis=1)[:, -1:]

    order = np.argsort(-probs, axis=1, kind="stable")
    sel = np.ascontiguousarray(order[:, :top_k])
    selp = np.take_along_axis(probs, sel, axis=1)
    if renorm:
        selw = selp / np.cumsum(selp, axis=1)[:, -1:]
    else:
        selw = selp.copy()

    # Accumulate per selection position so each token's additions happen in
    # descending-probability order, matching the compiled per-token loop.
    for s in range(top_k):
        chosen = sel[:, s]
        for e_idx in np.unique(chosen):
            rows = np.nonzero(chosen == e_idx)[0]
            h = _activate(matmul(x[rows], np.ascontiguousarray(w_in[e_idx].T)), act)
            y = matmul(h, np.ascontiguousarray(w_out[e_idx].T))
            out[rows] += selw[rows, s, None] * y
    return out, sel, selw
