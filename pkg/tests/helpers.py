"""Independent oracle implementations and factories shared across tests.

Everything here recomputes results through a different code path than the
package: textbook Python loops, numpy's BLAS dot, or mpmath extended
precision.  Agreement between package and oracle is then evidence, not a
tautology.
"""

import mpmath
import numpy as np

from stunmoe.calibration import CalibrationSet
from stunmoe.model import MoeLayer, MoeModel
from stunmoe.rng import SeededRng


# ---------------------------------------------------------------------------
# numeric oracles


def naive_matmul(a, b):
    """Textbook triple loop, k ascending -- the bit-exactness reference."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n, p = a.shape
    p2, m = b.shape
    assert p == p2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for k in range(p):
                acc = acc + a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def mp_softmax(v):
    """Softmax at 50 decimal digits, rounded to float at the end."""
    with mpmath.workdps(50):
        exps = [mpmath.exp(mpmath.mpf(float(x))) for x in v]
        total = mpmath.fsum(exps)
        return np.array([float(e / total) for e in exps])


def mp_frobenius(a):
    with mpmath.workdps(50):
        total = mpmath.fsum(mpmath.mpf(float(x)) ** 2 for x in np.ravel(a))
        return float(mpmath.sqrt(total))


def mp_moments(v):
    """(mean, m2, m4) at 50 decimal digits."""
    with mpmath.workdps(50):
        xs = [mpmath.mpf(float(x)) for x in np.ravel(v)]
        n = len(xs)
        mean = mpmath.fsum(xs) / n
        m2 = mpmath.fsum((x - mean) ** 2 for x in xs) / n
        m4 = mpmath.fsum((x - mean) ** 4 for x in xs) / n
        return float(mean), float(m2), float(m4)


def sorted_topk(v, k):
    """Top-k indices by (value desc, index asc), via Python sort."""
    return sorted(range(len(v)), key=lambda i: (-float(v[i]), i))[:k]


# ---------------------------------------------------------------------------
# forward-pass oracles (numpy BLAS path, per-token)


def _act(name, h):
    if name == "relu":
        return np.maximum(h, 0.0)
    if name == "silu":
        return h / (1.0 + np.exp(-h))
    raise ValueError(name)


def naive_layer_forward(router, w_in, w_out, activation, top_k, x, renormalize):
    """One token through one layer, computed independently of the kernels."""
    logits = np.dot(np.asarray(router), np.asarray(x))
    z = logits - logits.max()
    e = np.exp(z)
    r = e / e.sum()
    sel = sorted_topk(r, top_k)
    weights = np.array([r[i] for i in sel])
    if renormalize:
        weights = weights / weights.sum()
    out = np.zeros(len(x))
    for w, i in zip(weights, sel):
        h = _act(activation, np.dot(np.asarray(w_in)[i], x))
        out = out + w * np.dot(np.asarray(w_out)[i], h)
    return out


def naive_model_forward(model, x):
    """Chain naive layer forwards with the model's residual flag."""
    y = np.asarray(x, dtype=np.float64)
    for layer in model.layers:
        out = naive_layer_forward(
            layer.router,
            layer.w_in,
            layer.w_out,
            layer.activation.value,
            layer.top_k,
            y,
            model.renormalize,
        )
        y = y + out if model.residual else out
    return y


# ---------------------------------------------------------------------------
# factories


def make_layer(router, w_in, w_out, activation="silu", top_k=1):
    return MoeLayer(
        np.asarray(router, dtype=np.float64),
        np.asarray(w_in, dtype=np.float64),
        np.asarray(w_out, dtype=np.float64),
        activation,
        top_k,
    )


def random_layer(rng, n, d, h, top_k=2, activation="silu", scale=1.0):
    return MoeLayer(
        rng.normal((n, d), scale=scale / np.sqrt(d)),
        rng.normal((n, h, d), scale=scale / np.sqrt(d)),
        rng.normal((n, d, h), scale=scale / np.sqrt(h)),
        activation,
        top_k,
    )


def random_model(rng, l=2, n=4, d=8, h=8, top_k=2, activation="silu",
                 renormalize=False, residual=True):
    layers = [random_layer(rng.spawn(m), n, d, h, top_k, activation) for m in range(l)]
    return MoeModel(layers, renormalize=renormalize, residual=residual)


def make_tokens(rng, count, d):
    return rng.normal((count, d))


def make_data(rng, n_samples, seq_len, d):
    samples = [make_tokens(rng.spawn(i), seq_len, d) for i in range(n_samples)]
    return CalibrationSet(samples, d)


def seeded(seed):
    return SeededRng(seed)
