"""Calibration data and routing statistics.

A calibration set is a list of token-row arrays (seq_len, model_dim).
Coactivation statistics count, per layer, how often each unordered pair of
experts lands in the same token's top-k selection, normalized by the total
number of pairs observed in that layer so entries over i < j sum to one.
"""

import itertools
from dataclasses import dataclass, field

import numpy as np

from stunmoe.errors import ArgumentError, ShapeError
from stunmoe.model import forward_model_batch


@dataclass
class CalibrationSet:
    samples: list
    model_dim: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.samples:
            raise ShapeError("calibration set needs at least one sample")
        cleaned = []
        for s in self.samples:
            a = np.ascontiguousarray(s, dtype=np.float64)
            if a.ndim != 2 or a.shape[1] != self.model_dim:
                raise ShapeError("calibration sample has wrong shape")
            cleaned.append(a)
        self.samples = cleaned

    @property
    def token_count(self):
        return sum(s.shape[0] for s in self.samples)

    def stacked(self):
        return np.vstack(self.samples)


def generate_calibration(n_samples, seq_len, model_dim, rng, scale=1.0):
    if n_samples < 1 or seq_len < 1:
        raise ArgumentError("need at least one sample and one token per sample")
    samples = [rng.normal((seq_len, model_dim), scale=scale) for _ in range(n_samples)]
    return CalibrationSet(
        samples, model_dim, metadata={"seed": rng.seed, "rng": rng.state_token()}
    )


@dataclass
class CoactivationStats:
    matrices: list  # per layer (n, n) float64, symmetric, zero diagonal
    counts: list  # per layer raw int64 pair counts (upper triangle mirrored)
    token_count: int
    low_overlap: bool  # some layer has top_k < 2, so its pairs are all zero


def collect_coactivations(model, data):
    """Count simultaneous top-k selection over the calibration set."""
    if data.model_dim != model.model_dim:
        raise ShapeError("calibration dim does not match model dim")
    counts = [
        np.zeros((layer.n_experts, layer.n_experts), dtype=np.int64)
        for layer in model.layers
    ]

    def capture(idx, x_in, out, sel, selw):
        k = sel.shape[1]
        for a, b in itertools.combinations(range(k), 2):
            i = np.minimum(sel[:, a], sel[:, b])
            j = np.maximum(sel[:, a], sel[:, b])
            np.add.at(counts[idx], (i, j), 1)

    for sample in data.samples:
        forward_model_batch(model, sample, capture=capture)

    token_count = data.token_count
    matrices = []
    low_overlap = False
    for layer, c in zip(model.layers, counts):
        k = layer.top_k
        pairs = token_count * (k * (k - 1) // 2)
        if pairs == 0:
            low_overlap = True
            matrices.append(np.zeros_like(c, dtype=np.float64))
            continue
        a = c / pairs
        matrices.append(a + a.T)  # symmetric; diagonal stays zero
    return CoactivationStats(matrices, counts, token_count, low_overlap)
