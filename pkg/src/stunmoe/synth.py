"""Synthetic models with planted expert redundancy.

Experts are generated per cluster: one prototype per cluster, then each
member is prototype + noise.  noise_sigma is relative to the prototype
entry scale, so sigma=0 plants exact duplicates and small sigma plants
near-duplicates.  The planted partition is recorded in model metadata for
recovery scoring.

Entry scales are 1/sqrt(fan_in) so logits, hidden units and outputs stay
O(1) under standard-normal calibration tokens.

Draw order (fixed; reproducibility depends on it): per layer, first every
cluster prototype (router row, w_in, w_out), then per expert in index order
the three noise draws.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from stunmoe.errors import ArgumentError
from stunmoe.model import Activation, MoeLayer, MoeModel


@dataclass
class SynthSpec:
    n_layers: int
    n_experts: int
    model_dim: int
    hidden_dim: int
    top_k: int
    clusters_per_layer: int = 1
    noise_sigma: float = 0.0
    activation: str = "silu"
    renormalize: bool = False
    residual: bool = True
    cluster_sizes: tuple = None  # explicit sizes; overrides clusters_per_layer

    def __post_init__(self):
        for name in ("n_layers", "n_experts", "model_dim", "hidden_dim"):
            if getattr(self, name) < 1:
                raise ArgumentError(f"{name} must be positive")
        if not 1 <= self.top_k <= self.n_experts:
            raise ArgumentError(f"top_k={self.top_k} outside [1, {self.n_experts}]")
        if self.noise_sigma < 0:
            raise ArgumentError("noise_sigma must be non-negative")
        Activation(self.activation)
        if self.cluster_sizes is not None:
            self.cluster_sizes = tuple(int(s) for s in self.cluster_sizes)
            if any(s < 1 for s in self.cluster_sizes):
                raise ArgumentError("cluster sizes must be positive")
            if sum(self.cluster_sizes) != self.n_experts:
                raise ArgumentError("cluster sizes must sum to n_experts")
            self.clusters_per_layer = len(self.cluster_sizes)
        if not 1 <= self.clusters_per_layer <= self.n_experts:
            raise ArgumentError("clusters_per_layer outside [1, n_experts]")

    def resolved_sizes(self):
        if self.cluster_sizes is not None:
            return list(self.cluster_sizes)
        c = self.clusters_per_layer
        base, rem = divmod(self.n_experts, c)
        return [base + 1 if i < rem else base for i in range(c)]

    def to_dict(self):
        return {
            "n_layers": self.n_layers,
            "n_experts": self.n_experts,
            "model_dim": self.model_dim,
            "hidden_dim": self.hidden_dim,
            "top_k": self.top_k,
            "clusters_per_layer": self.clusters_per_layer,
            "noise_sigma": self.noise_sigma,
            "activation": self.activation,
            "renormalize": self.renormalize,
            "residual": self.residual,
            "cluster_sizes": list(self.cluster_sizes) if self.cluster_sizes else None,
        }


def generate_synthetic(spec, rng):
    """Generate a planted-cluster model from spec using the given SeededRng."""
    d, h = spec.model_dim, spec.hidden_dim
    r_scale = 1.0 / math.sqrt(d)
    i_scale = 1.0 / math.sqrt(d)
    o_scale = 1.0 / math.sqrt(h)
    sizes = spec.resolved_sizes()
    layers = []
    planted = []
    for _ in range(spec.n_layers):
        protos = []
        for _ in sizes:
            protos.append(
                (
                    rng.normal((d,), scale=r_scale),
                    rng.normal((h, d), scale=i_scale),
                    rng.normal((d, h), scale=o_scale),
                )
            )
        members = []
        start = 0
        assignment = []
        for ci, size in enumerate(sizes):
            members.append(list(range(start, start + size)))
            assignment.extend([ci] * size)
            start += size
        n = spec.n_experts
        router = np.empty((n, d))
        w_in = np.empty((n, h, d))
        w_out = np.empty((n, d, h))
        for i in range(n):
            pr, pi, po = protos[assignment[i]]
            router[i] = pr + rng.normal((d,), scale=spec.noise_sigma * r_scale)
            w_in[i] = pi + rng.normal((h, d), scale=spec.noise_sigma * i_scale)
            w_out[i] = po + rng.normal((d, h), scale=spec.noise_sigma * o_scale)
        layers.append(MoeLayer(router, w_in, w_out, spec.activation, spec.top_k))
        planted.append(members)
    metadata = {
        "synth": spec.to_dict(),
        "seed": rng.seed,
        "rng": rng.state_token(),
        "planted": planted,
    }
    return MoeModel(
        layers,
        renormalize=spec.renormalize,
        residual=spec.residual,
        metadata=metadata,
    )
