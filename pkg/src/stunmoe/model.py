"""Mixture-of-experts model structures and forward semantics.

A layer routes each token x through its top_k experts by router probability:
r = softmax(router @ x), T = topk(r), out = sum_{i in T} r_i * expert_i(x)
with expert_i(x) = w_out_i @ act(w_in_i @ x).  Optionally the selected
probabilities are renormalized to sum to one (renormalize flag, default
off).  Models chain layers with residual connections by default:
x_{m+1} = x_m + layer_m(x_m).
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from stunmoe.backend import ACT_RELU, ACT_SILU, active_backend
from stunmoe.errors import ArgumentError, ShapeError
from stunmoe.tensor import as_matrix, as_vector


class Activation(str, Enum):
    RELU = "relu"
    SILU = "silu"

    @property
    def code(self):
        return ACT_RELU if self is Activation.RELU else ACT_SILU


@dataclass
class ExpertParams:
    """View of one expert's feed-forward parameters: w_in (h, d), w_out (d, h)."""

    w_in: np.ndarray
    w_out: np.ndarray
    activation: Activation

    def concat_flat(self):
        """Concatenated parameter vector (w_in then w_out, row-major)."""
        return np.concatenate([np.ravel(self.w_in), np.ravel(self.w_out)])


@dataclass
class MoeLayer:
    """One expert layer: router (n, d), stacked w_in (n, h, d), w_out (n, d, h)."""

    router: np.ndarray
    w_in: np.ndarray
    w_out: np.ndarray
    activation: Activation
    top_k: int

    def __post_init__(self):
        self.router = np.ascontiguousarray(self.router, dtype=np.float64)
        self.w_in = np.ascontiguousarray(self.w_in, dtype=np.float64)
        self.w_out = np.ascontiguousarray(self.w_out, dtype=np.float64)
        if not isinstance(self.activation, Activation):
            self.activation = Activation(self.activation)
        if self.router.ndim != 2 or self.w_in.ndim != 3 or self.w_out.ndim != 3:
            raise ShapeError("layer tensors have wrong rank")
        n, d = self.router.shape
        if n < 1:
            raise ShapeError("layer needs at least one expert")
        if self.w_in.shape[0] != n or self.w_out.shape[0] != n:
            raise ShapeError("expert count differs between router and expert stacks")
        h = self.w_in.shape[1]
        if (
            self.w_in.shape[2] != d
            or self.w_out.shape[1] != d
            or self.w_out.shape[2] != h
        ):
            raise ShapeError("expert matrices do not match model/hidden dims")
        self.top_k = int(self.top_k)
        if not 1 <= self.top_k <= n:
            raise ArgumentError(f"top_k={self.top_k} outside [1, {n}]")

    @property
    def n_experts(self):
        return self.router.shape[0]

    @property
    def model_dim(self):
        return self.router.shape[1]

    @property
    def hidden_dim(self):
        return self.w_in.shape[1]

    def expert(self, i):
        return ExpertParams(self.w_in[i], self.w_out[i], self.activation)

    @classmethod
    def from_experts(cls, router, experts, activation, top_k):
        """Build from a sequence of (w_in, w_out) pairs."""
        w_in = np.stack([np.asarray(a, dtype=np.float64) for a, _ in experts])
        w_out = np.stack([np.asarray(b, dtype=np.float64) for _, b in experts])
        return cls(np.asarray(router, dtype=np.float64), w_in, w_out, activation, top_k)

    def restricted(self, keep):
        """Copy keeping only the experts in `keep` (ascending indices).

        Router rows of dropped experts are deleted, so the softmax runs over
        survivors only; top_k is clamped to the survivor count.
        """
        keep = [int(i) for i in keep]
        if not keep:
            raise ArgumentError("cannot drop every expert in a layer")
        if keep != sorted(set(keep)):
            raise ArgumentError("keep indices must be strictly ascending")
        if keep[0] < 0 or keep[-1] >= self.n_experts:
            raise ArgumentError("keep index out of range")
        return MoeLayer(
            self.router[keep].copy(),
            self.w_in[keep].copy(),
            self.w_out[keep].copy(),
            self.activation,
            min(self.top_k, len(keep)),
        )


@dataclass
class MoeModel:
    layers: list
    renormalize: bool = False
    residual: bool = True
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("model needs at least one layer")
        d = self.layers[0].model_dim
        for layer in self.layers:
            if layer.model_dim != d:
                raise ShapeError("layers disagree on model dimension")

    @property
    def model_dim(self):
        return self.layers[0].model_dim

    @property
    def n_layers(self):
        return len(self.layers)


def layer_param_counts(layer):
    """Parameter counts for one layer: router rows and expert matrices."""
    n, d, h = layer.n_experts, layer.model_dim, layer.hidden_dim
    return {"router": n * d, "experts": n * 2 * h * d, "per_expert": 2 * h * d}


def model_param_count(model):
    total = 0
    for layer in model.layers:
        c = layer_param_counts(layer)
        total += c["router"] + c["experts"]
    return total


def forward_layer_batch(layer, x, renormalize=False):
    """Forward (t, d) token rows through one layer.

    Returns (out, sel, selw): outputs (t, d), selected expert indices
    (t, top_k) in descending-probability order, and the mixture coefficients
    actually applied.
    """
    x = as_matrix(x, "x")
    if x.shape[1] != layer.model_dim:
        raise ShapeError(
            f"token dim {x.shape[1]} does not match model dim {layer.model_dim}"
        )
    return active_backend().layer_forward_batch(
        layer.router,
        layer.w_in,
        layer.w_out,
        x,
        layer.top_k,
        bool(renormalize),
        layer.activation.code,
    )


def forward_layer(layer, x, renormalize=False):
    """Single-token layer forward; returns the (d,) output."""
    x = as_vector(x, "x")
    out, _, _ = forward_layer_batch(layer, x[None, :], renormalize)
    return out[0]


def forward_model_batch(model, x, capture=None):
    """Forward token rows through every layer under the model's flags.

    capture(idx, x_in, out, sel, selw), when given, sees each layer's input
    and routing; used for calibration statistics without a second pass.
    """
    cur = as_matrix(x, "x")
    if cur.shape[1] != model.model_dim:
        raise ShapeError(
            f"token dim {cur.shape[1]} does not match model dim {model.model_dim}"
        )
    for idx, layer in enumerate(model.layers):
        out, sel, selw = forward_layer_batch(layer, cur, model.renormalize)
        if capture is not None:
            capture(idx, cur, out, sel, selw)
        cur = cur + out if model.residual else out
    return cur


def forward_model(model, x):
    x = as_vector(x, "x")
    return forward_model_batch(model, x[None, :])[0]


def layer_inputs(model, x, layer_index):
    """Activations entering layers[layer_index] when the model runs on x."""
    if not 0 <= layer_index < model.n_layers:
        raise ArgumentError(f"layer index {layer_index} out of range")
    cur = as_matrix(x, "x")
    for layer in model.layers[:layer_index]:
        out, _, _ = forward_layer_batch(layer, cur, model.renormalize)
        cur = cur + out if model.residual else out
    return cur
