"""Weight-level unstructured pruning.

Scores follow the activation-aware rule score[i][j] = |W[i][j]| * ||X_j||,
where ||X_j|| is the l2 norm of input feature j over the calibration tokens
routed to that matrix's expert (plain magnitude pruning uses unit norms).
Within each group -- one row, or the whole matrix -- the floor(s * size)
lowest-scoring cells are pruned; equal scores prune the lower column (or
flat) index first.  Masks are boolean keep-masks: True = weight survives.

Layerwise sparsity allocation measures each layer's outlier ratio D_l (the
fraction of scores above outlier_m times the layer's mean score) and
assigns s_l proportional to 1 - D_l, shifted to average exactly the target,
clipped to [target - lam, target + lam] (and [0, 1]), with the clipping
slack redistributed proportionally to remaining headroom.  If the clip box
cannot absorb the slack the allocator falls back to uniform and flags it.

Kurtosis here is the population Pearson ratio m4 / m2^2 (a Gaussian scores
3, a symmetric two-point distribution 1).
"""

import math
from dataclasses import dataclass, field

import numpy as np

from stunmoe.backend import ACT_RELU, active_backend
from stunmoe.errors import ArgumentError, DegenerateInputError, ShapeError
from stunmoe.model import MoeLayer, MoeModel, forward_model_batch
from stunmoe.tensor import as_matrix, matmul

# ---------------------------------------------------------------------------
# prunable set


def prunable_items(model, include_router=False):
    """Yield (name, layer_index, matrix) for every prunable weight matrix.

    Canonical order: per layer, the router (only when included), then each
    expert's w_in and w_out.  Names match the serialization directory.
    """
    for m, layer in enumerate(model.layers):
        if include_router:
            yield f"layer{m}.router", m, layer.router
        for e in range(layer.n_experts):
            yield f"layer{m}.expert{e}.w_in", m, layer.w_in[e]
            yield f"layer{m}.expert{e}.w_out", m, layer.w_out[e]


# ---------------------------------------------------------------------------
# activation norms


@dataclass
class ActivationNorms:
    norms: dict  # tensor name -> per-input-column l2 norm vector
    routed_tokens: dict  # (layer_index, expert_index) -> token count
    token_count: int
    never_routed: list  # (layer_index, expert_index) with zero routed tokens


def _activate_np(x, act_code):
    if act_code == ACT_RELU:
        return np.maximum(x, 0.0)
    with np.errstate(over="ignore"):
        return x / (1.0 + np.exp(-x))


def collect_activation_norms(model, data):
    """Per-column input norms for every prunable matrix, from one forward pass.

    w_in columns see the layer's input tokens; w_out columns see the hidden
    activations of the tokens routed through that expert; router columns see
    every token.  Experts that never receive a token keep zero norms and are
    flagged (their activation-aware scores then degenerate to zero).
    """
    if data.model_dim != model.model_dim:
        raise ShapeError("calibration dim does not match model dim")
    acc = {}
    routed = {}
    for m, layer in enumerate(model.layers):
        acc[f"layer{m}.router"] = np.zeros(layer.model_dim)
        for e in range(layer.n_experts):
            acc[f"layer{m}.expert{e}.w_in"] = np.zeros(layer.model_dim)
            acc[f"layer{m}.expert{e}.w_out"] = np.zeros(layer.hidden_dim)
            routed[(m, e)] = 0

    def capture(idx, x_in, out, sel, selw):
        layer = model.layers[idx]
        acc[f"layer{idx}.router"] += (x_in * x_in).sum(axis=0)
        for e in range(layer.n_experts):
            mask = (sel == e).any(axis=1)
            if not mask.any():
                continue
            xe = x_in[mask]
            routed[(idx, e)] += xe.shape[0]
            acc[f"layer{idx}.expert{e}.w_in"] += (xe * xe).sum(axis=0)
            h = _activate_np(
                matmul(xe, np.ascontiguousarray(layer.w_in[e].T)),
                layer.activation.code,
            )
            acc[f"layer{idx}.expert{e}.w_out"] += (h * h).sum(axis=0)

    for sample in data.samples:
        forward_model_batch(model, sample, capture=capture)

    norms = {name: np.sqrt(v) for name, v in acc.items()}
    never = sorted(key for key, count in routed.items() if count == 0)
    return ActivationNorms(norms, routed, data.token_count, never)


# ---------------------------------------------------------------------------
# masks

GROUP_PER_ROW = "per_row"
GROUP_PER_MATRIX = "per_matrix"


def wanda_mask(matrix, norms, sparsity, group=GROUP_PER_ROW):
    """Keep-mask pruning the floor(s * size) lowest |W| * norm scores per group."""
    matrix = as_matrix(matrix, "matrix")
    norms = np.asarray(norms, dtype=np.float64)
    if norms.shape != (matrix.shape[1],):
        raise ShapeError("norms must have one entry per matrix column")
    if np.any(norms < 0) or not np.isfinite(norms).all():
        raise ArgumentError("norms must be finite and non-negative")
    if not 0.0 <= sparsity <= 1.0:
        raise ArgumentError(f"sparsity {sparsity} outside [0, 1]")
    if group not in (GROUP_PER_ROW, GROUP_PER_MATRIX):
        raise ArgumentError(f"unknown group mode {group!r}")
    scores = np.abs(matrix) * norms[None, :]
    keep = np.ones(matrix.shape, dtype=bool)
    if group == GROUP_PER_ROW:
        cut = int(math.floor(sparsity * matrix.shape[1]))
        if cut:
            for r in range(matrix.shape[0]):
                order = np.argsort(scores[r], kind="stable")
                keep[r, order[:cut]] = False
    else:
        flat = scores.ravel()
        cut = int(math.floor(sparsity * flat.size))
        if cut:
            order = np.argsort(flat, kind="stable")
            kf = keep.ravel()
            kf[order[:cut]] = False
            keep = kf.reshape(matrix.shape)
    return keep


def magnitude_mask(matrix, sparsity, group=GROUP_PER_ROW):
    """Activation-blind variant: unit norms, so scores are plain |W|."""
    matrix = as_matrix(matrix, "matrix")
    return wanda_mask(matrix, np.ones(matrix.shape[1]), sparsity, group)


@dataclass
class SparsityMask:
    masks: dict  # tensor name -> boolean keep-mask
    meta: dict = field(default_factory=dict)

    def pruned_cells(self):
        return sum(int((~m).sum()) for m in self.masks.values())

    def total_cells(self):
        return sum(m.size for m in self.masks.values())

    def realized_sparsity(self):
        total = self.total_cells()
        if total == 0:
            return 0.0
        return self.pruned_cells() / total


def apply_masks(model, mask):
    """Zero out pruned weights; returns a new model."""
    masks = mask.masks if isinstance(mask, SparsityMask) else mask
    by_name = dict(masks)
    new_layers = []
    for m, layer in enumerate(model.layers):
        router = layer.router.copy()
        w_in = layer.w_in.copy()
        w_out = layer.w_out.copy()
        rmask = by_name.pop(f"layer{m}.router", None)
        if rmask is not None:
            if rmask.shape != router.shape:
                raise ShapeError(f"mask for layer{m}.router has wrong shape")
            router *= rmask
        for e in range(layer.n_experts):
            for attr, stack in (("w_in", w_in), ("w_out", w_out)):
                name = f"layer{m}.expert{e}.{attr}"
                wmask = by_name.pop(name, None)
                if wmask is None:
                    continue
                if wmask.shape != stack[e].shape:
                    raise ShapeError(f"mask for {name} has wrong shape")
                stack[e] *= wmask
        new_layers.append(
            MoeLayer(router, w_in, w_out, layer.activation, layer.top_k)
        )
    if by_name:
        raise ArgumentError(f"masks reference unknown tensors: {sorted(by_name)}")
    meta = dict(model.metadata)
    return MoeModel(
        new_layers,
        renormalize=model.renormalize,
        residual=model.residual,
        metadata=meta,
    )


# ---------------------------------------------------------------------------
# layerwise allocation


@dataclass
class OwlConfig:
    outlier_m: float = 5.0
    lam: float = 0.08

    def __post_init__(self):
        if self.outlier_m <= 0:
            raise ArgumentError("outlier_m must be positive")
        if not 0.0 <= self.lam <= 1.0:
            raise ArgumentError("lam must lie in [0, 1]")


def outlier_ratio(scores, outlier_m):
    """Fraction of scores above outlier_m times their mean."""
    flat = np.ravel(np.asarray(scores, dtype=np.float64))
    if flat.size == 0:
        return 0.0
    return float(np.count_nonzero(flat > outlier_m * flat.mean()) / flat.size)


def owl_allocate(layer_scores, target, config=None):
    """Per-layer sparsity allocation from outlier ratios.

    layer_scores: one flat score array per layer.  Returns (allocations,
    diagnostics); allocations average exactly `target` unless the clip box
    makes that infeasible, in which case the allocation is uniform and
    diagnostics["fallback"] explains why.
    """
    config = config or OwlConfig()
    if not 0.0 <= target <= 1.0:
        raise ArgumentError(f"target sparsity {target} outside [0, 1]")
    count = len(layer_scores)
    if count == 0:
        raise ArgumentError("need at least one layer")
    d = np.array([outlier_ratio(s, config.outlier_m) for s in layer_scores])
    lo = max(0.0, target - config.lam)
    hi = min(1.0, target + config.lam)
    base = (1.0 - d) - np.mean(1.0 - d) + target
    alloc = np.clip(base, lo, hi)
    diagnostics = {
        "outlier_ratio": [float(x) for x in d],
        "base": [float(x) for x in base],
        "lo": lo,
        "hi": hi,
        "fallback": None,
    }
    deficit = target * count - float(np.sum(alloc))
    if abs(deficit) > 1e-12:
        if deficit > 0:
            headroom = hi - alloc
        else:
            headroom = alloc - lo
        room = float(np.sum(headroom))
        if room + 1e-12 < abs(deficit):
            alloc = np.full(count, target)
            diagnostics["fallback"] = (
                "clip box cannot absorb redistribution; allocation is uniform"
            )
        elif room > 0:
            alloc = alloc + deficit * (headroom / room)
            alloc = np.clip(alloc, lo, hi)
    diagnostics["allocations"] = [float(x) for x in alloc]
    return alloc, diagnostics


# ---------------------------------------------------------------------------
# kurtosis


def kurtosis(values):
    """Population Pearson kurtosis m4 / m2^2 of a flattened array."""
    flat = np.ravel(np.ascontiguousarray(values, dtype=np.float64))
    if flat.size == 0:
        raise ArgumentError("kurtosis of an empty array")
    _, m2, m4 = active_backend().central_moments(flat)
    if m2 == 0.0:
        raise DegenerateInputError("kurtosis undefined for zero-variance input")
    return float(m4 / (m2 * m2))


@dataclass
class KurtosisReport:
    per_tensor: dict  # name -> float or None (degenerate after masking)
    aggregate: float
    surviving_cells: int


def kurtosis_report(model, mask=None, include_router=False):
    """Kurtosis of each prunable matrix and of all surviving weights pooled.

    With a mask, pruned weights are excluded (a fully-pruned or constant
    tensor reports None).
    """
    masks = {}
    if mask is not None:
        masks = mask.masks if isinstance(mask, SparsityMask) else dict(mask)
    per_tensor = {}
    pool = []
    for name, _, matrix in prunable_items(model, include_router=include_router):
        keep = masks.get(name)
        vals = np.ravel(matrix) if keep is None else matrix[keep]
        pool.append(vals)
        try:
            per_tensor[name] = kurtosis(vals) if vals.size else None
        except DegenerateInputError:
            per_tensor[name] = None
    flat = np.concatenate(pool) if pool else np.empty(0)
    agg = kurtosis(flat)
    return KurtosisReport(per_tensor, agg, int(flat.size))
