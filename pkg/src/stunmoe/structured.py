"""Expert-level structured pruning.

Behavioral distances between experts combine parameter distance and routing
coactivation: d[i][j] = lambda1 * ||W_i - W_j||_F - lambda2 * a[i][j], where
W is the concatenated (w_in, w_out) parameter block and a is the normalized
coactivation rate.  Lower distance = more redundant.

Clustering is threshold-based: complete-linkage agglomeration (merge while
the farthest cross pair is still below the threshold) or DSatur coloring of
the conflict graph (edge when d > threshold).  Both produce partitions
whose clusters are pairwise compatible under their respective rules.

Three engines choose which experts to drop in a layer:

* combinatorial: evaluate the reconstruction loss of every k-subset,
  keep the argmin (first in lexicographic order on ties).
* greedy O(n): score experts by inverse single-expert loss, penalize
  pruning a cluster's last survivor, pick greedily.  n loss evaluations.
* greedy O(1): keep one representative per cluster using parameter means
  only -- zero loss evaluations.

Reconstruction loss is layer-local: both the intact and the pruned layer
are fed the original model's inputs to that layer, and the loss is the
Frobenius norm of the output difference over all calibration tokens.
A pruned layer loses the dropped experts' router rows, so the softmax runs
over survivors and top_k is clamped to the survivor count.
"""

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from stunmoe.errors import ArgumentError, FormatError, ShapeError
from stunmoe.model import (
    MoeLayer,
    MoeModel,
    forward_layer_batch,
    layer_inputs,
)
from stunmoe.tensor import frobenius_norm

ACTION_KEEP = "keep"
ACTION_KEEP_NEAREST = "keep-nearest"
ACTION_REPLACE_MEAN = "replace-with-mean"


# ---------------------------------------------------------------------------
# distances


@dataclass
class DistanceMatrix:
    layer_index: int
    values: np.ndarray  # (n, n), symmetric, zero diagonal
    lambda1: float
    lambda2: float

    @property
    def n_experts(self):
        return self.values.shape[0]


def behavioral_distance(model, coactivation, lambda1=1.0, lambda2=1.0):
    """Per-layer expert distance matrices from parameters and coactivation."""
    if lambda1 < 0 or lambda2 < 0:
        raise ArgumentError("lambda weights must be non-negative")
    if len(coactivation.matrices) != model.n_layers:
        raise ShapeError("coactivation stats do not match model layer count")
    out = []
    for m, layer in enumerate(model.layers):
        n = layer.n_experts
        a = coactivation.matrices[m]
        if a.shape != (n, n):
            raise ShapeError(f"coactivation matrix for layer {m} has wrong shape")
        flats = [layer.expert(i).concat_flat() for i in range(n)]
        d = np.zeros((n, n))
        for i in range(n):
            for j in range(i + 1, n):
                dist = lambda1 * frobenius_norm(flats[i] - flats[j]) - lambda2 * a[i, j]
                d[i, j] = dist
                d[j, i] = dist
        out.append(DistanceMatrix(m, d, lambda1, lambda2))
    return out


# ---------------------------------------------------------------------------
# cluster maps


@dataclass
class ClusterMap:
    layers: list  # per layer: list of clusters, each a sorted list of indices
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        canon = []
        for m, clusters in enumerate(self.layers):
            clusters = [sorted(int(i) for i in c) for c in clusters]
            if any(not c for c in clusters):
                raise ArgumentError(f"layer {m}: empty cluster")
            members = sorted(i for c in clusters for i in c)
            n = len(members)
            if members != list(range(n)):
                raise ArgumentError(f"layer {m}: clusters are not a partition")
            canon.append(sorted(clusters, key=lambda c: c[0]))
        self.layers = canon

    def n_experts(self, layer_index):
        return sum(len(c) for c in self.layers[layer_index])

    def cluster_count(self, layer_index):
        return len(self.layers[layer_index])

    def assignment(self, layer_index):
        """Cluster index per expert for one layer."""
        out = np.empty(self.n_experts(layer_index), dtype=np.intp)
        for ci, members in enumerate(self.layers[layer_index]):
            for i in members:
                out[i] = ci
        return out

    def cluster_of(self, layer_index, expert):
        for members in self.layers[layer_index]:
            if expert in members:
                return members
        raise ArgumentError(f"expert {expert} not present in layer {layer_index}")

    def to_json(self):
        doc = {
            "version": 1,
            "kind": "clusters",
            "meta": self.meta,
            "layers": [{"clusters": c} for c in self.layers],
        }
        return json.dumps(doc, indent=2, sort_keys=False)

    @classmethod
    def from_json(cls, text):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise FormatError(f"cluster map is not valid JSON: {e}") from e
        if not isinstance(doc, dict) or doc.get("kind") != "clusters":
            raise FormatError("document is not a cluster map")
        if doc.get("version") != 1:
            raise FormatError(f"unsupported cluster map version {doc.get('version')!r}")
        try:
            layers = [entry["clusters"] for entry in doc["layers"]]
        except (KeyError, TypeError) as e:
            raise FormatError("cluster map lacks layers/clusters") from e
        return cls(layers, meta=doc.get("meta", {}))


def _complete_linkage(d, a, b):
    """Largest pairwise distance across two member lists."""
    worst = -np.inf
    for i in a:
        for j in b:
            if d[i, j] > worst:
                worst = d[i, j]
    return worst


def _agglomerate(d, threshold):
    """Complete-linkage merge loop for one layer.

    Merges the closest compatible pair while its linkage stays strictly
    below the threshold.  Ties break on the lexicographically smallest
    (min member of first, min member of second) pair.  Returns the final
    clusters and the heights of the merges performed.
    """
    n = d.shape[0]
    clusters = [[i] for i in range(n)]
    heights = []
    while len(clusters) > 1:
        best = None
        best_key = None
        for p in range(len(clusters)):
            for q in range(p + 1, len(clusters)):
                a, b = clusters[p], clusters[q]
                if a[0] > b[0]:
                    a, b = b, a
                link = _complete_linkage(d, a, b)
                key = (link, a[0], b[0])
                if best_key is None or key < best_key:
                    best_key = key
                    best = (p, q)
        if best_key[0] >= threshold:
            break
        p, q = best
        merged = sorted(clusters[p] + clusters[q])
        clusters = [c for idx, c in enumerate(clusters) if idx not in (p, q)]
        clusters.append(merged)
        heights.append(best_key[0])
    return sorted(clusters, key=lambda c: c[0]), heights


def agglomerative_cluster(distances, threshold):
    """Complete-linkage clustering of every layer at one threshold."""
    layers = []
    for dm in distances:
        clusters, _ = _agglomerate(dm.values, threshold)
        layers.append(clusters)
    return ClusterMap(
        layers,
        meta={
            "method": "agglomerative",
            "threshold": float(threshold),
            "lambda1": distances[0].lambda1,
            "lambda2": distances[0].lambda2,
        },
    )


def threshold_search(distances, targets):
    """Per-layer thresholds hitting target cluster counts.

    targets: one int for all layers or a per-layer list.  For each layer
    the candidate thresholds are the sorted unique pairwise distances, and
    the search returns the smallest candidate whose clustering yields at
    most the target count.  Clustering at threshold t reproduces a prefix
    of the full complete-linkage dendrogram, so the count is monotone in t
    and every count is reachable unless two merges tie at the same height.
    A tie at the cut merges through (fewer clusters than asked, never
    more); the achieved counts live in the returned map.  Returns
    (thresholds, ClusterMap).
    """
    if isinstance(targets, int):
        targets = [targets] * len(distances)
    if len(targets) != len(distances):
        raise ArgumentError("one target count per layer required")
    thresholds = []
    layers = []
    for dm, target in zip(distances, targets):
        n = dm.n_experts
        if not 1 <= target <= n:
            raise ArgumentError(f"target count {target} outside [1, {n}]")
        _, heights = _agglomerate(dm.values, np.inf)
        if n > 1:
            iu = np.triu_indices(n, 1)
            grid = np.unique(dm.values[iu])
        else:
            grid = np.zeros(1)
        k = n - target  # merges wanted
        while 0 < k < len(heights) and heights[k - 1] == heights[k]:
            k += 1  # tied merges are inseparable: take both
        if k == 0:
            t = float(grid[0])  # strict < admits nothing at the minimum
        elif k >= len(heights):
            t = float(np.nextafter(grid[-1], np.inf))
        else:
            idx = int(np.searchsorted(grid, heights[k - 1], side="right"))
            if idx < len(grid):
                t = float(grid[idx])
            else:
                t = float(np.nextafter(grid[-1], np.inf))
        clusters, _ = _agglomerate(dm.values, t)
        if len(clusters) > target:
            raise AssertionError("threshold search lost count consistency")
        thresholds.append(float(t))
        layers.append(clusters)
    cmap = ClusterMap(
        layers,
        meta={
            "method": "agglomerative",
            "thresholds": thresholds,
            "targets": [int(t) for t in targets],
            "achieved": [len(c) for c in layers],
            "lambda1": distances[0].lambda1,
            "lambda2": distances[0].lambda2,
        },
    )
    return thresholds, cmap


def dsatur_cluster(distances, threshold):
    """Partition by DSatur coloring of the dissimilarity graph.

    Experts with d <= t count as compatible; the complement (d > t) is the
    conflict graph that gets colored, so each color class holds only
    pairwise-compatible experts.  Vertex order: highest saturation, then
    highest degree, then lowest index.
    """
    layers = []
    for dm in distances:
        n = dm.n_experts
        conflict = dm.values > threshold
        np.fill_diagonal(conflict, False)
        degree = conflict.sum(axis=1)
        color = [-1] * n
        for _ in range(n):
            best = None
            best_key = None
            for i in range(n):
                if color[i] >= 0:
                    continue
                sat = len({color[j] for j in range(n) if conflict[i, j] and color[j] >= 0})
                key = (-sat, -int(degree[i]), i)
                if best_key is None or key < best_key:
                    best_key = key
                    best = i
            neighbor_colors = {color[j] for j in range(n) if conflict[best, j]}
            c = 0
            while c in neighbor_colors:
                c += 1
            color[best] = c
        n_colors = max(color) + 1 if n else 0
        clusters = [[i for i in range(n) if color[i] == c] for c in range(n_colors)]
        layers.append(clusters)
    return ClusterMap(
        layers,
        meta={
            "method": "dsatur",
            "threshold": float(threshold),
            "lambda1": distances[0].lambda1,
            "lambda2": distances[0].lambda2,
        },
    )


# ---------------------------------------------------------------------------
# reconstruction loss


class LayerEvaluator:
    """Caches one layer's inputs and intact outputs; prices pruned subsets.

    Every loss() call is one forward of the pruned layer over the full
    calibration set -- the unit the cost ledger counts.
    """

    def __init__(self, model, layer_index, data):
        if data.model_dim != model.model_dim:
            raise ShapeError("calibration dim does not match model dim")
        if not 0 <= layer_index < model.n_layers:
            raise ArgumentError(f"layer index {layer_index} out of range")
        self.model = model
        self.layer_index = layer_index
        self.layer = model.layers[layer_index]
        self.x_in = layer_inputs(model, data.stacked(), layer_index)
        self.base_out, _, _ = forward_layer_batch(
            self.layer, self.x_in, model.renormalize
        )
        self.calls = 0

    def loss(self, pruned_subset):
        n = self.layer.n_experts
        pruned = sorted(int(i) for i in pruned_subset)
        if len(set(pruned)) != len(pruned):
            raise ArgumentError("pruned subset has duplicates")
        if pruned and (pruned[0] < 0 or pruned[-1] >= n):
            raise ArgumentError("pruned index out of range")
        keep = [i for i in range(n) if i not in set(pruned)]
        if not keep:
            raise ArgumentError("cannot prune every expert in a layer")
        return self.loss_for_layer(self.layer.restricted(keep))

    def loss_for_layer(self, layer):
        """Loss of an arbitrary replacement layer (e.g. mean-rebuilt experts)."""
        out, _, _ = forward_layer_batch(layer, self.x_in, self.model.renormalize)
        self.calls += 1
        return frobenius_norm(self.base_out - out)


def reconstruction_loss(model, layer_index, subset, data):
    """Layer-local output distortion from pruning `subset` in one layer."""
    return LayerEvaluator(model, layer_index, data).loss(subset)


# ---------------------------------------------------------------------------
# pruning plans


@dataclass
class ClusterAction:
    members: list
    kept: int
    action: str

    def __post_init__(self):
        self.members = sorted(int(i) for i in self.members)
        self.kept = int(self.kept)
        if self.action not in (ACTION_KEEP, ACTION_KEEP_NEAREST, ACTION_REPLACE_MEAN):
            raise ArgumentError(f"unknown cluster action {self.action!r}")
        if self.kept not in self.members:
            raise ArgumentError("kept expert must be a cluster member")


@dataclass
class LayerPlan:
    pruned: list
    kept: list
    actions: list = field(default_factory=list)

    def __post_init__(self):
        self.pruned = sorted(int(i) for i in self.pruned)
        self.kept = sorted(int(i) for i in self.kept)
        if set(self.pruned) & set(self.kept):
            raise ArgumentError("an expert cannot be both pruned and kept")
        if not self.kept:
            raise ArgumentError("a layer must keep at least one expert")


@dataclass
class PruningPlan:
    layers: list
    engine: str
    meta: dict = field(default_factory=dict)

    def to_json(self):
        doc = {
            "version": 1,
            "kind": "plan",
            "engine": self.engine,
            "meta": self.meta,
            "layers": [
                {
                    "pruned": lp.pruned,
                    "kept": lp.kept,
                    "actions": [
                        {"members": a.members, "kept": a.kept, "action": a.action}
                        for a in lp.actions
                    ],
                }
                for lp in self.layers
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=False)

    @classmethod
    def from_json(cls, text):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise FormatError(f"pruning plan is not valid JSON: {e}") from e
        if not isinstance(doc, dict) or doc.get("kind") != "plan":
            raise FormatError("document is not a pruning plan")
        if doc.get("version") != 1:
            raise FormatError(f"unsupported plan version {doc.get('version')!r}")
        try:
            layers = [
                LayerPlan(
                    entry["pruned"],
                    entry["kept"],
                    [
                        ClusterAction(a["members"], a["kept"], a["action"])
                        for a in entry.get("actions", [])
                    ],
                )
                for entry in doc["layers"]
            ]
        except (KeyError, TypeError) as e:
            raise FormatError("pruning plan lacks required fields") from e
        return cls(layers, engine=doc.get("engine", "unknown"), meta=doc.get("meta", {}))


def _validate_plan_layer(lp, n):
    if sorted(lp.pruned + lp.kept) != list(range(n)):
        raise ArgumentError("plan does not partition the layer's experts")
    for action in lp.actions:
        if action.members[-1] >= n or action.members[0] < 0:
            raise ArgumentError("action member out of range")
        if action.kept in lp.pruned:
            raise ArgumentError("action keeps an expert the plan prunes")


def apply_layer_plan(layer, lp):
    """Materialize one LayerPlan against one layer; returns a new MoeLayer."""
    n = layer.n_experts
    _validate_plan_layer(lp, n)
    keep = lp.kept
    router = layer.router[keep].copy()
    w_in = layer.w_in[keep].copy()
    w_out = layer.w_out[keep].copy()
    pos = {i: p for p, i in enumerate(keep)}
    for action in lp.actions:
        if action.action != ACTION_REPLACE_MEAN:
            continue
        members = action.members
        router[pos[action.kept]] = np.mean(layer.router[members], axis=0)
        w_in[pos[action.kept]] = np.mean(layer.w_in[members], axis=0)
        w_out[pos[action.kept]] = np.mean(layer.w_out[members], axis=0)
    return MoeLayer(router, w_in, w_out, layer.activation, min(layer.top_k, len(keep)))


def apply_expert_prune(model, plan):
    """Materialize a pruning plan as a new model (input model untouched)."""
    if len(plan.layers) != model.n_layers:
        raise ArgumentError("plan layer count does not match model")
    new_layers = [
        apply_layer_plan(layer, lp) for layer, lp in zip(model.layers, plan.layers)
    ]
    meta = dict(model.metadata)
    meta["expert_prune"] = {
        "engine": plan.engine,
        "pruned": [lp.pruned for lp in plan.layers],
    }
    return MoeModel(
        new_layers,
        renormalize=model.renormalize,
        residual=model.residual,
        metadata=meta,
    )


# ---------------------------------------------------------------------------
# engines


def combinatorial_prune(model, layer_index, k, data, ledger=None, cap=10000):
    """Exhaustive k-subset search; returns (subset, loss) at the true minimum.

    Ties resolve to the lexicographically smallest subset because
    enumeration is lexicographic and only strict improvements replace the
    incumbent.  Refuses layers whose subset count exceeds `cap` rather
    than silently grinding.
    """
    ev = LayerEvaluator(model, layer_index, data)
    n = ev.layer.n_experts
    if not 0 <= k < n:
        raise ArgumentError(f"subset size {k} outside [0, {n})")
    count = math.comb(n, k)
    if count > cap:
        raise ArgumentError(
            f"combinatorial search over {count} subsets exceeds the "
            f"enumeration cap of {cap}; use the greedy engines instead"
        )
    if k == 0:
        if ledger is not None:
            ledger.record("combinatorial", layer_index, selection=0, enumerated=0)
        return [], 0.0
    best = None
    best_loss = np.inf
    for subset in itertools.combinations(range(n), k):
        loss = ev.loss(subset)
        if loss < best_loss:
            best_loss = loss
            best = list(subset)
    if ledger is not None:
        ledger.record(
            "combinatorial", layer_index, selection=ev.calls, enumerated=ev.calls
        )
    return best, float(best_loss)


@dataclass
class GreedyConfig:
    penalty: float = 2.0  # subtracted when a candidate is its cluster's last survivor
    prune_first: float = 4.0  # score handed to zero-loss experts; must exceed any base score
    kappa: int = 3  # O(1): below this many clusters, rebuild members as their mean

    def __post_init__(self):
        if self.penalty <= 0:
            raise ArgumentError("penalty must be positive")
        if self.prune_first <= max(1.0, self.penalty):
            raise ArgumentError(
                "prune_first must exceed both the penalty and 1 (the largest "
                "possible base score) so zero-loss experts always go first"
            )
        if self.kappa < 0:
            raise ArgumentError("kappa must be non-negative")


def greedy_prune_on(model, layer_index, clusters, k, data, config=None, ledger=None):
    """Greedy expert pruning from single-expert losses (n evaluations).

    Base scores are normalized inverse losses; a candidate whose cluster
    would be wiped out is penalized; zero-loss experts score prune_first
    and go before everything else.  Ties break to the lowest index.
    Returns (subset ascending, loss of that subset).
    """
    config = config or GreedyConfig()
    ev = LayerEvaluator(model, layer_index, data)
    n = ev.layer.n_experts
    if not 0 <= k < n:
        raise ArgumentError(f"subset size {k} outside [0, {n})")
    members = {i: set(c) for c in clusters for i in c}
    if sorted(members) != list(range(n)):
        raise ArgumentError("clusters do not partition the layer's experts")
    if k == 0:
        if ledger is not None:
            ledger.record("greedy-on", layer_index, selection=0)
        return [], 0.0
    singles = [ev.loss([i]) for i in range(n)]
    z = sum(1.0 / e for e in singles if e > 0.0)
    base = [
        (1.0 / e) / z if e > 0.0 else None  # None marks the prune-first class
        for e in singles
    ]
    pruned = set()
    for _ in range(k):
        best_i = None
        best_score = -np.inf
        for i in range(n):
            if i in pruned:
                continue
            if base[i] is None:
                score = config.prune_first
            else:
                score = base[i]
                if not (members[i] - pruned - {i}):
                    score -= config.penalty
            if score > best_score:
                best_score = score
                best_i = i
        pruned.add(best_i)
    subset = sorted(pruned)
    final_loss = ev.loss(subset)
    if ledger is not None:
        ledger.record("greedy-on", layer_index, selection=n, verification=1)
    return subset, float(final_loss)


def _cluster_mean_flat(layer, members):
    stack = np.stack([layer.expert(i).concat_flat() for i in members])
    return np.mean(stack, axis=0)


def greedy_prune_o1(model, layer_index, clusters, config=None, ledger=None):
    """Representative-per-cluster pruning with zero calibration forwards.

    With at least kappa clusters in the layer, each cluster keeps the member
    nearest (Euclidean, on concatenated parameters) to the cluster mean,
    unchanged.  With fewer than kappa clusters -- heavy collapse -- the kept
    slot is instead rebuilt as the member mean, router row included.
    Returns a LayerPlan.
    """
    config = config or GreedyConfig()
    layer = model.layers[layer_index]
    n = layer.n_experts
    flat = sorted(i for c in clusters for i in c)
    if flat != list(range(n)):
        raise ArgumentError("clusters do not partition the layer's experts")
    reconstruct = len(clusters) < config.kappa
    actions = []
    kept = []
    for c in sorted([sorted(c) for c in clusters], key=lambda c: c[0]):
        if reconstruct:
            rep = c[0]
            action = ACTION_REPLACE_MEAN
        else:
            mean = _cluster_mean_flat(layer, c)
            rep = c[0]
            best_d = None
            for i in c:
                dist = frobenius_norm(layer.expert(i).concat_flat() - mean)
                if best_d is None or dist < best_d:
                    best_d = dist
                    rep = i
            action = ACTION_KEEP_NEAREST
        kept.append(rep)
        actions.append(ClusterAction(c, rep, action))
    pruned = sorted(set(range(n)) - set(kept))
    if ledger is not None:
        ledger.record("greedy-o1", layer_index, selection=0)
    return LayerPlan(pruned, sorted(kept), actions)
