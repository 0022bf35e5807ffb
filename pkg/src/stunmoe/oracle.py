"""Verification harness.

Tools to check the pruning machinery against ground truth: exact
subset-search cost counts, planted-cluster recovery scoring, per-layer
engine comparisons against the exhaustive optimum, and seeded head-to-head
runs of the full pipeline against unstructured-only pruning.

Engine comparisons report both the loss ratio against the exhaustive
optimum and the absolute difference; the ratio alone turns useless when
the optimum is zero (planted duplicates), where 0/0 counts as 1 and x/0 as
infinity.  Experiment rows carry the seed and a hash of the configuration
so CSV/JSON outputs stay attributable.
"""

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field, replace

from stunmoe.calibration import generate_calibration
from stunmoe.errors import ArgumentError
from stunmoe.pipeline import output_deviation, run_stun
from stunmoe.rng import SeededRng
from stunmoe.structured import (
    GreedyConfig,
    LayerEvaluator,
    apply_layer_plan,
    combinatorial_prune,
    greedy_prune_o1,
    greedy_prune_on,
)
from stunmoe.synth import generate_synthetic


def subset_count(n, k):
    """Exact number of k-subsets of n items, as an arbitrary-precision int."""
    if n < 0 or k < 0:
        raise ArgumentError("subset_count needs non-negative arguments")
    return math.comb(n, k)


def config_hash(*parts):
    """Short stable digest of JSON-serializable experiment inputs."""
    blob = json.dumps(parts, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


# ---------------------------------------------------------------------------
# cost accounting


@dataclass
class CostLedger:
    """Counts reconstruction-loss forwards per engine and layer.

    selection: forwards spent choosing the subset (the quantity the
    complexity claims are about).  verification: the single forward pricing
    an already-chosen subset.  enumerated: subsets visited exhaustively.
    """

    entries: dict = field(default_factory=dict)

    def record(self, engine, layer_index, selection=0, verification=0, enumerated=0):
        per_layer = self.entries.setdefault(engine, {})
        slot = per_layer.setdefault(
            int(layer_index), {"selection": 0, "verification": 0, "enumerated": 0}
        )
        slot["selection"] += selection
        slot["verification"] += verification
        slot["enumerated"] += enumerated

    def selection_forwards(self, engine, layer_index=None):
        per_layer = self.entries.get(engine, {})
        if layer_index is not None:
            return per_layer.get(layer_index, {}).get("selection", 0)
        return sum(slot["selection"] for slot in per_layer.values())

    def verification_forwards(self, engine, layer_index=None):
        per_layer = self.entries.get(engine, {})
        if layer_index is not None:
            return per_layer.get(layer_index, {}).get("verification", 0)
        return sum(slot["verification"] for slot in per_layer.values())

    def to_dict(self):
        return {
            engine: {str(layer): dict(slot) for layer, slot in per_layer.items()}
            for engine, per_layer in self.entries.items()
        }


# ---------------------------------------------------------------------------
# cluster recovery


def adjusted_rand_index(a, b):
    """Adjusted Rand index between two partitions (lists of member lists).

    1 = identical grouping, ~0 = chance agreement.  The degenerate 0/0 case
    (both partitions trivial in the same way) only arises for identical
    partitions and scores 1.
    """
    labels_a = _labels(a)
    labels_b = _labels(b)
    if len(labels_a) != len(labels_b):
        raise ArgumentError("partitions cover different item counts")
    n = len(labels_a)
    if n == 0:
        raise ArgumentError("partitions are empty")
    table = {}
    for la, lb in zip(labels_a, labels_b):
        table[(la, lb)] = table.get((la, lb), 0) + 1
    a_sizes = {}
    b_sizes = {}
    for (la, lb), c in table.items():
        a_sizes[la] = a_sizes.get(la, 0) + c
        b_sizes[lb] = b_sizes.get(lb, 0) + c
    sum_ij = sum(math.comb(c, 2) for c in table.values())
    sum_a = sum(math.comb(c, 2) for c in a_sizes.values())
    sum_b = sum(math.comb(c, 2) for c in b_sizes.values())
    pairs = math.comb(n, 2)
    expected = sum_a * sum_b / pairs if pairs else 0.0
    maximum = (sum_a + sum_b) / 2.0
    if maximum == expected:
        return 1.0 if _canonical(a) == _canonical(b) else 0.0
    return float((sum_ij - expected) / (maximum - expected))


def _labels(partition):
    members = sorted(i for c in partition for i in c)
    if members != list(range(len(members))):
        raise ArgumentError("partition is not over a contiguous index range")
    labels = [0] * len(members)
    for ci, cluster in enumerate(partition):
        for i in cluster:
            labels[i] = ci
    return labels


def _canonical(partition):
    return sorted(sorted(int(i) for i in c) for c in partition)


@dataclass
class RecoveryScore:
    exact: bool
    agreement: float  # mean adjusted Rand index over layers
    per_layer: list


def cluster_recovery(found, planted):
    """Score a ClusterMap against the planted partition (per-layer lists)."""
    if len(found.layers) != len(planted):
        raise ArgumentError("layer counts differ between found and planted")
    per_layer = []
    exact = True
    for got, want in zip(found.layers, planted):
        if _canonical(got) != _canonical(want):
            exact = False
        per_layer.append(adjusted_rand_index(got, want))
    agreement = sum(per_layer) / len(per_layer)
    return RecoveryScore(exact, float(agreement), per_layer)


# ---------------------------------------------------------------------------
# engine comparison


def greedy_vs_oracle(model, data, clusters, config=None, ledger=None):
    """Compare all three engines per layer at matched subset sizes.

    clusters: a ClusterMap; each layer prunes down to one expert per
    cluster, so the subset size is n - cluster_count.  Returns a list of
    row dicts with losses, loss ratios against the exhaustive optimum, and
    the ledger's selection counts.
    """
    config = config or GreedyConfig()
    ledger = ledger if ledger is not None else CostLedger()
    rows = []
    for m, layer in enumerate(model.layers):
        cl = clusters.layers[m]
        n = layer.n_experts
        k = n - len(cl)
        best_subset, best_loss = combinatorial_prune(model, m, k, data, ledger=ledger)
        on_subset, on_loss = greedy_prune_on(
            model, m, cl, k, data, config, ledger=ledger
        )
        o1_plan = greedy_prune_o1(model, m, cl, config, ledger=ledger)
        ev = LayerEvaluator(model, m, data)
        o1_loss = ev.loss_for_layer(apply_layer_plan(layer, o1_plan))
        ledger.record("greedy-o1", m, verification=1)

        def ratio(loss):
            if best_loss == 0.0:
                return 1.0 if loss == 0.0 else math.inf
            return loss / best_loss

        rows.append(
            {
                "layer": m,
                "n_experts": n,
                "k": k,
                "combinatorial": {
                    "subset": best_subset,
                    "loss": best_loss,
                    "selection_forwards": ledger.selection_forwards(
                        "combinatorial", m
                    ),
                },
                "on": {
                    "subset": on_subset,
                    "loss": on_loss,
                    "ratio": ratio(on_loss),
                    "abs_diff": on_loss - best_loss,
                    "selection_forwards": ledger.selection_forwards("greedy-on", m),
                },
                "o1": {
                    "subset": o1_plan.pruned,
                    "loss": o1_loss,
                    "ratio": ratio(o1_loss),
                    "abs_diff": o1_loss - best_loss,
                    "selection_forwards": ledger.selection_forwards("greedy-o1", m),
                },
            }
        )
    return rows


def greedy_rows_to_csv(rows):
    """Flatten greedy_vs_oracle rows into CSV text."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(
        [
            "layer",
            "n_experts",
            "k",
            "comb_loss",
            "on_loss",
            "on_ratio",
            "on_abs_diff",
            "o1_loss",
            "o1_ratio",
            "o1_abs_diff",
        ]
    )
    for r in rows:
        writer.writerow(
            [
                r["layer"],
                r["n_experts"],
                r["k"],
                r["combinatorial"]["loss"],
                r["on"]["loss"],
                r["on"]["ratio"],
                r["on"]["abs_diff"],
                r["o1"]["loss"],
                r["o1"]["ratio"],
                r["o1"]["abs_diff"],
            ]
        )
    return buf.getvalue()


# ---------------------------------------------------------------------------
# pipeline comparison


@dataclass
class PairedSummary:
    rows: list  # per seed: {"seed", "config_hash", "stun", "unstructured"}
    wins: int  # stun deviation <= unstructured deviation
    strict_wins: int
    win_rate: float
    mean_stun: float
    mean_unstructured: float
    ledgers: dict  # per arm, CostLedger.to_dict()

    @property
    def seeds(self):
        return len(self.rows)

    def to_json(self):
        return json.dumps(
            {
                "kind": "paired",
                "version": 1,
                "seeds": self.seeds,
                "wins": self.wins,
                "strict_wins": self.strict_wins,
                "win_rate": self.win_rate,
                "mean_stun": self.mean_stun,
                "mean_unstructured": self.mean_unstructured,
                "ledgers": self.ledgers,
                "rows": self.rows,
            },
            indent=2,
        )

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["seed", "config_hash", "stun", "unstructured", "win"])
        for r in self.rows:
            writer.writerow(
                [
                    r["seed"],
                    r["config_hash"],
                    r["stun"],
                    r["unstructured"],
                    int(r["stun"] <= r["unstructured"]),
                ]
            )
        return buf.getvalue()


def paired_comparison(spec, config, seeds, calib_shape=(8, 32), heldout_shape=(4, 32)):
    """Full pipeline vs unstructured-only at matched total sparsity.

    Per seed, regenerates the model, calibration and held-out tokens from
    spec, runs the pipeline once as configured and once with phi_e = 0, and
    compares held-out output deviations.  A win is stun <= unstructured.
    """
    seeds = [int(s) for s in seeds]
    if len(seeds) < 2:
        raise ArgumentError("paired comparison needs at least two seeds")
    digest = config_hash(spec.to_dict(), config.to_dict(), calib_shape, heldout_shape)
    stun_ledger = CostLedger()
    uns_ledger = CostLedger()
    rows = []
    for seed in seeds:
        root = SeededRng(seed)
        model = generate_synthetic(spec, root.spawn(0))
        data = generate_calibration(
            calib_shape[0], calib_shape[1], spec.model_dim, root.spawn(1)
        )
        held = generate_calibration(
            heldout_shape[0], heldout_shape[1], spec.model_dim, root.spawn(2)
        )
        stun_model, _ = run_stun(model, data, config, ledger=stun_ledger)
        uns_model, _ = run_stun(
            model, data, replace(config, phi_e=0.0), ledger=uns_ledger
        )
        rows.append(
            {
                "seed": seed,
                "config_hash": digest,
                "stun": output_deviation(model, stun_model, held),
                "unstructured": output_deviation(model, uns_model, held),
            }
        )
    wins = sum(1 for r in rows if r["stun"] <= r["unstructured"])
    strict = sum(1 for r in rows if r["stun"] < r["unstructured"])
    return PairedSummary(
        rows,
        wins,
        strict,
        wins / len(rows),
        sum(r["stun"] for r in rows) / len(rows),
        sum(r["unstructured"] for r in rows) / len(rows),
        {"stun": stun_ledger.to_dict(), "unstructured": uns_ledger.to_dict()},
    )
