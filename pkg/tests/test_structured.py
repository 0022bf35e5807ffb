"""Expert distances, clustering, reconstruction loss, and the three engines."""

import itertools
import math

import numpy as np
import pytest

from stunmoe.calibration import CoactivationStats, collect_coactivations
from stunmoe.errors import ArgumentError, FormatError, ShapeError
from stunmoe.model import MoeModel, forward_model_batch
from stunmoe.oracle import CostLedger
from stunmoe.structured import (
    ACTION_KEEP_NEAREST,
    ACTION_REPLACE_MEAN,
    ClusterAction,
    ClusterMap,
    DistanceMatrix,
    GreedyConfig,
    LayerEvaluator,
    LayerPlan,
    PruningPlan,
    agglomerative_cluster,
    apply_expert_prune,
    apply_layer_plan,
    behavioral_distance,
    combinatorial_prune,
    dsatur_cluster,
    greedy_prune_o1,
    greedy_prune_on,
    reconstruction_loss,
    threshold_search,
)
from stunmoe.synth import SynthSpec, generate_synthetic

from helpers import (
    make_data,
    make_layer,
    naive_layer_forward,
    random_layer,
    random_model,
    seeded,
)


def dm(values, layer_index=0, lambda1=1.0, lambda2=0.0):
    v = np.asarray(values, dtype=np.float64)
    return DistanceMatrix(layer_index, v, lambda1, lambda2)


def zero_stats(model):
    mats = [np.zeros((l.n_experts, l.n_experts)) for l in model.layers]
    return CoactivationStats(mats, [m.astype(np.int64) for m in mats], 0, True)


def scalar_expert_layer(pairs, top_k=1):
    """d=h=1 layer whose expert i has concat parameters pairs[i] = (a, b)."""
    n = len(pairs)
    return make_layer(
        np.ones((n, 1)),
        np.array([[[a]] for a, _ in pairs]),
        np.array([[[b]] for _, b in pairs]),
        activation="relu",
        top_k=top_k,
    )


# ---------------------------------------------------------------------------
# behavioral distance


def test_identical_experts_have_zero_distance():
    layer = scalar_expert_layer([(1.0, 2.0), (1.0, 2.0)])
    model = MoeModel([layer])
    d = behavioral_distance(model, zero_stats(model))[0]
    assert d.values[0, 1] == 0.0


def test_unit_basis_experts_distance_root_two():
    layer = scalar_expert_layer([(1.0, 0.0), (0.0, 1.0)])
    model = MoeModel([layer])
    d = behavioral_distance(model, zero_stats(model), lambda1=1.0, lambda2=0.0)[0]
    assert d.values[0, 1] == pytest.approx(math.sqrt(2.0), abs=1e-15)


def test_coactivation_discounts_distance():
    layer = scalar_expert_layer([(1.0, 0.0), (0.0, 1.0)])
    model = MoeModel([layer])
    a = np.array([[0.0, 0.25], [0.25, 0.0]])
    stats = CoactivationStats([a], [np.zeros((2, 2), dtype=np.int64)], 4, False)
    d = behavioral_distance(model, stats, lambda1=1.0, lambda2=1.0)[0]
    assert d.values[0, 1] == pytest.approx(math.sqrt(2.0) - 0.25, abs=1e-15)
    half = behavioral_distance(model, stats, lambda1=0.5, lambda2=2.0)[0]
    assert half.values[0, 1] == pytest.approx(0.5 * math.sqrt(2.0) - 0.5, abs=1e-15)


def test_distance_matrix_symmetric_zero_diagonal():
    rng = seeded(0)
    model = random_model(rng, l=2, n=5, d=6, h=4, top_k=2)
    stats = collect_coactivations(model, make_data(rng, 2, 16, 6))
    for d in behavioral_distance(model, stats, lambda1=1.0, lambda2=1.0):
        np.testing.assert_array_equal(d.values, d.values.T)
        assert np.all(np.diag(d.values) == 0.0)
        assert d.n_experts == 5


def test_distance_validation():
    model = random_model(seeded(1), l=2, n=3, d=4, h=4)
    with pytest.raises(ArgumentError):
        behavioral_distance(model, zero_stats(model), lambda1=-1.0)
    short = CoactivationStats([np.zeros((3, 3))], [np.zeros((3, 3))], 0, True)
    with pytest.raises(ShapeError):
        behavioral_distance(model, short)
    bad = CoactivationStats([np.zeros((3, 3)), np.zeros((2, 2))], [], 0, True)
    with pytest.raises(ShapeError):
        behavioral_distance(model, bad)


# ---------------------------------------------------------------------------
# cluster maps


def test_cluster_map_canonical_form():
    cm = ClusterMap([[[3, 1], [0, 2]]])
    assert cm.layers == [[[0, 2], [1, 3]]]
    assert cm.n_experts(0) == 4 and cm.cluster_count(0) == 2
    assert list(cm.assignment(0)) == [0, 1, 0, 1]
    assert cm.cluster_of(0, 3) == [1, 3]
    with pytest.raises(ArgumentError):
        cm.cluster_of(0, 9)


def test_cluster_map_rejects_non_partitions():
    with pytest.raises(ArgumentError):
        ClusterMap([[[0, 1], [1, 2]]])
    with pytest.raises(ArgumentError):
        ClusterMap([[[0, 1], [3]]])
    with pytest.raises(ArgumentError):
        ClusterMap([[[0], []]])


def test_cluster_map_json_round_trip():
    cm = ClusterMap([[[0, 1], [2]], [[0], [1], [2]]], meta={"threshold": 0.5})
    back = ClusterMap.from_json(cm.to_json())
    assert back.layers == cm.layers
    assert back.meta == cm.meta
    with pytest.raises(FormatError):
        ClusterMap.from_json("{not json")
    with pytest.raises(FormatError):
        ClusterMap.from_json('{"kind": "plan", "version": 1}')
    with pytest.raises(FormatError):
        ClusterMap.from_json('{"kind": "clusters", "version": 2, "layers": []}')
    with pytest.raises(FormatError):
        ClusterMap.from_json('{"kind": "clusters", "version": 1, "layers": [{}]}')


# ---------------------------------------------------------------------------
# agglomerative clustering


def two_pair_matrix():
    d = np.full((4, 4), 1.0)
    np.fill_diagonal(d, 0.0)
    d[0, 1] = d[1, 0] = 0.1
    d[2, 3] = d[3, 2] = 0.1
    return d


def test_agglomerative_merges_close_pairs():
    cm = agglomerative_cluster([dm(two_pair_matrix())], threshold=0.5)
    assert cm.layers[0] == [[0, 1], [2, 3]]
    assert cm.meta["method"] == "agglomerative"


def test_agglomerative_threshold_extremes():
    d = two_pair_matrix()
    low = agglomerative_cluster([dm(d)], threshold=0.05)
    assert low.layers[0] == [[0], [1], [2], [3]]
    # strict <: a threshold equal to the smallest linkage admits nothing
    at = agglomerative_cluster([dm(d)], threshold=0.1)
    assert at.layers[0] == [[0], [1], [2], [3]]
    high = agglomerative_cluster([dm(d)], threshold=1.5)
    assert high.layers[0] == [[0, 1, 2, 3]]


def random_distance(rng, n):
    v = rng.uniform((n, n))
    v = np.triu(v, 1)
    v = v + v.T
    return v


def test_complete_linkage_keeps_clusters_tight():
    # complete linkage merges only while the farthest cross pair is below
    # the threshold, so every final cluster has all pairwise d < t
    for seed in range(10):
        d = random_distance(seeded(seed), 7)
        t = 0.4
        cm = agglomerative_cluster([dm(d)], threshold=t)
        for cluster in cm.layers[0]:
            for i, j in itertools.combinations(cluster, 2):
                assert d[i, j] < t


def test_clustering_scale_invariant():
    for seed in range(5):
        d = random_distance(seeded(seed), 6)
        base = agglomerative_cluster([dm(d)], threshold=0.5)
        scaled = agglomerative_cluster([dm(d * 37.0)], threshold=0.5 * 37.0)
        assert base.layers == scaled.layers


def test_agglomerative_handles_multiple_layers():
    cm = agglomerative_cluster(
        [dm(two_pair_matrix(), layer_index=0), dm(np.zeros((2, 2)), layer_index=1)],
        threshold=0.5,
    )
    assert cm.layers[0] == [[0, 1], [2, 3]]
    assert cm.layers[1] == [[0, 1]]


# ---------------------------------------------------------------------------
# threshold search


def test_threshold_search_hits_every_count_without_ties():
    for seed in range(8):
        d = random_distance(seeded(seed), 6)
        for target in range(1, 7):
            ts, cm = threshold_search([dm(d)], target)
            assert cm.cluster_count(0) == target
            assert cm.meta["achieved"] == [target]
            assert cm.meta["targets"] == [target]


def test_threshold_search_extremes():
    d = two_pair_matrix()
    ts, cm = threshold_search([dm(d)], 4)
    assert ts[0] == 0.1  # the smallest pairwise distance admits nothing (strict <)
    assert cm.layers[0] == [[0], [1], [2], [3]]
    ts, cm = threshold_search([dm(d)], 1)
    assert ts[0] > 1.0
    assert cm.layers[0] == [[0, 1, 2, 3]]


def test_threshold_search_tie_merges_through():
    # both 0.1 merges happen at the same height, so a 3-cluster cut does not
    # exist; the search must settle on the next reachable count below
    ts, cm = threshold_search([dm(two_pair_matrix())], 3)
    assert cm.cluster_count(0) == 2
    assert cm.layers[0] == [[0, 1], [2, 3]]
    assert cm.meta["achieved"] == [2]
    assert cm.meta["targets"] == [3]


def test_threshold_search_per_layer_targets():
    d = two_pair_matrix()
    ts, cm = threshold_search([dm(d), dm(d)], [4, 1])
    assert cm.cluster_count(0) == 4 and cm.cluster_count(1) == 1
    with pytest.raises(ArgumentError):
        threshold_search([dm(d)], [2, 2])
    with pytest.raises(ArgumentError):
        threshold_search([dm(d)], 5)
    with pytest.raises(ArgumentError):
        threshold_search([dm(d)], 0)


def test_cluster_count_monotone_in_threshold():
    d = random_distance(seeded(3), 7)
    grid = sorted(set(d[np.triu_indices(7, 1)]))
    counts = [
        agglomerative_cluster([dm(d)], threshold=t).cluster_count(0) for t in grid
    ]
    assert counts == sorted(counts, reverse=True)


# ---------------------------------------------------------------------------
# dsatur


def path_conflict_matrix():
    # conflicts (d > t at t=0.5) form the path 0-1-2-3
    d = np.full((4, 4), 0.1)
    np.fill_diagonal(d, 0.0)
    for i, j in [(0, 1), (1, 2), (2, 3)]:
        d[i, j] = d[j, i] = 1.0
    return d


def min_compatible_partition(d, t):
    """Exhaustive minimum number of pairwise-compatible groups."""
    n = d.shape[0]

    def partitions(items):
        if not items:
            yield []
            return
        first, rest = items[0], items[1:]
        for p in partitions(rest):
            for i in range(len(p)):
                yield p[:i] + [[first] + p[i]] + p[i + 1 :]
            yield [[first]] + p

    best = n
    for p in partitions(list(range(n))):
        if all(d[i, j] <= t for g in p for i, j in itertools.combinations(g, 2)):
            best = min(best, len(p))
    return best


def test_dsatur_on_path_graph_matches_exhaustive_optimum():
    d = path_conflict_matrix()
    cm = dsatur_cluster([dm(d)], threshold=0.5)
    assert cm.cluster_count(0) == 2 == min_compatible_partition(d, 0.5)
    assert cm.layers[0] == [[0, 2], [1, 3]]


def test_dsatur_groups_are_pairwise_compatible():
    for seed in range(10):
        d = random_distance(seeded(seed + 50), 7)
        t = 0.5
        cm = dsatur_cluster([dm(d)], threshold=t)
        for cluster in cm.layers[0]:
            for i, j in itertools.combinations(cluster, 2):
                assert d[i, j] <= t
        assert cm.cluster_count(0) >= min_compatible_partition(d, t)
        assert cm.meta["method"] == "dsatur"


def test_dsatur_boundary_distance_is_compatible():
    d = np.array([[0.0, 0.5], [0.5, 0.0]])
    cm = dsatur_cluster([dm(d)], threshold=0.5)
    assert cm.layers[0] == [[0, 1]]


# ---------------------------------------------------------------------------
# reconstruction loss


def test_empty_subset_costs_nothing():
    rng = seeded(4)
    model = random_model(rng, l=2, n=4, d=5, h=5)
    data = make_data(rng, 2, 8, 5)
    assert reconstruction_loss(model, 0, [], data) == 0.0
    assert reconstruction_loss(model, 1, [], data) == 0.0


def test_pruning_an_exact_duplicate_costs_nothing():
    spec = SynthSpec(
        n_layers=1,
        n_experts=2,
        model_dim=6,
        hidden_dim=6,
        top_k=1,
        clusters_per_layer=1,
        noise_sigma=0.0,
        renormalize=True,
    )
    model = generate_synthetic(spec, seeded(5))
    data = make_data(seeded(6), 2, 10, 6)
    assert reconstruction_loss(model, 0, [1], data) == 0.0


def naive_restricted_loss(model, layer_index, subset, data):
    """Two independent per-token forwards; frobenius of the stacked diff."""
    layer = model.layers[layer_index]
    keep = [i for i in range(layer.n_experts) if i not in set(subset)]
    k = min(layer.top_k, len(keep))
    x = data.stacked()
    for lay in model.layers[:layer_index]:
        outs = np.stack(
            [
                naive_layer_forward(
                    lay.router, lay.w_in, lay.w_out, lay.activation.value,
                    lay.top_k, t, model.renormalize,
                )
                for t in x
            ]
        )
        x = x + outs if model.residual else outs
    total = 0.0
    for t in x:
        full = naive_layer_forward(
            layer.router, layer.w_in, layer.w_out, layer.activation.value,
            layer.top_k, t, model.renormalize,
        )
        pruned = naive_layer_forward(
            layer.router[keep], layer.w_in[keep], layer.w_out[keep],
            layer.activation.value, k, t, model.renormalize,
        )
        total += float(np.sum((full - pruned) ** 2))
    return math.sqrt(total)


@pytest.mark.parametrize("layer_index", [0, 1])
def test_loss_matches_naive_two_pass_oracle(layer_index):
    rng = seeded(11)
    model = random_model(rng, l=2, n=3, d=5, h=4, top_k=1)
    data = make_data(rng, 2, 12, 5)
    for subset in ([0], [2], [0, 1]):
        got = reconstruction_loss(model, layer_index, subset, data)
        want = naive_restricted_loss(model, layer_index, subset, data)
        assert got == pytest.approx(want, abs=1e-10)


def test_loss_subset_validation():
    rng = seeded(7)
    model = random_model(rng, l=1, n=3, d=4, h=4)
    data = make_data(rng, 1, 4, 4)
    ev = LayerEvaluator(model, 0, data)
    with pytest.raises(ArgumentError):
        ev.loss([0, 1, 2])
    with pytest.raises(ArgumentError):
        ev.loss([0, 0])
    with pytest.raises(ArgumentError):
        ev.loss([3])
    with pytest.raises(ArgumentError):
        LayerEvaluator(model, 5, data)
    with pytest.raises(ShapeError):
        LayerEvaluator(model, 0, make_data(seeded(8), 1, 4, 3))


def test_evaluator_counts_calls():
    rng = seeded(9)
    model = random_model(rng, l=1, n=4, d=4, h=4)
    ev = LayerEvaluator(model, 0, make_data(rng, 1, 6, 4))
    assert ev.calls == 0
    ev.loss([0])
    ev.loss([1, 2])
    assert ev.calls == 2


# ---------------------------------------------------------------------------
# combinatorial engine


def test_combinatorial_k0_prunes_nothing():
    rng = seeded(10)
    model = random_model(rng, l=1, n=3, d=4, h=4)
    ledger = CostLedger()
    subset, loss = combinatorial_prune(model, 0, 0, make_data(rng, 1, 4, 4), ledger=ledger)
    assert subset == [] and loss == 0.0
    assert ledger.selection_forwards("combinatorial", 0) == 0


def test_combinatorial_enumerates_all_subsets():
    rng = seeded(11)
    model = random_model(rng, l=1, n=4, d=4, h=4)
    data = make_data(rng, 1, 8, 4)
    ledger = CostLedger()
    subset, loss = combinatorial_prune(model, 0, 2, data, ledger=ledger)
    assert ledger.selection_forwards("combinatorial", 0) == 6  # C(4,2)
    assert ledger.entries["combinatorial"][0]["enumerated"] == 6
    # the returned loss is the true minimum over an independent enumeration
    ev = LayerEvaluator(model, 0, data)
    losses = {s: ev.loss(s) for s in itertools.combinations(range(4), 2)}
    assert loss == min(losses.values())
    assert tuple(subset) == min(s for s, v in losses.items() if v == loss)


def test_combinatorial_finds_planted_duplicates():
    spec = SynthSpec(
        n_layers=1,
        n_experts=4,
        model_dim=6,
        hidden_dim=6,
        top_k=1,
        clusters_per_layer=2,
        noise_sigma=0.0,
        renormalize=True,
    )
    model = generate_synthetic(spec, seeded(12))
    data = make_data(seeded(13), 2, 16, 6)
    subset, loss = combinatorial_prune(model, 0, 2, data)
    # one member of each planted pair, lexicographically smallest on the tie
    assert subset == [0, 2]
    assert loss == 0.0


def test_combinatorial_cap_refuses_large_layers():
    rng = seeded(14)
    model = random_model(rng, l=1, n=6, d=4, h=4)
    data = make_data(rng, 1, 4, 4)
    with pytest.raises(ArgumentError, match="20 subsets exceeds the enumeration cap"):
        combinatorial_prune(model, 0, 3, data, cap=5)
    with pytest.raises(ArgumentError):
        combinatorial_prune(model, 0, 6, data)
    with pytest.raises(ArgumentError):
        combinatorial_prune(model, 0, -1, data)


# ---------------------------------------------------------------------------
# greedy O(n) engine


def test_greedy_on_all_duplicates_prunes_lowest_index():
    spec = SynthSpec(
        n_layers=1,
        n_experts=4,
        model_dim=6,
        hidden_dim=6,
        top_k=1,
        clusters_per_layer=1,
        noise_sigma=0.0,
        renormalize=True,
    )
    model = generate_synthetic(spec, seeded(15))
    data = make_data(seeded(16), 2, 8, 6)
    subset, loss = greedy_prune_on(model, 0, [[0, 1, 2, 3]], 1, data)
    assert subset == [0]
    assert loss == 0.0


def test_greedy_on_zero_loss_experts_outrank_the_penalty():
    # both members of each planted pair have zero single-expert loss, so
    # the prune-first class empties cluster {0, 1} before base scores or
    # the last-survivor penalty ever get a say
    spec = SynthSpec(
        n_layers=1,
        n_experts=4,
        model_dim=6,
        hidden_dim=6,
        top_k=1,
        clusters_per_layer=2,
        noise_sigma=0.0,
        renormalize=True,
    )
    model = generate_synthetic(spec, seeded(17))
    data = make_data(seeded(18), 2, 8, 6)
    subset, loss = greedy_prune_on(model, 0, [[0, 1], [2, 3]], 2, data)
    assert subset == [0, 1]
    assert loss > 0.0


def test_greedy_on_penalty_prevents_cluster_wipe():
    for seed in range(10):
        rng = seeded(100 + seed)
        model = random_model(rng, l=1, n=6, d=6, h=5, top_k=2)
        data = make_data(rng, 2, 12, 6)
        clusters = [[0, 1, 2], [3, 4], [5]]
        subset, _ = greedy_prune_on(model, 0, clusters, 3, data)
        for c in clusters:
            assert not set(c) <= set(subset), f"seed {seed} wiped {c}"


def test_greedy_on_singleton_clusters_take_the_argmin():
    rng = seeded(19)
    model = random_model(rng, l=1, n=5, d=5, h=5, top_k=2)
    data = make_data(rng, 2, 10, 5)
    singles = [reconstruction_loss(model, 0, [i], data) for i in range(5)]
    subset, loss = greedy_prune_on(model, 0, [[i] for i in range(5)], 1, data)
    assert subset == [int(np.argmin(singles))]
    assert loss == pytest.approx(min(singles))


def test_greedy_on_ledger_splits_selection_and_verification():
    rng = seeded(20)
    model = random_model(rng, l=1, n=6, d=4, h=4)
    data = make_data(rng, 1, 8, 4)
    ledger = CostLedger()
    greedy_prune_on(model, 0, [[i] for i in range(6)], 2, data, ledger=ledger)
    assert ledger.selection_forwards("greedy-on", 0) == 6
    assert ledger.verification_forwards("greedy-on", 0) == 1


def test_greedy_on_k0_and_validation():
    rng = seeded(21)
    model = random_model(rng, l=1, n=4, d=4, h=4)
    data = make_data(rng, 1, 4, 4)
    ledger = CostLedger()
    assert greedy_prune_on(model, 0, [[0, 1, 2, 3]], 0, data, ledger=ledger) == ([], 0.0)
    assert ledger.selection_forwards("greedy-on", 0) == 0
    with pytest.raises(ArgumentError):
        greedy_prune_on(model, 0, [[0, 1]], 1, data)
    with pytest.raises(ArgumentError):
        greedy_prune_on(model, 0, [[0, 1, 2, 3]], 4, data)


def test_greedy_config_validation():
    GreedyConfig(penalty=2.0, prune_first=4.0, kappa=3)
    with pytest.raises(ArgumentError):
        GreedyConfig(penalty=0.0)
    with pytest.raises(ArgumentError):
        GreedyConfig(penalty=2.0, prune_first=1.5)
    with pytest.raises(ArgumentError):
        GreedyConfig(prune_first=0.9, penalty=0.5)
    with pytest.raises(ArgumentError):
        GreedyConfig(kappa=-1)


# ---------------------------------------------------------------------------
# greedy O(1) engine


def test_o1_keeps_member_nearest_to_cluster_mean():
    # concat parameters (1,0), (0,1), (0.4,0.6): the mean is (0.467, 0.533)
    # and the third expert sits closest, so it is the representative
    layer = scalar_expert_layer([(1.0, 0.0), (0.0, 1.0), (0.4, 0.6)])
    model = MoeModel([layer])
    plan = greedy_prune_o1(model, 0, [[0, 1, 2]], config=GreedyConfig(kappa=1))
    assert plan.kept == [2]
    assert plan.pruned == [0, 1]
    assert plan.actions[0].action == ACTION_KEEP_NEAREST
    # the kept expert's parameters are untouched
    pruned = apply_layer_plan(layer, plan)
    np.testing.assert_array_equal(pruned.w_in[0], layer.w_in[2])
    np.testing.assert_array_equal(pruned.router[0], layer.router[2])


def test_o1_equidistant_tie_keeps_lowest_index():
    layer = scalar_expert_layer([(1.0, 0.0), (0.0, 1.0)])
    model = MoeModel([layer])
    plan = greedy_prune_o1(model, 0, [[0, 1]], config=GreedyConfig(kappa=1))
    assert plan.kept == [0]


def test_o1_heavy_collapse_rebuilds_cluster_means():
    # two clusters < kappa=3: kept slots become member means, router included
    layer = make_layer(
        [[1.0, 0.0], [3.0, 0.0], [0.0, 1.0], [0.0, 3.0]],
        [[[2.0, 0.0]], [[0.0, 0.0]], [[1.0, 1.0]], [[3.0, 3.0]]],
        [[[0.0], [2.0]], [[2.0], [0.0]], [[1.0], [1.0]], [[1.0], [3.0]]],
        activation="relu",
        top_k=1,
    )
    model = MoeModel([layer])
    plan = greedy_prune_o1(model, 0, [[0, 1], [2, 3]])
    assert [a.action for a in plan.actions] == [ACTION_REPLACE_MEAN] * 2
    assert plan.kept == [0, 2]
    pruned = apply_layer_plan(layer, plan)
    np.testing.assert_array_equal(pruned.w_in[0], [[1.0, 0.0]])
    np.testing.assert_array_equal(pruned.w_out[0], [[1.0], [1.0]])
    np.testing.assert_array_equal(pruned.router[0], [2.0, 0.0])
    np.testing.assert_array_equal(pruned.w_in[1], [[2.0, 2.0]])
    np.testing.assert_array_equal(pruned.router[1], [0.0, 2.0])


def test_o1_singleton_clusters_are_identity():
    rng = seeded(22)
    model = random_model(rng, l=1, n=4, d=4, h=4)
    ledger = CostLedger()
    plan = greedy_prune_o1(model, 0, [[0], [1], [2], [3]], ledger=ledger)
    assert plan.pruned == [] and plan.kept == [0, 1, 2, 3]
    assert ledger.selection_forwards("greedy-o1", 0) == 0
    pruned = apply_layer_plan(model.layers[0], plan)
    np.testing.assert_array_equal(pruned.router, model.layers[0].router)
    np.testing.assert_array_equal(pruned.w_in, model.layers[0].w_in)
    np.testing.assert_array_equal(pruned.w_out, model.layers[0].w_out)


def test_o1_exact_duplicates_reconstruct_losslessly():
    spec = SynthSpec(
        n_layers=2,
        n_experts=6,
        model_dim=6,
        hidden_dim=6,
        top_k=1,
        clusters_per_layer=3,
        noise_sigma=0.0,
        renormalize=True,
    )
    model = generate_synthetic(spec, seeded(23))
    data = make_data(seeded(24), 2, 16, 6)
    for m in range(2):
        plan = greedy_prune_o1(model, m, model.metadata["planted"][m])
        ev = LayerEvaluator(model, m, data)
        loss = ev.loss_for_layer(apply_layer_plan(model.layers[m], plan))
        assert loss <= 1e-9


def test_o1_validation():
    model = random_model(seeded(25), l=1, n=3, d=3, h=3)
    with pytest.raises(ArgumentError):
        greedy_prune_o1(model, 0, [[0, 1]])


# ---------------------------------------------------------------------------
# plans and application


def test_plan_json_round_trip():
    plan = PruningPlan(
        [
            LayerPlan([1], [0, 2], [ClusterAction([0, 1], 0, ACTION_KEEP_NEAREST)]),
            LayerPlan([], [0, 1, 2]),
        ],
        engine="greedy-o1",
        meta={"kappa": 3},
    )
    back = PruningPlan.from_json(plan.to_json())
    assert back.engine == "greedy-o1"
    assert back.meta == {"kappa": 3}
    assert [lp.pruned for lp in back.layers] == [[1], []]
    assert [lp.kept for lp in back.layers] == [[0, 2], [0, 1, 2]]
    assert back.layers[0].actions[0].members == [0, 1]
    with pytest.raises(FormatError):
        PruningPlan.from_json("[]")
    with pytest.raises(FormatError):
        PruningPlan.from_json('{"kind": "plan", "version": 7, "layers": []}')
    with pytest.raises(FormatError):
        PruningPlan.from_json('{"kind": "plan", "version": 1, "layers": [{"pruned": []}]}')


def test_plan_validation():
    with pytest.raises(ArgumentError):
        LayerPlan([0], [0, 1])
    with pytest.raises(ArgumentError):
        LayerPlan([0, 1], [])
    with pytest.raises(ArgumentError):
        ClusterAction([0, 1], 2, ACTION_KEEP_NEAREST)
    with pytest.raises(ArgumentError):
        ClusterAction([0, 1], 0, "swap")


def test_apply_empty_plan_is_bit_exact():
    rng = seeded(26)
    model = random_model(rng, l=2, n=3, d=4, h=4)
    plan = PruningPlan(
        [LayerPlan([], [0, 1, 2]), LayerPlan([], [0, 1, 2])], engine="none"
    )
    out = apply_expert_prune(model, plan)
    for a, b in zip(model.layers, out.layers):
        np.testing.assert_array_equal(a.router, b.router)
        np.testing.assert_array_equal(a.w_in, b.w_in)
        np.testing.assert_array_equal(a.w_out, b.w_out)
    assert out.metadata["expert_prune"]["pruned"] == [[], []]


def test_apply_prune_matches_restricted_forward():
    rng = seeded(27)
    model = random_model(rng, l=2, n=5, d=6, h=5, top_k=2)
    plan = PruningPlan(
        [LayerPlan([1, 3], [0, 2, 4]), LayerPlan([4], [0, 1, 2, 3])], engine="test"
    )
    pruned = apply_expert_prune(model, plan)
    x = rng.normal((9, 6))
    keeps = [[0, 2, 4], [0, 1, 2, 3]]
    manual = MoeModel(
        [layer.restricted(keep) for layer, keep in zip(model.layers, keeps)],
        renormalize=model.renormalize,
        residual=model.residual,
    )
    np.testing.assert_allclose(
        forward_model_batch(pruned, x), forward_model_batch(manual, x), atol=1e-10
    )
    # and the original model is untouched
    assert model.layers[0].n_experts == 5


def test_apply_plan_validation():
    model = random_model(seeded(28), l=2, n=3, d=3, h=3)
    with pytest.raises(ArgumentError):
        apply_expert_prune(model, PruningPlan([LayerPlan([0], [1, 2])], engine="x"))
    bad = PruningPlan(
        [LayerPlan([0], [1]), LayerPlan([], [0, 1, 2])], engine="x"
    )  # layer 0 not a partition of 3 experts
    with pytest.raises(ArgumentError):
        apply_expert_prune(model, bad)
    act = PruningPlan(
        [
            LayerPlan([0], [1, 2], [ClusterAction([0, 1], 0, ACTION_REPLACE_MEAN)]),
            LayerPlan([], [0, 1, 2]),
        ],
        engine="x",
    )  # action keeps expert 0, which the plan prunes
    with pytest.raises(ArgumentError):
        apply_expert_prune(model, act)
