"""Command-line interface.

Subcommands: gen (synthetic model), gen-data (calibration tokens), info,
cluster, prune-experts, prune-weights, run (full pipeline), sweep.

Exit codes: 0 success, 2 infeasible sparsity budget, 3 file or container
format problems, 4 bad arguments or config.
"""

import argparse
import json
import sys

from stunmoe.calibration import generate_calibration
from stunmoe.errors import (
    ArgumentError,
    ConfigError,
    FormatError,
    InfeasibleBudgetError,
    ShapeError,
    StunError,
)
from stunmoe.oracle import CostLedger
from stunmoe.pipeline import StunConfig, interpolation_sweep, run_stun
from stunmoe.rng import SeededRng
from stunmoe.serialization import (
    inspect_header,
    load_calibration,
    load_model,
    save_calibration,
    save_model,
)
from stunmoe.structured import (
    ClusterMap,
    GreedyConfig,
    LayerPlan,
    PruningPlan,
    agglomerative_cluster,
    apply_expert_prune,
    behavioral_distance,
    combinatorial_prune,
    dsatur_cluster,
    greedy_prune_o1,
    greedy_prune_on,
    threshold_search,
)
from stunmoe.calibration import collect_coactivations
from stunmoe.synth import SynthSpec, generate_synthetic
from stunmoe.unstructured import (
    OwlConfig,
    SparsityMask,
    apply_masks,
    collect_activation_norms,
    magnitude_mask,
    owl_allocate,
    prunable_items,
    wanda_mask,
)

import numpy as np


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage by default; 2 means "infeasible budget" here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(4, f"{self.prog}: error: {message}\n")


def _int_list(text):
    return [int(x) for x in text.split(",") if x.strip() != ""]


def _float_list(text):
    return [float(x) for x in text.split(",") if x.strip() != ""]


def build_parser():
    p = _Parser(prog="stunmoe", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[], help="generate a synthetic model")
    g.add_argument("out")
    g.add_argument("--layers", type=int, default=2)
    g.add_argument("--experts", type=int, default=8)
    g.add_argument("--dim", type=int, default=32)
    g.add_argument("--hidden", type=int, default=32)
    g.add_argument("--top-k", type=int, default=2)
    g.add_argument("--clusters", type=int, default=4)
    g.add_argument(
        "--cluster-sizes", type=_int_list, default=None, help="e.g. 3,3,1,1"
    )
    g.add_argument("--sigma", type=float, default=0.05)
    g.add_argument("--activation", choices=["relu", "silu"], default="silu")
    g.add_argument("--renormalize", action="store_true")
    g.add_argument("--no-residual", action="store_true")
    g.add_argument("--seed", type=int, default=0)

    gd = sub.add_parser("gen-data", help="generate calibration tokens")
    gd.add_argument("out")
    gd.add_argument("--samples", type=int, default=8)
    gd.add_argument("--seq-len", type=int, default=32)
    gd.add_argument("--dim", type=int, default=32)
    gd.add_argument("--scale", type=float, default=1.0)
    gd.add_argument("--seed", type=int, default=0)

    i = sub.add_parser("info", help="inspect a container header")
    i.add_argument("path")
    i.add_argument("--json", action="store_true")

    c = sub.add_parser("cluster", help="cluster experts by behavioral distance")
    c.add_argument("model")
    c.add_argument("--data", required=True)
    c.add_argument("--lambda1", type=float, default=1.0)
    c.add_argument("--lambda2", type=float, default=1.0)
    c.add_argument("--method", choices=["agglomerative", "dsatur"], default="agglomerative")
    c.add_argument("--threshold", type=float, default=None)
    c.add_argument(
        "--target-counts",
        type=_int_list,
        default=None,
        help="per-layer cluster counts (or one value for all layers)",
    )
    c.add_argument("-o", "--out", default=None, help="cluster map JSON (default stdout)")

    pe = sub.add_parser("prune-experts", help="apply an expert pruning engine")
    pe.add_argument("model")
    pe.add_argument("--clusters", help="cluster map JSON from the cluster command")
    pe.add_argument("--plan", help="apply a precomputed plan JSON instead")
    pe.add_argument("--engine", choices=["o1", "on", "combinatorial"], default="o1")
    pe.add_argument("--data", help="calibration (required for on/combinatorial)")
    pe.add_argument("--kappa", type=int, default=3)
    pe.add_argument("--penalty", type=float, default=2.0)
    pe.add_argument("-o", "--out", required=True)
    pe.add_argument("--plan-out", default=None)

    pw = sub.add_parser("prune-weights", help="unstructured pruning only")
    pw.add_argument("model")
    pw.add_argument("--data", help="calibration (required for wanda/owl)")
    pw.add_argument("--method", choices=["magnitude", "wanda", "owl"], default="wanda")
    pw.add_argument("--sparsity", type=float, required=True)
    pw.add_argument("--group", choices=["per_row", "per_matrix"], default="per_row")
    pw.add_argument("--owl-m", type=float, default=5.0)
    pw.add_argument("--owl-lam", type=float, default=0.08)
    pw.add_argument("--include-router", action="store_true")
    pw.add_argument("-o", "--out", required=True)

    r = sub.add_parser("run", help="full structured-then-unstructured pipeline")
    r.add_argument("model")
    r.add_argument("--data", required=True)
    r.add_argument("--config", required=True, help="StunConfig JSON file")
    r.add_argument("-o", "--out", required=True)
    r.add_argument("--report-json", default=None)
    r.add_argument("--report-text", default=None)
    r.add_argument("--quiet", action="store_true")

    s = sub.add_parser("sweep", help="expert-vs-weight sparsity interpolation")
    s.add_argument("model")
    s.add_argument("--data", required=True)
    s.add_argument("--heldout", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--ratios", type=_float_list, default=[0.0, 0.25, 0.5, 0.75, 1.0])
    s.add_argument("-o", "--out", default=None)

    return p


def _cmd_gen(args):
    spec = SynthSpec(
        n_layers=args.layers,
        n_experts=args.experts,
        model_dim=args.dim,
        hidden_dim=args.hidden,
        top_k=args.top_k,
        clusters_per_layer=args.clusters,
        noise_sigma=args.sigma,
        activation=args.activation,
        renormalize=args.renormalize,
        residual=not args.no_residual,
        cluster_sizes=tuple(args.cluster_sizes) if args.cluster_sizes else None,
    )
    model = generate_synthetic(spec, SeededRng(args.seed))
    save_model(model, args.out)
    print(f"wrote model: {args.out}")
    return 0


def _cmd_gen_data(args):
    data = generate_calibration(
        args.samples, args.seq_len, args.dim, SeededRng(args.seed), scale=args.scale
    )
    save_calibration(data, args.out)
    print(f"wrote calibration: {args.out} ({data.token_count} tokens)")
    return 0


def _cmd_info(args):
    header = inspect_header(args.path)
    if args.json:
        print(json.dumps(header, indent=2))
        return 0
    print(f"kind            {header.get('kind')}")
    print(f"format version  {header.get('format_version')}")
    print(f"model dim       {header.get('model_dim')}")
    if header.get("kind") == "model":
        print(f"activation      {header.get('activation')}")
        flags = header.get("flags", {})
        print(f"renormalize     {flags.get('renormalize')}")
        print(f"residual        {flags.get('residual')}")
        for m, spec in enumerate(header.get("layers", [])):
            print(
                f"layer {m}: {spec['n_experts']} experts, top_k={spec['top_k']}, "
                f"hidden={spec['hidden_dim']}"
            )
    n_tensors = len(header.get("tensors", []))
    n_masks = sum(1 for t in header.get("tensors", []) if t["name"].endswith(".mask"))
    print(f"tensors         {n_tensors} ({n_masks} masks)")
    return 0


def _cmd_cluster(args):
    model = load_model(args.model)
    data = load_calibration(args.data)
    stats = collect_coactivations(model, data)
    distances = behavioral_distance(model, stats, args.lambda1, args.lambda2)
    if args.threshold is None and args.target_counts is None:
        raise ArgumentError("cluster needs --threshold or --target-counts")
    if args.method == "dsatur":
        if args.threshold is None:
            raise ArgumentError("dsatur clustering needs --threshold")
        cmap = dsatur_cluster(distances, args.threshold)
    elif args.threshold is not None:
        cmap = agglomerative_cluster(distances, args.threshold)
    else:
        targets = args.target_counts
        if len(targets) == 1:
            targets = targets[0]
        _, cmap = threshold_search(distances, targets)
    text = cmap.to_json()
    if args.out:
        with open(args.out, "w") as f:
            f.write(text + "\n")
        counts = ", ".join(str(cmap.cluster_count(m)) for m in range(len(cmap.layers)))
        print(f"wrote cluster map: {args.out} (clusters per layer: {counts})")
    else:
        print(text)
    return 0


def _cmd_prune_experts(args):
    model = load_model(args.model)
    if args.plan:
        with open(args.plan) as f:
            plan = PruningPlan.from_json(f.read())
    else:
        if not args.clusters:
            raise ArgumentError("prune-experts needs --clusters or --plan")
        with open(args.clusters) as f:
            cmap = ClusterMap.from_json(f.read())
        if len(cmap.layers) != model.n_layers:
            raise ArgumentError("cluster map layer count does not match model")
        gcfg = GreedyConfig(penalty=args.penalty, kappa=args.kappa)
        ledger = CostLedger()
        data = None
        if args.engine in ("on", "combinatorial"):
            if not args.data:
                raise ArgumentError(f"engine {args.engine} needs --data")
            data = load_calibration(args.data)
        layer_plans = []
        for m, layer in enumerate(model.layers):
            clusters = cmap.layers[m]
            k = layer.n_experts - len(clusters)
            if args.engine == "o1":
                lp = greedy_prune_o1(model, m, clusters, gcfg, ledger=ledger)
            elif args.engine == "on":
                subset, _ = greedy_prune_on(
                    model, m, clusters, k, data, gcfg, ledger=ledger
                )
                lp = LayerPlan(
                    subset, sorted(set(range(layer.n_experts)) - set(subset))
                )
            else:
                subset, _ = combinatorial_prune(model, m, k, data, ledger=ledger)
                lp = LayerPlan(
                    subset, sorted(set(range(layer.n_experts)) - set(subset))
                )
            layer_plans.append(lp)
        plan = PruningPlan(layer_plans, engine=args.engine)
    pruned = apply_expert_prune(model, plan)
    save_model(pruned, args.out)
    if args.plan_out:
        with open(args.plan_out, "w") as f:
            f.write(plan.to_json() + "\n")
    removed = ", ".join(str(len(lp.pruned)) for lp in plan.layers)
    print(f"wrote pruned model: {args.out} (experts removed per layer: {removed})")
    return 0


def _cmd_prune_weights(args):
    model = load_model(args.model)
    if not 0.0 <= args.sparsity <= 1.0:
        raise ArgumentError("--sparsity must lie in [0, 1]")
    items = list(prunable_items(model, include_router=args.include_router))
    if args.method == "magnitude":
        masks = {
            name: magnitude_mask(mat, args.sparsity, args.group)
            for name, _, mat in items
        }
    else:
        if not args.data:
            raise ArgumentError(f"method {args.method} needs --data")
        data = load_calibration(args.data)
        norms = collect_activation_norms(model, data)
        if args.method == "owl":
            layer_scores = []
            for m in range(model.n_layers):
                parts = [
                    np.ravel(np.abs(mat) * norms.norms[name][None, :])
                    for name, lm, mat in items
                    if lm == m
                ]
                layer_scores.append(np.concatenate(parts) if parts else np.empty(0))
            alloc, _ = owl_allocate(
                layer_scores, args.sparsity, OwlConfig(args.owl_m, args.owl_lam)
            )
            per_layer = [float(x) for x in alloc]
        else:
            per_layer = [args.sparsity] * model.n_layers
        masks = {
            name: wanda_mask(mat, norms.norms[name], per_layer[m], args.group)
            for name, m, mat in items
        }
    mask = SparsityMask(masks, meta={"method": args.method, "group": args.group})
    out_model = apply_masks(model, mask)
    save_model(out_model, args.out, masks=masks)
    print(
        f"wrote masked model: {args.out} "
        f"(realized sparsity {mask.realized_sparsity():.6f})"
    )
    return 0


def _cmd_run(args):
    model = load_model(args.model)
    data = load_calibration(args.data)
    with open(args.config) as f:
        config = StunConfig.from_json(f.read())
    ledger = CostLedger()
    final_model, report = run_stun(model, data, config, ledger=ledger)
    report.doc["cost_ledger"] = ledger.to_dict()
    save_model(final_model, args.out)
    if args.report_json:
        with open(args.report_json, "w") as f:
            f.write(report.to_json() + "\n")
    if args.report_text:
        with open(args.report_text, "w") as f:
            f.write(report.render_text())
    if not args.quiet:
        print(report.render_text(), end="")
    return 0


def _cmd_sweep(args):
    model = load_model(args.model)
    data = load_calibration(args.data)
    heldout = load_calibration(args.heldout)
    with open(args.config) as f:
        config = StunConfig.from_json(f.read())
    result = interpolation_sweep(model, data, config, args.ratios, heldout)
    text = result.to_json()
    if args.out:
        with open(args.out, "w") as f:
            f.write(text + "\n")
    print("ratio  phi_e     deviation")
    for pt in result.points:
        marker = " *" if pt.ratio == result.best_ratio else ""
        print(f"{pt.ratio:5.2f}  {pt.phi_e:.6f}  {pt.deviation:.6f}{marker}")
    return 0


_COMMANDS = {
    "gen": _cmd_gen,
    "gen-data": _cmd_gen_data,
    "info": _cmd_info,
    "cluster": _cmd_cluster,
    "prune-experts": _cmd_prune_experts,
    "prune-weights": _cmd_prune_weights,
    "run": _cmd_run,
    "sweep": _cmd_sweep,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except InfeasibleBudgetError as e:
        print(f"stunmoe: infeasible budget: {e}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as e:
        print(f"stunmoe: file error: {e}", file=sys.stderr)
        return 3
    except (ConfigError, ArgumentError, ShapeError) as e:
        print(f"stunmoe: bad arguments: {e}", file=sys.stderr)
        return 4
    except StunError as e:
        print(f"stunmoe: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
