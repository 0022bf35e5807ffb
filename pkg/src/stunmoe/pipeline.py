"""End-to-end pruning pipeline: experts first, then weights.

Budget split: with a total sparsity target phi_total (fraction of the
original parameter count), expert pruning removes phi_e of it and the
unstructured stage must reach s_u = (phi_total - phi_e) / (f - phi_e) over
the prunable weights, where f is the prunable fraction.  The pipeline
recomputes the split from exact integer counts after expert pruning, so the
unstructured stage compensates for whatever the clustering actually
achieved.

Cluster targets per layer come from the expert-prune fraction rho = phi_e /
expert_share: c = round((1 - rho) * n), half away from zero, clamped to
[1, n]; every engine then prunes n - c experts in that layer.

run_stun is deterministic: same model, data, config and backend give
byte-identical reports (timing comes from an injectable clock).
"""

import json
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from stunmoe.backend import backend_name
from stunmoe.calibration import collect_coactivations
from stunmoe.errors import ArgumentError, ConfigError, InfeasibleBudgetError
from stunmoe.model import forward_model_batch, layer_param_counts, model_param_count
from stunmoe.structured import (
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
from stunmoe.tensor import frobenius_norm
from stunmoe.unstructured import (
    GROUP_PER_MATRIX,
    GROUP_PER_ROW,
    OwlConfig,
    SparsityMask,
    apply_masks,
    collect_activation_norms,
    kurtosis_report,
    owl_allocate,
    prunable_items,
    wanda_mask,
)

ENGINES = ("o1", "on", "combinatorial")
METHODS = ("magnitude", "wanda", "owl")
CLUSTERINGS = ("agglomerative", "dsatur")

_CONFIG_FIELDS = {
    "version": int,
    "phi_total": float,
    "phi_e": float,
    "lambda1": float,
    "lambda2": float,
    "clustering": str,
    "threshold": float,
    "engine": str,
    "kappa": int,
    "penalty": float,
    "prune_first": float,
    "method": str,
    "owl_m": float,
    "owl_lam": float,
    "group": str,
    "include_router": bool,
    "seed": int,
}


@dataclass
class StunConfig:
    phi_total: float
    phi_e: float
    lambda1: float = 1.0
    lambda2: float = 1.0
    clustering: str = "agglomerative"
    threshold: float = None  # None -> derive per-layer thresholds from phi_e
    engine: str = "o1"
    kappa: int = 3
    penalty: float = 2.0
    prune_first: float = 4.0
    method: str = "wanda"
    owl_m: float = 5.0
    owl_lam: float = 0.08
    group: str = GROUP_PER_ROW
    include_router: bool = False
    seed: int = 0
    version: int = 1

    def __post_init__(self):
        if self.version != 1:
            raise ConfigError(f"unsupported config version {self.version!r}")
        if not 0.0 <= self.phi_total < 1.0:
            raise ConfigError(f"phi_total {self.phi_total} outside [0, 1)")
        if not 0.0 <= self.phi_e <= self.phi_total:
            raise ConfigError("phi_e must satisfy 0 <= phi_e <= phi_total")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda weights must be non-negative")
        if self.clustering not in CLUSTERINGS:
            raise ConfigError(f"unknown clustering {self.clustering!r}")
        if self.engine not in ENGINES:
            raise ConfigError(f"unknown engine {self.engine!r}")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.group not in (GROUP_PER_ROW, GROUP_PER_MATRIX):
            raise ConfigError(f"unknown group mode {self.group!r}")
        if self.clustering == "dsatur" and self.threshold is None:
            raise ConfigError("dsatur clustering needs an explicit threshold")
        if self.threshold is not None:
            self.threshold = float(self.threshold)
        try:
            GreedyConfig(self.penalty, self.prune_first, self.kappa)
            OwlConfig(self.owl_m, self.owl_lam)
        except ArgumentError as e:
            raise ConfigError(str(e)) from e
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")

    def greedy_config(self):
        return GreedyConfig(self.penalty, self.prune_first, self.kappa)

    def owl_config(self):
        return OwlConfig(self.owl_m, self.owl_lam)

    def to_dict(self):
        return {
            "version": self.version,
            "phi_total": self.phi_total,
            "phi_e": self.phi_e,
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "clustering": self.clustering,
            "threshold": self.threshold,
            "engine": self.engine,
            "kappa": self.kappa,
            "penalty": self.penalty,
            "prune_first": self.prune_first,
            "method": self.method,
            "owl_m": self.owl_m,
            "owl_lam": self.owl_lam,
            "group": self.group,
            "include_router": self.include_router,
            "seed": self.seed,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(doc) - set(_CONFIG_FIELDS))
        if unknown:
            raise ConfigError(f"unknown config fields: {unknown}")
        if "phi_total" not in doc or "phi_e" not in doc:
            raise ConfigError("config requires phi_total and phi_e")
        kwargs = {}
        for key, value in doc.items():
            want = _CONFIG_FIELDS[key]
            if key == "threshold" and value is None:
                kwargs[key] = None
                continue
            if want is float:
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise ConfigError(f"config field {key!r} must be a number")
                kwargs[key] = float(value)
            elif want is int:
                if isinstance(value, bool) or not isinstance(value, int):
                    raise ConfigError(f"config field {key!r} must be an integer")
                kwargs[key] = value
            elif want is bool:
                if not isinstance(value, bool):
                    raise ConfigError(f"config field {key!r} must be a boolean")
                kwargs[key] = value
            else:
                if not isinstance(value, str):
                    raise ConfigError(f"config field {key!r} must be a string")
                kwargs[key] = value
        return cls(**kwargs)

    @classmethod
    def from_json(cls, text):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
        return cls.from_dict(doc)


def unstructured_budget(phi_total, phi_e, f):
    """Weight sparsity the unstructured stage must reach.

    s_u = (phi_total - phi_e) / (f - phi_e), where f is the prunable
    fraction of all parameters.  Raises InfeasibleBudgetError when the
    remaining prunable mass cannot reach phi_total.
    """
    if not 0.0 <= phi_total < 1.0:
        raise ArgumentError(f"phi_total {phi_total} outside [0, 1)")
    if not 0.0 <= phi_e <= phi_total:
        raise ArgumentError("phi_e must satisfy 0 <= phi_e <= phi_total")
    if not 0.0 < f <= 1.0:
        raise ArgumentError(f"prunable fraction {f} outside (0, 1]")
    if phi_e > f:
        raise InfeasibleBudgetError(
            f"expert stage already removed {phi_e:.6g} of parameters, more than "
            f"the prunable fraction {f:.6g}"
        )
    if f == phi_e:
        if phi_total == phi_e:
            return 0.0
        raise InfeasibleBudgetError(
            "no prunable weights remain but phi_total exceeds phi_e"
        )
    s_u = (phi_total - phi_e) / (f - phi_e)
    if s_u > 1.0:
        raise InfeasibleBudgetError(
            f"required weight sparsity {s_u:.6g} exceeds 1; "
            f"phi_total {phi_total:.6g} is unreachable with prunable fraction {f:.6g}"
        )
    return s_u


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def expert_share(model, include_router=False):
    """Fraction of all parameters that sit in prunable matrices."""
    total = model_param_count(model)
    prunable = 0
    for layer in model.layers:
        c = layer_param_counts(layer)
        prunable += c["experts"] + (c["router"] if include_router else 0)
    return prunable / total


def cluster_targets(model, phi_e):
    """Per-layer cluster counts c = round((1 - rho) * n), rho = phi_e / share.

    share here is the expert-matrix share of all parameters: expert pruning
    can only ever remove expert matrices, so rho rescales the parameter
    budget into an expert-count fraction.
    """
    share = expert_share(model, include_router=False)
    rho = phi_e / share
    if rho > 1.0 + 1e-12:
        raise InfeasibleBudgetError(
            f"phi_e {phi_e:.6g} exceeds the expert parameter share {share:.6g}"
        )
    rho = min(rho, 1.0)
    targets = []
    for layer in model.layers:
        n = layer.n_experts
        c = _round_half_up((1.0 - rho) * n)
        targets.append(max(1, min(n, c)))
    return targets


@dataclass
class SparsityReport:
    doc: dict

    def to_json(self):
        return json.dumps(self.doc, indent=2)

    def render_text(self):
        d = self.doc
        lines = []
        lines.append("structured-then-unstructured pruning report")
        lines.append("=" * 43)
        lines.append(f"backend              {d['backend']}")
        lines.append(f"engine               {d['config']['engine']}")
        lines.append(f"method               {d['config']['method']}")
        lines.append(f"phi_total requested  {d['phi_total_requested']:.6f}")
        lines.append(f"phi_total realized   {d['phi_total_realized']:.6f}")
        lines.append(f"phi_e requested      {d['phi_e_requested']:.6f}")
        lines.append(f"phi_e realized       {d['phi_e_realized']:.6f}")
        lines.append(f"s_u requested        {d['s_u']:.6f}")
        lines.append(f"s_u realized         {d['s_u_realized']:.6f}")
        lines.append(f"params original      {d['params_total']}")
        lines.append(f"params after experts {d['params_after_experts']}")
        lines.append(f"params after masks   {d['params_after_masks']}")
        lines.append(f"params removed       {d['params_removed']}")
        k = d["kurtosis"]
        lines.append(
            f"kurtosis             {k['original']:.4f} -> {k['after_experts']:.4f}"
            f" (experts) -> {k['after_masks']:.4f} (masks)"
        )
        lines.append("")
        lines.append("layer  experts  kept  pruned            clusters  s_l")
        for row in d["layers"]:
            pruned = ",".join(str(i) for i in row["pruned"]) or "-"
            lines.append(
                f"{row['layer']:>5}  {row['n_experts']:>7}  {row['kept']:>4}  "
                f"{pruned:<16}  {row['clusters']:>8}  {row['s_l']:.4f}"
            )
        if d["warnings"]:
            lines.append("")
            lines.append("warnings:")
            for w in d["warnings"]:
                lines.append(f"  - {w}")
        lines.append("")
        lines.append(f"elapsed seconds      {d['timing']['total']:.6f}")
        return "\n".join(lines) + "\n"


def run_stun(model, data, config, ledger=None, clock=None):
    """Run the full pipeline; returns (pruned_model, SparsityReport)."""
    clock = clock or time.perf_counter
    t0 = clock()
    timing = {}
    warnings = []

    total_params = model_param_count(model)

    # --- structured phase -------------------------------------------------
    t = clock()
    stats = collect_coactivations(model, data)
    if stats.low_overlap:
        warnings.append("top_k < 2 in some layer; coactivation statistics are empty")
    timing["coactivation"] = clock() - t

    t = clock()
    distances = behavioral_distance(model, stats, config.lambda1, config.lambda2)
    timing["distance"] = clock() - t

    t = clock()
    if config.threshold is not None:
        if config.clustering == "dsatur":
            cmap = dsatur_cluster(distances, config.threshold)
        else:
            cmap = agglomerative_cluster(distances, config.threshold)
        thresholds = [config.threshold] * model.n_layers
    else:
        targets = cluster_targets(model, config.phi_e)
        thresholds, cmap = threshold_search(distances, targets)
    timing["clustering"] = clock() - t

    t = clock()
    gcfg = config.greedy_config()
    layer_plans = []
    for m, layer in enumerate(model.layers):
        clusters = cmap.layers[m]
        k = layer.n_experts - len(clusters)
        if config.engine == "o1":
            lp = greedy_prune_o1(model, m, clusters, gcfg, ledger=ledger)
        elif config.engine == "on":
            subset, _ = greedy_prune_on(
                model, m, clusters, k, data, gcfg, ledger=ledger
            )
            keep = sorted(set(range(layer.n_experts)) - set(subset))
            lp = LayerPlan(subset, keep)
        else:
            subset, _ = combinatorial_prune(model, m, k, data, ledger=ledger)
            keep = sorted(set(range(layer.n_experts)) - set(subset))
            lp = LayerPlan(subset, keep)
        layer_plans.append(lp)
    plan = PruningPlan(
        layer_plans,
        engine=config.engine,
        meta={"thresholds": thresholds, "phi_e_requested": config.phi_e},
    )
    pruned_model = apply_expert_prune(model, plan)
    timing["expert_prune"] = clock() - t

    pruned_expert_params = 0
    for layer, lp in zip(model.layers, plan.layers):
        pruned_expert_params += len(lp.pruned) * layer_param_counts(layer)["per_expert"]
    phi_e_real = pruned_expert_params / total_params

    # --- unstructured phase ----------------------------------------------
    prunable_after = [
        (name, m, mat)
        for name, m, mat in prunable_items(
            pruned_model, include_router=config.include_router
        )
    ]
    prunable_cells = sum(mat.size for _, _, mat in prunable_after)
    f = (prunable_cells + pruned_expert_params) / total_params
    if phi_e_real >= config.phi_total:
        # Integral cluster counts can overshoot the requested split; the
        # weight stage then has nothing left to remove.
        s_u = 0.0
        if phi_e_real > config.phi_total:
            warnings.append(
                f"expert phase removed {phi_e_real:.6g} of parameters, past the "
                f"total budget {config.phi_total:.6g}; weight pruning skipped"
            )
    else:
        s_u = unstructured_budget(config.phi_total, phi_e_real, f)

    t = clock()
    if config.method in ("wanda", "owl"):
        norms = collect_activation_norms(pruned_model, data)
        if norms.never_routed:
            warnings.append(
                "experts never routed during calibration: "
                + ", ".join(f"layer{m}.expert{e}" for m, e in norms.never_routed)
            )
    else:
        norms = None
    timing["norms"] = clock() - t

    t = clock()
    if config.method == "owl":
        layer_scores = []
        for m in range(pruned_model.n_layers):
            parts = [
                np.ravel(np.abs(mat) * norms.norms[name][None, :])
                for name, lm, mat in prunable_after
                if lm == m
            ]
            layer_scores.append(np.concatenate(parts) if parts else np.empty(0))
        alloc, owl_diag = owl_allocate(layer_scores, s_u, config.owl_config())
        if owl_diag["fallback"]:
            warnings.append(f"layerwise allocation: {owl_diag['fallback']}")
        per_layer_s = [float(x) for x in alloc]
    else:
        owl_diag = None
        per_layer_s = [s_u] * pruned_model.n_layers

    masks = {}
    for name, m, mat in prunable_after:
        s_l = per_layer_s[m]
        if norms is None:
            col_norms = np.ones(mat.shape[1])
        else:
            col_norms = norms.norms[name]
        masks[name] = wanda_mask(mat, col_norms, s_l, config.group)
    mask = SparsityMask(
        masks,
        meta={
            "method": config.method,
            "group": config.group,
            "s_u": s_u,
            "per_layer": per_layer_s,
        },
    )
    final_model = apply_masks(pruned_model, mask)
    timing["masks"] = clock() - t

    # --- report -----------------------------------------------------------
    t = clock()
    kr_original = kurtosis_report(model, include_router=config.include_router)
    kr_experts = kurtosis_report(pruned_model, include_router=config.include_router)
    kr_masks = kurtosis_report(
        pruned_model, mask, include_router=config.include_router
    )
    masked_cells = mask.pruned_cells()
    s_u_real = mask.realized_sparsity()
    phi_total_real = (pruned_expert_params + masked_cells) / total_params

    layer_rows = []
    for m, layer in enumerate(model.layers):
        lp = plan.layers[m]
        layer_rows.append(
            {
                "layer": m,
                "n_experts": layer.n_experts,
                "kept": len(lp.kept),
                "pruned": lp.pruned,
                "clusters": cmap.cluster_count(m),
                "threshold": thresholds[m],
                "s_l": per_layer_s[m],
            }
        )

    doc = {
        "kind": "report",
        "version": 1,
        "backend": backend_name(),
        "config": config.to_dict(),
        "params_total": total_params,
        "params_after_experts": total_params - pruned_expert_params,
        "params_after_masks": total_params - pruned_expert_params - masked_cells,
        "params_removed": pruned_expert_params + masked_cells,
        "phi_total_requested": config.phi_total,
        "phi_total_realized": phi_total_real,
        "phi_e_requested": config.phi_e,
        "phi_e_realized": phi_e_real,
        "s_u": s_u,
        "s_u_realized": s_u_real,
        "prunable_fraction": f,
        "layers": layer_rows,
        "kurtosis": {
            "original": kr_original.aggregate,
            "after_experts": kr_experts.aggregate,
            "after_masks": kr_masks.aggregate,
        },
        "owl": owl_diag,
        "warnings": warnings,
        "timing": timing,
    }
    timing["report"] = clock() - t
    timing["total"] = clock() - t0
    return final_model, SparsityReport(doc)


def output_deviation(reference, candidate, data):
    """Normalized output distance between two models over a token set:
    ||Y_ref - Y_cand||_F / ||Y_ref||_F."""
    x = data.stacked()
    y_ref = forward_model_batch(reference, x)
    y_cand = forward_model_batch(candidate, x)
    denom = frobenius_norm(y_ref)
    if denom == 0.0:
        raise ArgumentError("reference outputs are identically zero")
    return frobenius_norm(y_ref - y_cand) / denom


@dataclass
class SweepPoint:
    ratio: float
    phi_e: float  # requested at this ratio
    phi_e_realized: float
    deviation: float
    kurtosis: float  # surviving weights after both phases
    phi_total_realized: float


@dataclass
class SweepResult:
    points: list
    best_ratio: float
    phi_total: float

    def to_json(self):
        return json.dumps(
            {
                "kind": "sweep",
                "version": 1,
                "phi_total": self.phi_total,
                "best_ratio": self.best_ratio,
                "points": [
                    {
                        "ratio": p.ratio,
                        "phi_e": p.phi_e,
                        "phi_e_realized": p.phi_e_realized,
                        "deviation": p.deviation,
                        "kurtosis": p.kurtosis,
                        "phi_total_realized": p.phi_total_realized,
                    }
                    for p in self.points
                ],
            },
            indent=2,
        )


def interpolation_sweep(model, data, config, ratios, heldout):
    """Trade expert sparsity against weight sparsity at fixed phi_total.

    For each ratio r, runs the pipeline with phi_e = r * phi_total and
    scores the result on held-out tokens.  Returns every point and the
    deviation-minimizing ratio (first on ties).
    """
    ratios = [float(r) for r in ratios]
    if not ratios:
        raise ArgumentError("sweep needs at least one ratio")
    if any(not 0.0 <= r <= 1.0 for r in ratios):
        raise ArgumentError("sweep ratios must lie in [0, 1]")
    points = []
    for r in ratios:
        cfg = replace(config, phi_e=r * config.phi_total)
        final_model, report = run_stun(model, data, cfg)
        dev = output_deviation(model, final_model, heldout)
        points.append(
            SweepPoint(
                r,
                cfg.phi_e,
                report.doc["phi_e_realized"],
                dev,
                report.doc["kurtosis"]["after_masks"],
                report.doc["phi_total_realized"],
            )
        )
    best = min(points, key=lambda p: p.deviation)
    return SweepResult(points, best.ratio, config.phi_total)
