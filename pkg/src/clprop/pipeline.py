"""End-to-end experiment orchestration: load or generate a dataset, split,
train the base predictor, estimate compatibility, propagate, and report.

Per run seed the same trained predictor backs every method, so accuracy
differences isolate the propagation step.  Candidate propagation settings
(alpha grid x message normalization x teleport source) are selected by
validation accuracy; reports are plain CSV with a JSON header carrying the
only timestamp.
"""

from __future__ import annotations

import dataclasses
import json
import os
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import metrics
from .compatibility import estimate_compatibility, prior_beliefs
from .graph import SPLIT_RATIOS, Graph, load_dataset, make_splits, one_hot
from .mlp import TrainConfig, init_mlp, params_checksum, predict, train
from .propagation import (
    DivergenceError,
    PropagationConfig,
    all_convergent,
    convergence_check,
    edge_weights,
    propagate_clp,
    propagate_clp_star,
    propagate_lp,
)
from .synth import SyntheticSpec, generate, preset_spec, snap_h_fraction

DEFAULT_ALPHA_GRID = [round(0.1 * i, 1) for i in range(1, 10)]

METHODS = ("mlp_only", "lp", "clp", "clp_star")


@dataclass(frozen=True)
class PropagationOverrides:
    """Pipeline-level propagation knobs; None means "select by validation"."""

    max_iters: int = 50
    tol: float = 1e-9
    message_normalization: bool | None = None
    teleport_source: str | None = None

    def __post_init__(self):
        if self.teleport_source not in (None, "base_prediction", "prior"):
            raise ValueError(f"unknown teleport source {self.teleport_source!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str | dict
    seeds: tuple[int, ...]
    scheme: str = "medium"
    method: str = "clp"
    alpha_grid: tuple[float, ...] = tuple(DEFAULT_ALPHA_GRID)
    mlp: TrainConfig = field(default_factory=TrainConfig)
    propagation: PropagationOverrides = field(default_factory=PropagationOverrides)
    output_dir: str | None = None
    directed: bool = False
    partial_labels: bool = False

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r} (choose from {METHODS})")
        if not self.alpha_grid or not all(0.0 < a < 1.0 for a in self.alpha_grid):
            raise ValueError("alpha grid values must lie strictly inside (0, 1)")


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build a config from the JSON mirror (nested mlp/propagation objects)."""
    data = dict(raw)
    if "mlp" in data and isinstance(data["mlp"], dict):
        data["mlp"] = TrainConfig(**data["mlp"])
    if "propagation" in data and isinstance(data["propagation"], dict):
        prop = dict(data["propagation"])
        for key in ("message_normalization", "teleport_source"):
            if prop.get(key) == "auto":
                prop[key] = None
        if prop.get("message_normalization") in ("on", "off"):
            prop["message_normalization"] = prop["message_normalization"] == "on"
        if prop.get("teleport_source") == "base":
            prop["teleport_source"] = "base_prediction"
        data["propagation"] = PropagationOverrides(**prop)
    if "seeds" in data:
        data["seeds"] = tuple(int(s) for s in data["seeds"])
    if "alpha_grid" in data:
        data["alpha_grid"] = tuple(float(a) for a in data["alpha_grid"])
    return ExperimentConfig(**data)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return config_from_dict(json.load(fh))


def resolve_dataset(dataset, directed: bool = False, partial_labels: bool = False) -> Graph:
    """A path loads the TSV trio; a dict generates a synthetic benchmark.

    Synthetic dicts carry either a named preset ("preset", "scale") or raw
    sizes ("num_nodes", "num_classes", "target_avg_degree"), plus "h" and
    "seed".
    """
    if isinstance(dataset, (str, Path)):
        return load_dataset(
            dataset, directed=True if directed else None, partial_labels=partial_labels
        )
    spec = synthetic_spec_from_dict(dataset)
    graph, _ = generate(spec)
    return graph


def synthetic_spec_from_dict(dataset: dict) -> SyntheticSpec:
    h = snap_h_fraction(float(dataset.get("h", 0.5)))
    seed = int(dataset.get("seed", 0))
    if "preset" in dataset:
        return preset_spec(dataset["preset"], h, seed, float(dataset.get("scale", 1.0)))
    return SyntheticSpec(
        num_nodes=int(dataset["num_nodes"]),
        num_classes=int(dataset["num_classes"]),
        target_avg_degree=float(dataset["target_avg_degree"]),
        p_in_fraction=h,
        seed=seed,
    )


def standardize_features(features: np.ndarray) -> np.ndarray:
    """Column z-scores over all nodes; constant columns become zero."""
    mean = features.mean(axis=0)
    std = features.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return (features - mean) / std


@dataclass
class SeedResult:
    seed: int
    test_accuracy: float
    val_accuracy: float
    chosen_alpha: float | None
    chosen_normalization: bool | None
    chosen_teleport: str | None
    compat_distance: float | None
    convergence: str
    checkpoint: str
    fallback: bool = False
    candidate_log: list = field(default_factory=list, repr=False)


@dataclass
class RunReport:
    method: str
    metric: str
    per_seed: list[SeedResult]

    @property
    def mean(self) -> float:
        return float(np.mean([r.test_accuracy for r in self.per_seed]))

    @property
    def std(self) -> float:
        return float(np.std([r.test_accuracy for r in self.per_seed]))


def _convergence_summary(verdicts) -> str:
    counts: dict[str, int] = {}
    for v in verdicts:
        counts[v.status] = counts.get(v.status, 0) + 1
    return ";".join(f"{status}:{counts[status]}" for status in sorted(counts))


def _train_base_predictor(graph: Graph, split, config: ExperimentConfig):
    features = standardize_features(graph.features)
    work = dataclasses.replace(graph, features=features)
    mlp_cfg = dataclasses.replace(config.mlp, seed=split.seed)
    params0 = init_mlp(
        feature_dim=work.feature_dim,
        hidden_dim=mlp_cfg.hidden_dim,
        num_hidden_layers=mlp_cfg.num_hidden_layers,
        num_classes=work.num_classes,
        seed=split.seed,
    )
    params, log = train(params0, work, split, mlp_cfg)
    return params, predict(params, features), log


def _run_seed(graph: Graph, seed: int, config: ExperimentConfig, true_h) -> SeedResult:
    split = make_splits(graph, config.scheme, seed, 1)[0]
    labels = graph.labels
    y_hot = one_hot(labels, graph.num_classes)
    prop = config.propagation

    if config.method == "lp":
        best = None
        candidates = []
        for alpha in config.alpha_grid:
            pcfg = PropagationConfig(alpha, prop.max_iters, prop.tol)
            beliefs = propagate_lp(graph, y_hot, split.train, pcfg)
            val = metrics.accuracy(beliefs, labels, split.validation)
            candidates.append((alpha, None, None, val, "ok"))
            if best is None or val > best[0]:
                best = (val, alpha, beliefs)
        val, alpha, beliefs = best
        return SeedResult(
            seed=seed,
            test_accuracy=metrics.accuracy(beliefs, labels, split.test),
            val_accuracy=val,
            chosen_alpha=alpha,
            chosen_normalization=None,
            chosen_teleport=None,
            compat_distance=None,
            convergence="certified: symmetric normalized adjacency",
            checkpoint="",
            candidate_log=candidates,
        )

    params, d_hat, _ = _train_base_predictor(graph, split, config)
    checkpoint = params_checksum(params)
    mlp_result = SeedResult(
        seed=seed,
        test_accuracy=metrics.accuracy(d_hat, labels, split.test),
        val_accuracy=metrics.accuracy(d_hat, labels, split.validation),
        chosen_alpha=None,
        chosen_normalization=None,
        chosen_teleport=None,
        compat_distance=None,
        convergence="",
        checkpoint=checkpoint,
    )
    if config.method == "mlp_only":
        return mlp_result

    b0 = prior_beliefs(d_hat, y_hot, split.train)
    h_hat = estimate_compatibility(graph, b0, y_hot, split.train)
    dist = None
    if true_h is not None:
        dist = metrics.compat_distance(true_h, h_hat)

    norm_options = (
        (False, True)
        if prop.message_normalization is None
        else (prop.message_normalization,)
    )
    teleport_options = (
        ("base_prediction", "prior")
        if prop.teleport_source is None
        else (prop.teleport_source,)
    )
    teleports = {"base_prediction": d_hat, "prior": b0}

    candidates = []
    best = None
    verdict_by_alpha = {}
    awf = edge_weights(graph, b0, h_hat) if config.method == "clp" else None
    for alpha in config.alpha_grid:
        if config.method == "clp":
            verdict_by_alpha[alpha] = convergence_check(awf, alpha)
        for teleport_name in teleport_options:
            for norm in norm_options if config.method == "clp" else (None,):
                pcfg = PropagationConfig(
                    alpha,
                    prop.max_iters,
                    prop.tol,
                    message_normalization=bool(norm),
                    teleport_source=teleport_name,
                )
                try:
                    if config.method == "clp":
                        beliefs, _ = propagate_clp(awf, teleports[teleport_name], pcfg)
                    else:
                        beliefs = propagate_clp_star(
                            graph, teleports[teleport_name], h_hat, pcfg
                        )
                except DivergenceError:
                    candidates.append((alpha, norm, teleport_name, None, "diverged"))
                    continue
                val = metrics.accuracy(beliefs, labels, split.validation)
                candidates.append((alpha, norm, teleport_name, val, "ok"))
                if best is None or val > best[0]:
                    best = (val, alpha, norm, teleport_name, beliefs)

    if best is None:
        warnings.warn(
            f"seed {seed}: every propagation candidate diverged; "
            "falling back to the base predictor"
        )
        mlp_result.fallback = True
        mlp_result.candidate_log = candidates
        mlp_result.compat_distance = dist
        return mlp_result

    val, alpha, norm, teleport_name, beliefs = best
    if config.method == "clp":
        convergence = _convergence_summary(verdict_by_alpha[alpha])
    else:
        convergence = "iterative"
    return SeedResult(
        seed=seed,
        test_accuracy=metrics.accuracy(beliefs, labels, split.test),
        val_accuracy=val,
        chosen_alpha=alpha,
        chosen_normalization=norm,
        chosen_teleport=teleport_name,
        compat_distance=dist,
        convergence=convergence,
        checkpoint=checkpoint,
        candidate_log=candidates,
    )


def run_pipeline(config: ExperimentConfig, graph: Graph | None = None) -> RunReport:
    """Run every seed of the configured experiment and aggregate the metric."""
    if graph is None:
        graph = resolve_dataset(config.dataset, config.directed, config.partial_labels)
    if graph.labels is None or not graph.has_full_labels():
        raise ValueError("the pipeline requires labels on every node")
    true_h = metrics.true_compatibility(graph) if graph.has_full_labels() else None
    per_seed = [_run_seed(graph, seed, config, true_h) for seed in config.seeds]
    report = RunReport(config.method, "accuracy", per_seed)
    if config.output_dir:
        write_report(report, config.output_dir, config)
    return report


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_report(report: RunReport, out_dir, config: ExperimentConfig | None = None) -> None:
    """report.csv + summary.csv (both deterministic) and run.json (timestamped)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [
        "seed,test_accuracy,val_accuracy,chosen_alpha,chosen_normalization,"
        "chosen_teleport,compat_distance,convergence,checkpoint,fallback"
    ]
    for r in report.per_seed:
        lines.append(
            ",".join(
                [
                    str(r.seed),
                    _fmt(r.test_accuracy),
                    _fmt(r.val_accuracy),
                    _fmt(r.chosen_alpha),
                    _fmt(r.chosen_normalization),
                    {"base_prediction": "base", "prior": "prior", None: ""}[r.chosen_teleport],
                    _fmt(r.compat_distance),
                    r.convergence,
                    r.checkpoint,
                    "yes" if r.fallback else "no",
                ]
            )
        )
    _atomic_write(out / "report.csv", "\n".join(lines) + "\n")
    summary = (
        "method,metric,n_seeds,mean,std\n"
        f"{report.method},{report.metric},{len(report.per_seed)},"
        f"{report.mean!r},{report.std!r}\n"
    )
    _atomic_write(out / "summary.csv", summary)
    header = {
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "method": report.method,
        "metric": report.metric,
        "aggregate": {"mean": report.mean, "std": report.std},
    }
    if config is not None:
        header["config"] = json.loads(json.dumps(dataclasses.asdict(config), default=str))
    _atomic_write(out / "run.json", json.dumps(header, indent=2, sort_keys=True) + "\n")


def sweep_homophily(
    base_config: ExperimentConfig,
    h_grid,
    methods,
    out_dir=None,
) -> list[dict]:
    """Paired method comparison across homophily levels of a synthetic family."""
    if not isinstance(base_config.dataset, dict):
        raise ValueError("the homophily sweep requires a synthetic dataset config")
    rows = []
    for h in h_grid:
        dataset = dict(base_config.dataset)
        dataset["h"] = float(h)
        graph = resolve_dataset(dataset)
        for method in methods:
            cfg = dataclasses.replace(
                base_config, dataset=dataset, method=method, output_dir=None
            )
            report = run_pipeline(cfg, graph=graph)
            rows.append(
                {
                    "h": float(h),
                    "method": method,
                    "mean": report.mean,
                    "std": report.std,
                    "n_seeds": len(report.per_seed),
                }
            )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        lines = ["h,method,mean,std,n_seeds"]
        for row in rows:
            lines.append(
                f"{row['h']!r},{row['method']},{row['mean']!r},{row['std']!r},{row['n_seeds']}"
            )
        _atomic_write(out / "sweep.csv", "\n".join(lines) + "\n")
    return rows


def report_compat_quality(
    config: ExperimentConfig,
    schemes=("sparse", "medium", "dense"),
    out_dir=None,
    graph: Graph | None = None,
) -> list[dict]:
    """Compatibility-estimate distance and accuracy per labelling scheme."""
    if graph is None:
        graph = resolve_dataset(config.dataset, config.directed)
    if not graph.has_full_labels():
        raise ValueError("compatibility quality requires the full ground-truth labels")
    rows = []
    for scheme in schemes:
        cfg = dataclasses.replace(config, scheme=scheme, method="clp", output_dir=None)
        report = run_pipeline(cfg, graph=graph)
        dists = np.array([r.compat_distance for r in report.per_seed], dtype=np.float64)
        rows.append(
            {
                "scheme": scheme,
                "label_rate": SPLIT_RATIOS[scheme][0],
                "mean_dist": float(dists.mean()),
                "std_dist": float(dists.std()),
                "mean_acc": report.mean,
            }
        )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        lines = ["scheme,label_rate,mean_dist,std_dist,mean_acc"]
        for row in rows:
            lines.append(
                f"{row['scheme']},{row['label_rate']!r},{row['mean_dist']!r},"
                f"{row['std_dist']!r},{row['mean_acc']!r}"
            )
        _atomic_write(out / "compat_quality.csv", "\n".join(lines) + "\n")
    return rows


@dataclass
class InspectReport:
    edge_homophily: float
    node_homophily: float
    true_compatibility: np.ndarray
    degree_stats: dict
    hv_histogram: list[tuple[str, int]]
    bucket_table: metrics.BucketTable | None = None

    def render(self) -> str:
        lines = [
            f"edge homophily: {self.edge_homophily:.4f}",
            f"node homophily: {self.node_homophily:.4f}",
            "true compatibility matrix:",
        ]
        for row in self.true_compatibility:
            lines.append("  " + " ".join(f"{x:.4f}" for x in row))
        stats = self.degree_stats
        lines.append(
            "degree: min {min} / median {median:.1f} / mean {mean:.3f} / max {max}"
            " (isolated: {isolated})".format(**stats)
        )
        lines.append("h_v histogram (level: nodes):")
        for level, count in self.hv_histogram:
            lines.append(f"  {level}: {count}")
        if self.bucket_table is not None:
            lines.append("per-bucket accuracy (bucket, count, accuracy):")
            for row in self.bucket_table.rows:
                bucket = "undefined" if row.bucket is None else f"{row.bucket:.1f}"
                acc = "no data" if row.accuracy is None else f"{row.accuracy:.4f}"
                lines.append(f"  {bucket}: {row.count} nodes, {acc}")
        return "\n".join(lines)


def inspect_dataset(graph: Graph, config: ExperimentConfig | None = None) -> InspectReport:
    """Homophily diagnostics; adds the per-bucket accuracy table when a
    pipeline config supplies a trainable base predictor."""
    if graph.labels is None:
        raise ValueError("inspection requires labels")
    degrees = graph.degrees()
    stats = {
        "min": int(degrees.min()),
        "median": float(np.median(degrees)),
        "mean": float(degrees.mean()),
        "max": int(degrees.max()),
        "isolated": int((degrees == 0).sum()),
    }
    counts, undefined = metrics.local_homophily_histogram(graph)
    histogram = [(repr(metrics.BUCKET_LEVELS[i]), int(counts[i])) for i in range(11)]
    histogram.append(("undefined", undefined))
    bucket_table = None
    if config is not None:
        seed = config.seeds[0]
        split = make_splits(graph, config.scheme, seed, 1)[0]
        _, d_hat, _ = _train_base_predictor(graph, split, config)
        bucket_table = metrics.bucket_accuracy(d_hat, graph, split.test)
    return InspectReport(
        edge_homophily=metrics.edge_homophily(graph),
        node_homophily=metrics.node_homophily(graph),
        true_compatibility=metrics.true_compatibility(graph).values,
        degree_stats=stats,
        hv_histogram=histogram,
        bucket_table=bucket_table,
    )
