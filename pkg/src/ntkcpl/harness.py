"""Seeded active-learning experiments: select -> query -> train -> evaluate -> diagnose."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from . import analysis
from .clustering import CPL, cluster_schedule, generate_cpl, kmeans
from .dataset import ALState, FeatureSet, load_features, query_oracle, sample_candidate_subset
from .errors import ConfigError, DataError
from .model import MLPParams, TrainConfig, forward, init_mlp, penultimate, train_classifier
from .ntk import compute_gram, current_fit, one_hot
from .strategies import (KernelView, StrategySpec, select_badge, select_coreset, select_entropy,
                         select_lookahead, select_ntkcpl, select_random, write_selection_csv)
from .synthetic import MixtureSpec, make_mixture

log = logging.getLogger(__name__)


class DatasetConfig(BaseModel):
    train_path: str
    test_path: str
    format: Literal["binary", "csv"] | None = None


class NTKOptions(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants")

    ridge: float | None = Field(None, ge=0)
    # relative ridge used when ``ridge`` is unset: ridge_scale * trace(gram) / M
    ridge_scale: float = Field(1e-4, ge=0)
    time: float = Field(math.inf, ge=0)
    zero_output_init: bool = True
    width: int | None = Field(None, ge=1)
    init_scheme: Literal["ntk_parameterization", "standard"] = "ntk_parameterization"


class ExperimentConfig(BaseModel):
    dataset: DatasetConfig | None = None
    synthetic: MixtureSpec | None = None
    strategy: StrategySpec = StrategySpec()
    schedule: list[int]
    initial_budget: int = Field(ge=1)
    c_max: int = Field(100, ge=1)
    cluster_rule: Literal["labels", "query"] = "labels"
    fixed_clusters: int | None = Field(None, ge=1)
    candidate_size: int = Field(10000, ge=1)
    hidden_width: int = Field(64, ge=1)
    train: TrainConfig = TrainConfig()
    ntk: NTKOptions = NTKOptions()
    seeds: list[int] = [0]
    output_dir: str | None = None
    diagnostics: bool = True
    n_jobs: int = Field(1, ge=1)
    seed_workers: int = Field(1, ge=1)

    @field_validator("schedule")
    @classmethod
    def _schedule(cls, v):
        if not v or any(b < 1 for b in v):
            raise ValueError("schedule must be nonempty with every entry >= 1")
        return v

    @field_validator("seeds")
    @classmethod
    def _seeds(cls, v):
        if not v:
            raise ValueError("at least one seed is required")
        return v

    @model_validator(mode="after")
    def _source(self):
        if (self.dataset is None) == (self.synthetic is None):
            raise ValueError("exactly one of 'dataset' and 'synthetic' must be given")
        if self.c_max < self.initial_budget:
            log.warning("c_max %d below initial budget %d; clamping", self.c_max, self.initial_budget)
            self.c_max = self.initial_budget
        return self


def benchmark_config(strategy: str = "ntkcpl", seeds=(0, 1, 2, 3, 4), **overrides) -> ExperimentConfig:
    """The desk-scale synthetic benchmark: 8-class mixture, budgets 8, 16, ..., 80.

    Regularized NTK (0.1 * mean gram diagonal) and at most one CPL cluster
    per class; ``overrides`` replace any top-level field.
    """
    base = {
        "synthetic": MixtureSpec().model_dump(),
        "strategy": {"name": strategy},
        "schedule": [8] * 9,
        "initial_budget": 8,
        "c_max": 8,
        "candidate_size": 1000,
        "ntk": {"ridge_scale": 0.1},
        "seeds": list(seeds),
    }
    base.update(overrides)
    return ExperimentConfig.model_validate(base)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            return ExperimentConfig.model_validate(json.load(fh))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except (json.JSONDecodeError, ValueError) as exc:
        raise ConfigError(f"invalid config {path}: {exc}") from exc


def load_datasets(cfg: ExperimentConfig) -> tuple[FeatureSet, FeatureSet]:
    if cfg.synthetic is not None:
        return make_mixture(cfg.synthetic)
    train = load_features(cfg.dataset.train_path, cfg.dataset.format)
    test = load_features(cfg.dataset.test_path, cfg.dataset.format)
    if train.true_labels is None or test.true_labels is None:
        raise DataError("experiments need labeled train (oracle) and test feature files")
    if train.dim != test.dim:
        raise DataError(f"train dimension {train.dim} differs from test dimension {test.dim}")
    return train, test


@dataclass
class MetricsRecord:
    seed: int
    round: int
    total_labels: int
    strategy: str
    test_accuracy: float
    estimated_coverage: float
    true_coverage: float
    p_nff: float
    p_fnf: float
    n_clusters: int
    wallclock_select_seconds: float


KERNEL_STRATEGIES = ("ntkcpl", "lookahead")
RECORD_FIELDS = [f.name for f in fields(MetricsRecord)]
TIMING_FIELDS = ("wallclock_select_seconds",)


def _rng(seed, *stream):
    return np.random.default_rng([seed, *stream])


# ---------------------------------------------------------------------------
# Single-round building blocks, shared with the one-shot select/diagnose commands


def initial_selection(features: np.ndarray, candidate: np.ndarray, b0: int, rng) -> list[int]:
    """Nearest candidate to each of ``b0`` k-means centroids (distinct picks)."""
    X = features[candidate]
    model = kmeans(X, min(b0, len(candidate)), rng)
    picked = []
    for c in range(model.k):
        order = np.argsort(((X - model.centroids[c]) ** 2).sum(1), kind="stable")
        j = next(int(j) for j in order if int(candidate[j]) not in picked)
        picked.append(int(candidate[j]))
    return picked


@dataclass
class RoundContext:
    universe: np.ndarray  # kernel/CPL position -> global sample index
    labeled_pos: np.ndarray
    candidate_pos: np.ndarray
    cpl: CPL | None = None
    view: KernelView | None = None


def build_round_context(cfg: ExperimentConfig, state: ALState, classifier: MLPParams | None,
                        n_clusters: int, rng_cpl, rng_ntk, need_kernel: bool = True,
                        need_cpl: bool = True) -> RoundContext:
    """CPL and NTK system over the universe L + candidate (labeled positions first).

    Without a classifier the CPL is plain k-means on the input features.
    """
    pool = state.pool
    universe = np.concatenate([state.labeled_array, state.candidate]).astype(np.int64)
    nl = len(state.labeled)
    labeled_pos = np.arange(nl)
    candidate_pos = np.arange(nl, len(universe))
    f_self = pool.features[universe]
    cpl = None
    if need_cpl and classifier is None:
        km = kmeans(f_self, n_clusters, rng_cpl)
        cpl = CPL(km.assignment, np.full(n_clusters, -1),
                  np.zeros((n_clusters, pool.num_classes), dtype=np.int64))
    elif need_cpl:
        use_al = cfg.strategy.feature_source == "active_learning"
        f_clu = penultimate(classifier, f_self) if use_al else f_self
        preds = np.argmax(forward(classifier, f_self), axis=1)
        # enough initial clusters to keep every labeled class apart
        c0 = min(max(cfg.initial_budget, len(np.unique(state.labels_array))), n_clusters)
        cpl = generate_cpl(f_clu, preds, c0, n_clusters, labeled_pos, state.labels_array, rng_cpl,
                           num_classes=pool.num_classes)
    view = None
    if need_kernel:
        width = cfg.ntk.width or cfg.hidden_width
        # output heads live in CPL space when pseudo-labels are regressed, else in class space
        net = init_mlp(pool.dim, width, n_clusters if need_cpl else pool.num_classes, cfg.ntk.init_scheme, cfg.ntk.zero_output_init, rng_ntk)
        spec = cfg.strategy
        ridge = spec.ridge if spec.ridge is not None else cfg.ntk.ridge
        t = spec.time if spec.time is not None else cfg.ntk.time
        sys = compute_gram(net, f_self, ridge, t, ridge_scale=cfg.ntk.ridge_scale)
        view = KernelView(sys.with_labeled(labeled_pos), universe)
    return RoundContext(universe, labeled_pos, candidate_pos, cpl, view)


def run_strategy(cfg: ExperimentConfig, state: ALState, b: int, classifier, ctx: RoundContext, rng) -> list[int]:
    spec = cfg.strategy
    pool = state.pool
    if spec.name == "random":
        return select_random(state, b, rng)
    if spec.name == "entropy":
        return select_entropy(state, b, classifier)
    if spec.name == "badge":
        return select_badge(state, b, classifier, rng)
    if spec.name == "coreset":
        feats = pool.features
        if spec.feature_source == "active_learning":
            feats = penultimate(classifier, pool.features)
        return select_coreset(state, b, feats)
    if spec.name == "lookahead":
        targets = one_hot(state.labels_array, pool.num_classes)
        return select_lookahead(state, b, ctx.view, targets, pool.num_classes)
    if spec.name == "ntkcpl":
        return select_ntkcpl(state, b, ctx.view, ctx.cpl, n_jobs=cfg.n_jobs)
    raise ConfigError(f"unknown strategy {spec.name!r}")


def diagnose_round(state: ALState, classifier: MLPParams, ctx: RoundContext) -> dict:
    """Coverage pair, error decomposition and argmax agreement after the round's query.

    Scored positions are the candidates still unlabeled; labeled positions
    are regressed onto their CPL class (risk) or their true class (f_y).
    """
    pool = state.pool
    pos_of = {int(s): p for p, s in enumerate(ctx.universe)}
    lab_pos = np.asarray([pos_of[i] for i in state.labeled if i in pos_of], dtype=np.int64)
    lab_true = np.asarray([y for i, y in zip(state.labeled, state.labels) if i in pos_of], dtype=np.int64)
    scored = np.asarray([pos_of[int(i)] for i in state.candidate], dtype=np.int64)
    sys = ctx.view.system.with_labeled(lab_pos)
    cpl = ctx.cpl
    k = cpl.n_clusters
    truth = pool.true_labels[ctx.universe]

    dom = cpl.dominant_true.copy()
    counts = np.zeros((k, pool.num_classes), dtype=np.int64)
    np.add.at(counts, (cpl.labels[lab_pos], lab_true), 1)
    has = counts.sum(1) > 0
    dom[has] = np.argmax(counts[has], axis=1)
    dom[~has] = np.argmax(cpl.purity_stats[~has], axis=1)

    est, true = analysis.coverage_estimate(
        sys, cpl.labels, scored, np.argmax(forward(classifier, pool.features[ctx.universe[scored]]), 1),
        truth[scored], num_clusters=k)
    f_cpl = current_fit(sys, _targets(sys.size, lab_pos, cpl.labels[lab_pos], k))[0][scored]
    report = {"estimated_coverage": est, "true_coverage": true}
    f_y = None
    if sys.f0.shape[1] == pool.num_classes or not np.any(sys.f0):
        f_y = current_fit(sys, _targets(sys.size, lab_pos, lab_true, pool.num_classes))[0][scored]
        report["ntk_true_coverage"] = float(np.mean(np.argmax(f_y, 1) == truth[scored]))
        report["agreement_rate"] = analysis.argmax_agreement(f_y, f_cpl, dom)
    else:
        # f0 lives in CPL space only; agreement with y falls back to the mapped CPL argmax
        report["ntk_true_coverage"] = math.nan
        report["agreement_rate"] = math.nan
    dec = analysis.decompose_error(f_cpl, truth[scored], cpl.labels[scored], dom, ntk_preds_true=f_y)
    report.update(dec.to_dict())
    return report


def _targets(size, lab_pos, lab_values, width):
    out = np.zeros((size, width))
    out[lab_pos] = one_hot(lab_values, width)
    return out


def fit_classifier(cfg: ExperimentConfig, pool: FeatureSet, state: ALState, seed: int, rnd: int) -> MLPParams:
    """Train a fresh classifier on the current labeled set (streams 4 and 5 of the round)."""
    net = init_mlp(pool.dim, cfg.hidden_width, pool.num_classes, "standard", False, _rng(seed, rnd, 4))
    tcfg = cfg.train.model_copy(update={"seed": int(_rng(seed, rnd, 5).integers(2**31))})
    return train_classifier(net, pool.features[state.labeled_array], state.labels_array, tcfg)


def round_clusters(cfg: ExperimentConfig, state: ALState, rnd: int, previous: int | None, b: int) -> int:
    if cfg.fixed_clusters is not None and rnd > 0:
        k = cfg.fixed_clusters
    else:
        k = cluster_schedule(len(state.labeled) if rnd else cfg.initial_budget, cfg.initial_budget,
                             cfg.c_max, rnd, previous, b, cfg.cluster_rule)
    return min(k, len(state.candidate) + len(state.labeled))


def run_seed(cfg: ExperimentConfig, seed: int, train: FeatureSet, test: FeatureSet,
             diagnostics_sink: list | None = None, selection_sink: list | None = None) -> list[MetricsRecord]:
    """One seeded active-learning run.

    Random streams per round ``r``: (r, 0) candidate subset, (r, 1) CPL,
    (r, 2) NTK network, (r, 3) selection, (r, 4) classifier init,
    (r, 5) training order, (r, 6) and (r, 7) diagnostic CPL and NTK.
    Per-round diagnostic reports are appended to ``diagnostics_sink`` and
    ``(round, step, sample_id, strategy)`` rows to ``selection_sink``.
    """
    state = ALState(train, schedule=list(cfg.schedule), initial_budget=cfg.initial_budget)
    spec = cfg.strategy
    budgets = [cfg.initial_budget] + list(cfg.schedule)
    records = []
    classifier = None
    n_clusters = None
    for rnd, b in enumerate(budgets):
        if len(state.unlabeled) == 0:
            log.warning("seed %d: unlabeled pool exhausted before round %d", seed, rnd)
            break
        if b > len(state.unlabeled):
            log.warning("seed %d round %d: truncating query %d to %d", seed, rnd, b, len(state.unlabeled))
            b = len(state.unlabeled)
        state.round = rnd
        sample_candidate_subset(state, cfg.candidate_size, _rng(seed, rnd, 0))
        b = min(b, len(state.candidate))
        n_clusters = round_clusters(cfg, state, rnd, n_clusters, b)

        t0 = time.perf_counter()
        if rnd == 0:
            picks = initial_selection(train.features, state.candidate, b, _rng(seed, rnd, 3))
        else:
            ctx = None
            if spec.name in KERNEL_STRATEGIES:
                ctx = build_round_context(cfg, state, classifier, n_clusters, _rng(seed, rnd, 1),
                                          _rng(seed, rnd, 2), need_kernel=True, need_cpl=spec.name == "ntkcpl")
            picks = run_strategy(cfg, state, b, classifier, ctx, _rng(seed, rnd, 3))
        elapsed = time.perf_counter() - t0
        query_oracle(state, picks)
        if selection_sink is not None:
            name = "initial" if rnd == 0 else spec.label
            selection_sink.extend((rnd, step, sid, name) for step, sid in enumerate(picks))

        classifier = fit_classifier(cfg, train, state, seed, rnd)
        acc = float(np.mean(np.argmax(forward(classifier, test.features), 1) == test.true_labels))

        diag = {}
        if cfg.diagnostics and len(state.candidate):
            # CPL and kernel rebuilt around the freshly trained classifier and the grown labeled set
            k_diag = round_clusters(cfg, state, rnd + 1, n_clusters, b)
            dctx = build_round_context(cfg, state, classifier, k_diag, _rng(seed, rnd, 6), _rng(seed, rnd, 7))
            diag = diagnose_round(state, classifier, dctx)
            if diagnostics_sink is not None:
                diagnostics_sink.append({"seed": seed, "round": rnd, "total_labels": len(state.labeled),
                                         "strategy": spec.label, "n_clusters": k_diag, **diag})
        records.append(MetricsRecord(
            seed=seed, round=rnd, total_labels=len(state.labeled), strategy=spec.label,
            test_accuracy=acc,
            estimated_coverage=diag.get("estimated_coverage", math.nan),
            true_coverage=diag.get("true_coverage", math.nan),
            p_nff=diag.get("p_nff", math.nan), p_fnf=diag.get("p_fnf", math.nan),
            n_clusters=int(n_clusters), wallclock_select_seconds=elapsed))
        log.info("seed %d round %d labels %d acc %.4f", seed, rnd, len(state.labeled), acc)
    return records


def _seed_job(args):
    cfg, seed, train, test = args
    diags, picks = [], []
    return run_seed(cfg, seed, train, test, diags, picks), diags, picks


def run_experiment(cfg: ExperimentConfig, diagnostics_sink: list | None = None) -> list[MetricsRecord]:
    """Run every seed (in worker processes when ``seed_workers > 1``) and emit the report."""
    train, test = load_datasets(cfg)
    jobs = [(cfg, seed, train, test) for seed in cfg.seeds]
    if cfg.seed_workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.seed_workers, len(jobs))) as pool:
            results = list(pool.map(_seed_job, jobs))
    else:
        results = [_seed_job(job) for job in jobs]
    records, diags = [], []
    for recs, sink, _ in results:
        records.extend(recs)
        diags.extend(sink)
    if diagnostics_sink is not None:
        diagnostics_sink.extend(diags)
    if cfg.output_dir:
        emit_report(records, cfg.output_dir)
        if diags:
            write_diagnostics(diags, Path(cfg.output_dir) / "diagnostics.jsonl")
        for seed, (_, _, picks) in zip(cfg.seeds, results):
            write_selection_csv(picks, Path(cfg.output_dir) / f"selections_seed{seed}.csv")
    return records


def _json_safe(rep: dict) -> dict:
    return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in rep.items()}


def write_diagnostics(reports, path) -> None:
    """One JSON document per line, one line per round."""
    try:
        with open(path, "w") as fh:
            for rep in reports:
                fh.write(json.dumps(_json_safe(rep), sort_keys=True) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write diagnostics to {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Reporting


def write_records(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RECORD_FIELDS)
        for r in records:
            w.writerow([_fmt(getattr(r, f)) for f in RECORD_FIELDS])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_records(path) -> list[MetricsRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            kw = {}
            for f in fields(MetricsRecord):
                raw = row[f.name]
                kw[f.name] = int(raw) if f.type in ("int", int) else (raw if f.type in ("str", str) else float(raw))
            out.append(MetricsRecord(**kw))
    return out


def summarize(records) -> dict:
    """Per-strategy curves: budget grid with mean and (population) std of test accuracy."""
    by = {}
    for r in records:
        by.setdefault(r.strategy, {}).setdefault(r.total_labels, []).append(r.test_accuracy)
    out = {}
    for strat, grid in by.items():
        budgets = sorted(grid)
        out[strat] = {
            "labels": budgets,
            "mean": [float(np.mean(grid[b])) for b in budgets],
            "std": [float(np.std(grid[b])) for b in budgets],
            "n": [len(grid[b]) for b in budgets],
        }
    return out


def ratio_table(summary: dict, baseline: str = "random") -> dict:
    if baseline not in summary:
        return {}
    base = summary[baseline]
    table = {}
    for strat, curve in summary.items():
        if curve["labels"] != base["labels"]:
            log.warning("skipping %s: budget grid differs from %s", strat, baseline)
            continue
        table[strat] = analysis.effective_budget_ratio(curve["mean"], base["mean"], base["std"],
                                                      curve["labels"], base["labels"])
    return table


def emit_report(records, output_dir, baseline: str = "random") -> dict:
    """Write records.csv, summary.json, plot_<strategy>.csv and budget_ratio.csv."""
    if not records:
        raise DataError("no records to report")
    out = Path(output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_records(records, out / "records.csv")
        summary = summarize(records)
        ratios = ratio_table(summary, baseline)
        with open(out / "summary.json", "w") as fh:
            json.dump({"curves": summary, "effective_budget_ratio": ratios, "baseline": baseline},
                      fh, indent=2, sort_keys=True)
        paths = {"records": str(out / "records.csv"), "summary": str(out / "summary.json")}
        for strat, curve in summary.items():
            p = out / f"plot_{_slug(strat)}.csv"
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["budget", "mean", "std"])
                for row in zip(curve["labels"], curve["mean"], curve["std"]):
                    w.writerow([_fmt(v) for v in row])
            paths[f"plot_{strat}"] = str(p)
        with open(out / "budget_ratio.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["strategy", "effective_budget_ratio"])
            for strat, v in sorted(ratios.items()):
                w.writerow([strat, repr(v)])
        paths["budget_ratio"] = str(out / "budget_ratio.csv")
    except OSError as exc:
        raise DataError(f"cannot write report to {out}: {exc}") from exc
    return paths


def _slug(name: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in name).strip("_")


def records_to_dicts(records) -> list[dict]:
    return [asdict(r) for r in records]
