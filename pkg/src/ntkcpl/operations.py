"""The five service operations, callable in-process or behind the HTTP layer."""

from __future__ import annotations

import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness
from .clustering import cluster_schedule
from .dataset import ALState, load_features, sample_candidate_subset, save_features
from .errors import DataError, PreconditionError
from .harness import DatasetConfig, ExperimentConfig, _rng
from .model import load_params
from .schemas import (DiagnoseRequest, DiagnosticReport, IngestRequest, IngestResponse, ReportRequest,
                      ReportResponse, RoundOptions, RunRequest, RunResponse, SelectRequest, SelectResponse,
                      StateSpec)


def ingest(req: IngestRequest) -> IngestResponse:
    fs = load_features(req.input_path, req.input_format, req.num_classes)
    out = Path(req.output_path)
    if out.resolve() == Path(req.input_path).resolve():
        raise DataError("output path must differ from the input path")
    try:
        save_features(fs, out, req.output_format)
    except OSError as exc:
        raise DataError(f"cannot write {out}: {exc}") from exc
    return IngestResponse(output_path=str(out), n=fs.n, dim=fs.dim, labeled=fs.true_labels is not None,
                          num_classes=fs.num_classes)


def run(req: RunRequest) -> RunResponse:
    records = harness.run_experiment(req.config)
    outputs = {}
    if req.config.output_dir:
        out = Path(req.config.output_dir)
        outputs = {"records": str(out / "records.csv"), "summary": str(out / "summary.json")}
        if (out / "diagnostics.jsonl").exists():
            outputs["diagnostics"] = str(out / "diagnostics.jsonl")
    rows = [_json_safe(r) for r in harness.records_to_dicts(records)]
    return RunResponse(records=rows, outputs=outputs)


def _json_safe(row: dict) -> dict:
    return {k: (None if isinstance(v, float) and np.isnan(v) else v) for k, v in row.items()}


def report(req: ReportRequest) -> ReportResponse:
    records = []
    for path in req.records_paths:
        try:
            records.extend(harness.read_records(path))
        except FileNotFoundError as exc:
            raise DataError(f"records file not found: {path}") from exc
        except (KeyError, ValueError) as exc:
            raise DataError(f"malformed records file {path}: {exc}") from exc
    outputs = harness.emit_report(records, req.output_dir, req.baseline)
    ratios = harness.ratio_table(harness.summarize(records), req.baseline)
    return ReportResponse(outputs=outputs, effective_budget_ratio=ratios, n_records=len(records))


# ---------------------------------------------------------------------------
# One-shot rounds over an explicit state


def _load_state(spec: StateSpec) -> ALState:
    pool = load_features(spec.pool_path, spec.format)
    if spec.labeled and (min(spec.labeled) < 0 or max(spec.labeled) >= pool.n):
        raise PreconditionError(f"labeled indices must lie in [0, {pool.n})")
    if spec.labels:
        need = max(spec.labels) + 1
        if min(spec.labels) < 0:
            raise PreconditionError("labels must be non-negative")
        if need > pool.num_classes:
            if pool.true_labels is not None:
                raise PreconditionError(f"label {need - 1} exceeds the pool's {pool.num_classes} classes")
            pool = replace(pool, num_classes=need)
    return ALState(pool, labeled=list(spec.labeled), labels=list(spec.labels), round=spec.round,
                   initial_budget=spec.initial_budget)


def _round_config(spec: StateSpec, strategy, opts: RoundOptions, budget: int) -> ExperimentConfig:
    return ExperimentConfig(
        dataset=DatasetConfig(train_path=spec.pool_path, test_path=spec.pool_path, format=spec.format),
        strategy=strategy, schedule=[budget], initial_budget=spec.initial_budget,
        c_max=max(opts.c_max, spec.initial_budget), candidate_size=opts.candidate_size,
        hidden_width=opts.hidden_width, train=opts.train, ntk=opts.ntk, seeds=[spec.seed],
        diagnostics=False, n_jobs=opts.n_jobs)


def _classifier(cfg: ExperimentConfig, state: ALState, spec: StateSpec):
    """Checkpoint if given, else retrained as the experiment loop would have at the previous round."""
    if spec.classifier_path:
        params = load_params(spec.classifier_path)
        if params.d != state.pool.dim:
            raise DataError(f"classifier expects {params.d} features, pool has {state.pool.dim}")
        return params
    return harness.fit_classifier(cfg, state.pool, state, spec.seed, max(spec.round - 1, 0))


def _clusters(opts: RoundOptions, state: ALState, rnd: int, b: int) -> int:
    k = opts.n_clusters or cluster_schedule(len(state.labeled), state.initial_budget,
                                            max(opts.c_max, state.initial_budget), rnd, None, b)
    return min(k, len(state.candidate) + len(state.labeled))


def select(req: SelectRequest) -> SelectResponse:
    spec = req.state
    state = _load_state(spec)
    cfg = _round_config(spec, req.strategy, req.options, req.budget)
    sample_candidate_subset(state, req.options.candidate_size, _rng(spec.seed, spec.round, 0))
    t0 = time.perf_counter()
    if not state.labeled:
        if req.budget > len(state.candidate):
            raise PreconditionError(f"budget {req.budget} exceeds the {len(state.candidate)} candidates")
        k = req.budget
        picks = harness.initial_selection(state.pool.features, state.candidate, req.budget,
                                          _rng(spec.seed, spec.round, 3))
    else:
        k = _clusters(req.options, state, max(spec.round, 1), req.budget)
        classifier = _classifier(cfg, state, spec)
        ctx = None
        if req.strategy.name in harness.KERNEL_STRATEGIES:
            ctx = harness.build_round_context(cfg, state, classifier, k, _rng(spec.seed, spec.round, 1),
                                              _rng(spec.seed, spec.round, 2),
                                              need_cpl=req.strategy.name == "ntkcpl")
        picks = harness.run_strategy(cfg, state, req.budget, classifier, ctx, _rng(spec.seed, spec.round, 3))
    return SelectResponse(selected=[int(i) for i in picks], strategy=req.strategy.label, round=spec.round,
                          n_clusters=int(k), candidate_size=len(state.candidate),
                          wallclock_select_seconds=time.perf_counter() - t0)


def diagnose(req: DiagnoseRequest) -> DiagnosticReport:
    spec = req.state
    state = _load_state(spec)
    if state.pool.true_labels is None:
        raise DataError("diagnosis needs oracle labels in the pool file")
    if not state.labeled:
        raise PreconditionError("diagnosis needs a nonempty labeled set")
    cfg = _round_config(spec, req.strategy, req.options, 1)
    sample_candidate_subset(state, req.options.candidate_size, _rng(spec.seed, spec.round, 0))
    k = _clusters(req.options, state, max(spec.round, 1), 1)
    classifier = _classifier(cfg, state, spec)
    ctx = harness.build_round_context(cfg, state, classifier, k, _rng(spec.seed, spec.round, 6),
                                      _rng(spec.seed, spec.round, 7))
    diag = harness.diagnose_round(state, classifier, ctx)
    return DiagnosticReport(round=spec.round, total_labels=len(state.labeled), n_clusters=int(k),
                            **_json_safe(diag))

