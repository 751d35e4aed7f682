"""Diagnostics for the CPL-based risk estimate."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import PreconditionError
from .ntk import KernelSystem, estimate_pool_risk, ntk_predict, one_hot


def label_map_g(f_cpl_pred, dominant, num_classes: int) -> np.ndarray:
    """Sum CPL-class scores into true-class scores: out[:, j] = sum_{k: dominant[k] = j} in[:, k]."""
    f = np.asarray(f_cpl_pred, dtype=np.float64)
    dominant = np.asarray(dominant, dtype=np.int64)
    if f.shape[1] != len(dominant):
        raise PreconditionError("one dominant label per CPL class is required")
    if np.any(dominant < 0) or np.any(dominant >= num_classes):
        raise PreconditionError("dominant labels must lie in [0, num_classes)")
    return f @ one_hot(dominant, num_classes)


def dominance_from_members(cpl_labels, true_labels, n_clusters: int | None = None) -> np.ndarray:
    """Most frequent true class per cluster (ties -> lowest class); -1 for empty clusters."""
    cpl_labels = np.asarray(cpl_labels, dtype=np.int64)
    true_labels = np.asarray(true_labels, dtype=np.int64)
    k = int(cpl_labels.max()) + 1 if n_clusters is None else n_clusters
    counts = np.zeros((k, int(true_labels.max()) + 1), dtype=np.int64)
    np.add.at(counts, (cpl_labels, true_labels), 1)
    dom = np.argmax(counts, axis=1)
    dom[counts.sum(1) == 0] = -1
    return dom


@dataclass
class PropositionCheck:
    deviation: float
    violations: list  # labeled positions whose true label is not their cluster's dominant label


def verify_proposition(sys: KernelSystem, labeled_true, cpl_labels, dominant, num_classes: int,
                       query=None, strict: bool = True) -> PropositionCheck:
    """Compare NTK predictions trained on true labels with mapped predictions trained on CPL.

    Requires f0 == 0. With ``strict`` a labeled sample whose true label is
    not the dominant label of its cluster raises; otherwise the deviation is
    computed anyway and the offenders are listed.
    """
    if np.any(sys.f0):
        raise PreconditionError("the proposition holds only with zero initial outputs")
    L = list(sys.labeled)
    cpl_labels = np.asarray(cpl_labels, dtype=np.int64)
    dominant = np.asarray(dominant, dtype=np.int64)
    labeled_true = np.asarray(labeled_true, dtype=np.int64)
    bad = [int(p) for p, y in zip(L, labeled_true) if dominant[cpl_labels[p]] != y]
    if bad and strict:
        raise PreconditionError(f"labeled position {bad[0]} breaks dominance: its true label "
                                f"is not the dominant label of CPL cluster {cpl_labels[bad[0]]}")
    query = np.arange(sys.size) if query is None else np.asarray(query)
    f_y = ntk_predict(sys, one_hot(labeled_true, num_classes), query)
    f_cpl = ntk_predict(sys, one_hot(cpl_labels[L], len(dominant)), query)
    dev = float(np.max(np.abs(f_y - label_map_g(f_cpl, dominant, num_classes))))
    return PropositionCheck(dev, bad)


def argmax_agreement(f_y, f_cpl, dominant) -> float:
    """Rate at which argmax of the true-label predictor equals g(argmax of the CPL predictor)."""
    return float(np.mean(np.argmax(f_y, 1) == np.asarray(dominant)[np.argmax(f_cpl, 1)]))


@dataclass
class ErrorDecomposition:
    p_nff: float
    p_fnf: float
    error_cpl: float
    impurity_share: float
    overclustering_share: float
    n: int
    n_nff: int
    n_fnf: int

    @property
    def mismatches(self) -> int:
        return self.n_nff + self.n_fnf

    def to_dict(self) -> dict:
        return asdict(self)


def decompose_error(ntk_preds_cpl, y_true, y_cpl, dominance, ntk_preds_true=None) -> ErrorDecomposition:
    """Split the CPL term of the risk-approximation error into p_nff and p_fnf.

    Agreement with y_cpl uses argmax of the CPL-space predictions.
    Agreement with y uses argmax of ``ntk_preds_true`` when given,
    otherwise the CPL argmax mapped through ``dominance``. Inputs may be
    score matrices or already-reduced class vectors.
    """
    def classes(a):
        a = np.asarray(a)
        return np.argmax(a, axis=1) if a.ndim == 2 else a.astype(np.int64)

    k_hat = classes(ntk_preds_cpl)
    y_true = np.asarray(y_true, dtype=np.int64)
    y_cpl = np.asarray(y_cpl, dtype=np.int64)
    dominance = np.asarray(dominance, dtype=np.int64)
    y_hat = dominance[k_hat] if ntk_preds_true is None else classes(ntk_preds_true)
    agree_y = y_hat == y_true
    agree_cpl = k_hat == y_cpl
    nff = ~agree_y & agree_cpl
    fnf = agree_y & ~agree_cpl
    n = len(y_true)
    n_nff, n_fnf = int(nff.sum()), int(fnf.sum())
    impure = y_true != dominance[y_cpl]
    over = dominance[k_hat] == dominance[y_cpl]
    imp_share = float(impure[nff].mean()) if n_nff else 0.0
    over_share = float(over[fnf].mean()) if n_fnf else 0.0
    return ErrorDecomposition(n_nff / n, n_fnf / n, (n_nff + n_fnf) / n,
                              imp_share, over_share, n, n_nff, n_fnf)


def coverage_estimate(sys: KernelSystem, cpl_labels, scored, classifier_preds=None, true_labels=None,
                      num_clusters=None):
    """Estimated coverage (1 - NTK/CPL risk) and, given oracle labels, the true coverage.

    True coverage is the fraction of ``scored`` positions where the trained
    classifier's prediction matches the oracle label.
    """
    if not sys.labeled:
        raise PreconditionError("coverage needs a nonempty labeled set")
    est = 1.0 - estimate_pool_risk(sys, cpl_labels, scored, num_classes=num_clusters)
    true = None
    if classifier_preds is not None and true_labels is not None:
        true = float(np.mean(np.asarray(classifier_preds) == np.asarray(true_labels)))
    return est, true


def effective_budget_ratio(strategy_mean, baseline_mean, baseline_std, strategy_grid=None,
                           baseline_grid=None) -> float:
    """Fraction of budget points where the strategy mean beats baseline mean + std."""
    s = np.asarray(strategy_mean, dtype=np.float64)
    m = np.asarray(baseline_mean, dtype=np.float64)
    sd = np.asarray(baseline_std, dtype=np.float64)
    if strategy_grid is not None and baseline_grid is not None:
        if list(strategy_grid) != list(baseline_grid):
            raise PreconditionError("strategy and baseline budget grids differ")
    if not (s.shape == m.shape == sd.shape) or s.size == 0:
        raise PreconditionError("curves must be aligned and nonempty")
    return float(np.mean(s > m + sd))
