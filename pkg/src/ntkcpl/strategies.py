"""Query strategies. Every selector returns distinct global sample indices from U.

Scoring happens over ``state.candidate``; ties always go to the lower
index (candidate order is sorted, so lower position means lower index).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict

from .clustering import CPL
from .dataset import ALState
from .errors import PreconditionError
from .model import MLPParams, forward, grad_embedding, softmax
from .ntk import KernelSystem, extend_labeled, hypothetical_mismatches, one_hot, current_fit

STRATEGIES = ("random", "entropy", "coreset", "badge", "lookahead", "ntkcpl")


class StrategySpec(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants")

    name: Literal["random", "entropy", "coreset", "badge", "lookahead", "ntkcpl"] = "ntkcpl"
    feature_source: Literal["self_supervised", "active_learning"] = "active_learning"
    # per-strategy NTK overrides; None falls back to the experiment's NTK options
    ridge: float | None = None
    time: float | None = None
    seed: int = 0

    @property
    def label(self) -> str:
        if self.name in ("ntkcpl", "coreset"):
            return f"{self.name}({'al' if self.feature_source == 'active_learning' else 'self'})"
        return self.name


def _check_budget(state: ALState, b: int, pool_size: int | None = None):
    if b < 0:
        raise PreconditionError("budget must be non-negative")
    size = len(state.unlabeled) if pool_size is None else pool_size
    if b > size:
        raise PreconditionError(f"budget {b} exceeds the {size} selectable samples")


def select_random(state: ALState, b: int, rng: np.random.Generator) -> list[int]:
    _check_budget(state, b)
    if b == 0:
        return []
    return [int(i) for i in rng.choice(state.unlabeled, size=b, replace=False)]


def entropy(logits: np.ndarray) -> np.ndarray:
    p = softmax(logits)
    return -(p * np.log(np.clip(p, 1e-300, None))).sum(axis=1)


def top_b(scores: np.ndarray, b: int) -> np.ndarray:
    """Positions of the ``b`` largest scores; ties resolved toward lower position."""
    return np.argsort(-np.asarray(scores), kind="stable")[:b]


def select_entropy(state: ALState, b: int, classifier: MLPParams, features=None) -> list[int]:
    cand = state.candidate
    _check_budget(state, b, len(cand))
    X = state.pool.features if features is None else features
    scores = entropy(forward(classifier, X[cand]))
    return [int(cand[j]) for j in top_b(scores, b)]


def k_center_greedy(points: np.ndarray, centers: np.ndarray, b: int) -> list[int]:
    """Greedy k-center over rows of ``points``; returns chosen row positions.

    ``centers`` are the already-covering rows. With no centers the first
    pick is the point farthest from the mean of ``points``.
    """
    if len(centers):
        mins = np.sqrt(np.min(_sqdist(points, centers), axis=1))
    else:
        mins = None
    chosen = []
    for _ in range(b):
        if mins is None:
            j = int(np.argmax(((points - points.mean(0)) ** 2).sum(1)))
            mins = np.full(len(points), np.inf)
        else:
            masked = mins.copy()
            masked[chosen] = -np.inf
            j = int(np.argmax(masked))
        chosen.append(j)
        mins = np.minimum(mins, np.sqrt(((points - points[j]) ** 2).sum(1)))
    return chosen


def _sqdist(A, B):
    d = (A * A).sum(1)[:, None] - 2.0 * A @ B.T + (B * B).sum(1)[None, :]
    return np.maximum(d, 0.0)


def select_coreset(state: ALState, b: int, features) -> list[int]:
    cand = state.candidate
    _check_budget(state, b, len(cand))
    X = np.asarray(features, dtype=np.float64)
    chosen = k_center_greedy(X[cand], X[state.labeled_array], b)
    return [int(cand[j]) for j in chosen]


def select_badge(state: ALState, b: int, classifier: MLPParams, rng: np.random.Generator,
                 features=None) -> list[int]:
    """k-means++ seeding over gradient embeddings of the candidate set.

    First seed uniform; later seeds with probability proportional to the
    squared distance to the nearest chosen seed. Once all remaining
    weights are zero the rest is drawn uniformly among unchosen candidates.
    """
    cand = state.candidate
    _check_budget(state, b, len(cand))
    if b == 0:
        return []
    X = state.pool.features if features is None else features
    emb = grad_embedding(classifier, X[cand])
    return [int(cand[j]) for j in d2_sampling(emb, b, rng)]


def d2_sampling(emb: np.ndarray, b: int, rng: np.random.Generator) -> list[int]:
    n = len(emb)
    chosen = [int(rng.integers(n))]
    d2 = ((emb - emb[chosen[0]]) ** 2).sum(1)
    d2[chosen] = 0.0
    while len(chosen) < b:
        total = d2.sum()
        if total > 0:
            j = int(rng.choice(n, p=d2 / total))
        else:
            rest = np.setdiff1d(np.arange(n), chosen)
            j = int(rest[rng.integers(len(rest))])
        chosen.append(j)
        d2 = np.minimum(d2, ((emb - emb[j]) ** 2).sum(1))
        d2[chosen] = 0.0
    return chosen


# ---------------------------------------------------------------------------
# NTK look-ahead strategies. Kernel positions, not sample indices, index the
# kernel system; ``positions`` maps candidate sample ids to kernel rows.


@dataclass
class KernelView:
    """A kernel system plus the map between its rows and pool sample indices."""

    system: KernelSystem
    index: np.ndarray  # kernel row -> global sample index

    def positions(self, samples) -> np.ndarray:
        lookup = {int(s): p for p, s in enumerate(self.index)}
        return np.asarray([lookup[int(s)] for s in samples], dtype=np.int64)


def select_lookahead(state: ALState, b: int, view: KernelView, labeled_targets: np.ndarray,
                     num_classes: int) -> list[int]:
    """Greedy maximum total L1 output change under hypothetical NTK retraining.

    Each candidate is hypothetically labeled with its own current predicted
    class. Adding c changes every prediction by v(x) r_c / s_c, so the total
    change over the candidate set is sum_x |v(x)| * ||r_c||_1 / s_c.
    """
    cand = state.candidate
    _check_budget(state, b, len(cand))
    sys = view.system
    if not math.isinf(sys.time):
        raise PreconditionError("look-ahead scoring uses the converged predictor; set time to inf")
    scored = view.positions(cand)
    targets = np.zeros((sys.size, num_classes))
    targets[list(sys.labeled)] = labeled_targets
    picked = []
    for _ in range(b):
        F, proj = current_fit(sys, targets)
        L = list(sys.labeled)
        avail = np.asarray([p for p in scored if p not in set(picked)], dtype=np.int64)
        V = sys.gram[np.ix_(scored, avail)]
        s = sys.gram[avail, avail] + sys.ridge
        if L:
            V = V - sys.gram[np.ix_(scored, L)] @ proj[:, avail]
            s = s - np.einsum("ij,ij->j", sys.gram[np.ix_(L, avail)], proj[:, avail])
        pseudo = np.argmax(F[avail], axis=1)
        R = one_hot(pseudo, num_classes) - F[avail]
        change = np.abs(V).sum(0) * np.abs(R).sum(1) / np.where(s > 0, s, np.inf)
        j = int(np.argmax(change))
        pos = int(avail[j])
        picked.append(pos)
        targets[pos] = one_hot([pseudo[j]], num_classes)[0]
        sys = extend_labeled(sys, pos)
    return [int(view.index[p]) for p in picked]


def select_ntkcpl(state: ALState, b: int, view: KernelView, cpl: CPL, n_jobs: int = 1,
                  return_risks: bool = False):
    """Greedy empirical-risk minimization with NTK predictions and CPL targets.

    At each of ``b`` steps every remaining candidate is hypothetically added
    (labeled with its own CPL class); the one whose NTK predictor, trained
    on the labeled set plus itself, disagrees with the fewest CPL labels over
    the whole candidate set is committed with its CPL label. The committed
    CPL labels are provisional; the caller replaces them with oracle labels.
    """
    cand = state.candidate
    _check_budget(state, b, len(cand))
    sys = view.system
    labels = np.asarray(cpl.labels, dtype=np.int64)
    if labels.shape != (sys.size,):
        raise PreconditionError("CPL must cover every kernel position")
    targets = one_hot(labels, cpl.n_clusters)
    scored = view.positions(cand)
    remaining = list(scored)
    picked, risks = [], []
    for _ in range(b):
        miss = hypothetical_mismatches(sys, targets, labels, scored, remaining, n_jobs=n_jobs)
        j = int(np.argmin(miss))
        pos = remaining.pop(j)
        picked.append(pos)
        risks.append(miss[j] / len(scored))
        sys = extend_labeled(sys, pos)
    out = [int(view.index[p]) for p in picked]
    return (out, risks) if return_risks else out


def write_selection_csv(rows, path) -> None:
    """Selection log rows ``(round, step, sample_id, strategy)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "step", "sample_id", "strategy"])
        for rnd, step, sid, name in rows:
            w.writerow([int(rnd), int(step), int(sid), name])
