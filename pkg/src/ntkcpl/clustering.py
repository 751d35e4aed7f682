"""K-means variants and clustering-pseudo-label (CPL) generation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConstraintError, PreconditionError



@dataclass
class ClusterModel:
    assignment: np.ndarray
    centroids: np.ndarray
    inertia: float
    history: list = field(default_factory=list)
    n_iter: int = 0

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


@dataclass
class CPL:
    """Pseudo-labels over the clustering universe (candidate + labeled positions).

    ``dominant_true[k]`` is the true class shared by the labeled members of
    cluster k, or -1 when the cluster has no labeled member.
    ``purity_stats[k, c]`` counts members of cluster k predicted as class c.
    """

    labels: np.ndarray
    dominant_true: np.ndarray
    purity_stats: np.ndarray

    @property
    def n_clusters(self) -> int:
        return len(self.dominant_true)

    def dominance(self) -> np.ndarray:
        """Per-cluster true class: from labeled members, else the majority prediction."""
        dom = self.dominant_true.copy()
        missing = dom < 0
        dom[missing] = np.argmax(self.purity_stats[missing], axis=1)
        return dom


def sq_distances(X, centroids) -> np.ndarray:
    d = (X * X).sum(1)[:, None] - 2.0 * X @ centroids.T + (centroids * centroids).sum(1)[None, :]
    return np.maximum(d, 0.0)


def inertia_of(X, assignment, centroids) -> float:
    return float(((X - centroids[assignment]) ** 2).sum())


def kmeans_pp(X, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding; returns the chosen row indices.

    First seed uniform, then D^2 sampling. When every remaining point
    coincides with a chosen seed the next seed is drawn uniformly among the
    not-yet-chosen rows.
    """
    X = np.asarray(X, dtype=np.float64)
    return _d2_seeds(X, k, rng, np.empty((0, X.shape[1])))


def _d2_seeds(X, k, rng, fixed):
    n = X.shape[0]
    chosen = []
    if len(fixed):
        d2 = sq_distances(X, fixed).min(axis=1)
    else:
        chosen.append(int(rng.integers(n)))
        d2 = ((X - X[chosen[0]]) ** 2).sum(1)
    while len(chosen) + len(fixed) < k:
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            rest = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rest[rng.integers(len(rest))])
        chosen.append(nxt)
        d2 = np.minimum(d2, ((X - X[nxt]) ** 2).sum(1))
    return np.asarray(chosen, dtype=np.int64)


def seeded_centroids(X, k, rng, fixed) -> np.ndarray:
    """``fixed`` centroids completed to ``k`` by D^2 sampling."""
    fixed = np.asarray(fixed, dtype=np.float64).reshape(-1, X.shape[1])[:k]
    extra = _d2_seeds(X, k, rng, fixed)
    return np.vstack([fixed, X[extra]])


def _cannot_link_lists(n, cannot_link):
    links = [[] for _ in range(n)]
    for a, b in cannot_link:
        a, b = int(a), int(b)
        if a == b:
            raise ConstraintError(f"point {a} has a cannot-link with itself", point=a)
        links[a].append(b)
        links[b].append(a)
    return links


def _assign(D, links, order):
    """Greedy nearest-feasible assignment in ``order`` (distance ties -> lowest cluster id).

    Unconstrained points take their nearest centroid directly; only points
    carrying cannot-links go through the sequential pass.
    """
    n, k = D.shape
    out = np.argmin(D, axis=1)
    linked = [i for i in order if links[i]]
    if not linked:
        return out
    out[linked] = -1
    for i in linked:
        banned = {out[j] for j in links[i] if out[j] >= 0}
        for c in np.argsort(D[i], kind="stable"):
            if c not in banned:
                out[i] = c
                break
        else:
            raise ConstraintError(f"point {i} cannot be placed in any of the {k} clusters", point=int(i))
    return out


def _repair_empty(X, assignment, centroids, links):
    """Move the point farthest from its centroid into each empty cluster."""
    k = centroids.shape[0]
    counts = np.bincount(assignment, minlength=k)
    for c in np.flatnonzero(counts == 0):
        dist = ((X - centroids[assignment]) ** 2).sum(1)
        dist[counts[assignment] <= 1] = -1.0
        if dist.max() < 0:
            break
        p = int(np.argmax(dist))
        counts[assignment[p]] -= 1
        assignment[p] = c
        counts[c] = 1
        centroids[c] = X[p]
    return assignment


def constrained_kmeans(X, k: int, cannot_link=(), rng: np.random.Generator | None = None,
                       max_iter: int = 100, order=None, init=None, init_assignment=None) -> ClusterModel:
    """Lloyd iterations with greedy cannot-link-respecting assignment.

    Points are assigned one at a time in ``order`` (default: index order)
    to the nearest centroid holding no cannot-link partner assigned earlier
    in the same pass. If a pass is infeasible, or would cost more under the
    current centroids than the previous assignment, the previous assignment
    is kept and iteration stops, so inertia never increases. Only an
    infeasible first pass raises. With no constraints this is plain
    Lloyd's algorithm.

    ``init`` optionally supplies initial centroids (k x d); otherwise
    k-means++ seeding is used. ``init_assignment`` instead warm-starts from
    a feasible assignment, whose cluster means become the first centroids.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if k < 1 or k > n:
        raise PreconditionError(f"k={k} must lie in [1, {n}]")
    rng = np.random.default_rng() if rng is None else rng
    links = _cannot_link_lists(n, cannot_link)
    order = np.arange(n) if order is None else np.asarray(order, dtype=np.int64)
    assignment = None
    history = []
    if init_assignment is not None:
        assignment = np.array(init_assignment, dtype=np.int64)
        if assignment.shape != (n,) or assignment.min() < 0 or assignment.max() >= k:
            raise PreconditionError(f"init_assignment must hold {n} cluster ids in [0, {k})")
        bad = count_violations(assignment, cannot_link)
        if bad:
            raise ConstraintError(f"init_assignment violates {bad} cannot-links")
        centroids = np.zeros((k, X.shape[1]))
        for c in range(k):
            if np.any(assignment == c):
                centroids[c] = X[assignment == c].mean(axis=0)
        assignment = _repair_empty(X, assignment, centroids, links)
        for c in range(k):
            centroids[c] = X[assignment == c].mean(axis=0)
        history.append(inertia_of(X, assignment, centroids))
    elif init is None:
        centroids = X[kmeans_pp(X, k, rng)].copy()
    else:
        centroids = np.array(init, dtype=np.float64)
        if centroids.shape != (k, X.shape[1]):
            raise PreconditionError(f"init must have shape {(k, X.shape[1])}")
    it = 0
    for it in range(1, max_iter + 1):
        D = sq_distances(X, centroids)
        try:
            new = _assign(D, links, order)
        except ConstraintError:
            if assignment is None:
                raise
            # keep the last feasible assignment
            break
        if assignment is not None:
            rows = np.arange(n)
            if D[rows, new].sum() > D[rows, assignment].sum():
                break
            if np.array_equal(new, assignment):
                break
        assignment = _repair_empty(X, new, centroids, links)
        for c in range(k):
            centroids[c] = X[assignment == c].mean(axis=0)
        history.append(inertia_of(X, assignment, centroids))
    return ClusterModel(assignment, centroids, history[-1], history, it)


def count_violations(assignment, cannot_link) -> int:
    assignment = np.asarray(assignment)
    return sum(int(assignment[a] == assignment[b]) for a, b in cannot_link)


def kmeans(X, k: int, rng: np.random.Generator | None = None, max_iter: int = 100) -> ClusterModel:
    return constrained_kmeans(X, k, (), rng, max_iter)


def count_confusing(model_preds) -> int:
    """Members whose predicted class differs from the dominant predicted class."""
    preds = np.asarray(model_preds, dtype=np.int64)
    if preds.size == 0:
        raise PreconditionError("cannot count confusing samples of an empty cluster")
    counts = np.bincount(preds)
    return int(preds.size - counts.max())


def cannot_links_from_labels(positions, labels):
    positions = np.asarray(positions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    pairs = []
    for a in range(len(positions)):
        for b in range(a + 1, len(positions)):
            if labels[a] != labels[b]:
                pairs.append((int(positions[a]), int(positions[b])))
    return pairs


def warm_start(X, c0: int, labeled, labeled_true, rng: np.random.Generator) -> np.ndarray:
    """Feasible initial assignment for the labeled cannot-link constraints.

    One centroid per labeled class mean, the remaining ``c0 - #classes`` by
    D^2 sampling; labeled points go to their class's cluster and the rest
    to the nearest centroid.
    """
    X = np.asarray(X, dtype=np.float64)
    labeled = np.asarray(labeled, dtype=np.int64)
    labeled_true = np.asarray(labeled_true, dtype=np.int64)
    classes = np.unique(labeled_true)
    if len(classes) > c0:
        raise ConstraintError(f"{len(classes)} labeled classes cannot be kept apart by {c0} clusters")
    means = np.stack([X[labeled[labeled_true == c]].mean(0) for c in classes])
    centroids = seeded_centroids(X, c0, rng, means)
    start = np.argmin(sq_distances(X, centroids), axis=1)
    start[labeled] = np.searchsorted(classes, labeled_true)
    return start


def generate_cpl(f_al, model_preds, c0: int, n_clusters: int, labeled, labeled_true,
                 rng: np.random.Generator, num_classes: int | None = None,
                 max_iter: int = 100) -> CPL:
    """Cluster-splitting CPL generation.

    Runs constrained k-means with ``c0`` clusters (cannot-links between
    labeled positions of different true classes; labeled positions are
    assigned first), warm-started from ``warm_start``. Then repeatedly splits the cluster with the most
    confusing members (ties -> lowest id) by plain 2-means until
    ``n_clusters`` clusters exist. A split cluster keeps its id for the
    half containing its first member; the other half gets the next id.
    """
    X = np.asarray(f_al, dtype=np.float64)
    preds = np.asarray(model_preds, dtype=np.int64)
    n = X.shape[0]
    labeled = np.asarray(labeled, dtype=np.int64)
    labeled_true = np.asarray(labeled_true, dtype=np.int64)
    if c0 > n_clusters:
        raise PreconditionError(f"initial cluster count {c0} exceeds target {n_clusters}")
    if n_clusters > n:
        raise PreconditionError(f"cannot form {n_clusters} clusters from {n} samples")
    C = num_classes or int(max(preds.max(initial=0), labeled_true.max(initial=0))) + 1

    links = cannot_links_from_labels(labeled, labeled_true)
    is_lab = np.zeros(n, dtype=bool)
    is_lab[labeled] = True
    order = np.concatenate([labeled, np.flatnonzero(~is_lab)])
    if len(labeled):
        start = warm_start(X, c0, labeled, labeled_true, rng)
        base = constrained_kmeans(X, c0, links, rng, max_iter, order, init_assignment=start)
    else:
        base = kmeans(X, c0, rng, max_iter)

    assign = base.assignment.copy()
    for new_id in range(c0, n_clusters):
        scores = []
        for c in range(new_id):
            members = np.flatnonzero(assign == c)
            # singletons cannot be split
            scores.append(count_confusing(preds[members]) if len(members) >= 2 else -1)
        target = int(np.argmax(scores))
        if scores[target] < 0:
            raise PreconditionError("no cluster with two or more members left to split")
        members = np.flatnonzero(assign == target)
        halves = kmeans(X[members], 2, rng, max_iter).assignment
        if halves[0] != 0:
            halves = 1 - halves
        assign[members[halves == 1]] = new_id

    dominant = np.full(n_clusters, -1, dtype=np.int64)
    for pos, y in zip(labeled, labeled_true):
        dominant[assign[pos]] = y
    purity = np.zeros((n_clusters, C), dtype=np.int64)
    np.add.at(purity, (assign, preds), 1)
    return CPL(assign, dominant, purity)


def cluster_schedule(total_labels: int, b0: int, c_max: int, round: int, previous: int | None = None,
                     query_size: int | None = None, rule: str = "labels") -> int:
    """Number of CPL clusters for a round.

    Round 0 uses ``b0``. Later rounds use half the labels (``rule="labels"``)
    or half the query size (``rule="query"``), capped at ``c_max`` and never
    below the previous round's count.
    """
    if total_labels < b0:
        raise PreconditionError(f"total labels {total_labels} below initial budget {b0}")
    if round == 0:
        return b0
    if rule == "labels":
        n = total_labels // 2
    elif rule == "query":
        if query_size is None:
            raise PreconditionError("rule='query' needs the query size")
        n = query_size // 2
    else:
        raise PreconditionError(f"unknown cluster rule {rule!r}")
    n = min(n, c_max)
    floor = b0 if previous is None else previous
    return max(n, floor) if floor <= c_max else n


def write_cpl_csv(cpl: CPL, sample_ids, path, purity_path=None, true_labels=None) -> None:
    """``sample_id,cpl_class`` rows; optionally a per-cluster purity report beside it."""
    sample_ids = np.asarray(sample_ids)
    if len(sample_ids) != len(cpl.labels):
        raise PreconditionError("one sample id per CPL entry is required")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "cpl_class"])
        for sid, c in zip(sample_ids, cpl.labels):
            w.writerow([int(sid), int(c)])
    if purity_path is not None:
        rows = purity_report(cpl, true_labels)
        with open(purity_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)


def purity_report(cpl: CPL, true_labels=None) -> list[dict]:
    """Per cluster: size, dominant labeled class, predicted-class purity and, given oracle labels, true purity."""
    rows = []
    for k in range(cpl.n_clusters):
        members = cpl.labels == k
        size = int(members.sum())
        pred = cpl.purity_stats[k]
        row = {"cluster": k, "size": size, "dominant_true": int(cpl.dominant_true[k]),
               "predicted_purity": float(pred.max() / pred.sum()) if pred.sum() else 0.0,
               "confusing": int(pred.sum() - pred.max())}
        if true_labels is not None:
            counts = np.bincount(np.asarray(true_labels)[members]) if size else np.zeros(1)
            row["true_purity"] = float(counts.max() / size) if size else 0.0
        rows.append(row)
    return rows
