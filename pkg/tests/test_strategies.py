import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ntkcpl.clustering import CPL
from ntkcpl.dataset import ALState, FeatureSet
from ntkcpl.errors import PreconditionError
from ntkcpl.model import MLPParams, init_mlp
from ntkcpl.ntk import KernelSystem, estimate_pool_risk, from_jacobian, one_hot
from ntkcpl.strategies import (KernelView, StrategySpec, d2_sampling, entropy, select_badge, select_coreset,
                               select_entropy, select_lookahead, select_ntkcpl, select_random,
                               write_selection_csv)

from oracles import kernel_regression, naive_ntkcpl


def _state(X, labeled=(), y=None, candidate=None):
    X = np.asarray(X, dtype=float)
    y = np.zeros(len(X), dtype=int) if y is None else np.asarray(y)
    st_ = ALState(FeatureSet.from_arrays(X, y, int(y.max()) + 1), labeled=list(labeled))
    st_.candidate = st_.unlabeled.copy() if candidate is None else np.asarray(candidate)
    return st_


def _identity_view(state, sys):
    return KernelView(sys, np.arange(sys.size))


def test_random_contract():
    s = _state(np.zeros((10, 1)), labeled=[0, 1])
    assert sorted(select_random(s, 8, np.random.default_rng(0))) == list(range(2, 10))
    assert select_random(s, 0, np.random.default_rng(0)) == []
    a = select_random(s, 3, np.random.default_rng(4))
    assert a == select_random(s, 3, np.random.default_rng(4))
    with pytest.raises(PreconditionError):
        select_random(s, 9, np.random.default_rng(0))


def _logit_net(logits_by_row):
    """A net whose logits on one-hot inputs are the given rows."""
    L = np.asarray(logits_by_row, dtype=float)
    n, C = L.shape
    return MLPParams(np.eye(n), np.zeros(n), L, np.zeros(C))


def test_entropy_prefers_uniform_and_breaks_ties_low():
    net = _logit_net([[5.0, -5.0], [0.0, 0.0], [0.0, 0.0]])
    s = _state(np.eye(3))
    assert select_entropy(s, 1, net) == [1]
    assert select_entropy(s, 3, net) == [1, 2, 0]


def test_entropy_matches_full_sort(rng):
    net = init_mlp(4, 8, 3, "standard", False, rng)
    X = rng.standard_normal((100, 4))
    s = _state(X)
    from ntkcpl.model import forward

    H = entropy(forward(net, X))
    ref = sorted(range(100), key=lambda i: (-H[i], i))[:10]
    assert select_entropy(s, 10, net) == ref


def test_coreset_hand_example():
    X = np.array([[0.0], [1.0], [2.0], [10.0]])
    s = _state(X, labeled=[0])
    assert select_coreset(s, 1, X) == [3]
    assert select_coreset(s, 2, X) == [3, 2]


def test_coreset_empty_labeled_starts_far_from_centroid():
    X = np.array([[0.0], [1.0], [2.0], [10.0]])
    assert select_coreset(_state(X), 1, X) == [3]


def _radius(X, centers):
    d = np.sqrt(((X[:, None] - X[centers][None]) ** 2).sum(-1))
    return d.min(1).max()


@pytest.mark.parametrize("seed", range(5))
def test_coreset_single_swap_is_not_better_than_greedy_radius_bound(seed):
    # greedy k-center is a 2-approximation; check it against every single swap
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((10, 2))
    s = _state(X, labeled=[0])
    picks = select_coreset(s, 3, X)
    centers = [0] + picks
    r = _radius(X, centers)
    for out, inn in itertools.product(picks, set(range(1, 10)) - set(picks)):
        swapped = [c if c != out else inn for c in centers]
        assert r <= 2 * _radius(X, swapped) + 1e-12


def test_d2_sampling_frequencies():
    emb = np.array([[0.0], [1.0], [3.0]])
    counts = np.zeros((3, 3))
    for s in range(10_000):
        a, b = d2_sampling(emb, 2, np.random.default_rng(s))
        counts[a, b] += 1
    # analytic: first uniform, then squared distance to the first pick
    d2 = (emb - emb.T) ** 2
    expect = d2 / d2.sum(1, keepdims=True) / 3
    assert np.max(np.abs(counts / 10_000 - expect)) < 0.02


def test_d2_sampling_degenerate_falls_back_to_uniform():
    picks = d2_sampling(np.ones((5, 2)), 5, np.random.default_rng(0))
    assert sorted(picks) == list(range(5))


def test_badge_deterministic(rng):
    net = init_mlp(3, 4, 2, "standard", False, rng)
    s = _state(rng.standard_normal((20, 3)))
    a = select_badge(s, 4, net, np.random.default_rng(1))
    assert a == select_badge(s, 4, net, np.random.default_rng(1)) and len(set(a)) == 4


def test_lookahead_skips_duplicates_of_labeled(rng):
    X = rng.standard_normal((6, 8))
    X[3] = X[0]
    sys = from_jacobian(X, np.zeros(6), ridge=1e-8).with_labeled([0])
    s = _state(X, labeled=[0], y=[0, 0, 0, 0, 0, 0])
    s.candidate = np.array([1, 2, 3, 4, 5])
    picks = select_lookahead(s, 4, _identity_view(s, sys), one_hot([1], 2), 2)
    assert 3 not in picks
    assert select_lookahead(s, 0, _identity_view(s, sys), one_hot([1], 2), 2) == []


def naive_lookahead(gram, labeled, Y, candidates, b, ridge, C):
    L, Y = list(labeled), np.asarray(Y, dtype=float)
    picked = []
    for _ in range(b):
        zero = np.zeros((gram.shape[0], C))
        F = kernel_regression(gram, zero, L, Y, np.arange(gram.shape[0]), ridge)
        best, best_c = -1.0, None
        for c in candidates:
            if c in picked:
                continue
            y_c = np.eye(C)[np.argmax(F[c])]
            G = kernel_regression(gram, zero, L + [c], np.vstack([Y, y_c]), candidates, ridge)
            change = np.abs(G - F[candidates]).sum()
            if change > best + 1e-12:
                best, best_c = change, c
        picked.append(best_c)
        L.append(best_c)
        Y = np.vstack([Y, np.eye(C)[np.argmax(F[best_c])]])
    return picked


@pytest.mark.parametrize("seed", range(8))
def test_lookahead_matches_naive(seed):
    rng = np.random.default_rng(seed)
    n, C = 12, 3
    X = rng.standard_normal((n, 5))
    sys = from_jacobian(X, np.zeros(n), ridge=0.1).with_labeled([0, 1])
    y = rng.integers(0, C, n)
    s = _state(X, labeled=[0, 1], y=y)
    Y = one_hot(y[[0, 1]], C)
    got = select_lookahead(s, 3, _identity_view(s, sys), Y, C)
    assert got == naive_lookahead(sys.gram, [0, 1], Y, list(range(2, n)), 3, 0.1, C)


def test_lookahead_rejects_finite_time(rng):
    X = rng.standard_normal((4, 5))
    sys = from_jacobian(X, np.zeros(4), ridge=0.1, time=1.0).with_labeled([0])
    s = _state(X, labeled=[0])
    with pytest.raises(PreconditionError):
        select_lookahead(s, 1, _identity_view(s, sys), one_hot([0], 1), 1)


def test_ntkcpl_two_clusters_picks_uncovered_cluster():
    rng = np.random.default_rng(0)
    X = np.vstack([rng.normal(0, 0.1, (5, 2)) + [3, 0], rng.normal(0, 0.1, (5, 2)) + [0, 3]])
    # positive-everywhere RBF kernel: cross-cluster similarity is small but nonzero
    gram = np.exp(-0.5 * ((X[:, None] - X[None]) ** 2).sum(-1))
    cpl_lab = np.repeat([0, 1], 5)
    sys = KernelSystem(gram, np.zeros((10, 1)), ridge=1e-6).with_labeled([0])
    s = _state(X, labeled=[0], y=cpl_lab)
    cpl = CPL(cpl_lab, np.array([0, -1]), np.zeros((2, 2), int))
    pick = select_ntkcpl(s, 1, _identity_view(s, sys), cpl)[0]
    assert pick >= 5
    # brute force: the best achievable risk is attained only inside cluster B
    risks = {c: estimate_pool_risk(sys, cpl_lab, np.arange(1, 10), (c, cpl_lab[c])) for c in range(1, 10)}
    assert risks[pick] == min(risks.values()) < min(risks[c] for c in range(1, 5))


def test_ntkcpl_single_class_ties_to_lowest(rng):
    X = rng.standard_normal((6, 8))
    sys = from_jacobian(X, np.zeros(6), ridge=1e-6).with_labeled([2])
    s = _state(X, labeled=[2])
    cpl = CPL(np.zeros(6, int), np.array([0]), np.zeros((1, 1), int))
    assert select_ntkcpl(s, 1, _identity_view(s, sys), cpl) == [0]


def test_ntkcpl_budget_too_large(rng):
    X = rng.standard_normal((3, 4))
    sys = from_jacobian(X, np.zeros(3)).with_labeled([0])
    s = _state(X, labeled=[0])
    with pytest.raises(PreconditionError):
        select_ntkcpl(s, 3, _identity_view(s, sys), CPL(np.zeros(3, int), np.zeros(1, int), np.zeros((1, 1))))


def run_ntkcpl_instance(seed, n=16, C=3, b=3, ridge=0.05):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, 4))
    L = [0, 1]
    sys = from_jacobian(X, np.zeros(n), ridge=ridge).with_labeled(L)
    cpl_lab = rng.integers(0, C, n)
    s = _state(X, labeled=L)
    got, risks = select_ntkcpl(s, b, _identity_view(s, sys), CPL(cpl_lab, -np.ones(C, int), np.zeros((C, C))),
                               return_risks=True)
    ref = naive_ntkcpl(sys.gram, sys.f0, L, cpl_lab, list(range(2, n)), b, ridge, C)
    return got, ref, risks


@pytest.mark.parametrize("seed", range(10))
def test_ntkcpl_matches_naive_rebuild(seed):
    got, ref, _ = run_ntkcpl_instance(seed)
    assert got == ref


def test_ntkcpl_selected_point_is_fit_after_commit():
    # at t = inf with tiny ridge the committed point predicts its own CPL class
    got, _, _ = run_ntkcpl_instance(3, ridge=1e-9)
    rng = np.random.default_rng(3)
    X = rng.standard_normal((16, 4))
    cpl = rng.integers(0, 3, 16)
    L = [0, 1] + got
    pred = kernel_regression(X @ X.T, np.zeros((16, 3)), L, np.eye(3)[cpl[L]], L, 1e-9)
    assert np.array_equal(np.argmax(pred, 1), cpl[L])


@given(st.integers(0, 2**31), st.sampled_from(["random", "entropy", "coreset", "badge"]), st.integers(0, 6))
def test_every_strategy_returns_distinct_unlabeled(seed, name, b):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((15, 3))
    y = rng.integers(0, 2, 15)
    s = _state(X, labeled=[0, 1], y=y)
    net = init_mlp(3, 4, 2, "standard", False, rng)
    picks = {"random": lambda: select_random(s, b, np.random.default_rng(seed)),
             "entropy": lambda: select_entropy(s, b, net),
             "coreset": lambda: select_coreset(s, b, X),
             "badge": lambda: select_badge(s, b, net, np.random.default_rng(seed))}[name]()
    assert len(picks) == b == len(set(picks)) and set(picks) <= set(s.unlabeled.tolist())


def test_spec_labels_and_csv(tmp_path):
    assert StrategySpec(name="ntkcpl").label == "ntkcpl(al)"
    assert StrategySpec(name="ntkcpl", feature_source="self_supervised").label == "ntkcpl(self)"
    write_selection_csv([(1, 0, 7, "random")], tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines() == ["round,step,sample_id,strategy", "1,0,7,random"]
