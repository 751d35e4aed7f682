import numpy as np
import pytest
from hypothesis import given, strategies as st

from ntkcpl.analysis import (argmax_agreement, coverage_estimate, decompose_error, dominance_from_members,
                             effective_budget_ratio, label_map_g, verify_proposition)
from ntkcpl.errors import PreconditionError
from ntkcpl.model import init_mlp
from ntkcpl.ntk import compute_gram, from_jacobian


def test_label_map_identity_and_sum():
    f = np.array([[0.3, 0.4, 0.1]])
    assert np.array_equal(label_map_g(f, [0, 1, 2], 3), f)
    assert label_map_g(f, [0, 0, 1], 2)[0, 0] == pytest.approx(0.7)


@given(st.integers(0, 2**31))
def test_label_map_preserves_row_sums(seed):
    rng = np.random.default_rng(seed)
    f = rng.standard_normal((5, 7))
    out = label_map_g(f, rng.integers(0, 3, 7), 3)
    assert np.allclose(out.sum(1), f.sum(1))


def test_label_map_rejects_bad_dominance():
    with pytest.raises(PreconditionError):
        label_map_g(np.zeros((1, 2)), [0, 5], 2)


def test_dominance_from_members():
    assert dominance_from_members([0, 0, 0, 1, 2], [1, 1, 0, 0, 0], 4).tolist() == [1, 0, 0, -1]


def proposition_instance(seed, violate=False):
    rng = np.random.default_rng(seed)
    n, C = int(rng.integers(8, 30)), int(rng.integers(2, 5))
    k = int(rng.integers(C, 2 * C + 2))
    X = rng.standard_normal((n, 4))
    net = init_mlp(4, 16, k, "ntk_parameterization", True, rng)
    sys = compute_gram(net, X, ridge=1e-3)
    dominant = rng.integers(0, C, k)
    cpl = rng.integers(0, k, n)
    L = rng.choice(n, int(rng.integers(1, n // 2 + 1)), replace=False)
    y_L = dominant[cpl[L]].copy()
    if violate:
        y_L[0] = (y_L[0] + 1) % C
    return sys.with_labeled(L), y_L, cpl, dominant, C


@pytest.mark.parametrize("seed", range(20))
def test_proposition_holds_under_dominance(seed):
    sys, y_L, cpl, dom, C = proposition_instance(seed)
    assert verify_proposition(sys, y_L, cpl, dom, C).deviation < 1e-8


def test_proposition_exact_when_cpl_is_truth(rng):
    X = rng.standard_normal((10, 6))
    y = rng.integers(0, 3, 10)
    sys = from_jacobian(X, np.zeros(10), ridge=1e-3).with_labeled(range(5))
    assert verify_proposition(sys, y[:5], y, np.arange(3), 3).deviation == 0.0


def test_proposition_violation_reported():
    sys, y_L, cpl, dom, C = proposition_instance(0, violate=True)
    with pytest.raises(PreconditionError, match="breaks dominance"):
        verify_proposition(sys, y_L, cpl, dom, C)
    check = verify_proposition(sys, y_L, cpl, dom, C, strict=False)
    assert check.violations == [int(sys.labeled[0])] and check.deviation > 1e-3


def test_proposition_requires_zero_f0(rng):
    sys = from_jacobian(rng.standard_normal((3, 2)), np.ones(3)).with_labeled([0])
    with pytest.raises(PreconditionError):
        verify_proposition(sys, [0], [0, 0, 0], [0], 1)


def test_argmax_agreement():
    f_y = np.array([[1.0, 0.0], [0.0, 1.0]])
    f_cpl = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    assert argmax_agreement(f_y, f_cpl, [1, 0, 1]) == 1.0
    assert argmax_agreement(f_y, f_cpl, [1, 0, 0]) == 0.5


def test_decompose_perfect():
    d = decompose_error([0, 1, 2, 3], [0, 0, 1, 1], [0, 1, 2, 3], [0, 0, 1, 1])
    assert d.error_cpl == 0.0 and d.mismatches == 0


def test_decompose_impurity_case():
    # sample 2 (true 1) sits in cluster 0 whose dominant class is 0; the NTK follows the cluster
    d = decompose_error([0, 0, 0, 1], [0, 0, 1, 1], [0, 0, 0, 1], [0, 1])
    assert (d.p_nff, d.p_fnf, d.impurity_share) == (0.25, 0.0, 1.0)


def test_decompose_overclustering_case():
    # class 0 split into CPL 0 and 1; sample 2 predicted as the sibling cluster
    d = decompose_error([0, 0, 0, 1, 2, 2], [0, 0, 0, 0, 1, 1], [0, 0, 1, 1, 2, 2], [0, 0, 1])
    assert d.p_fnf == pytest.approx(1 / 6) and d.p_nff == 0.0 and d.overclustering_share == 1.0


@given(st.integers(0, 2**31))
def test_decompose_count_identity(seed):
    rng = np.random.default_rng(seed)
    n, k, C = 40, 6, 3
    scores = rng.standard_normal((n, k))
    y, cpl, dom = rng.integers(0, C, n), rng.integers(0, k, n), rng.integers(0, C, k)
    f_y = rng.standard_normal((n, C))
    for true_scores in (None, f_y):
        d = decompose_error(scores, y, cpl, dom, true_scores)
        y_hat = dom[scores.argmax(1)] if true_scores is None else f_y.argmax(1)
        exactly_one = (y_hat == y) != (scores.argmax(1) == cpl)
        assert d.error_cpl * n == pytest.approx(d.mismatches) and d.mismatches == int(exactly_one.sum())
        assert 0 <= d.p_nff <= 1 and 0 <= d.p_fnf <= 1


def test_coverage_candidate_equals_labeled(rng):
    sys = from_jacobian(rng.standard_normal((6, 8)), np.zeros(6)).with_labeled(range(6))
    est, true = coverage_estimate(sys, rng.integers(0, 2, 6), np.arange(6))
    assert est == 1.0 and true is None


def test_coverage_collapses_when_cpl_is_truth(rng):
    X = rng.standard_normal((12, 20))
    y = rng.integers(0, 3, 12)
    sys = from_jacobian(X, np.zeros(12), ridge=1e-6).with_labeled(range(6))
    from oracles import kernel_regression

    ntk_pred = kernel_regression(sys.gram, np.zeros((12, 3)), range(6), np.eye(3)[y[:6]], np.arange(12), 1e-6)
    est, true = coverage_estimate(sys, y, np.arange(12), ntk_pred.argmax(1), y, 3)
    assert est == pytest.approx(true)


def test_coverage_needs_labels(rng):
    with pytest.raises(PreconditionError):
        coverage_estimate(from_jacobian(np.eye(2), np.zeros(2)), [0, 1], [0, 1])


def test_coverage_close_to_truth_with_50_labels():
    from ntkcpl.dataset import ALState, sample_candidate_subset
    from ntkcpl.harness import _rng, benchmark_config, build_round_context, diagnose_round, fit_classifier
    from ntkcpl.synthetic import MixtureSpec, make_mixture

    cfg = benchmark_config(synthetic=MixtureSpec(sigma=0.6).model_dump())
    train, _ = make_mixture(cfg.synthetic)
    state = ALState(train, labeled=list(np.random.default_rng(0).choice(train.n, 50, replace=False)))
    state.initial_budget = cfg.initial_budget
    sample_candidate_subset(state, 1000, _rng(0, 1, 0))
    clf = fit_classifier(cfg, train, state, 0, 1)
    ctx = build_round_context(cfg, state, clf, 8, _rng(0, 1, 6), _rng(0, 1, 7))
    rep = diagnose_round(state, clf, ctx)
    assert abs(rep["estimated_coverage"] - rep["true_coverage"]) < 0.1


def test_effective_budget_ratio_examples():
    m, sd = np.array([0.5, 0.6, 0.7]), np.array([0.01, 0.02, 0.03])
    assert effective_budget_ratio(m, m, sd) == 0.0
    assert effective_budget_ratio(m + 2 * sd, m, sd) == 1.0
    with pytest.raises(PreconditionError):
        effective_budget_ratio(m, m, sd, [1, 2, 3], [1, 2, 4])
    with pytest.raises(PreconditionError):
        effective_budget_ratio(m[:2], m, sd)
