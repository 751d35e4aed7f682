import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ntkcpl.errors import NumericalRankError, PreconditionError
from ntkcpl.model import init_mlp
from ntkcpl.ntk import (KernelSystem, compute_gram, default_ridge, direct_inverse, estimate_pool_risk,
                        extend_labeled, from_jacobian, hypothetical_mismatches, load_gram, ntk_predict,
                        one_hot, save_gram)

from oracles import kernel_regression, random_psd, risk_rebuild


def test_linear_model_gram_is_xxt(rng):
    X = rng.standard_normal((6, 3))
    sys = from_jacobian(X, np.zeros(6))
    assert np.allclose(sys.gram, X @ X.T, rtol=0, atol=1e-14)


def test_mlp_gram_properties(rng):
    X = rng.standard_normal((8, 3))
    X[5] = X[2]
    net = init_mlp(3, 16, 2, "ntk_parameterization", False, rng)
    sys = compute_gram(net, X)
    assert np.all(np.diag(sys.gram) >= 0)
    assert np.array_equal(sys.gram[2], sys.gram[5])
    assert np.allclose(sys.gram, sys.gram.T, rtol=1e-8)
    lam = np.linalg.eigvalsh(sys.gram)
    assert lam.min() >= -1e-6 * np.linalg.norm(sys.gram)
    assert sys.ridge == pytest.approx(1e-4 * np.trace(sys.gram) / 8)


def test_identity_gram_hand_prediction():
    X = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    sys = from_jacobian(X, np.zeros(3)).with_labeled([0, 1])
    assert np.allclose(sys.gram[:2, :2], np.eye(2))
    pred = ntk_predict(sys, [[1.0], [0.0]], [2, 1])
    assert pred[0, 0] == pytest.approx(1.0) and pred[1, 0] == pytest.approx(0.0)


def test_time_zero_returns_f0(rng):
    X = rng.standard_normal((5, 3))
    f0 = rng.standard_normal((5, 2))
    sys = from_jacobian(X, f0, time=0.0).with_labeled([0, 1])
    assert np.array_equal(ntk_predict(sys, np.eye(2), [2, 3, 4]), f0[[2, 3, 4]])


def test_finite_time_approaches_converged(rng):
    X = rng.standard_normal((6, 8))
    sys = from_jacobian(X, np.zeros(6)).with_labeled([0, 1, 2])
    Y = np.eye(3)
    assert np.allclose(ntk_predict(sys, Y, time=1e6), ntk_predict(sys, Y), atol=1e-8)


def test_interpolation_on_labeled_points(rng):
    X = rng.standard_normal((10, 12))
    sys = from_jacobian(X, rng.standard_normal((10, 3))).with_labeled(range(6))
    Y = one_hot(rng.integers(0, 3, 6), 3)
    assert np.allclose(ntk_predict(sys, Y, range(6)), Y, atol=1e-6)


def test_singular_block_needs_ridge():
    X = np.array([[1.0, 2.0], [1.0, 2.0], [0.0, 1.0]])
    with pytest.raises(NumericalRankError, match="ridge"):
        from_jacobian(X, np.zeros(3)).with_labeled([0, 1])
    sys = from_jacobian(X, np.zeros(3), ridge=1e-3).with_labeled([0])
    extend_labeled(sys, 1)
    with pytest.raises(NumericalRankError):
        extend_labeled(from_jacobian(X, np.zeros(3)).with_labeled([0]), 1)


def test_extend_from_one_matches_hand_2x2():
    gram = np.array([[2.0, 1.0], [1.0, 3.0]])
    sys = KernelSystem(gram, np.zeros((2, 1))).with_labeled([0])
    ext = extend_labeled(sys, 1)
    hand = np.array([[3.0, -1.0], [-1.0, 2.0]]) / 5.0
    assert np.allclose(ext.inv_labeled, hand, rtol=0, atol=1e-15)


def test_extend_matches_direct_inverse_20(rng):
    K = random_psd(rng, 20)
    sys = KernelSystem(K, np.zeros((20, 1))).with_labeled([0])
    for i in range(1, 20):
        sys = extend_labeled(sys, i)
    assert np.max(np.abs(sys.inv_labeled - np.linalg.inv(K))) < 1e-8


def test_extend_rejects_labeled_and_out_of_range(rng):
    sys = KernelSystem(random_psd(rng, 4), np.zeros((4, 1))).with_labeled([0])
    with pytest.raises(PreconditionError):
        extend_labeled(sys, 0)
    with pytest.raises(PreconditionError):
        extend_labeled(sys, 9)


@given(st.integers(0, 2**31), st.integers(2, 12))
def test_incremental_equals_direct(seed, n):
    rng = np.random.default_rng(seed)
    K = random_psd(rng, n)
    order = rng.permutation(n)
    sys = KernelSystem(K, np.zeros((n, 1)), ridge=1e-3).with_labeled(order[:1])
    for i in order[1:]:
        sys = extend_labeled(sys, i)
    ref = direct_inverse(K, order, 1e-3)
    assert np.allclose(sys.inv_labeled, ref, rtol=1e-8, atol=1e-8 * np.abs(ref).max())


def test_risk_zero_when_candidates_are_labeled(rng):
    X = rng.standard_normal((5, 8))
    sys = from_jacobian(X, np.zeros(5)).with_labeled(range(5))
    assert estimate_pool_risk(sys, rng.integers(0, 3, 5)) == 0.0


def test_single_class_single_label_risk_zero(rng):
    X = np.abs(rng.standard_normal((8, 3))) + 0.1  # positive kernel rows
    sys = from_jacobian(X, np.zeros(8)).with_labeled([0])
    cpl = np.zeros(8, dtype=int)
    assert estimate_pool_risk(sys, cpl, num_classes=2) == 0.0
    # oracle: the class-0 score is the only nonzero output wherever K(x, x0) != 0
    pred = kernel_regression(sys.gram, np.zeros((8, 2)), [0], np.array([[1.0, 0.0]]), np.arange(8))
    assert np.all(pred[:, 0] > 0) and np.all(pred[:, 1] == 0)


def test_hypothetical_already_labeled(rng):
    sys = from_jacobian(rng.standard_normal((4, 6)), np.zeros(4)).with_labeled([0])
    with pytest.raises(PreconditionError):
        estimate_pool_risk(sys, [0, 1, 0, 1], hypothetical=(0, 1))


@pytest.mark.parametrize("time", [math.inf, 0.7])
@pytest.mark.parametrize("seed", range(6))
def test_hypothetical_risks_match_rebuild(seed, time):
    rng = np.random.default_rng(seed)
    n, C = 14, 3
    X = rng.standard_normal((n, 6))
    ridge = 0.05
    base = from_jacobian(X, np.zeros(n), ridge=ridge, time=time)
    L = [0, 1]
    sys = base.with_labeled(L)
    cpl = rng.integers(0, C, n)
    scored = np.arange(2, n)
    fast = hypothetical_mismatches(sys, one_hot(cpl, C), cpl, scored, scored)
    for c, m in zip(scored, fast):
        if math.isinf(time):
            ref = risk_rebuild(base.gram, base.f0, L + [c], cpl, scored, ridge, C)
        else:
            full = base.with_labeled(L + [c])
            pred = ntk_predict(full, one_hot(cpl[L + [c]], C), scored)
            ref = int(np.sum(np.argmax(pred, 1) != cpl[scored]))
        assert m == ref
        assert estimate_pool_risk(sys, cpl, scored, (c, cpl[c]), C) == pytest.approx(ref / len(scored))


def test_parallel_scoring_matches_serial(rng):
    n, C = 60, 4
    sys = from_jacobian(rng.standard_normal((n, 10)), np.zeros(n), ridge=0.01).with_labeled([0, 1, 2])
    cpl = rng.integers(0, C, n)
    scored = np.arange(3, n)
    a = hypothetical_mismatches(sys, one_hot(cpl, C), cpl, scored, scored, n_jobs=1)
    b = hypothetical_mismatches(sys, one_hot(cpl, C), cpl, scored, scored, n_jobs=3)
    assert np.array_equal(a, b)


def test_default_ridge_scale(rng):
    K = random_psd(rng, 5)
    assert default_ridge(K) == pytest.approx(1e-4 * np.trace(K) / 5)
    assert default_ridge(K, 0.1) == pytest.approx(0.1 * np.trace(K) / 5)


def test_gram_dump_round_trip(tmp_path, rng):
    sys = from_jacobian(rng.standard_normal((4, 3)), np.zeros(4))
    save_gram(sys, tmp_path / "g.bin")
    assert np.array_equal(load_gram(tmp_path / "g.bin"), sys.gram)


def test_finite_time_accepts_singular_block(rng):
    X = rng.standard_normal((6, 2))
    sys = from_jacobian(X, np.zeros(6), time=0.5).with_labeled(range(6))
    assert np.all(np.isfinite(ntk_predict(sys, np.eye(6)[:, :2])))
    with pytest.raises(NumericalRankError):
        extend_labeled(from_jacobian(X, np.zeros(6), time=0.5).with_labeled(range(5)), 5)
    with pytest.raises(NumericalRankError):
        from_jacobian(X, np.zeros(6)).with_labeled(range(6))
