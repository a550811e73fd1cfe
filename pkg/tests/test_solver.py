import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crosstalk.core import MixtureSet, TapWindow
from crosstalk.solver import (DEFAULT_ESTIMATOR, IdentityEstimator, SolverConfig, SolverEstimator,
                              ZeroEstimator, _Problem, evaluate_estimator, filter_update, objective,
                              solve_blind_deconvolution, source_update)

from conftest import crandn, scene

SMALL = TapWindow(3, 1)


def tiny(rng, C=2, P=3, T=40, F=4):
    return MixtureSet(crandn(rng, C, T, F), (crandn(rng, P, T, F),) if P else (), None)


def random_filters(rng, prob, C):
    G = crandn(rng, prob.M, C, prob.F, prob.K)
    G[~prob.allowed] = 0
    return G


def dense_operator(prob, G, f):
    """Rows (m, t), columns (c, s): coefficient of Z_c(s) in predicted mixture m at frame t."""
    M, C, T = prob.M, prob.C, prob.T
    A = np.zeros((M * T, C * T), complex)
    for m in range(M):
        for c in range(C):
            if m == c:
                A[m * T:(m + 1) * T, c * T:(c + 1) * T] += np.eye(T)
            for k, o in enumerate(prob.offsets):
                for t in range(T):
                    s = t + o
                    if 0 <= s < T:
                        A[m * T + t, c * T + s] += np.conj(G[m, c, f, k])
    return A


@given(st.integers(0, 2**31 - 1), st.integers(1, 3), st.integers(0, 3))
@settings(max_examples=25)
def test_forward_matches_dense_and_adjoint_identity(seed, C, P):
    rng = np.random.default_rng(seed)
    ms = tiny(rng, C, P, T=12, F=3)
    prob = _Problem(ms, SMALL)
    G = random_filters(rng, prob, C)
    Z = crandn(rng, C, 12, 3)
    out = prob.forward(Z, G)
    for f in range(3):
        want = dense_operator(prob, G, f) @ Z[:, :, f].ravel()
        np.testing.assert_allclose(out[:, :, f].ravel(), want, atol=1e-10)
    R = crandn(rng, prob.M, 12, 3)
    lhs = np.vdot(R, prob.forward(Z, G))
    rhs = np.vdot(prob.adjoint(R, G), Z)
    assert abs(lhs - rhs) <= 1e-10 * abs(lhs)


def test_source_update_matches_dense_least_squares():
    rng = np.random.default_rng(11)
    T, F = 64, 65
    ms = tiny(rng, 2, 3, T, F)
    prob = _Problem(ms, TapWindow(13, 1))
    G = random_filters(rng, prob, 2)
    Z, _ = source_update(prob, G, np.zeros((2, T, F), complex), tol=1e-13, max_iters=2000)
    for f in range(0, F, 8):
        A = dense_operator(prob, G, f)
        want = np.linalg.lstsq(A, prob.Y[:, :, f].ravel(), rcond=None)[0].reshape(2, T)
        assert np.linalg.norm(Z[:, :, f] - want) <= 1e-8 * np.linalg.norm(want)


def test_source_update_with_ground_truth_filters_matches_dense_oracle():
    ms = scene(0, duration_s=0.5)
    prob = _Problem(ms, TapWindow(13, 1))
    G = filter_update(prob, ms.ground_truth.close_talk_speech)
    Z, _ = source_update(prob, G, ms.close_talk.astype(complex), tol=1e-13, max_iters=3000)
    assert prob.T <= 64
    for f in (1, 17, 40, 64):
        A = dense_operator(prob, G, f)
        want = np.linalg.lstsq(A, prob.Y[:, :, f].ravel(), rcond=None)[0].reshape(2, prob.T)
        assert np.linalg.norm(Z[:, :, f] - want) <= 1e-8 * np.linalg.norm(want)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=20)
def test_each_block_update_never_increases_objective(seed):
    rng = np.random.default_rng(seed)
    ms = tiny(rng)
    prob = _Problem(ms, SMALL)
    Z = crandn(rng, 2, 40, 4)
    G = random_filters(rng, prob, 2)
    before = prob.objective_parts(Z, G).sum()
    G2 = filter_update(prob, Z)
    after_f = prob.objective_parts(Z, G2).sum()
    assert after_f <= before * (1 + 1e-12)
    Z2, _ = source_update(prob, G2, Z, tol=1e-10)
    assert prob.objective_parts(Z2, G2).sum() <= after_f * (1 + 1e-12)


def test_trace_monotone_on_scene():
    ms = scene(0)
    r = solve_blind_deconvolution(ms, SolverConfig(max_outer_iters=5))
    assert np.all(np.diff(r.trace) <= 1e-6 * r.trace[1:])
    assert r.trace[-1] <= r.trace[0]
    assert r.breakdown.shape == (len(r.trace), ms.num_speakers + ms.num_far)
    np.testing.assert_allclose(r.breakdown.sum(axis=1), r.trace)
    np.testing.assert_allclose(objective(ms, r.estimates, r.filters, r.window), r.breakdown[-1],
                               rtol=1e-10)
    assert len(list(r.trace_rows())) == len(r.trace)


def test_single_speaker_zero_init_reaches_ground_truth_objective():
    ms = scene(2, num_speakers=1)
    gt = ms.ground_truth.close_talk_speech.astype(complex)
    prob = _Problem(ms, TapWindow(13, 1))
    gt_obj = prob.objective_parts(gt, filter_update(prob, gt)).sum()
    r = solve_blind_deconvolution(ms, SolverConfig(init="zero", max_outer_iters=20))
    assert r.trace[-1] <= gt_obj * (1 + 1e-6)


def test_exact_solution_is_fixed_point():
    rng = np.random.default_rng(0)
    base = tiny(rng, 2, 3, 60, 5)
    prob = _Problem(base, TapWindow(13, 1))
    Z = crandn(rng, 2, 60, 5)
    Y = prob.forward(Z, random_filters(rng, prob, 2))
    ms = MixtureSet(Y[:2], (Y[2:],), None)
    r = solve_blind_deconvolution(ms, SolverConfig(init="provided"), initial=Z)
    assert r.iterations == 1 and r.converged
    assert r.trace[-1] <= 1e-20 * np.sum(np.abs(Y) ** 2)
    np.testing.assert_allclose(r.estimates, Z, atol=1e-9)


def test_permutation_covariance():
    ms = scene(1)
    cfg = SolverConfig(max_outer_iters=3)
    a = solve_blind_deconvolution(ms, cfg, ms.activity)
    perm = [1, 0]
    b = solve_blind_deconvolution(ms.permute_speakers(perm), cfg, ms.permute_speakers(perm).activity)
    scale = np.max(np.abs(a.estimates))
    np.testing.assert_allclose(b.estimates, a.estimates[perm], atol=1e-8 * scale)
    np.testing.assert_allclose(b.trace, a.trace, rtol=1e-8)


def test_activity_mutes_inactive_frames():
    ms = scene(4)
    r = solve_blind_deconvolution(ms, SolverConfig(max_outer_iters=2), ms.activity)
    D = ms.frame_activity()
    assert (D == 0).any()
    assert not np.any(r.estimates[D == 0])
    with pytest.raises(ValueError):
        solve_blind_deconvolution(ms, SolverConfig(max_outer_iters=1), np.ones((3, 2)))


def test_empty_far_field_set_allowed():
    rng = np.random.default_rng(3)
    ms = tiny(rng, 2, 0)
    r = solve_blind_deconvolution(ms, SolverConfig(max_outer_iters=2))
    assert r.filters.shape[0] == 2 and np.all(np.isfinite(r.trace))


def test_non_finite_objective_aborts():
    rng = np.random.default_rng(4)
    ms = MixtureSet(1e200 * crandn(rng, 2, 30, 3), (1e200 * crandn(rng, 2, 30, 3),), None)
    with pytest.raises(FloatingPointError, match="non-finite"):
        solve_blind_deconvolution(ms, SolverConfig(max_outer_iters=2))


def test_config_validation():
    for kw in ({"init": "random"}, {"tol": 0}, {"cg_tol": -1}, {"max_outer_iters": 0}):
        with pytest.raises(ValueError):
            SolverConfig(**kw)
    ms = tiny(np.random.default_rng(0))
    with pytest.raises(ValueError, match="initial"):
        solve_blind_deconvolution(ms, SolverConfig(init="provided"))
    with pytest.raises(ValueError):
        solve_blind_deconvolution(ms, SolverConfig(init="provided"), initial=np.zeros((1, 40, 4)))


def test_weighted_modes_run():
    from crosstalk.fcp import QUANTILE_FLOOR
    ms = tiny(np.random.default_rng(5))
    r = solve_blind_deconvolution(ms, SolverConfig(max_outer_iters=2, weighting=QUANTILE_FLOOR,
                                                   taps_past=3))
    assert np.all(np.isfinite(r.estimates))


def test_estimator_interface():
    ms = scene(0, duration_s=1.0)
    np.testing.assert_array_equal(evaluate_estimator(IdentityEstimator(), ms), ms.close_talk)
    assert not evaluate_estimator(ZeroEstimator(), ms).any()
    cfg = SolverConfig(max_outer_iters=2)
    got = evaluate_estimator(SolverEstimator(cfg), ms)
    want = solve_blind_deconvolution(ms, cfg, ms.activity).estimates
    np.testing.assert_array_equal(got, want)
    assert isinstance(DEFAULT_ESTIMATOR, SolverEstimator)
    with pytest.raises(ValueError, match="expected"):
        evaluate_estimator(lambda m: np.zeros((5, 2, 2)), ms)
