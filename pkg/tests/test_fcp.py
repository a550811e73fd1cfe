import numpy as np
import pytest
from hypothesis import given, strategies as st

from crosstalk.core import FilterBank, TapWindow
from crosstalk.fcp import (CONSTANT, MAX_FLOOR, QUANTILE_FLOOR, WeightingMode, apply_filter,
                           compute_lambda, estimate_fcp_filter, fcp_objective, shift_frames,
                           tap_stack, untap, weighting_floor)

from conftest import crandn

WIN = TapWindow(13, 1)


def brute_percentile(values, q):
    v = sorted(values)
    pos = (len(v) - 1) * q / 100.0
    lo = int(np.floor(pos))
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (v[hi] - v[lo]) * (pos - lo)


def dense_oracle(target, source, offsets, lam):
    """Per-bin weighted least squares from an explicitly assembled regressor matrix."""
    T, F = target.shape
    out = np.zeros((F, len(offsets)), complex)
    for f in range(F):
        A = np.zeros((T, len(offsets)), complex)
        for t in range(T):
            for k, o in enumerate(offsets):
                if 0 <= t + o < T:
                    A[t, k] = source[t + o, f]
        w = 1.0 / lam[:, f]
        # target ~ A @ conj(g)
        R = (A.conj().T * w) @ A
        r = (A.conj().T * w) @ target[:, f]
        out[f] = np.linalg.solve(R, r).conj()
    return out


def planted(rng, T=120, F=9, win=WIN):
    src = crandn(rng, T, F)
    taps = crandn(rng, F, win.size)
    tgt = apply_filter(FilterBank(taps, win), src)
    return src, taps, tgt


def test_lambda_max_floor_constant_reference():
    ref = np.full((10, 4), 2.0 + 0j)
    np.testing.assert_allclose(compute_lambda(ref, MAX_FLOOR), 4.04)


def test_lambda_quantile_floor_ignores_single_burst(rng):
    ref = np.exp(2j * np.pi * rng.random((40, 6)))      # equal power everywhere
    burst = ref.copy()
    burst[7] *= 10.0                                   # 100x power
    per_frame = (np.abs(burst) ** 2).max(axis=1)
    assert weighting_floor(burst, QUANTILE_FLOOR) == pytest.approx(brute_percentile(per_frame, 90), rel=1e-12)
    q0, q1 = weighting_floor(ref, QUANTILE_FLOOR), weighting_floor(burst, QUANTILE_FLOOR)
    assert abs(q1 - q0) / q0 < 0.01


def test_lambda_rejects_zero_reference():
    with pytest.raises(ValueError, match="degenerate"):
        compute_lambda(np.zeros((5, 3)), QUANTILE_FLOOR)
    with pytest.raises(ValueError):
        WeightingMode("max", xi=0.0)
    with pytest.raises(ValueError):
        WeightingMode("quantile", quantile=0.0)


def test_lambda_positive(rng):
    ref = crandn(rng, 20, 5)
    ref[3] = 0
    for mode in (MAX_FLOOR, QUANTILE_FLOOR, CONSTANT):
        assert np.all(compute_lambda(ref, mode) > 0)


def test_single_tap_identity_and_gain(rng):
    src = crandn(rng, 50, 7)
    one = TapWindow(0, 0)
    np.testing.assert_allclose(estimate_fcp_filter(src, src, one).taps, 1.0, atol=1e-12)
    np.testing.assert_allclose(estimate_fcp_filter(2 * src, src, one).taps, 2.0, atol=1e-12)


def test_planted_filter_recovery_matches_dense_oracle(rng):
    src, taps, tgt = planted(rng)
    lam = compute_lambda(tgt, QUANTILE_FLOOR)
    est = estimate_fcp_filter(tgt, src, WIN, lam).taps
    assert np.max(np.abs(est - taps)) / np.max(np.abs(taps)) <= 1e-6
    oracle = dense_oracle(tgt, src, WIN.offsets, lam)
    np.testing.assert_allclose(est, oracle, atol=1e-9)


def test_planted_filter_residual_below_minus_120db(rng):
    src, taps, tgt = planted(rng)
    bank = estimate_fcp_filter(tgt, src, WIN, compute_lambda(tgt))
    resid = tgt - apply_filter(bank, src)
    assert 10 * np.log10(np.sum(np.abs(resid) ** 2) / np.sum(np.abs(tgt) ** 2)) <= -120


def test_apply_identity_and_delay(rng):
    src = crandn(rng, 30, 4)
    ident = np.zeros((4, WIN.size), complex)
    ident[:, 13] = 1.0                                  # offset 0
    np.testing.assert_allclose(apply_filter(FilterBank(ident, WIN), src), src)
    delay = np.zeros((4, WIN.size), complex)
    delay[:, 12] = 1.0                                  # offset -1
    out = apply_filter(FilterBank(delay, WIN), src)
    assert not np.any(out[0])
    np.testing.assert_allclose(out[1:], src[:-1])


def test_apply_shape_mismatch(rng):
    with pytest.raises(ValueError):
        apply_filter(FilterBank(np.zeros((4, 15)), WIN), crandn(rng, 30, 5))
    with pytest.raises(ValueError):
        apply_filter(FilterBank(np.zeros((4, 15)), WIN), crandn(rng, 30, 4), TapWindow(2, 0))


def test_joint_fit_recovers_two_planted_sources(rng):
    T, F = 150, 5
    src = crandn(rng, 2, T, F)
    taps = crandn(rng, 2, F, WIN.size)
    tgt = apply_filter(FilterBank(taps, WIN), src)
    est = estimate_fcp_filter(tgt, src, WIN).taps
    np.testing.assert_allclose(est, taps, atol=1e-8)


def test_silent_bin_gives_zero_filter_and_flag(rng):
    src = crandn(rng, 60, 4)
    src[:, 2] = 0
    tgt = crandn(rng, 60, 4)
    bank = estimate_fcp_filter(tgt, src, WIN)
    assert not np.any(bank.taps[2]) and bank.regularized[2]
    assert not bank.regularized[0]


def test_rank_deficient_bin_is_ridged(rng):
    src = crandn(rng, 10, 3)                            # fewer frames than taps
    tgt = crandn(rng, 10, 3)
    bank = estimate_fcp_filter(tgt, src, WIN)
    assert bank.regularized.all() and np.all(np.isfinite(bank.taps))


def test_results_are_deterministic(rng):
    src, _, tgt = planted(rng, T=80, F=6)
    a = estimate_fcp_filter(tgt, src, WIN, compute_lambda(tgt)).taps
    b = estimate_fcp_filter(tgt, src, WIN, compute_lambda(tgt)).taps
    assert np.array_equal(a, b)


@given(st.integers(0, 2**31 - 1))
def test_tap_stack_adjoint(seed):
    r = np.random.default_rng(seed)
    x = crandn(r, 2, 12, 3)
    w = crandn(r, 2, 12, 3, WIN.size)
    lhs = np.vdot(w, tap_stack(x, WIN.offsets))
    rhs = np.vdot(untap(w, WIN.offsets), x)
    assert abs(lhs - rhs) < 1e-10 * (1 + abs(lhs))


@given(st.integers(0, 2**31 - 1))
def test_optimality_against_perturbation(seed):
    r = np.random.default_rng(seed)
    src, tgt = crandn(r, 40, 3), crandn(r, 40, 3)
    lam = compute_lambda(tgt)
    bank = estimate_fcp_filter(tgt, src, WIN, lam)
    base = fcp_objective(tgt, src, bank, lam)
    e = crandn(r, 3, WIN.size)
    e /= np.linalg.norm(e)
    moved = FilterBank(bank.taps + 1e-4 * e, WIN)
    assert fcp_objective(tgt, src, moved, lam) >= base - 1e-9 * base


@given(st.integers(0, 2**31 - 1), st.complex_numbers(min_magnitude=0.1, max_magnitude=10))
def test_scaling_covariance(seed, a):
    r = np.random.default_rng(seed)
    src, tgt = crandn(r, 40, 3), crandn(r, 40, 3)
    lam = compute_lambda(tgt)
    g1 = estimate_fcp_filter(tgt, src, WIN, lam)
    g2 = estimate_fcp_filter(tgt, a * src, WIN, lam)
    np.testing.assert_allclose(g2.taps, g1.taps / np.conj(a), rtol=1e-7, atol=1e-9)
    np.testing.assert_allclose(apply_filter(g2, a * src), apply_filter(g1, src), rtol=1e-7, atol=1e-9)


@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100))
def test_constant_weighting_equals_ordinary_least_squares(seed, c):
    r = np.random.default_rng(seed)
    src, tgt = crandn(r, 40, 3), crandn(r, 40, 3)
    g_const = estimate_fcp_filter(tgt, src, WIN, np.full(tgt.shape, c)).taps
    g_ols = estimate_fcp_filter(tgt, src, WIN, None).taps
    g_mode = estimate_fcp_filter(tgt, src, WIN, compute_lambda(tgt, CONSTANT)).taps
    np.testing.assert_allclose(g_const, g_ols, rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(g_mode, g_ols, rtol=1e-8, atol=1e-10)


def test_shift_frames_convention(rng):
    x = crandn(rng, 6, 2)
    np.testing.assert_array_equal(shift_frames(x, 2)[:4], x[2:])
    np.testing.assert_array_equal(shift_frames(x, -1)[1:], x[:-1])
    assert np.all(shift_frames(x, -1, fill=5.0)[0] == 5.0)
