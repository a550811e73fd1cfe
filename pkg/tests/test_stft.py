import numpy as np
import pytest
from hypothesis import given, strategies as st

from crosstalk.stft import (CLOSE_TALK_STFT, FAR_FIELD_STFT, StftConfig, frame_activity,
                            istft, stft)

CONFIGS = [CLOSE_TALK_STFT, FAR_FIELD_STFT]


def snr_db(ref, est):
    return 10 * np.log10(np.sum(ref ** 2) / np.sum((ref - est) ** 2))


def test_config_geometry():
    assert (CLOSE_TALK_STFT.win_length, CLOSE_TALK_STFT.hop_length) == (256, 128)
    assert (FAR_FIELD_STFT.win_length, FAR_FIELD_STFT.hop_length) == (512, 256)
    assert CLOSE_TALK_STFT.num_bins == 129 and FAR_FIELD_STFT.num_bins == 257
    # a 20 ms window is zero-padded up to the next power of two
    cfg = StftConfig(20.0, 10.0)
    assert cfg.win_length == 320 and cfg.fft_size == 512 and cfg.num_bins == 257


def test_config_rejects_non_dividing_hop():
    with pytest.raises(ValueError):
        StftConfig(16.0, 6.0)


@pytest.mark.parametrize("cfg", CONFIGS)
def test_frame_count_and_shape(cfg):
    x = np.zeros(16000)
    S = stft(x, cfg)
    assert S.shape == (cfg.num_frames(16000), cfg.num_bins)
    assert not np.any(S)


def test_shorter_than_window_rejected():
    with pytest.raises(ValueError):
        stft(np.ones(100), CLOSE_TALK_STFT)


@pytest.mark.parametrize("cfg", CONFIGS)
def test_impulse_matches_windowed_dft(cfg):
    n = 8000
    t0 = 20
    x = np.zeros(n)
    x[t0 * cfg.hop_length] = 1.0
    S = stft(x, cfg)
    # frame t0 is centred on the impulse: the windowed frame is the window
    # value at its centre placed at position win/2
    frame = np.zeros(cfg.win_length)
    frame[cfg.win_length // 2] = cfg.window()[cfg.win_length // 2]
    oracle = np.array([np.sum(frame * np.exp(-2j * np.pi * k * np.arange(cfg.win_length) / cfg.fft_size))
                       for k in range(cfg.num_bins)])
    np.testing.assert_allclose(np.abs(S[t0]), np.abs(oracle), atol=1e-12)


@pytest.mark.parametrize("cfg", CONFIGS)
def test_sinusoid_leakage_matches_window_oracle(cfg):
    # closed-form spectrum of the periodic sqrt-Hann (a sine window):
    # W(k) = sum_n sin(pi n / N) e^{-2 pi i k n / N}
    N = cfg.win_length
    k0 = 20
    n = np.arange(16000)
    x = np.cos(2 * np.pi * k0 * n / cfg.fft_size)
    S = stft(x, cfg)
    mid = S[S.shape[0] // 2]
    w = cfg.window()
    oracle = np.abs(np.array([np.sum(w * np.exp(-2j * np.pi * k * np.arange(N) / N))
                              for k in range(6)])) / 2
    peak = np.abs(mid[k0])
    assert np.argmax(np.abs(mid)) == k0
    np.testing.assert_allclose(peak, oracle[0], rtol=1e-3)
    for d in range(3, 6):
        level = 20 * np.log10(np.abs(mid[k0 + d]) / peak)
        expected = 20 * np.log10(oracle[d] / oracle[0])
        assert abs(level - expected) < 0.5
        assert level < -30.0


def test_sinusoid_leakage_below_minus_60db_at_three_bins():
    # Hann-window bound; the sqrt-Hann window sits near -31 dB here, so this is expected to fail
    cfg = CLOSE_TALK_STFT
    n = np.arange(16000)
    x = np.cos(2 * np.pi * 20 * n / cfg.fft_size)
    mid = stft(x, cfg)[50]
    level = 20 * np.log10(np.abs(mid[23]) / np.abs(mid[20]))
    assert level < -60.0


@pytest.mark.parametrize("cfg", CONFIGS)
def test_round_trip_reconstruction(cfg, rng):
    x = rng.standard_normal(3 * 16000)
    y = istft(stft(x, cfg), cfg, len(x))
    assert snr_db(x, y) >= 120.0


@pytest.mark.parametrize("cfg", CONFIGS)
def test_projection_idempotence(cfg, rng):
    x = rng.standard_normal(8000)
    S = stft(x, cfg)
    S2 = stft(istft(S, cfg, len(x)), cfg)
    np.testing.assert_allclose(S2, S, atol=1e-9 * np.abs(S).max())


def test_zero_spectrogram_inverts_to_zero():
    cfg = CLOSE_TALK_STFT
    S = np.zeros((cfg.num_frames(4000), cfg.num_bins), complex)
    assert not np.any(istft(S, cfg, 4000))


def test_istft_config_mismatch():
    x = np.random.default_rng(0).standard_normal(4000)
    S = stft(x, CLOSE_TALK_STFT)
    with pytest.raises(ValueError):
        istft(S, FAR_FIELD_STFT, 4000)
    with pytest.raises(ValueError):
        istft(S, CLOSE_TALK_STFT, 8000)


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31 - 1))
def test_linearity(a, b, seed):
    r = np.random.default_rng(seed)
    x, y = r.standard_normal(2000), r.standard_normal(2000)
    cfg = CLOSE_TALK_STFT
    lhs = stft(a * x + b * y, cfg)
    rhs = a * stft(x, cfg) + b * stft(y, cfg)
    np.testing.assert_allclose(lhs, rhs, atol=1e-11 * (1 + abs(a) + abs(b)) * 50)


@given(st.integers(0, 2**31 - 1), st.sampled_from(CONFIGS), st.integers(600, 3000))
def test_round_trip_any_length(seed, cfg, n):
    if n < cfg.win_length:
        n = cfg.win_length
    x = np.random.default_rng(seed).standard_normal(n)
    np.testing.assert_allclose(istft(stft(x, cfg), cfg, n), x, atol=1e-10)


def _coverage_oracle(act, cfg):
    n = len(act)
    T = cfg.num_frames(n)
    out = np.zeros(T, dtype=np.uint8)
    for t in range(T):
        for s in range(t * cfg.hop_length - cfg.win_length // 2,
                       t * cfg.hop_length + cfg.win_length // 2):
            if 0 <= s < n and act[s]:
                out[t] = 1
                break
    return out


@given(st.integers(0, 2**31 - 1), st.sampled_from(CONFIGS))
def test_frame_activity_matches_coverage_enumeration(seed, cfg):
    r = np.random.default_rng(seed)
    n = 3000
    act = (r.random(n) < 0.002).astype(np.uint8)
    np.testing.assert_array_equal(frame_activity(act, cfg), _coverage_oracle(act, cfg))
    np.testing.assert_array_equal(frame_activity(act, cfg), frame_activity(act, cfg))
