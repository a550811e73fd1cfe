"""Short-time Fourier transform with a square-root Hann window.

Framing convention
------------------
The signal is reflect-padded by half a window on the left, and by half a
window plus whatever is needed to reach a whole number of hops on the right.
Frame ``t`` therefore starts at padded sample ``t * hop`` and covers original
samples ``[t*hop - win/2, t*hop + win/2)``, i.e. it is centred on sample
``t * hop``.  A signal of ``N`` samples yields ``ceil(N / hop) + 1`` frames.

The same square-root Hann window is used for analysis and synthesis; at 50 %
overlap the squared window sums to one, and ``istft`` additionally divides by
the overlap-added squared window so reconstruction is exact at every sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import get_window


@dataclass(frozen=True)
class StftConfig:
    window_ms: float = 16.0
    hop_ms: float = 8.0
    sample_rate: int = 16000
    window_kind: str = "sqrt_hann"

    def __post_init__(self):
        if self.window_kind != "sqrt_hann":
            raise ValueError(f"unsupported window kind {self.window_kind!r}")
        win = self.window_ms * self.sample_rate / 1000.0
        hop = self.hop_ms * self.sample_rate / 1000.0
        if abs(win - round(win)) > 1e-9 or abs(hop - round(hop)) > 1e-9:
            raise ValueError("window and hop must be whole numbers of samples")
        if round(hop) <= 0 or round(win) % round(hop) != 0:
            raise ValueError("hop must divide the window length")

    @property
    def win_length(self) -> int:
        return int(round(self.window_ms * self.sample_rate / 1000.0))

    @property
    def hop_length(self) -> int:
        return int(round(self.hop_ms * self.sample_rate / 1000.0))

    @property
    def fft_size(self) -> int:
        return 1 << (self.win_length - 1).bit_length()

    @property
    def num_bins(self) -> int:
        return self.fft_size // 2 + 1

    def num_frames(self, num_samples: int) -> int:
        return -(-num_samples // self.hop_length) + 1

    def window(self) -> np.ndarray:
        return np.sqrt(get_window("hann", self.win_length, fftbins=True))

    def to_dict(self) -> dict:
        return {"window_ms": self.window_ms, "hop_ms": self.hop_ms,
                "sample_rate": self.sample_rate, "window_kind": self.window_kind}

    @classmethod
    def from_dict(cls, d: dict) -> "StftConfig":
        return cls(**d)


# CTRnet-style and PuLSS-style resolutions at 16 kHz.
CLOSE_TALK_STFT = StftConfig(16.0, 8.0, 16000)
FAR_FIELD_STFT = StftConfig(32.0, 16.0, 16000)


def stft(signal, cfg: StftConfig) -> np.ndarray:
    """One-sided STFT along the last axis.

    Returns an array of shape ``signal.shape[:-1] + (T, F)``.
    """
    x = np.asarray(signal, dtype=float)
    n = x.shape[-1]
    win, hop = cfg.win_length, cfg.hop_length
    if n < win:
        raise ValueError(f"signal has {n} samples, shorter than one window ({win})")
    half = win // 2
    pad = [(0, 0)] * (x.ndim - 1) + [(half, half + (-n) % hop)]
    xp = np.pad(x, pad, mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(xp, win, axis=-1)[..., ::hop, :]
    return np.fft.rfft(frames * cfg.window(), n=cfg.fft_size, axis=-1)


def istft(spec, cfg: StftConfig, out_len: int) -> np.ndarray:
    """Overlap-add inverse of :func:`stft`, cropped to ``out_len`` samples."""
    S = np.asarray(spec)
    if S.shape[-1] != cfg.num_bins:
        raise ValueError(f"spectrogram has {S.shape[-1]} bins, config expects {cfg.num_bins}")
    T = S.shape[-2]
    if T != cfg.num_frames(out_len):
        raise ValueError(f"{T} frames inconsistent with {out_len} samples under this config")
    win, hop = cfg.win_length, cfg.hop_length
    w = cfg.window()
    frames = np.fft.irfft(S, n=cfg.fft_size, axis=-1)[..., :win] * w
    total = (T - 1) * hop + win
    out = np.zeros(S.shape[:-2] + (total,))
    env = np.zeros(total)
    for t in range(T):
        out[..., t * hop:t * hop + win] += frames[..., t, :]
        env[t * hop:t * hop + win] += w * w
    nz = env > 1e-10
    out[..., nz] /= env[nz]
    out[..., ~nz] = 0.0
    half = win // 2
    return out[..., half:half + out_len]


def frame_activity(sample_activity, cfg: StftConfig) -> np.ndarray:
    """Frame-level activity: 1 where the frame's window holds any active sample.

    ``sample_activity`` has shape ``(..., N)``; the result ``(..., T)`` is a
    uint8 array.  Window coverage is measured on original sample positions,
    ignoring the reflected padding.
    """
    a = np.asarray(sample_activity).astype(bool)
    n = a.shape[-1]
    win, hop = cfg.win_length, cfg.hop_length
    T = cfg.num_frames(n)
    starts = np.arange(T) * hop - win // 2
    lo = np.clip(starts, 0, n)
    hi = np.clip(starts + win, 0, n)
    cs = np.concatenate([np.zeros(a.shape[:-1] + (1,), dtype=np.int64),
                         np.cumsum(a, axis=-1)], axis=-1)
    return ((cs[..., hi] - cs[..., lo]) > 0).astype(np.uint8)
