"""Seeded synthetic conversational scenes with full ground truth.

Room acoustics are deliberately simple: every impulse response is a
fractional-delay direct path with ``1/distance`` gain followed by an
exponentially decaying Gaussian tail.  The tail decays by 60 dB over T60 and
carries the reverberant energy of a Sabine room, ``1 / r_c^2`` with critical
distance ``r_c = 0.057 * sqrt(V / T60)``, so the direct-to-reverberant ratio
falls with distance as in a real room.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.signal import fftconvolve, lfilter

from .core import ActivityTimeline, GroundTruth, MixtureSet, Waveforms
from .stft import StftConfig

SPEED_OF_SOUND = 343.0
SINC_HALF = 16
# Kinect-like 4-mic linear array, metres along the array axis
KINECT_OFFSETS = (-0.113, 0.036, 0.076, 0.113)


@dataclass(frozen=True)
class Room:
    dims: tuple = (7.0, 6.0, 3.0)
    t60: float = 0.3

    @property
    def volume(self) -> float:
        return float(np.prod(self.dims))

    @property
    def critical_distance(self) -> float:
        return 0.057 * np.sqrt(self.volume / max(self.t60, 1e-12))


@dataclass(frozen=True)
class Rir:
    taps: np.ndarray
    delay: float          # direct-path delay in samples (fractional)
    gain: float           # direct-path gain
    direct_taps: np.ndarray = field(repr=False, default=None)

    @property
    def tail(self) -> np.ndarray:
        d = np.zeros_like(self.taps)
        d[:len(self.direct_taps)] = self.direct_taps
        return self.taps - d


def _fractional_delay(delay: float, gain: float, length: int) -> np.ndarray:
    h = np.zeros(length)
    centre = int(np.floor(delay))
    n = np.arange(max(0, centre - SINC_HALF), min(length, centre + SINC_HALF + 2))
    x = n - delay
    win = 0.5 * (1 + np.cos(np.pi * np.clip(x / (SINC_HALF + 1), -1, 1)))
    h[n] = gain * np.sinc(x) * win
    return h


def simulate_rir(source_pos, mic_pos, room: Room, seed, sample_rate: int = 16000,
                 onset_ms: float = 2.0) -> Rir:
    """Impulse response from ``source_pos`` to ``mic_pos`` (metres)."""
    dist = float(np.linalg.norm(np.asarray(source_pos, float) - np.asarray(mic_pos, float)))
    if dist < 1e-3:
        raise ValueError("source and microphone coincide")
    fs = sample_rate
    delay = dist / SPEED_OF_SOUND * fs
    gain = 1.0 / dist
    onset = int(np.ceil(delay)) + max(1, int(round(onset_ms * fs / 1000)))
    tail_len = int(np.ceil(room.t60 * fs)) if room.t60 > 0 else 0
    length = max(onset + tail_len, int(np.floor(delay)) + SINC_HALF + 2)
    direct = _fractional_delay(delay, gain, length)
    taps = direct.copy()
    if tail_len > 0:
        rng = np.random.default_rng(seed)
        n = np.arange(tail_len)
        env = 10.0 ** (-3.0 * n / (room.t60 * fs))
        noise = rng.standard_normal(tail_len) * env
        rev_energy = 1.0 / room.critical_distance ** 2
        noise *= np.sqrt(rev_energy / np.sum(noise ** 2))
        taps[onset:onset + tail_len] += noise
    return Rir(taps, delay, gain, direct[:int(np.floor(delay)) + SINC_HALF + 2])


# --- activity ------------------------------------------------------------------

@dataclass(frozen=True)
class ActivityPattern:
    """Speaker-overlap pattern.

    ``full``      everyone talks all the time
    ``none``      round-robin turns of ``turn_s`` with ``gap_s`` pauses, no overlap
    ``markov``    independent on/off chains per speaker, stepping every
                  ``step_s``; ``p_active`` is the stationary on-probability
                  and ``mean_on_s`` the mean talk-spurt length
    """

    kind: str = "markov"
    turn_s: float = 1.5
    gap_s: float = 0.2
    p_active: float = 0.5
    mean_on_s: float = 1.2
    step_s: float = 0.1

    def __post_init__(self):
        if self.kind not in ("full", "none", "markov"):
            raise ValueError(f"unknown activity pattern {self.kind!r}")
        if not 0 < self.p_active < 1:
            raise ValueError("p_active must lie in (0, 1)")


def generate_activity(pattern: ActivityPattern, duration_s: float, num_speakers: int,
                      seed, sample_rate: int = 16000) -> ActivityTimeline:
    N = int(round(duration_s * sample_rate))
    C = num_speakers
    a = np.zeros((C, N), dtype=np.uint8)
    if pattern.kind == "full":
        a[:] = 1
    elif pattern.kind == "none":
        turn = int(round(pattern.turn_s * sample_rate))
        gap = int(round(pattern.gap_s * sample_rate))
        s, c = 0, 0
        while s < N:
            a[c, s:min(N, s + turn)] = 1
            s += turn + gap
            c = (c + 1) % C
    else:
        rng = np.random.default_rng(seed)
        step = max(1, int(round(pattern.step_s * sample_rate)))
        n_steps = -(-N // step)
        p_off = pattern.step_s / pattern.mean_on_s
        p_on = p_off * pattern.p_active / (1 - pattern.p_active)
        for c in range(C):
            state = rng.random() < pattern.p_active
            seq = np.empty(n_steps, dtype=np.uint8)
            for i in range(n_steps):
                seq[i] = state
                u = rng.random()
                state = (u >= p_off) if state else (u < p_on)
            # guarantee every speaker talks at least once
            if not seq.any():
                i = int(rng.integers(n_steps))
                seq[i:i + max(1, int(pattern.mean_on_s / pattern.step_s))] = 1
            a[c] = np.repeat(seq, step)[:N]
    return ActivityTimeline(a)


# --- scene -----------------------------------------------------------------------

@dataclass(frozen=True)
class ArraySpec:
    num_mics: int = 4
    geometry: str = "kinect"       # "kinect" | "linear"
    spacing: float = 0.05          # linear arrays only

    def offsets(self) -> np.ndarray:
        if self.geometry == "kinect":
            if self.num_mics != 4:
                raise ValueError("the kinect geometry has 4 microphones")
            return np.array(KINECT_OFFSETS)
        return (np.arange(self.num_mics) - (self.num_mics - 1) / 2) * self.spacing


@dataclass(frozen=True)
class SceneConfig:
    """Scene description.  ``seed`` is mandatory; ranges are sampled per scene."""

    seed: int
    num_speakers: int = 2
    arrays: tuple = (ArraySpec(),)
    duration_s: float = 6.0
    sample_rate: int = 16000
    t60: float | None = None
    t60_range: tuple = (0.2, 0.7)
    room_dims: tuple = (7.0, 6.0, 3.0)
    close_talk_distance: tuple = (0.2, 0.5)
    level_range_db: tuple = (-9.0, 9.0)
    snr_range_db: tuple = (-20.0, 20.0)
    num_noise_sources: int = 1
    ambient_db: float | None = -40.0    # weak diffuse noise re. the mean direct-path speech power
    activity: ActivityPattern = ActivityPattern()
    clock_offsets: tuple = ()           # far-field delay per array, in frames of ``stft``
    stft: StftConfig = StftConfig()

    def __post_init__(self):
        if self.seed is None:
            raise ValueError("scene seed is mandatory")
        if self.num_speakers < 1:
            raise ValueError("need at least one speaker")
        if not 0 <= self.num_noise_sources <= 4:
            raise ValueError("at most 4 noise sources")
        lo, hi = self.t60_range
        if not 0.2 <= lo <= hi <= 0.7:
            raise ValueError("T60 range must lie within [0.2, 0.7] s")
        if self.t60 is not None and not 0.2 <= self.t60 <= 0.7:
            raise ValueError("T60 must lie within [0.2, 0.7] s")
        lo, hi = self.close_talk_distance
        if not 0.2 <= lo <= hi <= 0.5:
            raise ValueError("close-talk distance must lie within [0.2, 0.5] m")
        lo, hi = self.level_range_db
        if not -9 <= lo <= hi <= 9:
            raise ValueError("level range must lie within [-9, 9] dB")
        lo, hi = self.snr_range_db
        if not -20 <= lo <= hi <= 20:
            raise ValueError("SNR range must lie within [-20, 20] dB")
        if len(self.clock_offsets) not in (0, len(self.arrays)):
            raise ValueError("need one clock offset per array")

    @property
    def noiseless(self) -> bool:
        return self.num_noise_sources == 0 and self.ambient_db is None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stft"] = self.stft.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        if "seed" not in d or d["seed"] is None:
            raise ValueError("scene config is missing 'seed'")
        if "arrays" in d:
            d["arrays"] = tuple(ArraySpec(**a) for a in d["arrays"])
        if "activity" in d:
            d["activity"] = ActivityPattern(**d["activity"])
        if "stft" in d:
            d["stft"] = StftConfig.from_dict(d["stft"])
        for k in ("t60_range", "room_dims", "close_talk_distance", "level_range_db",
                  "snr_range_db", "clock_offsets"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def _colored_noise(rng, n: int) -> np.ndarray:
    """Speech-like coloured noise: two resonances and a mild spectral tilt."""
    poles = []
    for lo, hi in ((300, 900), (900, 2500)):
        f0 = rng.uniform(lo, hi)
        r = rng.uniform(0.9, 0.97)
        poles += [r * np.exp(2j * np.pi * f0 / 16000), r * np.exp(-2j * np.pi * f0 / 16000)]
    a = np.real(np.poly(poles))
    x = lfilter([1.0, -0.5], a, rng.standard_normal(n))
    # slow syllable-rate amplitude modulation
    rate = rng.uniform(3.0, 6.0)
    env = 1.0 + 0.6 * np.sin(2 * np.pi * rate * np.arange(n) / 16000 + rng.uniform(0, 2 * np.pi))
    return x * env


def _noise_source(rng, n: int) -> np.ndarray:
    b = [1.0]
    a = [1.0, -rng.uniform(0.5, 0.98)]
    return lfilter(b, a, rng.standard_normal(n))


def _place_scene(rng, cfg: SceneConfig):
    dims = np.array(cfg.room_dims, float)
    C = cfg.num_speakers
    centre = dims / 2
    centre[2] = 1.2
    spk = []
    phase = rng.uniform(0, 2 * np.pi)
    for c in range(C):
        ang = phase + 2 * np.pi * c / C + rng.uniform(-0.2, 0.2)
        rad = rng.uniform(0.9, 1.3)
        spk.append(centre + np.array([rad * np.cos(ang), rad * np.sin(ang), rng.uniform(-0.1, 0.1)]))
    spk = np.array(spk)
    ct = []
    for c in range(C):
        d = rng.uniform(*cfg.close_talk_distance)
        v = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), -1.0])
        ct.append(spk[c] + d * v / np.linalg.norm(v))
    ct = np.array(ct)
    arrays = []
    for spec in cfg.arrays:
        for _ in range(1000):
            pos = np.array([rng.uniform(0.5, dims[0] - 0.5), rng.uniform(0.5, dims[1] - 0.5), 1.0])
            if np.min(np.linalg.norm(spk - pos, axis=1)) >= 1.5:
                break
        ang = rng.uniform(0, np.pi)
        axis = np.array([np.cos(ang), np.sin(ang), 0.0])
        arrays.append(pos + spec.offsets()[:, None] * axis)
    noise = []
    for _ in range(cfg.num_noise_sources):
        noise.append(np.array([rng.uniform(0.3, dims[0] - 0.3), rng.uniform(0.3, dims[1] - 0.3),
                               rng.uniform(0.3, dims[2] - 0.3)]))
    return spk, ct, arrays, np.array(noise).reshape(-1, 3)


def _conv(x, h, n):
    return fftconvolve(x, h)[:n]


def _delay(x, k):
    if k == 0:
        return x
    out = np.zeros_like(x)
    if k > 0:
        out[..., k:] = x[..., :-k]
    else:
        out[..., :k] = x[..., -k:]
    return out


def simulate_scene(cfg: SceneConfig, source_signals=None) -> MixtureSet:
    """Render a scene into close-talk and far-field mixtures with ground truth.

    ``source_signals`` (``(C, N)``), if given, replaces the internal coloured
    noise sources; it is gated by the generated activity and normalised like
    the internal sources.  Every mixture equals the sum of its stored
    components exactly.
    """
    rng = np.random.default_rng(cfg.seed)
    fs = cfg.sample_rate
    N = int(round(cfg.duration_s * fs))
    C = cfg.num_speakers
    t60 = cfg.t60 if cfg.t60 is not None else float(rng.uniform(*cfg.t60_range))
    room = Room(tuple(cfg.room_dims), t60)
    activity = generate_activity(cfg.activity, cfg.duration_s, C, rng.integers(2**32), fs)
    act = activity.sample_activity.astype(bool)

    if source_signals is not None:
        raw = np.asarray(source_signals, dtype=float)
        if raw.ndim != 2 or raw.shape[0] != C:
            raise ValueError(f"source signals must be (C={C}, N)")
        if raw.shape[1] != N:
            raise ValueError(f"source signals have {raw.shape[1]} samples, scene needs {N}")
    else:
        raw = np.stack([_colored_noise(rng, N) for _ in range(C)])
    levels = rng.uniform(*cfg.level_range_db, size=C)
    src = np.zeros((C, N))
    for c in range(C):
        s = raw[c] * act[c]
        if act[c].any():
            std = np.sqrt(np.mean(s[act[c]] ** 2))
            if std > 0:
                s = s / std * 10 ** (levels[c] / 20)
        src[c] = s

    spk_pos, ct_pos, arr_pos, noise_pos = _place_scene(rng, cfg)
    rir_seeds = iter(rng.integers(2**32, size=10_000))

    def render(signal, src_pos, mic_pos):
        rir = simulate_rir(src_pos, mic_pos, room, next(rir_seeds), fs)
        return _conv(signal, rir.taps, N), _conv(signal, rir.direct_taps, N)

    ct_img = np.zeros((C, C, N))
    ct_dir = np.zeros((C, N))
    for d in range(C):
        for c in range(C):
            img, direct = render(src[c], spk_pos[c], ct_pos[d])
            ct_img[d, c] = img
            if c == d:
                ct_dir[c] = direct
    far_img, far_dir = [], []
    for pos in arr_pos:
        P = len(pos)
        img = np.zeros((P, C, N))
        dr = np.zeros((P, C, N))
        for p in range(P):
            for c in range(C):
                img[p, c], dr[p, c] = render(src[c], spk_pos[c], pos[p])
        far_img.append(img)
        far_dir.append(dr)

    ct_noise = np.zeros((C, N))
    far_noise = [np.zeros((len(pos), N)) for pos in arr_pos]
    snr_db = None
    if cfg.num_noise_sources:
        snr_db = float(rng.uniform(*cfg.snr_range_db))
        for k in range(cfg.num_noise_sources):
            ns = _noise_source(rng, N)
            for d in range(C):
                ct_noise[d] += render(ns, noise_pos[k], ct_pos[d])[0]
            for a, pos in enumerate(arr_pos):
                for p in range(len(pos)):
                    far_noise[a][p] += render(ns, noise_pos[k], pos[p])[0]
        ref_speech = np.sum(far_dir[0][0] if far_dir else ct_dir, axis=0)
        ref_noise = far_noise[0][0] if far_noise else ct_noise[0]
        e_s, e_n = np.sum(ref_speech ** 2), np.sum(ref_noise ** 2)
        if e_n > 0 and e_s > 0:
            g = np.sqrt(e_s / e_n / 10 ** (snr_db / 10))
            ct_noise *= g
            far_noise = [x * g for x in far_noise]
    if cfg.ambient_db is not None:
        ref = np.mean([np.mean(x ** 2) for x in far_dir[0]]) if far_dir else np.mean(ct_dir ** 2)
        sigma = np.sqrt(ref * 10 ** (cfg.ambient_db / 10) / max(C, 1))
        ct_noise += sigma * rng.standard_normal(ct_noise.shape)
        far_noise = [x + sigma * rng.standard_normal(x.shape) for x in far_noise]

    if cfg.clock_offsets:
        hop = cfg.stft.hop_length
        for a, k in enumerate(cfg.clock_offsets):
            s = int(k) * hop
            far_img[a] = _delay(far_img[a], s)
            far_dir[a] = _delay(far_dir[a], s)
            far_noise[a] = _delay(far_noise[a], s)

    gt = GroundTruth(
        close_talk_images=ct_img, close_talk_direct=ct_dir, close_talk_noise=ct_noise,
        far_images=tuple(far_img), far_direct=tuple(far_dir), far_noise=tuple(far_noise),
        sources=src,
    )
    close = ct_img.sum(axis=1) + ct_noise
    far = tuple(img.sum(axis=1) + nz for img, nz in zip(far_img, far_noise))
    wav = Waveforms(close, far, gt)
    meta = {
        "seed": cfg.seed, "t60": t60, "levels_db": levels.tolist(), "snr_db": snr_db,
        "speaker_positions": spk_pos.tolist(), "close_talk_positions": ct_pos.tolist(),
        "array_positions": [p.tolist() for p in arr_pos],
        "noise_positions": noise_pos.tolist(), "clock_offsets": list(cfg.clock_offsets),
    }
    return MixtureSet.from_waveforms(wav, cfg.stft, activity, meta)


def realized_levels_db(ms: MixtureSet) -> np.ndarray:
    """Per-speaker dry-source power over active samples, in dB."""
    src = ms.waveforms.ground_truth.sources
    act = ms.activity.sample_activity.astype(bool)
    out = []
    for c in range(src.shape[0]):
        out.append(10 * np.log10(np.mean(src[c][act[c]] ** 2)) if act[c].any() else -np.inf)
    return np.array(out)


def image_snr_db(ms: MixtureSet) -> tuple[np.ndarray, list]:
    """Per-speaker SNR of the speaker's own image at its close-talk mic and at each far mic."""
    gt = ms.waveforms.ground_truth
    C = ms.num_speakers
    ct = np.zeros(C)
    for c in range(C):
        s = gt.close_talk_images[c, c]
        ct[c] = 10 * np.log10(np.sum(s ** 2) / np.sum((ms.waveforms.close_talk[c] - s) ** 2))
    far = []
    for a, img in enumerate(gt.far_images):
        y = ms.waveforms.far_field[a]
        far.append(np.array([[10 * np.log10(np.sum(img[p, c] ** 2) / np.sum((y[p] - img[p, c]) ** 2))
                              for c in range(C)] for p in range(img.shape[0])]))
    return ct, far


def default_scene(seed: int, **kw) -> SceneConfig:
    return SceneConfig(seed=seed, **kw)


def stack_sources(signals: Sequence[np.ndarray]) -> np.ndarray:
    n = {len(s) for s in signals}
    if len(n) != 1:
        raise ValueError("inconsistent waveform lengths")
    return np.stack(signals)
