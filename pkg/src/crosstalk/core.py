"""Shared domain types.

Spectrogram arrays are laid out ``(..., T, F)`` (frames, then one-sided
frequency bins).  Speakers, close-talk microphones and far-field microphones
are indexed from 0.  Containers freeze their arrays on construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Mapping, Sequence

import numpy as np

from .stft import StftConfig, frame_activity, stft


def _frozen(a, dtype=None) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def as_array(x) -> np.ndarray:
    """Accept either a :class:`Spectrogram` or a plain array."""
    return x.data if isinstance(x, Spectrogram) else np.asarray(x)


@dataclass(frozen=True)
class Spectrogram:
    data: np.ndarray
    sample_rate: int
    window_ms: float
    hop_ms: float

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen(self.data, complex))
        if self.data.ndim != 2:
            raise ValueError("Spectrogram data must be (T, F)")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("Spectrogram contains non-finite entries")

    @classmethod
    def from_signal(cls, signal, cfg: StftConfig) -> "Spectrogram":
        return cls(stft(signal, cfg), cfg.sample_rate, cfg.window_ms, cfg.hop_ms)

    @property
    def config(self) -> StftConfig:
        return StftConfig(self.window_ms, self.hop_ms, self.sample_rate)

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class FilterBank:
    """Per-bin complex filters applied as ``g^H z~``.

    ``taps`` is ``(F, K)`` for a single source or ``(S, F, K)`` when several
    sources are filtered jointly; tap ``k`` multiplies the source at frame
    offset ``window.offsets[k]`` (ordered from the oldest frame to the newest).
    """

    taps: np.ndarray
    window: "TapWindow"
    regularized: np.ndarray = None

    def __post_init__(self):
        object.__setattr__(self, "taps", _frozen(self.taps, complex))
        if self.taps.shape[-1] != self.window.size:
            raise ValueError(
                f"filter has {self.taps.shape[-1]} taps, window expects {self.window.size}")
        if not np.all(np.isfinite(self.taps)):
            raise ValueError("filter taps must be finite")
        reg = self.regularized
        if reg is None:
            reg = np.zeros(self.taps.shape[-2], dtype=bool)
        object.__setattr__(self, "regularized", _frozen(reg, bool))

    @property
    def past_taps(self) -> int:
        return self.window.past

    @property
    def future_taps(self) -> int:
        return 0 if self.window.delay else self.window.future


@dataclass(frozen=True)
class TapWindow:
    """Frame offsets stacked into ``z~``.

    Standard filters use offsets ``-past .. +future``.  With ``delay > 0`` the
    window holds only frames at least ``delay`` in the past,
    ``-past .. -delay``, and ``future`` is ignored.
    """

    past: int
    future: int = 0
    delay: int = 0

    def __post_init__(self):
        if self.past < 0 or self.future < 0 or self.delay < 0:
            raise ValueError("tap counts must be non-negative")
        if self.delay and self.delay > self.past:
            raise ValueError("prediction delay must not exceed the number of past taps")

    @property
    def offsets(self) -> np.ndarray:
        if self.delay:
            return np.arange(-self.past, -self.delay + 1)
        return np.arange(-self.past, self.future + 1)

    @property
    def size(self) -> int:
        return len(self.offsets)


@dataclass(frozen=True)
class ActivityTimeline:
    """Per-speaker sample-level activity ``d(c)`` with frame-level derivation."""

    sample_activity: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.sample_activity)
        if a.ndim != 2:
            raise ValueError("sample_activity must be (C, N)")
        if not np.all((a == 0) | (a == 1)):
            raise ValueError("activity values must be 0 or 1")
        object.__setattr__(self, "sample_activity", _frozen(a, np.uint8))

    @property
    def num_speakers(self) -> int:
        return self.sample_activity.shape[0]

    @property
    def num_samples(self) -> int:
        return self.sample_activity.shape[1]

    def frame_activity(self, cfg: StftConfig) -> np.ndarray:
        """``D(c, t)`` for the given STFT framing, shape ``(C, T)``."""
        return frame_activity(self.sample_activity, cfg)

    def segments(self) -> list[list[tuple[int, int]]]:
        """Maximal active runs per speaker as half-open ``(start, end)`` pairs."""
        out = []
        for row in self.sample_activity:
            edges = np.diff(np.concatenate([[0], row.astype(np.int8), [0]]))
            starts = np.flatnonzero(edges == 1)
            ends = np.flatnonzero(edges == -1)
            out.append([(int(s), int(e)) for s, e in zip(starts, ends)])
        return out

    @classmethod
    def from_segments(cls, segments: Sequence[Sequence[Sequence[int]]], num_samples: int):
        a = np.zeros((len(segments), num_samples), dtype=np.uint8)
        for c, segs in enumerate(segments):
            for s, e in segs:
                if not 0 <= s <= e <= num_samples:
                    raise ValueError(f"segment {(s, e)} outside [0, {num_samples}]")
                a[c, s:e] = 1
        return cls(a)

    def to_dict(self) -> dict:
        return {"num_samples": self.num_samples,
                "speakers": [[list(seg) for seg in segs] for segs in self.segments()]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ActivityTimeline":
        return cls.from_segments(d["speakers"], int(d["num_samples"]))

    def permute(self, order) -> "ActivityTimeline":
        return ActivityTimeline(self.sample_activity[list(order)])


@dataclass(frozen=True)
class GroundTruth:
    """Components of a simulated scene, in either the time or STFT domain.

    Trailing axes are ``(N,)`` for waveforms or ``(T, F)`` for spectrograms.

    close_talk_images  (C_mic, C_spk, ...)  X_d(c); the diagonal is Z(c)
    close_talk_direct  (C, ...)             direct path of each speaker at its own mic
    close_talk_noise   (C, ...)             V_d
    far_images         per array (P_a, C, ...)   X_p(c)
    far_direct         per array (P_a, C, ...)   S_p(c)
    far_noise          per array (P_a, ...)      V_p
    sources            (C, ...)             dry source signals
    """

    close_talk_images: np.ndarray
    close_talk_direct: np.ndarray
    close_talk_noise: np.ndarray
    far_images: tuple
    far_direct: tuple
    far_noise: tuple
    sources: np.ndarray

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (tuple, list)):
                object.__setattr__(self, f.name, tuple(_frozen(x) for x in v))
            else:
                object.__setattr__(self, f.name, _frozen(v))

    @property
    def close_talk_speech(self) -> np.ndarray:
        C = self.close_talk_images.shape[0]
        return self.close_talk_images[np.arange(C), np.arange(C)]

    def map(self, fn) -> "GroundTruth":
        kw = {}
        for f in fields(self):
            v = getattr(self, f.name)
            kw[f.name] = tuple(fn(x) for x in v) if isinstance(v, tuple) else fn(v)
        return GroundTruth(**kw)

    def permute(self, order) -> "GroundTruth":
        o = list(order)
        return GroundTruth(
            close_talk_images=self.close_talk_images[o][:, o],
            close_talk_direct=self.close_talk_direct[o],
            close_talk_noise=self.close_talk_noise[o],
            far_images=tuple(x[:, o] for x in self.far_images),
            far_direct=tuple(x[:, o] for x in self.far_direct),
            far_noise=self.far_noise,
            sources=self.sources[o],
        )


@dataclass(frozen=True)
class Waveforms:
    close_talk: np.ndarray          # (C, N)
    far_field: tuple                # per array (P_a, N)
    ground_truth: GroundTruth | None = None

    def __post_init__(self):
        object.__setattr__(self, "close_talk", _frozen(self.close_talk, float))
        object.__setattr__(self, "far_field", tuple(_frozen(x, float) for x in self.far_field))

    @property
    def num_samples(self) -> int:
        return self.close_talk.shape[-1]


@dataclass(frozen=True)
class MixtureSet:
    """A scene's close-talk and far-field mixtures in the STFT domain.

    ``close_talk`` is ``(C, T, F)``; ``far_field`` is a tuple with one
    ``(P_a, T, F)`` array per far-field array.  ``waveforms`` holds the
    time-domain counterpart when the set came from audio.
    """

    close_talk: np.ndarray
    far_field: tuple
    stft: StftConfig
    activity: ActivityTimeline | None = None
    ground_truth: GroundTruth | None = None
    waveforms: Waveforms | None = None
    metadata: Mapping = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "close_talk", _frozen(self.close_talk, complex))
        object.__setattr__(self, "far_field",
                           tuple(_frozen(x, complex) for x in self.far_field))

    @classmethod
    def from_waveforms(cls, wav: Waveforms, cfg: StftConfig,
                       activity: ActivityTimeline | None = None,
                       metadata: Mapping | None = None) -> "MixtureSet":
        gt = wav.ground_truth.map(lambda x: stft(x, cfg)) if wav.ground_truth is not None else None
        return cls(
            close_talk=stft(wav.close_talk, cfg),
            far_field=tuple(stft(x, cfg) for x in wav.far_field),
            stft=cfg,
            activity=activity,
            ground_truth=gt,
            waveforms=wav,
            metadata=dict(metadata or {}),
        )

    def with_stft(self, cfg: StftConfig) -> "MixtureSet":
        """Re-analyse the time-domain signals at a different resolution."""
        if self.waveforms is None:
            raise ValueError("no waveforms to re-analyse")
        return MixtureSet.from_waveforms(self.waveforms, cfg, self.activity, self.metadata)

    @property
    def num_speakers(self) -> int:
        return self.close_talk.shape[0]

    @property
    def num_frames(self) -> int:
        return self.close_talk.shape[1]

    @property
    def num_bins(self) -> int:
        return self.close_talk.shape[2]

    @property
    def far_flat(self) -> np.ndarray:
        """All far-field microphones stacked, ``(P, T, F)``."""
        if not self.far_field:
            return np.zeros((0,) + self.close_talk.shape[1:], dtype=complex)
        return np.concatenate(self.far_field, axis=0)

    @property
    def num_far(self) -> int:
        return sum(x.shape[0] for x in self.far_field)

    def far_index(self, flat: int) -> tuple[int, int]:
        """Map a flat far-field microphone index to ``(array, mic)``."""
        if not 0 <= flat < self.num_far:
            raise IndexError(f"far-field mic {flat} out of range (P={self.num_far})")
        for a, arr in enumerate(self.far_field):
            if flat < arr.shape[0]:
                return a, flat
            flat -= arr.shape[0]
        raise AssertionError

    def frame_activity(self) -> np.ndarray | None:
        return None if self.activity is None else self.activity.frame_activity(self.stft)

    def permute_speakers(self, order) -> "MixtureSet":
        o = list(order)
        wav = self.waveforms
        if wav is not None:
            wav = Waveforms(wav.close_talk[o], wav.far_field,
                            None if wav.ground_truth is None else wav.ground_truth.permute(o))
        return replace(
            self,
            close_talk=self.close_talk[o],
            activity=None if self.activity is None else self.activity.permute(o),
            ground_truth=None if self.ground_truth is None else self.ground_truth.permute(o),
            waveforms=wav,
        )


@dataclass(frozen=True)
class HyperParams:
    """Tunable symbols with their default values.

    Where a symbol has a tuning grid (see ``TUNING_GRID``) the default is the
    first grid value.
    """

    taps_past: int = 13        # I
    taps_future: int = 1       # J
    xi: float = 0.01
    beta: float = 1.0
    pred_delay: int = 1        # Delta
    kappa1: float = 1.0
    label_taps: int = 2        # L
    max_delay: int = 9         # E
    cte_taps: int = 1          # A
    delta: float = 20.0        # weight of the close-talk-estimate loss
    kappa2: float = 1.0
    alpha: float = 1.0
    theta: float = 5.0
    block_s: float = 12.0      # W
    context_s: float = 4.0     # W_ctx
    output_s: float = 4.0      # W_out

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ValueError("; ".join(problems))

    def problems(self) -> list[str]:
        p = []
        if self.taps_past < 0 or self.taps_future < 0:
            p.append("I and J must be >= 0")
        if not 0 < self.pred_delay <= max(self.taps_past, 1):
            p.append("need 0 < Delta <= I")
        if self.label_taps < 1:
            p.append("L must be >= 1")
        if self.max_delay < 0 or self.cte_taps < 0:
            p.append("E and A must be >= 0")
        if self.xi <= 0 or self.alpha <= 0:
            p.append("xi and alpha must be > 0")
        if min(self.beta, self.delta, self.theta, self.kappa1, self.kappa2) < 0:
            p.append("beta, delta, theta, kappa1, kappa2 must be >= 0")
        if self.block_s <= 0 or self.context_s < 0 or self.output_s <= 0:
            p.append("block lengths must be positive")
        return p

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


TUNING_GRID = {
    "beta": (1.0, 0.1),
    "pred_delay": (1, 2, 3, 4),
    "alpha": (1.0, 0.3),
    "theta": (5, 10, 20, 40, 80),
}


def validate(ms: MixtureSet) -> list[str]:
    """Return human-readable descriptions of violated invariants (empty if valid)."""
    report = []
    if ms.close_talk.ndim != 3 or ms.close_talk.shape[0] < 1:
        return ["close_talk must be (C, T, F) with C >= 1"]
    C, T, F = ms.close_talk.shape
    if F != ms.stft.num_bins:
        report.append(f"close_talk has {F} bins, STFT config implies {ms.stft.num_bins}")

    def check(name, arr):
        if arr.shape[-2:] != (T, F):
            report.append(f"{name}: shape {arr.shape[-2:]} != (T, F) = {(T, F)}")
        if not np.all(np.isfinite(arr)):
            report.append(f"{name}: non-finite data")

    for d in range(C):
        check(f"close_talk[{d}]", ms.close_talk[d])
    for a, arr in enumerate(ms.far_field):
        if arr.ndim != 3:
            report.append(f"far_field[{a}] must be (P_a, T, F)")
            continue
        for p in range(arr.shape[0]):
            check(f"far_field[{a}][{p}]", arr[p])
    if ms.activity is not None:
        if ms.activity.num_speakers != C:
            report.append(f"activity has {ms.activity.num_speakers} speakers, expected {C}")
        elif ms.stft.num_frames(ms.activity.num_samples) != T:
            report.append("activity length inconsistent with T")
    gt = ms.ground_truth
    if gt is not None:
        check("ground_truth.close_talk_images", gt.close_talk_images)
        if gt.close_talk_images.shape[:2] != (C, C):
            report.append("ground_truth.close_talk_images must be (C, C, T, F)")
        for a, arr in enumerate(gt.far_images):
            check(f"ground_truth.far_images[{a}]", arr)
        if len(gt.far_images) != len(ms.far_field):
            report.append("ground truth array count differs from far_field")
    if ms.waveforms is not None:
        if ms.stft.num_frames(ms.waveforms.num_samples) != T:
            report.append("waveform length inconsistent with T")
    return report
