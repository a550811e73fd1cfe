"""Loss family for cross-talk reduction and far-field pseudo-label training.

All losses take STFT-domain arrays laid out ``(channels, T, F)``.  Speech
estimates occupy channels ``0..C-1``; when noise modelling is on, the
aggregated noise estimate is channel ``C``.  Filters inside the mixture
constraint losses are re-fitted with FCP on every call.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .core import HyperParams, MixtureSet, TapWindow, as_array
from .fcp import (QUANTILE_FLOOR, WeightingMode, apply_filter,
                  compute_lambda, estimate_fcp_filter, shift_frames)
from .pipeline import frame_mute


@dataclass(frozen=True)
class NoiseAggregation:
    variant: str = "average"     # or "random"
    rng_seed: int | None = None

    def __post_init__(self):
        if self.variant not in ("average", "random"):
            raise ValueError(f"unknown noise aggregation {self.variant!r}")
        if self.variant == "random" and self.rng_seed is None:
            raise ValueError("random noise choice needs a seed")


@dataclass(frozen=True)
class LossOptions:
    noise: bool = False
    dereverb: bool = False
    weighting: WeightingMode = QUANTILE_FLOOR
    noise_aggregation: NoiseAggregation = NoiseAggregation()


@dataclass(frozen=True)
class LossBreakdown:
    """Named loss terms and the multipliers that combine them into ``total``.

    total = weights["mc"] * (sum(mc_close) + sum(mc_far))
          + weights["sa"] * sa + weights["sup"] * (sup_speech + sup_noise)
          + weights["pl"] * pl + weights["cte"] * cte
    """

    mc_close: tuple = ()
    mc_far: tuple = ()
    sa: float = 0.0
    sup_speech: float = 0.0
    sup_noise: float = 0.0
    pl: float = 0.0
    cte: float = 0.0
    weights: Mapping[str, float] = field(default_factory=dict)

    @property
    def mc(self) -> float:
        return float(sum(self.mc_close) + sum(self.mc_far))

    def _w(self, key):
        return float(self.weights.get(key, 0.0))

    @property
    def total(self) -> float:
        return (self._w("mc") * self.mc + self._w("sa") * self.sa
                + self._w("sup") * (self.sup_speech + self.sup_noise)
                + self._w("pl") * self.pl + self._w("cte") * self.cte)

    def to_dict(self) -> dict:
        return {
            "mc_close": [float(x) for x in self.mc_close],
            "mc_far": [float(x) for x in self.mc_far],
            "mc": self.mc, "sa": float(self.sa),
            "sup_speech": float(self.sup_speech), "sup_noise": float(self.sup_noise),
            "pl": float(self.pl), "cte": float(self.cte),
            "weights": {k: float(v) for k, v in self.weights.items()},
            "total": self.total,
        }


# --- elementwise building blocks -------------------------------------------

def _compressed(x: np.ndarray, alpha: float):
    mag = np.abs(x) ** alpha
    ph = np.angle(x)
    return mag, mag * np.cos(ph), mag * np.sin(ph)


def g_loss(ref, est, alpha: float = 1.0) -> float:
    """Absolute error on compressed magnitude, real and imaginary parts, summed."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    R, E = as_array(ref), as_array(est)
    if R.shape != E.shape:
        raise ValueError(f"shape mismatch {R.shape} vs {E.shape}")
    rm, rr, ri = _compressed(R, alpha)
    em, er, ei = _compressed(E, alpha)
    return float(np.sum(np.abs(rm - em) + np.abs(rr - er) + np.abs(ri - ei)))


def compressed_energy(x, alpha: float) -> float:
    return float(np.sum(np.abs(as_array(x)) ** alpha))


def _norm(ref, alpha) -> float:
    den = compressed_energy(ref, alpha)
    if den <= 0:
        raise ValueError("degenerate normalization: reference has zero energy")
    return den


def f_loss(ref, est, alpha: float = 1.0) -> float:
    """:func:`g_loss` normalised by the compressed energy of ``ref``."""
    den = _norm(ref, alpha)
    return g_loss(ref, est, alpha) / den


# --- mixture constraints ---------------------------------------------------

def _check_channels(estimates, C, opts: LossOptions):
    need = C + 1 if opts.noise else C
    if estimates.shape[0] < need:
        raise ValueError(f"need {need} estimate channels, got {estimates.shape[0]}")


def _sources(C, opts, exclude=None):
    src = [c for c in range(C) if c != exclude]
    if opts.noise:
        src.append(C)
    return src


def reconstruct_close_talk(d: int, mixtures: MixtureSet, estimates, hp: HyperParams,
                           opts: LossOptions = LossOptions()) -> np.ndarray:
    """Close-talk mixture ``d`` rebuilt from the estimates.

    Own estimate, plus FCP-filtered estimates of every other source (each
    filter regresses ``Y_d`` on one source).  With ``opts.dereverb`` a
    delayed self-filter over frames ``t-I .. t-Delta`` is fitted on what the
    other terms leave unexplained and added on top.
    """
    Zh = as_array(estimates)
    C = mixtures.num_speakers
    _check_channels(Zh, C, opts)
    Y = mixtures.close_talk[d]
    lam = compute_lambda(Y, opts.weighting)
    win = TapWindow(hp.taps_past, hp.taps_future)
    Yh = Zh[d].astype(complex)
    for c in _sources(C, opts, exclude=d):
        bank = estimate_fcp_filter(Y, Zh[c], win, lam)
        Yh = Yh + apply_filter(bank, Zh[c])
    if opts.dereverb:
        if not 0 < hp.pred_delay < hp.taps_past:
            raise ValueError("dereverb needs 0 < Delta < I")
        dwin = TapWindow(hp.taps_past, delay=hp.pred_delay)
        bank = estimate_fcp_filter(Y - Yh, Zh[d], dwin, lam)
        Yh = Yh + apply_filter(bank, Zh[d])
    return Yh


def reconstruct_far_field(p: int, mixtures: MixtureSet, estimates, hp: HyperParams,
                          opts: LossOptions = LossOptions()) -> np.ndarray:
    """Far-field mixture ``p`` (flat index) rebuilt as a sum of FCP-filtered estimates."""
    Zh = as_array(estimates)
    C = mixtures.num_speakers
    _check_channels(Zh, C, opts)
    Y = mixtures.far_flat[p]
    lam = compute_lambda(Y, opts.weighting)
    win = TapWindow(hp.taps_past, hp.taps_future)
    Yh = np.zeros(Y.shape, dtype=complex)
    for c in _sources(C, opts):
        Yh += apply_filter(estimate_fcp_filter(Y, Zh[c], win, lam), Zh[c])
    return Yh


def mc_loss_close_talk(d, mixtures, estimates, hp=HyperParams(), opts=LossOptions()) -> float:
    Yh = reconstruct_close_talk(d, mixtures, estimates, hp, opts)
    return f_loss(mixtures.close_talk[d], Yh, hp.alpha)


def mc_loss_far_field(p, mixtures, estimates, hp=HyperParams(), opts=LossOptions()) -> float:
    Yh = reconstruct_far_field(p, mixtures, estimates, hp, opts)
    return f_loss(mixtures.far_flat[p], Yh, hp.alpha)


def mc_loss_total(mixtures: MixtureSet, estimates, hp=HyperParams(),
                  opts=LossOptions()) -> LossBreakdown:
    close = tuple(mc_loss_close_talk(d, mixtures, estimates, hp, opts)
                  for d in range(mixtures.num_speakers))
    far = tuple(mc_loss_far_field(p, mixtures, estimates, hp, opts)
                for p in range(mixtures.num_far))
    return LossBreakdown(mc_close=close, mc_far=far, weights={"mc": 1.0})


# --- activity-based terms --------------------------------------------------

def sa_loss(estimates, frame_activity, close_talk_mixtures, alpha: float = 1.0) -> float:
    """Compressed estimate energy in frames where the speaker is inactive."""
    Zh = as_array(estimates)
    Y = as_array(close_talk_mixtures)
    D = np.asarray(frame_activity)
    C = D.shape[0]
    if D.shape[1] != Zh.shape[1]:
        raise ValueError("activity frames do not match the estimates")
    total = 0.0
    for c in range(C):
        silent = (1 - D[c])[:, None]
        total += float(np.sum(np.abs(Zh[c]) ** alpha * silent)) / _norm(Y[c], alpha)
    return total


def weakly_supervised_loss(mixtures: MixtureSet, estimates, frame_activity=None,
                           hp=HyperParams(), opts=LossOptions()) -> LossBreakdown:
    """Mixture constraints on frame-muted estimates plus ``beta`` times the SA term.

    The SA term sees the estimates before muting; the noise channel is never muted.
    """
    Zh = as_array(estimates)
    D = mixtures.frame_activity() if frame_activity is None else np.asarray(frame_activity)
    if D is None:
        raise ValueError("weak supervision needs speaker activity")
    muted = frame_mute(Zh, D)
    mc = mc_loss_total(mixtures, muted, hp, opts)
    sa = sa_loss(Zh, D, mixtures.close_talk, hp.alpha)
    return LossBreakdown(mc_close=mc.mc_close, mc_far=mc.mc_far, sa=sa,
                         weights={"mc": 1.0, "sa": hp.beta})


# --- supervised terms ------------------------------------------------------

def _normalised_g(est, target, norm_ref, alpha) -> float:
    E, S, Y = as_array(est), as_array(target), as_array(norm_ref)
    if E.shape[0] != S.shape[0]:
        raise ValueError("estimate and target channel counts differ")
    Y = np.broadcast_to(Y, S.shape) if Y.ndim == 2 else Y
    return float(sum(g_loss(S[c], E[c], alpha) / _norm(Y[c], alpha) for c in range(S.shape[0])))


def supervised_speech_loss(estimates, targets, close_talk_mixtures, alpha: float = 1.0) -> float:
    """Per-speaker 𝒢 against close-talk (or direct-path) targets, normalised by Y_d(=c)."""
    C = as_array(targets).shape[0]
    return _normalised_g(as_array(estimates)[:C], targets, close_talk_mixtures, alpha)


def supervised_noise_loss(noise_estimates, noises, close_talk_mixtures, alpha: float = 1.0) -> float:
    return _normalised_g(noise_estimates, noises, close_talk_mixtures, alpha)


def aggregate_noise(noise_estimates, mode: NoiseAggregation = NoiseAggregation()) -> np.ndarray:
    V = as_array(noise_estimates)
    if mode.variant == "average":
        return V.mean(axis=0)
    idx = int(np.random.default_rng(mode.rng_seed).integers(V.shape[0]))
    return V[idx].copy()


@dataclass(frozen=True)
class Batch:
    """Inputs of one training example for :func:`ctrnet_loss` / :func:`pulss_loss`.

    ``estimates`` are close-talk speech estimates ``(C, T, F)``;
    ``noise_estimates`` the per-close-talk-mic noise estimates ``(C, T, F)``.
    PuLSS fields: ``far_estimates`` ``(C, T, F)`` at reference mic ``ref_mic``,
    ``pseudo_labels`` ``(C, T, F)`` and per-speaker ``delays``.
    """

    mixtures: MixtureSet
    estimates: np.ndarray | None = None
    noise_estimates: np.ndarray | None = None
    frame_activity: np.ndarray | None = None
    far_estimates: np.ndarray | None = None
    pseudo_labels: np.ndarray | None = None
    delays: tuple | None = None
    ref_mic: int = 0


def _with_noise_channel(batch: Batch, opts: LossOptions) -> np.ndarray:
    Zh = as_array(batch.estimates)
    if not opts.noise:
        return Zh
    if batch.noise_estimates is None:
        raise ValueError("noise modelling needs noise estimates")
    noise = aggregate_noise(batch.noise_estimates, opts.noise_aggregation)
    return np.concatenate([Zh, noise[None]], axis=0)


def ctrnet_loss(batch: Batch, kind: str, hp=HyperParams(), opts=LossOptions()) -> LossBreakdown:
    """Supervised loss on simulated input, weakly supervised loss on real input."""
    ms = batch.mixtures
    if kind == "real":
        return weakly_supervised_loss(ms, _with_noise_channel(batch, opts),
                                      batch.frame_activity, hp, opts)
    if kind != "simulated":
        raise ValueError(f"kind must be 'simulated' or 'real', got {kind!r}")
    gt = ms.ground_truth
    if gt is None:
        raise ValueError("simulated input needs ground truth")
    target = gt.close_talk_direct if opts.dereverb else gt.close_talk_speech
    speech = supervised_speech_loss(batch.estimates, target, ms.close_talk, hp.alpha)
    noise = 0.0
    if opts.noise:
        if batch.noise_estimates is None:
            raise ValueError("noise modelling needs noise estimates")
        noise = supervised_noise_loss(batch.noise_estimates, gt.close_talk_noise,
                                      ms.close_talk, hp.alpha)
    return LossBreakdown(sup_speech=speech, sup_noise=noise, weights={"sup": hp.kappa1})


# --- far-field (PuLSS) terms ------------------------------------------------

def pl_loss(far_estimates, pseudo_labels, far_mixture, alpha: float = 1.0) -> float:
    """Per-speaker 𝒢 against pseudo-labels, normalised by the reference far-field mixture."""
    S = as_array(pseudo_labels)
    den = _norm(far_mixture, alpha)
    E = as_array(far_estimates)
    if E.shape != S.shape:
        raise ValueError("estimates and pseudo-labels differ in shape")
    return float(sum(g_loss(S[c], E[c], alpha) for c in range(S.shape[0])) / den)


def cte_fit(far_estimate, close_estimate, delay: int, taps: int, xi: float = 0.01):
    """Fit a two-sided filter from one far-field estimate to the delay-aligned close-talk estimate.

    Returns ``(aligned_target, filtered_estimate, bank)``.  The weighting uses
    the max-floored power of the close-talk estimate, aligned with it.
    """
    Z = as_array(close_estimate)
    S = as_array(far_estimate)
    eta = compute_lambda(Z, WeightingMode("max", xi))
    floor = xi * float((np.abs(Z) ** 2).max())
    target = shift_frames(Z, delay)
    eta = shift_frames(eta, delay, fill=floor)
    win = TapWindow(taps, taps)
    bank = estimate_fcp_filter(target, S, win, eta)
    return target, apply_filter(bank, S), bank


def cte_loss(far_estimates, close_estimates, delays, taps: int, alpha: float,
             close_talk_mixtures, xi: float = 0.01) -> float:
    """Close-talk-estimate loss: residual of filtering far-field estimates onto aligned close-talk estimates."""
    if taps < 0:
        raise ValueError("A must be >= 0")
    S = as_array(far_estimates)
    Z = as_array(close_estimates)
    Y = as_array(close_talk_mixtures)
    total = 0.0
    for c in range(S.shape[0]):
        target, fitted, _ = cte_fit(S[c], Z[c], int(delays[c]), taps, xi)
        total += g_loss(target, fitted, alpha) / _norm(Y[c], alpha)
    return total


def pulss_loss(batch: Batch, kind: str, hp=HyperParams()) -> LossBreakdown:
    """``kappa2`` times the direct-path loss on simulated input; PL + delta * CTE on real input."""
    ms = batch.mixtures
    Yq = ms.far_flat[batch.ref_mic]
    if kind == "simulated":
        gt = ms.ground_truth
        if gt is None:
            raise ValueError("simulated input needs ground truth")
        a, m = ms.far_index(batch.ref_mic)
        direct = gt.far_direct[a][m]
        sup = pl_loss(batch.far_estimates, direct, Yq, hp.alpha)
        return LossBreakdown(sup_speech=sup, weights={"sup": hp.kappa2})
    if kind != "real":
        raise ValueError(f"kind must be 'simulated' or 'real', got {kind!r}")
    pl = pl_loss(batch.far_estimates, batch.pseudo_labels, Yq, hp.alpha)
    cte = 0.0
    if hp.delta > 0:
        cte = cte_loss(batch.far_estimates, batch.estimates, batch.delays, hp.cte_taps,
                       hp.alpha, ms.close_talk, hp.xi)
    return LossBreakdown(pl=pl, cte=cte, weights={"pl": 1.0, "cte": hp.delta})
