"""Far-field pseudo-labels from close-talk speech estimates.

For each speaker the close-talk estimate is aligned to a reference far-field
microphone ``q`` by an integer frame shift ``K`` (chosen by enumeration), then
mapped onto ``q`` with a short causal filter of ``L`` taps.  The filtered
estimate approximates the speaker's direct-path image at ``q``.

Shift convention: ``K`` is applied to the estimate's frame index, i.e. the
regressors read ``Z(t + K)``.  A far-field signal that lags the close-talk
signal by ``k`` frames therefore yields ``K = -k``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import FilterBank, HyperParams, MixtureSet, TapWindow
from .fcp import (QUANTILE_FLOOR, WeightingMode, apply_filter, compute_lambda,
                  estimate_fcp_filter, fcp_objective, shift_frames)

TIE_RTOL = 1e-12


def label_window(L: int) -> TapWindow:
    if L < 1:
        raise ValueError("L must be >= 1")
    return TapWindow(L - 1, 0)


def _check_source(close_est) -> np.ndarray:
    Z = np.asarray(close_est)
    if Z.ndim != 2:
        raise ValueError("close-talk estimate must be (T, F)")
    if not np.any(Z):
        raise ValueError("degenerate source: close-talk estimate is all zero")
    return Z


@dataclass(frozen=True)
class DelayEstimate:
    delay: int
    candidates: np.ndarray      # K values, -E..E
    residuals: np.ndarray       # weighted fit residual per candidate
    boundary: bool              # argmin sits on +-E (the true offset may lie beyond)


def estimate_delay(close_est, far_mixture, L: int = 2, E: int = 9,
                   weighting: WeightingMode = QUANTILE_FLOOR, lam=None) -> DelayEstimate:
    """Frame shift of ``close_est`` that best explains ``far_mixture`` with an L-tap filter.

    Ties (within a relative 1e-12) go to the smaller ``|K|``, then to the
    negative shift.
    """
    if E < 0:
        raise ValueError("E must be >= 0")
    Z = _check_source(close_est)
    Y = np.asarray(far_mixture)
    if lam is None:
        lam = compute_lambda(Y, weighting)
    win = label_window(L)
    cands = np.arange(-E, E + 1)
    res = np.empty(len(cands))
    for i, K in enumerate(cands):
        Zs = shift_frames(Z, int(K))
        if not np.any(Zs):
            res[i] = np.inf
            continue
        bank = estimate_fcp_filter(Y, Zs, win, lam)
        res[i] = fcp_objective(Y, Zs, bank, lam)
    best = np.min(res)
    order = sorted(range(len(cands)), key=lambda i: (abs(cands[i]), cands[i]))
    pick = next(i for i in order if res[i] <= best * (1 + TIE_RTOL))
    K = int(cands[pick])
    return DelayEstimate(K, cands, res, bool(E > 0 and abs(K) == E))


def estimate_direct_rtf(close_est, far_mixture, L: int = 2, delay: int = 0,
                        weighting: WeightingMode = QUANTILE_FLOOR, lam=None) -> FilterBank:
    """Causal L-tap filter mapping the delay-aligned estimate onto the far-field mic."""
    Z = _check_source(close_est)
    Y = np.asarray(far_mixture)
    if lam is None:
        lam = compute_lambda(Y, weighting)
    return estimate_fcp_filter(Y, shift_frames(Z, delay), label_window(L), lam)


def compute_pseudo_label(close_est, bank: FilterBank, delay: int, L: int) -> np.ndarray:
    """``h^H [Z(t+K-L+1) ... Z(t+K)]`` per bin."""
    return apply_filter(bank, shift_frames(np.asarray(close_est), delay), label_window(L))


@dataclass(frozen=True)
class PseudoLabelResult:
    labels: np.ndarray          # (C, T, F)
    delays: np.ndarray          # (C,) integer frames
    filters: tuple              # per speaker FilterBank with L taps
    residuals: np.ndarray       # (C,) weighted fit residual at the chosen delay
    delay_residuals: np.ndarray  # (C, 2E+1)
    boundary: np.ndarray        # (C,) bool
    ref_mic: int
    label_taps: int
    max_delay: int

    def to_dict(self) -> dict:
        return {
            "ref_mic": self.ref_mic,
            "label_taps": self.label_taps,
            "max_delay": self.max_delay,
            "speakers": [
                {"speaker": c, "delay": int(self.delays[c]), "residual": float(self.residuals[c]),
                 "boundary": bool(self.boundary[c]),
                 "delay_residuals": {str(int(k)): float(r) for k, r in
                                     zip(range(-self.max_delay, self.max_delay + 1),
                                         self.delay_residuals[c])}}
                for c in range(len(self.delays))
            ],
        }


def build_pseudo_labels(mixtures: MixtureSet, close_estimates, q: int = 0,
                        hp: HyperParams = HyperParams(),
                        weighting: WeightingMode = QUANTILE_FLOOR) -> PseudoLabelResult:
    """Delay search, RTF fit and label synthesis for every speaker at far-field mic ``q``.

    ``q`` indexes the far-field microphones flattened across arrays.
    """
    Z = np.asarray(close_estimates)
    if Z.shape != mixtures.close_talk.shape:
        raise ValueError(f"estimates {Z.shape} do not match close-talk {mixtures.close_talk.shape}")
    a, p = mixtures.far_index(q)
    Y = mixtures.far_field[a][p]
    lam = compute_lambda(Y, weighting)
    L, E = hp.label_taps, hp.max_delay
    labels, delays, banks, res, dres, bnd = [], [], [], [], [], []
    for c in range(Z.shape[0]):
        d = estimate_delay(Z[c], Y, L, E, lam=lam)
        bank = estimate_direct_rtf(Z[c], Y, L, d.delay, lam=lam)
        lab = compute_pseudo_label(Z[c], bank, d.delay, L)
        labels.append(lab)
        delays.append(d.delay)
        banks.append(bank)
        res.append(float(np.sum(np.abs(Y - lab) ** 2 / lam)))
        dres.append(d.residuals)
        bnd.append(d.boundary)
    return PseudoLabelResult(np.array(labels), np.array(delays, dtype=int), tuple(banks),
                             np.array(res), np.array(dres), np.array(bnd), q, L, E)
