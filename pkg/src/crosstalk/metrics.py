"""Signal-level scores against simulator ground truth.

Scores are capped at +-150 dB so that perfect or empty estimates still
serialise as finite numbers.
"""

from __future__ import annotations

import csv
import io
import json

import numpy as np

from .core import HyperParams, MixtureSet
from .losses import LossOptions, mc_loss_total

CAP_DB = 150.0


def _pair(reference, estimate):
    s = np.asarray(reference)
    e = np.asarray(estimate)
    if s.shape != e.shape:
        raise ValueError(f"length mismatch: reference {s.shape} vs estimate {e.shape}")
    return s.ravel(), e.ravel()


def _ratio_db(num: float, den: float) -> float:
    if num <= 0:
        return -CAP_DB
    if den <= 0:
        return CAP_DB
    return float(np.clip(10 * np.log10(num / den), -CAP_DB, CAP_DB))


def si_sdr(reference, estimate) -> float:
    """Scale-invariant SDR in dB (projection of the estimate onto the reference)."""
    s, e = _pair(reference, estimate)
    ss = float(np.vdot(s, s).real)
    if ss == 0:
        raise ValueError("reference is all zero")
    a = np.vdot(s, e) / ss
    target = a * s
    return _ratio_db(float(np.vdot(target, target).real),
                     float(np.vdot(target - e, target - e).real))


def snr(reference, estimate) -> float:
    """Plain SNR in dB; not scale invariant.  An all-zero estimate scores the lower cap."""
    s, e = _pair(reference, estimate)
    if not np.any(e):
        return -CAP_DB
    return _ratio_db(float(np.vdot(s, s).real), float(np.vdot(s - e, s - e).real))


def mc_residual_report(mixtures: MixtureSet, estimates, hp: HyperParams = HyperParams(),
                       opts: LossOptions = LossOptions()) -> list[dict]:
    """One row per microphone with its normalised mixture-constraint residual."""
    bd = mc_loss_total(mixtures, estimates, hp, opts)
    rows = [{"role": "close_talk", "index": d, "array": None, "mic": d, "residual": float(v)}
            for d, v in enumerate(bd.mc_close)]
    for p, v in enumerate(bd.mc_far):
        a, m = mixtures.far_index(p)
        rows.append({"role": "far_field", "index": p, "array": a, "mic": m, "residual": float(v)})
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]))
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def rows_to_json(rows: list[dict]) -> str:
    return json.dumps(rows, indent=2)
