"""Forward convolutive prediction (FCP).

For every frequency bin ``f`` the filter ``g`` minimises

    sum_t |target(t, f) - g^H z~(t, f)|^2 / lambda(t, f)

where ``z~(t, f)`` stacks source frames ``t + o`` for the offsets ``o`` of a
:class:`TapWindow`.  Out-of-range frames read as zero, so ``T`` is preserved.
The closed form is ``R g = r`` with ``R = sum_t z~ z~^H / lambda`` and
``r = sum_t z~ conj(target) / lambda``.  Several sources can be stacked into
one regression; the single-source case is the usual pairwise FCP.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import FilterBank, TapWindow, as_array

RIDGE_EPS = 1e-10
# eigenvalue spread beyond which a normal matrix is treated as singular
COND_LIMIT = 1e12


@dataclass(frozen=True)
class WeightingMode:
    """How ``lambda`` is built from a reference spectrogram.

    ``max``      xi * max(|ref|^2) + |ref|^2
    ``quantile`` xi * percentile_q(per-frame max of |ref|^2) + |ref|^2
    ``constant`` lambda = 1 everywhere (ordinary least squares)
    """

    variant: str = "quantile"
    xi: float = 0.01
    quantile: float = 90.0

    def __post_init__(self):
        if self.variant not in ("max", "quantile", "constant"):
            raise ValueError(f"unknown weighting variant {self.variant!r}")
        if self.xi <= 0:
            raise ValueError("xi must be positive")
        if not 0 < self.quantile <= 100:
            raise ValueError("quantile must lie in (0, 100]")


MAX_FLOOR = WeightingMode("max")
QUANTILE_FLOOR = WeightingMode("quantile")
CONSTANT = WeightingMode("constant")


def weighting_floor(ref, mode: WeightingMode) -> float:
    power = np.abs(as_array(ref)) ** 2
    if mode.variant == "max":
        return float(power.max())
    if mode.variant == "quantile":
        return float(np.percentile(power.max(axis=-1), mode.quantile))
    return 0.0


def compute_lambda(ref, mode: WeightingMode = QUANTILE_FLOOR) -> np.ndarray:
    """Weighting map ``lambda(t, f)`` for a ``(T, F)`` reference."""
    R = as_array(ref)
    if not np.all(np.isfinite(R)):
        raise ValueError("reference must be finite")
    if mode.variant == "constant":
        return np.ones(R.shape)
    floor = weighting_floor(R, mode)
    if floor <= 0:
        raise ValueError("degenerate reference: weighting floor is zero")
    return mode.xi * floor + np.abs(R) ** 2


def tap_stack(x: np.ndarray, offsets) -> np.ndarray:
    """Stack shifted copies: ``out[..., t, f, k] = x[..., t + offsets[k], f]``."""
    T = x.shape[-2]
    out = np.zeros(x.shape + (len(offsets),), dtype=complex)
    for k, o in enumerate(offsets):
        o = int(o)
        if abs(o) >= T:
            continue
        if o >= 0:
            out[..., :T - o, :, k] = x[..., o:, :]
        else:
            out[..., -o:, :, k] = x[..., :T + o, :]
    return out


def untap(w: np.ndarray, offsets) -> np.ndarray:
    """Adjoint of :func:`tap_stack`: ``out[..., s, f] = sum_k w[..., s - o_k, f, k]``."""
    T = w.shape[-3]
    out = np.zeros(w.shape[:-1], dtype=complex)
    for k, o in enumerate(offsets):
        o = int(o)
        if abs(o) >= T:
            continue
        if o >= 0:
            out[..., o:, :] += w[..., :T - o, :, k]
        else:
            out[..., :T + o, :] += w[..., -o:, :, k]
    return out


def shift_frames(x, k: int, fill=0.0) -> np.ndarray:
    """``out[..., t, :] = x[..., t + k, :]``, with ``fill`` outside the range."""
    x = np.asarray(x)
    T = x.shape[-2]
    out = np.full(x.shape, fill, dtype=np.result_type(x, type(fill)))
    if abs(k) < T:
        if k >= 0:
            out[..., :T - k, :] = x[..., k:, :]
        else:
            out[..., -k:, :] = x[..., :T + k, :]
    return out


def _regressors(source: np.ndarray, window: TapWindow) -> np.ndarray:
    # (S, T, F) -> (F, T, S*K)
    Z = tap_stack(source, window.offsets)
    S, T, F, K = Z.shape
    return Z.transpose(2, 1, 0, 3).reshape(F, T, S * K)


def solve_normal_equations(R: np.ndarray, r: np.ndarray):
    """Batched Hermitian solve with ridge fallback for singular bins.

    Returns ``(g, regularized)``; ``g`` is zero where ``R`` vanishes entirely.
    """
    dim = R.shape[-1]
    trace = np.real(np.trace(R, axis1=-2, axis2=-1))
    ev = np.linalg.eigvalsh(R)
    singular = (ev[..., 0] <= ev[..., -1] / COND_LIMIT) | (trace <= 0)
    R = R.copy()
    if singular.any():
        ridge = RIDGE_EPS * trace[singular] / dim
        R[singular] += ridge[:, None, None] * np.eye(dim)
    g = np.zeros(r.shape, dtype=complex)
    ok = trace > 0
    if ok.any():
        g[ok] = np.linalg.solve(R[ok], r[ok])
    return g, singular


def estimate_fcp_filter(target, source, window: TapWindow, lam=None) -> FilterBank:
    """Weighted least-squares filter from ``source`` to ``target``.

    Parameters
    ----------
    target : (T, F) complex
    source : (T, F) complex, or (S, T, F) to fit S filters jointly
    window : tap layout
    lam : (T, F) positive weights; ``None`` means ordinary least squares

    Returns
    -------
    FilterBank with taps ``(F, K)`` (single source) or ``(S, F, K)``.
    Bins whose normal matrix was singular are solved with a small ridge and
    flagged in ``regularized``.
    """
    Y = as_array(target)
    X = as_array(source)
    single = X.ndim == 2
    if single:
        X = X[None]
    if X.shape[1:] != Y.shape:
        raise ValueError(f"source {X.shape[1:]} and target {Y.shape} shapes differ")
    if lam is None:
        lam = np.ones(Y.shape)
    lam = np.asarray(lam, dtype=float)
    if lam.shape != Y.shape or np.any(lam <= 0):
        raise ValueError("lambda must be positive with the target's shape")
    S, K = X.shape[0], window.size
    A = _regressors(X, window)                       # (F, T, S*K)
    Aw = A * (1.0 / lam).T[:, :, None]
    R = Aw.transpose(0, 2, 1) @ A.conj()             # (F, SK, SK)
    r = Aw.transpose(0, 2, 1) @ Y.T.conj()[:, :, None]
    g, singular = solve_normal_equations(R, r)
    taps = g[..., 0].reshape(-1, S, K).transpose(1, 0, 2)
    return FilterBank(taps[0] if single else taps, window, singular)


def apply_filter(bank: FilterBank, source, window: TapWindow | None = None) -> np.ndarray:
    """Filtered source ``out(t, f) = g(f)^H z~(t, f)`` (summed over sources)."""
    window = window or bank.window
    if window.size != bank.taps.shape[-1]:
        raise ValueError("filter tap count does not match the window")
    X = as_array(source)
    taps = bank.taps
    if X.ndim == 2:
        X = X[None]
    if taps.ndim == 2:
        taps = taps[None]
    if taps.shape[0] != X.shape[0] or taps.shape[1] != X.shape[2]:
        raise ValueError(f"filter shape {bank.taps.shape} incompatible with source {X.shape}")
    Z = tap_stack(X, window.offsets)                 # (S, T, F, K)
    return np.einsum("stfk,sfk->tf", Z, taps.conj())


def fcp_objective(target, source, bank: FilterBank, lam=None) -> float:
    """Weighted residual ``sum |target - g^H z~|^2 / lambda``."""
    Y = as_array(target)
    resid = Y - apply_filter(bank, source)
    lam = np.ones(Y.shape) if lam is None else lam
    return float(np.sum(np.abs(resid) ** 2 / lam))
