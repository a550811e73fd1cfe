"""Alternating least-squares solver for the blind-deconvolution objective.

The objective, summed over frequency bins, is

    sum_d sum_t |Y_d - Z(d) - sum_{c != d} g_d(c)^H z~(c)|^2
  + sum_p sum_t |Y_p - sum_c g_p(c)^H z~(c)|^2

Each outer iteration updates the close-talk speech ``Z`` with the filters
fixed (preconditioned conjugate gradient on the normal equations, all
speakers jointly per bin), then refits every filter with the sources fixed.
For one microphone the filters of all contributing speakers are fitted
jointly, so with constant weighting both steps are exact block minimisers
and the objective never increases.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from scipy import fft as sp_fft

from .core import ActivityTimeline, HyperParams, MixtureSet, TapWindow
from .fcp import (CONSTANT, WeightingMode, _regressors, compute_lambda, estimate_fcp_filter,
                  solve_normal_equations)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverConfig:
    max_outer_iters: int = 8
    tol: float = 1e-6               # stop when the relative objective decrease falls below this
    cg_tol: float = 1e-8            # relative residual of the normal equations, per bin
    cg_max_iters: int = 30
    init: str = "close_talk"        # "close_talk" | "zero" | "provided"
    taps_past: int = 13
    taps_future: int = 1
    weighting: WeightingMode = CONSTANT

    def __post_init__(self):
        if self.init not in ("close_talk", "zero", "provided"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.tol <= 0 or self.cg_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_outer_iters < 1 or self.cg_max_iters < 1:
            raise ValueError("iteration limits must be >= 1")

    @classmethod
    def from_hyperparams(cls, hp: HyperParams, **kw) -> "SolverConfig":
        return cls(taps_past=hp.taps_past, taps_future=hp.taps_future, **kw)

    @property
    def window(self) -> TapWindow:
        return TapWindow(self.taps_past, self.taps_future)


@dataclass(frozen=True)
class SolveResult:
    estimates: np.ndarray           # (C, T, F)
    filters: np.ndarray             # (M, C, F, K); rows 0..C-1 close-talk, then far-field
    window: TapWindow
    trace: np.ndarray               # objective after init and after each outer iteration
    breakdown: np.ndarray           # (len(trace), M) per-microphone terms
    converged: bool
    iterations: int
    cg_iterations: tuple = field(default=())

    def trace_rows(self):
        for i, (obj, parts) in enumerate(zip(self.trace, self.breakdown)):
            yield i, float(obj), [float(x) for x in parts]


class _Problem:
    """Per-scene operator ``Z -> predicted mixtures`` and its adjoint.

    Internally arrays are laid out ``(channel, F, T)`` so the per-bin
    convolutions along time can run as FFT products; with the transform
    length at least ``T + K`` the result equals zero-padded tap stacking.
    """

    def __init__(self, mixtures: MixtureSet, window: TapWindow):
        self.C = mixtures.num_speakers
        Y = np.concatenate([mixtures.close_talk, mixtures.far_flat], axis=0)
        self.Y = Y
        self.M, self.T, self.F = Y.shape
        self.Yb = np.ascontiguousarray(Y.transpose(0, 2, 1))
        self.offsets = np.asarray(window.offsets, dtype=int)
        self.K = window.size
        self.window = window
        self.lead = int(max(0, self.offsets.max()))          # future taps J
        self.nfft = sp_fft.next_fast_len(self.T + self.K, real=False)
        allowed = np.ones((self.M, self.C), dtype=bool)
        allowed[np.arange(self.C), np.arange(self.C)] = False
        self.allowed = allowed

    def pack(self, G):
        """Frequency responses of ``(M, C, F, K)`` filters and their conjugates."""
        q = np.zeros(G.shape[:3] + (self.nfft,), dtype=complex)
        # output frame t reads source frame t + o: a causal kernel at lag lead - o
        q[..., self.lead - self.offsets] = G.conj()
        Q = sp_fft.fft(q, axis=-1)
        return Q, Q.conj()

    def forward_b(self, Zb, Q):
        Zf = sp_fft.fft(Zb, n=self.nfft, axis=-1)
        P = np.einsum("mcfn,cfn->mfn", Q[0], Zf)
        out = sp_fft.ifft(P, axis=-1)[..., self.lead:self.lead + self.T]
        out[:self.C] += Zb
        return out

    def adjoint_b(self, Rb, Q):
        Rf = sp_fft.fft(Rb, n=self.nfft, axis=-1)
        P = np.einsum("mcfn,mfn->cfn", Q[1], Rf)
        out = np.roll(sp_fft.ifft(P, axis=-1), self.lead, axis=-1)[..., :self.T]
        out += Rb[:self.C]
        return out

    def forward(self, Z, G):
        """``(C, T, F)`` sources -> ``(M, T, F)`` predicted mixtures."""
        return self.forward_b(Z.transpose(0, 2, 1), self.pack(G)).transpose(0, 2, 1)

    def adjoint(self, R, G):
        return self.adjoint_b(R.transpose(0, 2, 1), self.pack(G)).transpose(0, 2, 1)

    def residual(self, Z, G):
        return self.Y - self.forward(Z, G)

    def objective_parts(self, Z, G) -> np.ndarray:
        r = self.residual(Z, G)
        return np.sum(np.abs(r) ** 2, axis=(1, 2))


def objective(mixtures: MixtureSet, estimates, filters, window: TapWindow) -> np.ndarray:
    """Per-microphone objective terms for given sources and filters."""
    prob = _Problem(mixtures, window)
    return prob.objective_parts(np.asarray(estimates, dtype=complex), _clean_filters(prob, filters))


def _clean_filters(prob: _Problem, G):
    G = np.array(G, dtype=complex)
    G[~prob.allowed] = 0
    return G


def filter_update(prob: _Problem, Z, lams=None) -> np.ndarray:
    """Refit all filters with the sources fixed (joint over speakers per microphone).

    ``lams`` holds one weighting map per microphone; ``None`` means ordinary
    least squares, in which case the Gram matrix is shared by all microphones.
    """
    C, T, F = Z.shape
    K = prob.K
    G = np.zeros((prob.M, C, F, K), dtype=complex)
    if lams is not None:
        for m in range(prob.M):
            srcs = np.flatnonzero(prob.allowed[m])
            if srcs.size == 0:
                continue
            target = prob.Y[m] - Z[m] if m < C else prob.Y[m]
            G[m, srcs] = estimate_fcp_filter(target, Z[srcs], prob.window, lams[m]).taps
        return G
    A = _regressors(Z, prob.window)                          # (F, T, C*K)
    At = A.transpose(0, 2, 1)
    targets = prob.Y.transpose(2, 1, 0).copy()
    targets[:, :, :C] -= Z.transpose(2, 1, 0)
    with np.errstate(over="ignore", invalid="ignore"):
        R = At @ A.conj()
        rhs = At @ targets.conj()                            # (F, C*K, M)
    if not (np.all(np.isfinite(R)) and np.all(np.isfinite(rhs))):
        raise FloatingPointError("non-finite normal equations in the filter update")
    idx = np.arange(C * K).reshape(C, K)
    groups = {}
    for m in range(prob.M):
        srcs = tuple(np.flatnonzero(prob.allowed[m]))
        if srcs:
            groups.setdefault(srcs, []).append(m)
    for srcs, mics in groups.items():
        sel = idx[list(srcs)].ravel()
        g, _ = solve_normal_equations(
            R[:, sel][:, :, sel], rhs[:, sel][:, :, mics])
        # g: (F, S*K, n_mics)
        G[np.ix_(mics, srcs)] = g.reshape(F, len(srcs), K, len(mics)).transpose(3, 1, 0, 2)
    return G


def _circulant_preconditioner(prob: _Problem, Qf, mask=None):
    """Inverse of the normal operator with time edges wrapped around.

    Circular convolution diagonalises under the FFT, leaving one ``C x C``
    system per (bin, FFT frequency).  With a frame mask, frames are grouped
    by their set of active speakers and each group gets the wrapped inverse
    of its own sub-system, applied to that group's frames only.  The groups
    partition the unknowns, so the sum stays Hermitian positive definite on
    the active subspace and remains a valid CG preconditioner.
    """
    C, N, lead = prob.C, prob.nfft, prob.lead
    ramp = np.exp(2j * np.pi * lead * np.arange(N) / N)
    A = (Qf * ramp).transpose(2, 3, 0, 1).copy()                # (F, N, M, C)
    A[:, :, np.arange(C), np.arange(C)] += 1.0
    AhA = A.conj().transpose(0, 1, 3, 2) @ A                    # (F, N, C, C)
    if mask is None:
        groups = [(np.arange(C), None)]
    else:
        active = np.asarray(mask, dtype=bool)
        codes = (active * (1 << np.arange(C))[:, None]).sum(axis=0)
        groups = [(np.flatnonzero(active[:, np.flatnonzero(codes == code)[0]]),
                   (codes == code).astype(float))
                  for code in np.unique(codes) if code]
    inverses = [np.linalg.inv(AhA[:, :, S][:, :, :, S]) for S, _ in groups]

    def apply(r):
        out = np.zeros_like(r)
        for (S, frames), P in zip(groups, inverses):
            x = r[S] if frames is None else r[S] * frames
            Rf = sp_fft.fft(x, n=N, axis=-1)
            z = sp_fft.ifft(np.einsum("fncd,dfn->cfn", P, Rf), axis=-1)[..., :prob.T]
            out[S] += z if frames is None else z * frames
        return out
    return apply


def source_update(prob: _Problem, G, Z0, mask=None, tol=1e-8, max_iters=100):
    """Minimise the objective over ``Z`` with filters fixed.

    Conjugate gradient (circulant-preconditioned) on ``A^H A z = A^H y``, run
    independently (but vectorised) for every frequency bin.  ``mask`` of
    shape ``(C, T)`` restricts the unknowns to active frames.  Starting from
    ``Z0``, every iteration lowers the objective.

    Returns ``(Z, iterations)``.
    """
    C, T, F = Z0.shape
    Q = prob.pack(G)
    m3 = np.ones((C, 1, T)) if mask is None else np.asarray(mask, dtype=float)[:, None, :]

    def normal(v):
        return m3 * prob.adjoint_b(prob.forward_b(m3 * v, Q), Q)

    precond = _circulant_preconditioner(prob, Q[0], mask)

    def dot(a, b):
        return np.real(np.einsum("cft,cft->f", a.conj(), b))[None, :, None]

    x = m3 * Z0.transpose(0, 2, 1)
    b = m3 * prob.adjoint_b(prob.Yb, Q)
    r = b - normal(x)
    thresh = tol * np.maximum(np.sqrt(dot(b, b)), 1e-300)
    active = np.sqrt(dot(r, r)) > thresh
    z = m3 * precond(m3 * r)
    p = z
    rz = dot(r, z)
    it = 0
    while active.any() and it < max_iters:
        it += 1
        Ap = normal(p)
        pAp = dot(p, Ap)
        ok = active & (pAp > 0)
        step = np.where(ok, rz / np.where(ok, pAp, 1.0), 0.0)
        x = x + step * p
        r = r - step * Ap
        active &= np.sqrt(dot(r, r)) > thresh
        z = m3 * precond(m3 * r)
        rz_new = dot(r, z)
        ok = active & (rz > 0)
        beta = np.where(ok, rz_new / np.where(ok, rz, 1.0), 0.0)
        p = z + beta * p
        rz = rz_new
    return np.ascontiguousarray(x.transpose(0, 2, 1)), it


def _frame_mask(activity, mixtures: MixtureSet):
    if activity is None:
        return None
    if isinstance(activity, ActivityTimeline):
        D = activity.frame_activity(mixtures.stft)
    else:
        D = np.asarray(activity)
    if D.shape != (mixtures.num_speakers, mixtures.num_frames):
        raise ValueError(f"activity shape {D.shape} does not match (C, T)")
    return D


def _checked(parts, it):
    if not np.all(np.isfinite(parts)):
        raise FloatingPointError(f"non-finite objective at outer iteration {it}: {parts}")
    return parts


def solve_blind_deconvolution(mixtures: MixtureSet, cfg: SolverConfig = SolverConfig(),
                              activity=None, initial=None) -> SolveResult:
    """Alternate source and filter updates until the objective stalls.

    ``activity`` (an :class:`ActivityTimeline` or a ``(C, T)`` frame mask)
    confines every source update to active frames, so the returned estimates
    are frame-muted.  ``initial`` supplies estimates when ``cfg.init`` is
    ``"provided"``.
    """
    C = mixtures.num_speakers
    if C < 1:
        raise ValueError("need at least one speaker")
    prob = _Problem(mixtures, cfg.window)
    mask = _frame_mask(activity, mixtures)
    lams = None
    if cfg.weighting.variant != "constant":
        lams = [compute_lambda(prob.Y[m], cfg.weighting) for m in range(prob.M)]

    if cfg.init == "close_talk":
        Z = mixtures.close_talk.astype(complex)
    elif cfg.init == "zero":
        Z = np.zeros(mixtures.close_talk.shape, dtype=complex)
    else:
        if initial is None:
            raise ValueError("init='provided' needs initial estimates")
        Z = np.array(initial, dtype=complex)
        if Z.shape != mixtures.close_talk.shape:
            raise ValueError(f"initial estimates {Z.shape} != {mixtures.close_talk.shape}")
    if mask is not None:
        Z = Z * mask[:, :, None]

    G = filter_update(prob, Z, lams)
    parts = [_checked(prob.objective_parts(Z, G), 0)]
    cg_its = []
    converged = False
    it = 0
    for it in range(1, cfg.max_outer_iters + 1):
        Z, n_cg = source_update(prob, G, Z, mask, cfg.cg_tol, cfg.cg_max_iters)
        G = filter_update(prob, Z, lams)
        cur = _checked(prob.objective_parts(Z, G), it)
        parts.append(cur)
        cg_its.append(n_cg)
        prev, now = parts[-2].sum(), cur.sum()
        log.debug("outer %d: objective %.6e (cg %d)", it, now, n_cg)
        if prev - now <= cfg.tol * max(prev, 1e-300):
            converged = True
            break
    parts = np.array(parts)
    return SolveResult(
        estimates=Z, filters=G, window=cfg.window, trace=parts.sum(axis=1),
        breakdown=parts, converged=converged, iterations=it, cg_iterations=tuple(cg_its))


# --- pluggable estimators ----------------------------------------------------

class Estimator(Protocol):
    def __call__(self, mixtures: MixtureSet) -> np.ndarray: ...


class IdentityEstimator:
    """Returns the close-talk mixtures unchanged."""

    def __call__(self, mixtures):
        return np.array(mixtures.close_talk)


class ZeroEstimator:
    def __call__(self, mixtures):
        return np.zeros(mixtures.close_talk.shape, dtype=complex)


@dataclass(frozen=True)
class SolverEstimator:
    """The alternating solver behind the estimator interface."""

    cfg: SolverConfig = SolverConfig()
    use_activity: bool = True

    def __call__(self, mixtures):
        act = mixtures.activity if self.use_activity else None
        return solve_blind_deconvolution(mixtures, self.cfg, act).estimates


DEFAULT_ESTIMATOR = SolverEstimator()


def evaluate_estimator(estimator: Estimator, mixtures: MixtureSet,
                       channels: int | None = None) -> np.ndarray:
    """Run an estimator and check it returns ``(channels, T, F)`` estimates."""
    out = np.asarray(estimator(mixtures))
    n = mixtures.num_speakers if channels is None else channels
    expected = (n, mixtures.num_frames, mixtures.num_bins)
    if out.shape != expected:
        raise ValueError(f"estimator returned {out.shape}, expected {expected}")
    return out
