"""Session-level mechanics: blocks, frame muting, sampling weights, array selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ActivityTimeline
from .stft import StftConfig

SNR_CAP_DB = 150.0


@dataclass(frozen=True)
class BlockPlan:
    """Block layout in seconds.

    Inference blocks are ``context + output + context`` long and advance by
    ``output``; training blocks advance by ``shift`` (1 s by default).
    """

    block_s: float = 12.0
    shift_s: float = 4.0
    context_s: float = 4.0
    output_s: float = 4.0
    sample_rate: int = 16000

    def __post_init__(self):
        if self.block_s <= 0 or self.shift_s <= 0:
            raise ValueError("block and shift lengths must be positive")
        if self.context_s < 0 or self.output_s <= 0:
            raise ValueError("invalid context/output lengths")

    @classmethod
    def inference(cls, context_s=4.0, output_s=4.0, sample_rate=16000) -> "BlockPlan":
        return cls(2 * context_s + output_s, output_s, context_s, output_s, sample_rate)

    @classmethod
    def training(cls, block_s=12.0, shift_s=1.0, sample_rate=16000) -> "BlockPlan":
        ctx = (block_s - shift_s) / 2
        return cls(block_s, shift_s, ctx, shift_s, sample_rate)

    def _samples(self, s: float) -> int:
        return int(round(s * self.sample_rate))

    @property
    def block_len(self) -> int:
        return self._samples(self.block_s)

    @property
    def shift_len(self) -> int:
        return self._samples(self.shift_s)

    @property
    def overlap_s(self) -> float:
        return self.block_s - self.shift_s

    def to_dict(self) -> dict:
        return {"block_s": self.block_s, "shift_s": self.shift_s, "context_s": self.context_s,
                "output_s": self.output_s, "sample_rate": self.sample_rate}


def split_blocks(session_len: int, plan: BlockPlan) -> list[tuple[int, int]]:
    """Half-open sample ranges of the blocks covering a session.

    Blocks start every ``shift``; if the regular grid leaves a tail
    uncovered, one final block is right-aligned to the session end.  A
    session shorter than one block yields a single block ``(0, W)`` that
    extends past the end and must be zero-padded by the caller.
    """
    W, H = plan.block_len, plan.shift_len
    if session_len < 1:
        raise ValueError("empty session")
    if session_len <= W:
        return [(0, W)]
    starts = list(range(0, session_len - W + 1, H))
    if starts[-1] + W < session_len:
        starts.append(session_len - W)
    return [(s, s + W) for s in starts]


def extract_blocks(signal, plan: BlockPlan) -> list[np.ndarray]:
    x = np.asarray(signal)
    n = x.shape[-1]
    out = []
    for s, e in split_blocks(n, plan):
        blk = x[..., s:min(e, n)]
        if e > n:
            blk = np.concatenate([blk, np.zeros(x.shape[:-1] + (e - n,), x.dtype)], axis=-1)
        out.append(blk)
    return out


def _owners(session_len: int, ranges) -> np.ndarray:
    # each sample goes to the covering block whose centre is nearest; ties go to the later block
    # (equal-length blocks: the nearest centre always covers the sample)
    centres = np.array([(s + e) / 2.0 for s, e in ranges])
    n = np.arange(session_len) + 0.5
    hi = np.clip(np.searchsorted(centres, n, side="left"), 0, len(centres) - 1)
    lo = np.maximum(hi - 1, 0)
    return np.where(np.abs(n - centres[hi]) <= np.abs(n - centres[lo]), hi, lo)


def stitch_blocks(block_outputs, plan: BlockPlan, session_len: int) -> np.ndarray:
    """Reassemble per-block outputs into a session-length signal.

    Every sample is taken from the block whose centre is closest, which
    keeps the central ``output`` region of interior blocks and lets the
    first and last blocks supply the session edges.
    """
    ranges = split_blocks(session_len, plan)
    blocks = [np.asarray(b) for b in block_outputs]
    if len(blocks) != len(ranges):
        raise ValueError(f"expected {len(ranges)} blocks, got {len(blocks)}")
    W = plan.block_len
    for i, b in enumerate(blocks):
        if b.shape[-1] != W or b.shape[:-1] != blocks[0].shape[:-1]:
            raise ValueError(f"block {i} has shape {b.shape}, expected (..., {W})")
    owners = _owners(session_len, ranges)
    out = np.zeros(blocks[0].shape[:-1] + (session_len,), dtype=blocks[0].dtype)
    for i, (s, _) in enumerate(ranges):
        idx = np.flatnonzero(owners == i)
        if idx.size:
            out[..., idx] = blocks[i][..., idx - s]
    return out


def activity_to_frames(timeline: ActivityTimeline, cfg: StftConfig) -> np.ndarray:
    return timeline.frame_activity(cfg)


def frame_mute(estimates, frame_activity) -> np.ndarray:
    """Zero estimate frames where the speaker is inactive.

    Channels beyond the number of activity rows (e.g. a noise estimate) are
    passed through unchanged.
    """
    Z = np.asarray(estimates)
    D = np.asarray(frame_activity)
    C = D.shape[0]
    if D.shape[1] != Z.shape[-2]:
        raise ValueError("activity frame count does not match the estimates")
    out = Z.copy()
    out[:C] = Z[:C] * D[:, :, None]
    return out


def sampling_weight(frame_activity, theta: float) -> float:
    """Block weight growing with the mean number of extra concurrent speakers."""
    D = np.asarray(frame_activity)
    active = D.sum(axis=0)
    return float(1.0 + theta * np.mean(np.maximum(1, active) - 1))


def weighted_sample(weights, count: int, seed) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.size == 0:
        raise ValueError("weights must be a non-empty vector")
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise ValueError("sampling weights must be finite and positive")
    rng = np.random.default_rng(seed)
    return rng.choice(w.size, size=count, replace=True, p=w / w.sum())


def binaural_combine(left, right, strategy: int):
    """Map binaural close-talk pairs onto close-talk and extra far-field channels.

    Strategy 1 keeps the right-ear channels as close-talk and returns the
    left-ear ones as extra far-field microphones; strategy 2 averages the ears.
    """
    L = np.asarray(left)
    R = np.asarray(right)
    if L.shape != R.shape:
        raise ValueError("left and right channels differ in shape")
    if strategy == 1:
        return R.copy(), [L[c] for c in range(L.shape[0])]
    if strategy == 2:
        return 0.5 * (L + R), []
    raise ValueError("strategy must be 1 or 2")


def segment_snr(estimate, mixture) -> float:
    s = np.asarray(estimate, dtype=float)
    y = np.asarray(mixture, dtype=float)
    num = float(np.sum(s ** 2))
    eps = 1e-12 * float(np.sum(y ** 2))
    den = max(eps, float(np.sum((y - s) ** 2)))
    if num == 0:
        return -SNR_CAP_DB
    if den == 0:
        return SNR_CAP_DB
    return float(np.clip(10 * np.log10(num / den), -SNR_CAP_DB, SNR_CAP_DB))


def select_best_array(per_array_estimates, segments, per_array_mixtures):
    """Pick, per speaker segment, the array whose estimate has the highest SNR.

    Parameters
    ----------
    per_array_estimates : sequence over arrays of ``(C, N)`` separated signals
    segments : per speaker, a list of ``(start, end)`` sample ranges
    per_array_mixtures : sequence over arrays of ``(N,)`` reference-mic mixtures

    Returns
    -------
    out : ``(C, N)`` signal assembled from the selected arrays (zero outside segments)
    log : list of dicts with segment, chosen array and per-array SNRs
    """
    ests = [np.asarray(e, dtype=float) for e in per_array_estimates]
    mixes = [np.asarray(m, dtype=float) for m in per_array_mixtures]
    if len(ests) != len(mixes):
        raise ValueError("need one mixture per array")
    if not ests:
        return np.zeros((0, 0)), []
    C, N = ests[0].shape
    out = np.zeros((C, N))
    log = []
    for c, segs in enumerate(segments):
        for s, e in segs:
            snrs = [segment_snr(est[c, s:e], mix[s:e]) for est, mix in zip(ests, mixes)]
            best = int(np.argmax(snrs))  # first maximum: lowest array index wins ties
            out[c, s:e] = ests[best][c, s:e]
            log.append({"speaker": c, "start": int(s), "end": int(e),
                        "array": best, "snr_db": [float(x) for x in snrs]})
    return out, log
