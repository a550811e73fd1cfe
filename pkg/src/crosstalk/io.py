"""On-disk formats.

A *signal directory* holds one WAV per channel plus ``manifest.json``
describing each file's role.  A mixture directory is a signal directory with
close-talk and far-field channels (and, for simulated scenes, ground-truth
components) plus ``activity.json`` listing each speaker's active sample
ranges.

PCM16 files are peak-normalised with one gain per directory, stored in the
manifest and undone on load.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .core import ActivityTimeline, GroundTruth, MixtureSet, Waveforms
from .stft import StftConfig, istft

MANIFEST = "manifest.json"
ACTIVITY = "activity.json"
FORMATS = ("float32", "pcm16")


class ManifestError(ValueError):
    pass


def _write_wav(path: Path, x: np.ndarray, sr: int, fmt: str, gain: float):
    if fmt == "float32":
        wavfile.write(path, sr, np.asarray(x, dtype=np.float32))
    else:
        pcm = np.clip(np.round(np.asarray(x) * gain * 32767.0), -32768, 32767).astype(np.int16)
        wavfile.write(path, sr, pcm)


def _read_wav(path: Path, gain: float):
    sr, x = wavfile.read(path)
    if x.dtype == np.int16:
        x = x.astype(float) / 32767.0 / gain
    else:
        x = x.astype(float)
    if x.ndim != 1:
        raise ManifestError(f"{path.name}: expected a mono file")
    return sr, x


def write_signals(out_dir, entries: list[tuple[dict, np.ndarray]], sample_rate: int,
                  fmt: str = "float32", extra: dict | None = None) -> dict:
    """Write ``(role_dict, signal)`` pairs; each role dict gains a ``file`` key."""
    if fmt not in FORMATS:
        raise ValueError(f"format must be one of {FORMATS}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    peak = max((float(np.max(np.abs(x))) for _, x in entries if np.size(x)), default=0.0)
    gain = 1.0 / peak * 0.99 if fmt == "pcm16" and peak > 0 else 1.0
    channels = []
    for role, x in entries:
        name = _filename(role)
        _write_wav(out / name, x, sample_rate, fmt, gain)
        channels.append({**role, "file": name})
    lengths = {len(x) for _, x in entries}
    if len(lengths) > 1:
        raise ValueError("all channels must have the same length")
    manifest = {"sample_rate": sample_rate, "format": fmt, "gain": gain,
                "num_samples": lengths.pop() if lengths else 0, "channels": channels}
    manifest.update(extra or {})
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2))
    return manifest


def _filename(role: dict) -> str:
    keys = [role["role"]] + [f"{k[0]}{role[k]}" for k in ("array", "mic", "speaker", "index")
                             if k in role]
    return "_".join(str(k) for k in keys) + ".wav"


def read_manifest(path) -> dict:
    p = Path(path) / MANIFEST
    try:
        m = json.loads(p.read_text())
    except FileNotFoundError:
        raise ManifestError(f"no {MANIFEST} in {path}") from None
    except json.JSONDecodeError as e:
        raise ManifestError(f"malformed {MANIFEST}: {e}") from None
    if not isinstance(m, dict) or not isinstance(m.get("channels"), list) or "sample_rate" not in m:
        raise ManifestError(f"{MANIFEST} needs 'sample_rate' and a 'channels' list")
    for ch in m["channels"]:
        if not isinstance(ch, dict) or "file" not in ch or "role" not in ch:
            raise ManifestError("every channel needs 'file' and 'role'")
    return m


def read_signals(path) -> tuple[dict, list[tuple[dict, np.ndarray]]]:
    m = read_manifest(path)
    gain = float(m.get("gain", 1.0))
    out = []
    for ch in m["channels"]:
        f = Path(path) / ch["file"]
        if not f.exists():
            raise ManifestError(f"missing channel file {ch['file']}")
        sr, x = _read_wav(f, gain)
        if sr != m["sample_rate"]:
            raise ManifestError(f"{ch['file']} has rate {sr}, manifest says {m['sample_rate']}")
        out.append((ch, x))
    return m, out


# --- mixture sets --------------------------------------------------------------

def _mixture_entries(wav: Waveforms):
    e = [({"role": "close_talk", "index": d}, x) for d, x in enumerate(wav.close_talk)]
    for a, arr in enumerate(wav.far_field):
        e += [({"role": "far_field", "array": a, "mic": p}, x) for p, x in enumerate(arr)]
    gt = wav.ground_truth
    if gt is None:
        return e
    C = gt.sources.shape[0]
    for d in range(gt.close_talk_images.shape[0]):
        for c in range(C):
            e.append(({"role": "gt_close_talk_image", "mic": d, "speaker": c},
                      gt.close_talk_images[d, c]))
        e.append(({"role": "gt_close_talk_noise", "mic": d}, gt.close_talk_noise[d]))
    for c in range(C):
        e.append(({"role": "gt_close_talk_direct", "speaker": c}, gt.close_talk_direct[c]))
        e.append(({"role": "gt_source", "speaker": c}, gt.sources[c]))
    for a, (img, dr, nz) in enumerate(zip(gt.far_images, gt.far_direct, gt.far_noise)):
        for p in range(img.shape[0]):
            for c in range(C):
                e.append(({"role": "gt_far_image", "array": a, "mic": p, "speaker": c}, img[p, c]))
                e.append(({"role": "gt_far_direct", "array": a, "mic": p, "speaker": c}, dr[p, c]))
            e.append(({"role": "gt_far_noise", "array": a, "mic": p}, nz[p]))
    return e


def save_mixture_set(ms: MixtureSet, out_dir, fmt: str = "float32") -> dict:
    if ms.waveforms is None:
        raise ValueError("mixture set has no waveforms to write")
    extra = {"stft": ms.stft.to_dict(), "metadata": _jsonable(dict(ms.metadata))}
    manifest = write_signals(out_dir, _mixture_entries(ms.waveforms), ms.stft.sample_rate, fmt, extra)
    if ms.activity is not None:
        (Path(out_dir) / ACTIVITY).write_text(json.dumps(ms.activity.to_dict()))
    return manifest


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return x


def load_activity(path, num_samples: int | None = None) -> ActivityTimeline:
    try:
        d = json.loads(Path(path).read_text())
        tl = ActivityTimeline.from_dict(d)
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise ManifestError(f"malformed activity file {path}: {e}") from None
    if num_samples is not None and tl.num_samples != num_samples:
        raise ManifestError(f"activity covers {tl.num_samples} samples, signals have {num_samples}")
    return tl


def load_mixture_set(path, stft_cfg: StftConfig | None = None) -> MixtureSet:
    m, chans = read_signals(path)
    close, far, gt = {}, {}, {}
    for ch, x in chans:
        r = ch["role"]
        try:
            if r == "close_talk":
                close[int(ch["index"])] = x
            elif r == "far_field":
                far.setdefault(int(ch["array"]), {})[int(ch["mic"])] = x
            elif r.startswith("gt_"):
                key = tuple(int(ch[k]) for k in ("array", "mic", "speaker") if k in ch)
                gt.setdefault(r, {})[key] = x
            else:
                raise ManifestError(f"unknown channel role {r!r}")
        except KeyError as e:
            raise ManifestError(f"channel {ch['file']} lacks {e}") from None
    if not close:
        raise ManifestError("no close-talk channels")
    C = len(close)
    if sorted(close) != list(range(C)):
        raise ManifestError("close-talk indices must be 0..C-1")
    ct = np.stack([close[d] for d in range(C)])
    far_arrays = []
    for a in range(len(far)):
        if a not in far:
            raise ManifestError("far-field array indices must be contiguous from 0")
        mics = far[a]
        far_arrays.append(np.stack([mics[p] for p in range(len(mics))]))
    truth = _assemble_truth(gt, C, [x.shape[0] for x in far_arrays]) if gt else None
    wav = Waveforms(ct, tuple(far_arrays), truth)
    cfg = stft_cfg or (StftConfig.from_dict(m["stft"]) if "stft" in m else StftConfig())
    act_path = Path(path) / ACTIVITY
    act = load_activity(act_path, ct.shape[1]) if act_path.exists() else None
    return MixtureSet.from_waveforms(wav, cfg, act, m.get("metadata", {}))


def _assemble_truth(gt: dict, C: int, mics: list[int]) -> GroundTruth:
    try:
        g = lambda role, key: gt[role][key]  # noqa: E731
        return GroundTruth(
            close_talk_images=np.array([[g("gt_close_talk_image", (d, c)) for c in range(C)]
                                        for d in range(C)]),
            close_talk_direct=np.array([g("gt_close_talk_direct", (c,)) for c in range(C)]),
            close_talk_noise=np.array([g("gt_close_talk_noise", (d,)) for d in range(C)]),
            far_images=tuple(np.array([[g("gt_far_image", (a, p, c)) for c in range(C)]
                                       for p in range(P)]) for a, P in enumerate(mics)),
            far_direct=tuple(np.array([[g("gt_far_direct", (a, p, c)) for c in range(C)]
                                       for p in range(P)]) for a, P in enumerate(mics)),
            far_noise=tuple(np.array([g("gt_far_noise", (a, p)) for p in range(P)])
                            for a, P in enumerate(mics)),
            sources=np.array([g("gt_source", (c,)) for c in range(C)]),
        )
    except KeyError as e:
        raise ManifestError(f"incomplete ground truth: missing {e}") from None


# --- per-speaker signal sets (estimates, labels) ------------------------------------

def save_speaker_signals(out_dir, signals, sample_rate: int, role: str = "estimate",
                         fmt: str = "float32", extra: dict | None = None) -> dict:
    entries = [({"role": role, "speaker": c}, x) for c, x in enumerate(np.asarray(signals))]
    return write_signals(out_dir, entries, sample_rate, fmt, extra)


def load_speaker_signals(path, role: str | None = None) -> tuple[dict, np.ndarray]:
    m, chans = read_signals(path)
    picked = {}
    for ch, x in chans:
        if role is not None and ch["role"] != role:
            continue
        if "speaker" not in ch:
            raise ManifestError(f"channel {ch['file']} lacks 'speaker'")
        picked[int(ch["speaker"])] = x
    if not picked:
        raise ManifestError(f"no per-speaker channels in {path}")
    if sorted(picked) != list(range(len(picked))):
        raise ManifestError("speaker indices must be 0..C-1")
    return m, np.stack([picked[c] for c in range(len(picked))])


def save_pseudo_labels(result, out_dir, cfg: StftConfig, num_samples: int,
                       fmt: str = "float32") -> dict:
    """Labels as WAV (through the inverse STFT) plus delays and residuals as JSON."""
    sig = istft(result.labels, cfg, num_samples)
    info = result.to_dict()
    info["stft"] = cfg.to_dict()
    m = save_speaker_signals(out_dir, sig, cfg.sample_rate, "pseudo_label", fmt)
    (Path(out_dir) / "pseudolabels.json").write_text(json.dumps(info, indent=2))
    return m
