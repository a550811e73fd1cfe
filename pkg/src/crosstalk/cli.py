"""Command-line front end: simulate, solve, pseudolabel, eval, stitch.

Exit codes: 0 success, 1 usage error, 2 runtime error (bad input data,
malformed files, numerical failure).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
from scipy import fft as sp_fft
from scipy.io import wavfile

from . import io as cio
from .core import HyperParams
from .fcp import CONSTANT, MAX_FLOOR, QUANTILE_FLOOR, WeightingMode
from .metrics import mc_residual_report, si_sdr
from .pipeline import BlockPlan, stitch_blocks
from .pseudolabel import build_pseudo_labels
from .simulator import SceneConfig, simulate_scene
from .solver import SolverConfig, solve_blind_deconvolution
from .stft import CLOSE_TALK_STFT, FAR_FIELD_STFT, istft, stft

log = logging.getLogger("crosstalk")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_hparams(p: argparse.ArgumentParser):
    d = HyperParams()
    g = p.add_argument_group("hyper-parameters")
    g.add_argument("--taps-past", type=int, default=d.taps_past, help="I")
    g.add_argument("--taps-future", type=int, default=d.taps_future, help="J")
    g.add_argument("--xi", type=float, default=d.xi)
    g.add_argument("--alpha", type=float, default=d.alpha)
    g.add_argument("--beta", type=float, default=d.beta)
    g.add_argument("--delta-weight", type=float, default=d.delta, help="weight of the CTE loss")
    g.add_argument("--theta", type=float, default=d.theta)
    g.add_argument("--pred-delay", type=int, default=d.pred_delay, help="Delta")
    g.add_argument("--label-taps", type=int, default=d.label_taps, help="L")
    g.add_argument("--max-delay", type=int, default=d.max_delay, help="E")
    g.add_argument("--cte-taps", type=int, default=d.cte_taps, help="A")
    g.add_argument("--kappa1", type=float, default=d.kappa1)
    g.add_argument("--kappa2", type=float, default=d.kappa2)
    g.add_argument("--threads", type=int, default=1, help="worker cap for FFTs")


def _hparams(a) -> HyperParams:
    try:
        return _make_hparams(a)
    except ValueError as e:
        raise UsageError(f"invalid hyper-parameters: {e}") from None


def _make_hparams(a) -> HyperParams:
    return HyperParams(
        taps_past=a.taps_past, taps_future=a.taps_future, xi=a.xi, alpha=a.alpha,
        beta=a.beta, delta=a.delta_weight, theta=a.theta, pred_delay=a.pred_delay,
        label_taps=a.label_taps, max_delay=a.max_delay, cte_taps=a.cte_taps,
        kappa1=a.kappa1, kappa2=a.kappa2)


def _weighting(name: str, xi: float) -> WeightingMode:
    base = {"constant": CONSTANT, "max": MAX_FLOOR, "quantile": QUANTILE_FLOOR}[name]
    return WeightingMode(base.variant, xi, base.quantile)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="crosstalk", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="render a scene config into a mixture directory")
    s.add_argument("config", type=Path, help="scene config JSON (must contain 'seed')")
    s.add_argument("out_dir", type=Path)
    s.add_argument("--format", choices=cio.FORMATS, default="float32")

    s = sub.add_parser("solve", help="run the alternating solver on a mixture directory")
    s.add_argument("mixture_dir", type=Path)
    s.add_argument("out_dir", type=Path)
    s.add_argument("--mute", action="store_true", help="restrict estimates to active frames")
    s.add_argument("--activity", type=Path, help="activity JSON (default: the mixture's own)")
    s.add_argument("--max-iters", type=int, default=SolverConfig.max_outer_iters)
    s.add_argument("--tol", type=float, default=SolverConfig.tol)
    s.add_argument("--cg-tol", type=float, default=SolverConfig.cg_tol)
    s.add_argument("--cg-max-iters", type=int, default=SolverConfig.cg_max_iters)
    s.add_argument("--init", choices=("close_talk", "zero"), default="close_talk")
    s.add_argument("--weighting", choices=("constant", "max", "quantile"), default="constant")
    s.add_argument("--stft", choices=("close", "far"), default="close")
    s.add_argument("--format", choices=cio.FORMATS, default="float32")
    _add_hparams(s)

    s = sub.add_parser("pseudolabel", help="far-field pseudo-labels from close-talk estimates")
    s.add_argument("mixture_dir", type=Path)
    s.add_argument("estimates_dir", type=Path)
    s.add_argument("out_dir", type=Path)
    s.add_argument("--ref-mic", type=int, default=0, help="flat far-field mic index q")
    s.add_argument("--stft", choices=("close", "far"), default="far")
    s.add_argument("--format", choices=cio.FORMATS, default="float32")
    _add_hparams(s)

    s = sub.add_parser("eval", help="score estimates against references")
    s.add_argument("ref_dir", type=Path, help="mixture directory with ground truth, or signal directory")
    s.add_argument("est_dir", type=Path)
    s.add_argument("out_report", type=Path)
    s.add_argument("--target", choices=("close_talk", "far_direct"), default="close_talk")
    s.add_argument("--ref-mic", type=int, default=0)
    s.add_argument("--mc-report", action="store_true", help="add per-mic mixture-constraint residuals")
    _add_hparams(s)

    s = sub.add_parser("stitch", help="reassemble per-block WAVs into a session")
    s.add_argument("blocks_dir", type=Path, help="directory of block_*.wav in block order")
    s.add_argument("out_wav", type=Path)
    s.add_argument("--num-samples", type=int, required=True, help="session length in samples")
    s.add_argument("--context-s", type=float, default=HyperParams.context_s)
    s.add_argument("--output-s", type=float, default=HyperParams.output_s)
    s.add_argument("--sample-rate", type=int, default=16000)
    return p


# --- commands -----------------------------------------------------------------

def cmd_simulate(a):
    try:
        cfg_dict = json.loads(Path(a.config).read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"config is not valid JSON: {e}") from None
    ms = simulate_scene(SceneConfig.from_dict(cfg_dict))
    cio.save_mixture_set(ms, a.out_dir, a.format)
    (Path(a.out_dir) / "scene.json").write_text(json.dumps(cfg_dict, indent=2))
    log.info("wrote %s", a.out_dir)


def cmd_solve(a):
    hp = _hparams(a)
    stft_cfg = CLOSE_TALK_STFT if a.stft == "close" else FAR_FIELD_STFT
    ms = cio.load_mixture_set(a.mixture_dir, stft_cfg)
    activity = None
    if a.mute:
        activity = cio.load_activity(a.activity, ms.waveforms.num_samples) if a.activity else ms.activity
        if activity is None:
            raise ValueError("--mute needs activity (none in the mixture directory; pass --activity)")
        if activity.num_speakers != ms.num_speakers:
            raise ValueError("activity speaker count does not match the mixtures")
    cfg = SolverConfig(max_outer_iters=a.max_iters, tol=a.tol, cg_tol=a.cg_tol,
                       cg_max_iters=a.cg_max_iters, init=a.init, taps_past=hp.taps_past,
                       taps_future=hp.taps_future, weighting=_weighting(a.weighting, hp.xi))
    res = solve_blind_deconvolution(ms, cfg, activity)
    n = ms.waveforms.num_samples
    sig = istft(res.estimates, stft_cfg, n)
    out = Path(a.out_dir)
    cio.save_speaker_signals(out, sig, stft_cfg.sample_rate, "estimate", a.format,
                             {"stft": stft_cfg.to_dict()})
    with open(out / "trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "objective"] + [f"mic{m}" for m in range(res.breakdown.shape[1])])
        for i, obj, parts in res.trace_rows():
            w.writerow([i, repr(obj)] + [repr(x) for x in parts])
    info = {"converged": res.converged, "iterations": res.iterations,
            "cg_iterations": list(res.cg_iterations), "muted": bool(a.mute),
            "config": {"max_outer_iters": cfg.max_outer_iters, "tol": cfg.tol,
                       "cg_tol": cfg.cg_tol, "cg_max_iters": cfg.cg_max_iters, "init": cfg.init,
                       "taps_past": cfg.taps_past, "taps_future": cfg.taps_future,
                       "weighting": a.weighting, "xi": hp.xi},
            "stft": stft_cfg.to_dict()}
    (out / "solve.json").write_text(json.dumps(info, indent=2))
    log.info("objective %.6e -> %.6e in %d iterations", res.trace[0], res.trace[-1], res.iterations)


def cmd_pseudolabel(a):
    hp = _hparams(a)
    stft_cfg = CLOSE_TALK_STFT if a.stft == "close" else FAR_FIELD_STFT
    ms = cio.load_mixture_set(a.mixture_dir, stft_cfg)
    if not 0 <= a.ref_mic < ms.num_far:
        raise ValueError(f"--ref-mic {a.ref_mic} out of range (0..{ms.num_far - 1})")
    _, est = cio.load_speaker_signals(a.estimates_dir, "estimate")
    n = ms.waveforms.num_samples
    if est.shape != (ms.num_speakers, n):
        raise ValueError(f"estimates have shape {est.shape}, expected {(ms.num_speakers, n)}")
    res = build_pseudo_labels(ms, stft(est, stft_cfg), a.ref_mic, hp)
    cio.save_pseudo_labels(res, a.out_dir, stft_cfg, n, a.format)
    log.info("delays %s", res.delays.tolist())


def _references(a, n_expected=None):
    """Reference signals and the matching unprocessed mixtures (or None)."""
    try:
        ms = cio.load_mixture_set(a.ref_dir)
    except cio.ManifestError:
        ms = None
    if ms is not None and ms.waveforms.ground_truth is not None:
        gt = ms.waveforms.ground_truth
        if a.target == "close_talk":
            return gt.close_talk_speech, ms.waveforms.close_talk, ms
        if not 0 <= a.ref_mic < ms.num_far:
            raise ValueError(f"--ref-mic {a.ref_mic} out of range")
        arr, p = ms.far_index(a.ref_mic)
        mix = ms.waveforms.far_field[arr][p]
        return gt.far_direct[arr][p], np.broadcast_to(mix, gt.far_direct[arr][p].shape), ms
    _, ref = cio.load_speaker_signals(a.ref_dir)
    return ref, None, None


def cmd_eval(a):
    hp = _hparams(a)
    ref, mix, ms = _references(a)
    _, est = cio.load_speaker_signals(a.est_dir)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: estimates {est.shape} vs references {ref.shape}")
    speakers = []
    for c in range(ref.shape[0]):
        row = {"speaker": c}
        if not np.any(ref[c]):
            row["si_sdr"] = None
        else:
            row["si_sdr"] = si_sdr(ref[c], est[c])
            if mix is not None:
                row["si_sdr_mixture"] = si_sdr(ref[c], mix[c])
                row["si_sdr_improvement"] = row["si_sdr"] - row["si_sdr_mixture"]
        speakers.append(row)
    vals = [r for r in speakers if r["si_sdr"] is not None]
    report = {"target": a.target if ms is not None else "signals", "speakers": speakers,
              "mean_si_sdr": float(np.mean([r["si_sdr"] for r in vals])) if vals else None}
    if vals and "si_sdr_improvement" in vals[0]:
        report["mean_si_sdr_improvement"] = float(np.mean([r["si_sdr_improvement"] for r in vals]))
    if a.mc_report:
        if ms is None:
            raise ValueError("--mc-report needs a mixture directory as reference")
        report["mc_residuals"] = mc_residual_report(ms, stft(est, ms.stft), hp)
    Path(a.out_report).write_text(json.dumps(report, indent=2))


def cmd_stitch(a):
    plan = BlockPlan.inference(a.context_s, a.output_s, a.sample_rate)
    files = sorted(Path(a.blocks_dir).glob("block_*.wav"))
    if not files:
        raise ValueError(f"no block_*.wav files in {a.blocks_dir}")
    blocks = []
    for f in files:
        sr, x = wavfile.read(f)
        if sr != a.sample_rate:
            raise ValueError(f"{f.name}: sample rate {sr} != {a.sample_rate}")
        if x.ndim != 1:
            raise ValueError(f"{f.name}: expected mono")
        blocks.append(x.astype(np.float32) if x.dtype != np.int16 else x)
    lens = {len(b) for b in blocks}
    if len(lens) != 1:
        raise ValueError(f"inconsistent block lengths {sorted(lens)}")
    out = stitch_blocks(blocks, plan, a.num_samples)
    Path(a.out_wav).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(a.out_wav, a.sample_rate, out)
    side = {"plan": plan.to_dict(), "num_samples": a.num_samples,
            "blocks": [f.name for f in files]}
    Path(str(a.out_wav) + ".json").write_text(json.dumps(side, indent=2))


COMMANDS = {"simulate": cmd_simulate, "solve": cmd_solve, "pseudolabel": cmd_pseudolabel,
            "eval": cmd_eval, "stitch": cmd_stitch}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:        # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with sp_fft.set_workers(max(1, getattr(a, "threads", 1))):
            COMMANDS[a.command](a)
    except UsageError as e:
        print(f"crosstalk {a.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError, FloatingPointError) as e:
        print(f"crosstalk {a.command}: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
