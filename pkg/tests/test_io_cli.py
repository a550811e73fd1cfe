import csv
import json

import numpy as np
import pytest
from scipy.io import wavfile
from scipy.ndimage import binary_erosion

from crosstalk import io as cio
from crosstalk.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from crosstalk.pipeline import BlockPlan, extract_blocks
from crosstalk.stft import stft

from conftest import scene

SCENE = {"seed": 5, "num_speakers": 2, "duration_s": 1.5, "num_noise_sources": 0,
         "ambient_db": None}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "scene.json"
    cfg.write_text(json.dumps(SCENE))
    assert main(["simulate", str(cfg), str(root / "mix")]) == EXIT_OK
    assert main(["solve", str(root / "mix"), str(root / "est"), "--max-iters", "3", "--mute"]) == EXIT_OK
    return root


def test_mixture_set_round_trip(tmp_path):
    ms = scene(0, duration_s=1.0)
    cio.save_mixture_set(ms, tmp_path)
    back = cio.load_mixture_set(tmp_path)
    np.testing.assert_allclose(back.waveforms.close_talk, ms.waveforms.close_talk, rtol=1e-6, atol=1e-7)
    np.testing.assert_allclose(back.waveforms.ground_truth.far_direct[0],
                               ms.waveforms.ground_truth.far_direct[0], rtol=1e-6, atol=1e-7)
    np.testing.assert_array_equal(back.activity.sample_activity, ms.activity.sample_activity)
    assert back.stft == ms.stft and back.metadata["seed"] == 0


def test_pcm16_round_trip_keeps_scale(tmp_path):
    x = 3.7 * np.sin(np.linspace(0, 50, 4000))[None]
    cio.save_speaker_signals(tmp_path, x, 16000, fmt="pcm16")
    _, back = cio.load_speaker_signals(tmp_path)
    np.testing.assert_allclose(back, x, atol=3.7 / 32767 * 1.01)


def test_manifest_errors(tmp_path):
    with pytest.raises(cio.ManifestError):
        cio.read_manifest(tmp_path)
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(cio.ManifestError, match="malformed"):
        cio.read_manifest(tmp_path)
    (tmp_path / "manifest.json").write_text(json.dumps({"sample_rate": 16000,
                                                        "channels": [{"role": "close_talk"}]}))
    with pytest.raises(cio.ManifestError):
        cio.read_manifest(tmp_path)


def test_simulate_outputs_and_determinism(workdir, tmp_path):
    mix = workdir / "mix"
    assert (mix / "manifest.json").exists() and (mix / "activity.json").exists()
    assert main(["simulate", str(workdir / "scene.json"), str(tmp_path / "again")]) == EXIT_OK
    for ch in cio.read_manifest(mix)["channels"]:
        a = (mix / ch["file"]).read_bytes()
        assert a == (tmp_path / "again" / ch["file"]).read_bytes()


def test_simulate_missing_seed(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"num_speakers": 2}))
    assert main(["simulate", str(cfg), str(tmp_path / "o")]) == EXIT_RUNTIME
    cfg.write_text("{")
    assert main(["simulate", str(cfg), str(tmp_path / "o")]) == EXIT_RUNTIME


def test_solve_outputs(workdir):
    est = workdir / "est"
    m, sig = cio.load_speaker_signals(est, "estimate")
    assert sig.shape == (2, int(1.5 * 16000))
    rows = list(csv.reader(open(est / "trace.csv")))
    assert rows[0][:2] == ["iteration", "objective"]
    obj = [float(r[1]) for r in rows[1:]]
    assert all(b <= a * (1 + 1e-6) for a, b in zip(obj, obj[1:]))
    info = json.loads((est / "solve.json").read_text())
    assert info["muted"] and info["iterations"] == len(obj) - 1


def test_solve_mute_zeroes_silent_frames(workdir):
    ms = cio.load_mixture_set(workdir / "mix")
    _, sig = cio.load_speaker_signals(workdir / "est")
    silent = ms.activity.sample_activity == 0
    # a sample is untouched by every active frame only well inside a silent stretch
    deep = np.array([binary_erosion(s, np.ones(2 * ms.stft.win_length + 1)) for s in silent])
    assert deep.any()
    assert np.max(np.abs(sig[deep])) <= 1e-6 * np.max(np.abs(sig))


def test_solve_malformed_manifest(tmp_path):
    (tmp_path / "manifest.json").write_text("[]")
    assert main(["solve", str(tmp_path), str(tmp_path / "o")]) == EXIT_RUNTIME


def test_usage_errors(workdir, capsys):
    assert main([]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["solve", str(workdir / "mix")]) == EXIT_USAGE
    assert main(["solve", str(workdir / "mix"), str(workdir / "x"), "--max-iters", "abc"]) == EXIT_USAGE
    assert main(["solve", str(workdir / "mix"), str(workdir / "x"), "--label-taps", "0"]) == EXIT_USAGE
    assert main(["--help"]) == EXIT_OK
    capsys.readouterr()


def test_pseudolabel_command(workdir):
    out = workdir / "pl"
    assert main(["pseudolabel", str(workdir / "mix"), str(workdir / "est"), str(out)]) == EXIT_OK
    info = json.loads((out / "pseudolabels.json").read_text())
    assert info["ref_mic"] == 0 and len(info["speakers"]) == 2
    assert all(abs(s["delay"]) <= 9 for s in info["speakers"])
    _, lab = cio.load_speaker_signals(out, "pseudo_label")
    again = workdir / "pl2"
    assert main(["pseudolabel", str(workdir / "mix"), str(workdir / "est"), str(again)]) == EXIT_OK
    np.testing.assert_array_equal(cio.load_speaker_signals(again)[1], lab)
    assert main(["pseudolabel", str(workdir / "mix"), str(workdir / "est"), str(out),
                 "--ref-mic", "99"]) == EXIT_RUNTIME


def test_eval_command(workdir):
    rep = workdir / "report.json"
    assert main(["eval", str(workdir / "mix"), str(workdir / "est"), str(rep), "--mc-report"]) == EXIT_OK
    r = json.loads(rep.read_text())
    assert len(r["speakers"]) == 2 and "mean_si_sdr_improvement" in r
    assert len(r["mc_residuals"]) == 2 + 4


def test_eval_perfect_and_mismatch(tmp_path):
    x = np.random.default_rng(0).standard_normal((2, 3000))
    cio.save_speaker_signals(tmp_path / "ref", x, 16000, role="reference")
    cio.save_speaker_signals(tmp_path / "est", x, 16000)
    cio.save_speaker_signals(tmp_path / "short", x[:, :2000], 16000)
    rep = tmp_path / "r.json"
    assert main(["eval", str(tmp_path / "ref"), str(tmp_path / "est"), str(rep)]) == EXIT_OK
    assert all(s["si_sdr"] == 150.0 for s in json.loads(rep.read_text())["speakers"])
    assert main(["eval", str(tmp_path / "ref"), str(tmp_path / "short"), str(rep)]) == EXIT_RUNTIME


def test_stitch_command(tmp_path):
    fs, n = 16000, 30 * 16000
    x = (np.random.default_rng(1).standard_normal(n) * 0.1).astype(np.float32)
    plan = BlockPlan.inference(4.0, 4.0, fs)
    blocks = extract_blocks(x, plan)
    bdir = tmp_path / "blocks"
    bdir.mkdir()
    for i, b in enumerate(blocks):
        wavfile.write(bdir / f"block_{i:04d}.wav", fs, b.astype(np.float32))
    out = tmp_path / "session.wav"
    assert main(["stitch", str(bdir), str(out), "--num-samples", str(n)]) == EXIT_OK
    np.testing.assert_array_equal(wavfile.read(out)[1], x)
    side = json.loads((tmp_path / "session.wav.json").read_text())
    assert side["plan"]["context_s"] == 4.0 and side["plan"]["output_s"] == 4.0
    assert side["num_samples"] == n and len(side["blocks"]) == len(blocks)
    wavfile.write(bdir / "block_9999.wav", fs, np.zeros(10, np.float32))
    assert main(["stitch", str(bdir), str(out), "--num-samples", str(n)]) == EXIT_RUNTIME
    assert main(["stitch", str(tmp_path / "nothing"), str(out), "--num-samples", "5"]) == EXIT_RUNTIME
