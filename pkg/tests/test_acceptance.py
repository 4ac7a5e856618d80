"""The numbered acceptance criteria, each at its stated tolerance.

A PASS/FAIL line per criterion is printed in the pytest terminal summary.
"""

import subprocess
import sys

import numpy as np
import pytest

from scoresynth import dsp
from scoresynth.alignment import AlignmentModel, AlignmentModelConfig
from scoresynth.dtw import dtw, is_valid_path, path_cost
from scoresynth.experiments import inversion_sanity, overfit_alignment, overfit_synthesis, smoothed, stretch_recovery
from scoresynth.score import AlignedScore, Note, make_aligned, serialize_score
from scoresynth.synthesis import SynthesisModel, SynthesisModelConfig, npe_modulate, polyphonic_mix
from scoresynth.training import random_score, save_model
from scoresynth.verify import alignment_grad_check, layer_grad_checks, synthesis_grad_check

from oracles import brute_force_mix, brute_min


@pytest.mark.acceptance(1, "NPE formula exactness")
def test_npe_formula(detail):
    rng = np.random.default_rng(1)
    worst = 0.0
    for k in range(1000):
        d = 32
        v, w = rng.normal(size=d), rng.normal(0, 0.5, size=d)
        p = float(rng.choice([0.0, 1.0])) if k % 50 == 0 else float(rng.random())
        out = npe_modulate(v, p, w)
        # scalar evaluation one element at a time, outside numpy
        hand = np.array([a * (1.0 + p * b) for a, b in zip(v.tolist(), w.tolist())])
        ulps = np.abs(out - hand) / np.spacing(np.abs(hand))
        worst = max(worst, float(ulps.max()))
        assert ulps.max() <= 4
        assert np.array_equal(npe_modulate(v, 0.0, w), v)
        assert np.array_equal(npe_modulate(v, p, np.zeros(d)), v)
    detail(f"worst {worst:.1f} ulp over 1000 triples")


def random_polyphonic(rng, max_notes=32, max_frames=256):
    N, T = int(rng.integers(1, max_notes + 1)), int(rng.integers(1, max_frames + 1))
    onsets = rng.integers(0, T, size=N)
    durs = [int(rng.integers(1, T - o + 1)) for o in onsets]
    notes = [Note(int(rng.integers(21, 109)), 0, 1) for _ in range(N)]
    return make_aligned(notes, onsets, durs, num_frames=T), N, T


@pytest.mark.acceptance(2, "Mixer oracle equivalence")
def test_mixer_oracle(detail):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(200):
        aligned, N, T = random_polyphonic(rng)
        V, w = rng.normal(size=(N, 128)), rng.normal(0, 0.5, size=128)
        dev = np.abs(polyphonic_mix(V, aligned, w, T) - brute_force_mix(V, aligned, w, T)).max()
        worst = max(worst, float(dev))
    detail(f"max abs deviation {worst:.2e}")
    assert worst < 1e-6


@pytest.mark.acceptance(3, "Mixer algebra")
def test_mixer_algebra(detail):
    # dyadic inputs keep every product and partial sum exactly representable,
    # so equality is bitwise regardless of summation order
    rng = np.random.default_rng(3)
    lengths = np.array([1, 2, 3, 5, 9, 17, 33, 65])
    for _ in range(100):
        T = int(rng.integers(65, 257))
        N = int(rng.integers(2, 33))
        durs = rng.choice(lengths, size=N)
        onsets = [int(rng.integers(0, T - d + 1)) for d in durs]
        aligned = make_aligned([Note(60, 0, 1)] * N, onsets, durs, num_frames=T)
        V = rng.integers(-8, 9, size=(N, 64)).astype(float)
        w = rng.integers(-8, 9, size=64) / 8.0
        whole = polyphonic_mix(V, aligned, w, T)
        side = rng.random(N) < 0.5
        a = np.flatnonzero(side)
        b = np.flatnonzero(~side)
        parts = [polyphonic_mix(V[idx], AlignedScore(tuple(aligned.aligned_notes[i] for i in idx), T), w, T)
                 for idx in (a, b)]
        assert np.array_equal(whole, parts[0] + parts[1])
        perm = rng.permutation(N)
        shuffled = AlignedScore(tuple(aligned.aligned_notes[i] for i in perm), T)
        assert np.array_equal(polyphonic_mix(V[perm], shuffled, w, T), whole)
    detail("100 cases, bitwise equal")


@pytest.mark.acceptance(4, "DTW optimality")
def test_dtw_optimality(detail):
    rng = np.random.default_rng(4)
    for _ in range(500):
        N, M = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        cost = rng.integers(0, 10, size=(N, M)).astype(float)
        path, total = dtw(cost)
        assert total == brute_min(cost)
        assert is_valid_path(path, N, M)
        assert path_cost(cost, path) == total
    detail("500 instances up to 6x6")


@pytest.mark.acceptance(5, "Alignment transfer")
def test_alignment_transfer(detail):
    r = stretch_recovery(seed=0, pieces=5, num_notes=24, factor=2, tolerance=2)
    detail(f"{r['fraction']:.1%} of {r['notes']} notes within 2 frames")
    assert r["fraction"] >= 0.95


@pytest.mark.acceptance(6, "Gradient correctness")
def test_gradient_correctness(detail):
    layers = layer_grad_checks(seed=0)
    align = alignment_grad_check(seed=0)
    synth = synthesis_grad_check(seed=0)
    detail(f"layers max {max(layers.values()):.1e}, alignment {align:.1e}, synthesis {synth:.1e}")
    assert all(err < 1e-5 for err in layers.values()), layers
    assert align < 1e-4 and synth < 1e-4


@pytest.mark.acceptance(7, "Overfit capability, synthesis")
def test_overfit_synthesis(detail):
    r = overfit_synthesis(seed=0, max_steps=5000, target=0.1, eval_every=50)
    full, abl = r["full"], r["ablation"]
    detail(f"full {full.metrics['mse']:.3f} at step {full.steps}; no-encoder {abl.metrics['mse']:.3f}")
    assert full.metrics["mse"] < 0.1 and full.steps <= 5000
    assert abl.steps == full.steps
    assert abl.metrics["mse"] >= full.metrics["mse"] - 0.02


@pytest.mark.acceptance(8, "Overfit capability, alignment")
def test_overfit_alignment(detail):
    r = overfit_alignment(seed=0, pairs=10, max_steps=3000)
    detail(f"onset MAE {r.metrics['onset_mae']:.2f}, duration MAE {r.metrics['duration_mae']:.2f} "
           f"at step {r.steps}")
    assert r.steps <= 3000
    assert r.metrics["onset_mae"] < 1.5 and r.metrics["duration_mae"] < 2.0


@pytest.mark.acceptance(9, "Inversion sanity")
def test_inversion_sanity(detail):
    r = inversion_sanity(freq=440.0, iterations=60)
    first10 = smoothed(r["history"][:10], window=3)
    detail(f"peak bin {r['peak_bin']} (440 Hz = bin {r['expected_bin']:.2f}); "
           f"consistency {r['history'][0]:.3f} -> {r['history'][9]:.3f}")
    assert abs(r["peak_bin"] - r["expected_bin"]) <= 1
    assert (np.diff(first10) <= 0).all()


@pytest.mark.acceptance(10, "Pipeline determinism")
def test_pipeline_determinism(tmp_path, detail):
    score = random_score(np.random.default_rng(10), num_notes=10, performer_id=2)
    (tmp_path / "s.json").write_text(serialize_score(score))
    save_model(tmp_path / "synth.ckpt", SynthesisModel(SynthesisModelConfig(seed=1)))
    save_model(tmp_path / "align.ckpt", AlignmentModel(AlignmentModelConfig(seed=2, residual=True)))
    outs = []
    for name in ("a.wav", "b.wav"):
        cmd = [sys.executable, "-m", "scoresynth", "--seed", "7", "synth", "--score", str(tmp_path / "s.json"),
               "--ckpt", str(tmp_path / "synth.ckpt"), "--alignment-ckpt", str(tmp_path / "align.ckpt"),
               "--out", str(tmp_path / name)]
        res = subprocess.run(cmd, capture_output=True, text=True)
        assert res.returncode == 0, res.stderr
        outs.append((tmp_path / name).read_bytes())
    seconds = len(dsp.read_wav(str(tmp_path / "a.wav"))) / dsp.SAMPLE_RATE
    detail(f"{seconds:.2f} s of audio, identical" if outs[0] == outs[1] else "outputs differ")
    assert outs[0] == outs[1]


@pytest.mark.acceptance(11, "Preprocessing conformance")
def test_preprocessing_conformance(detail):
    p = dsp.SpectrogramParams()
    assert (p.filter_length, p.hop_length, p.window_size, p.mel_bands, p.sample_rate) == (1024, 256, 1024, 80, 16000)
    rng = np.random.default_rng(11)
    for n in [1, 255, 256, 257, 16000, *rng.integers(1, 40000, size=20)]:
        mel = dsp.log_mel(dsp.AudioClip(rng.normal(0, 0.1, size=int(n))))
        assert mel.data.shape == (80, 1 + int(n) // 256)
        assert mel.params == p
    assert dsp.AudioClip(np.zeros(10)).samples.ndim == 1
    detail("1024/256/1024/80/16 kHz; T = 1 + len // 256")
