import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scoresynth import dsp
from scoresynth.alignment import AlignmentModel, AlignmentModelConfig
from scoresynth.nn.checkpoint import CheckpointError
from scoresynth.nn.optim import TrainingError
from scoresynth.score import Note, make_aligned
from scoresynth.synthesis import SynthesisModelConfig
from scoresynth.training import (
    CLIP_FRAMES,
    Clip,
    DatasetManifest,
    TrainingConfig,
    _run,
    evaluate_mse,
    format_mse_table,
    generate_corpus,
    load_model,
    load_training_config,
    save_model,
    slice_clips,
    split_clips,
    split_groups,
    synthetic_example,
    train_alignment,
    train_synthesis,
)

TINY_SYNTH = SynthesisModelConfig(embed_dim=16, heads=2, mha_hidden=8, ffn_hidden=24, encoder_layers=1,
                                  decoder_layers=1, dropout=0.0)
TINY_ALIGN = AlignmentModelConfig(embed_dim=16, heads=2, mha_hidden=8, ffn_hidden=24, encoder_layers=1,
                                  dropout=0.0)


def flat_mel(frames):
    return dsp.MelSpectrogram(np.tile(np.arange(frames, dtype=float), (80, 1)))


class TestConfig:
    def test_defaults(self):
        c = TrainingConfig()
        assert (c.batch_size, c.dropout, c.clip_seconds, c.validation_fraction) == (16, 0.2, 5.0, 0.1)
        assert c.warmup_for("alignment") == 1000 and c.warmup_for("synthesis") == 4000
        assert c.anneal_steps == (10000, 20000, 50000) and c.anneal_rate == 0.5

    def test_anneal_for_alignment_only(self):
        c = TrainingConfig()
        a = c.schedule("alignment", 10001, 128) / c.schedule("alignment", 9999, 128)
        s = c.schedule("synthesis", 10001, 128) / c.schedule("synthesis", 9999, 128)
        assert a == pytest.approx(0.5, rel=1e-3) and s == pytest.approx(1.0, rel=1e-3)

    def test_file_parsing(self):
        text = "# comment\nbatch_size = 4\nwarmup = 10  # inline\nanneal_steps = 5, 6\n\nseed = 3\n"
        c = load_training_config(text)
        assert (c.batch_size, c.warmup, c.anneal_steps, c.seed) == (4, 10, (5, 6), 3)
        assert c.dropout == 0.2

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown key 'lr'"):
            load_training_config("lr = 0.1")

    def test_missing_equals(self):
        with pytest.raises(ValueError, match="line 2"):
            load_training_config("seed = 1\nbatch_size 3")


class TestSliceClips:
    def test_clip_length_312(self):
        assert CLIP_FRAMES == 312

    def test_ten_seconds_two_clips(self):
        a = make_aligned([Note(60, 0, 1)], [0], [625])
        clips = slice_clips(a, flat_mel(625))
        assert len(clips) == 2 and all(c.mel.num_frames == 312 for c in clips)

    def test_three_seconds_no_clip(self):
        a = make_aligned([Note(60, 0, 1)], [0], [187])
        assert slice_clips(a, flat_mel(187)) == []

    def test_boundary_note_in_both_clips(self):
        a = make_aligned([Note(60, 0, 1)], [300], [20])
        first, second = slice_clips(a, flat_mel(700))
        assert (first.aligned.aligned_notes[0].onset_frames, first.aligned.aligned_notes[0].duration_frames) == (300, 12)
        assert (second.aligned.aligned_notes[0].onset_frames, second.aligned.aligned_notes[0].duration_frames) == (0, 8)
        assert second.mel.data[0, 0] == 312

    def test_empty_clip_dropped(self):
        a = make_aligned([Note(60, 0, 1)], [400], [10])
        clips = slice_clips(a, flat_mel(700), source="x")
        assert [c.source for c in clips] == ["x#1"]

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_spans_never_exceed_source(self, seed):
        rng = np.random.default_rng(seed)
        T = int(rng.integers(312, 1400))
        n = int(rng.integers(1, 15))
        onsets = rng.integers(0, T, size=n)
        durs = [int(rng.integers(1, T - o + 1)) for o in onsets]
        a = make_aligned([Note(60 + i, 0, 1) for i in range(n)], onsets, durs, num_frames=T)
        clips = slice_clips(a, flat_mel(T))
        covered = {}
        for c in clips:
            k = int(c.source.split("#")[1])
            assert c.mel.num_frames == 312
            for an in c.aligned.aligned_notes:
                frames = set(range(k * 312 + an.onset_frames, k * 312 + an.end_frame))
                covered.setdefault(an.note, set()).update(frames)
        for an in a.aligned_notes:
            assert covered.get(an.note, set()) <= set(range(an.onset_frames, an.end_frame))


class TestSplit:
    def clips(self, sizes):
        out = []
        for r, n in enumerate(sizes):
            out += [Clip(None, None, f"rec{r}#{k}") for k in range(n)]
        return out

    def test_partition_and_reproducible(self):
        clips = self.clips([3, 1, 2, 2, 1, 3, 2, 1, 2, 3])
        train, val = split_clips(clips, 0.1, seed=4)
        assert {id(c) for c in train}.isdisjoint({id(c) for c in val})
        assert len(train) + len(val) == len(clips)
        again = split_clips(clips, 0.1, seed=4)
        assert [c.source for c in again[1]] == [c.source for c in val]

    def test_recordings_not_split(self):
        train, val = split_clips(self.clips([2, 2, 2, 2, 2, 2, 2, 2, 2, 2]), 0.1, seed=0)
        rec = lambda cs: {c.source.split("#")[0] for c in cs}
        assert rec(train).isdisjoint(rec(val))

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(1, 2), min_size=1, max_size=60), st.integers(0, 1000))
    def test_within_one_clip_of_target(self, sizes, seed):
        chosen = split_groups(sizes, 0.1, seed)
        count = sum(s for s, v in zip(sizes, chosen) if v)
        assert abs(count - 0.1 * sum(sizes)) <= 1

    def test_per_clip_mode(self):
        train, val = split_clips(self.clips([20, 20]), 0.1, seed=0, by_recording=False)
        assert len(val) == 4 and len(train) == 36


class TestCorpus:
    def test_generate_and_load(self, tmp_path):
        path = generate_corpus(tmp_path, num_pieces=2, num_notes=6, num_performers=2, seed=1)
        m = DatasetManifest.load(path)
        assert len(m.items) == 2
        ex = m.load_example(1)
        assert ex.score.performer_id == 1 and ex.aligned.performer_id == 1
        assert ex.audio.sample_rate == 16000
        assert [an.note for an in ex.aligned.aligned_notes] == list(ex.score.notes)

    def test_oracle_item_without_recording(self, tmp_path):
        ex = synthetic_example(np.random.default_rng(0), num_notes=4, render=False)
        from scoresynth.score import serialize_score

        (tmp_path / "s.json").write_text(serialize_score(ex.score))
        (tmp_path / "m.json").write_text(json.dumps({"items": [{"score": "s.json", "oracle": True}]}))
        loaded = DatasetManifest.load(tmp_path / "m.json").load_example(0)
        assert len(loaded.audio) == loaded.aligned.num_frames * 256

    def test_empty_manifest(self, tmp_path):
        (tmp_path / "m.json").write_text('{"items": []}')
        with pytest.raises(ValueError):
            DatasetManifest.load(tmp_path / "m.json")


def small_clips():
    ex = synthetic_example(np.random.default_rng(0), num_notes=40)
    return slice_clips(ex.aligned, ex.mel(), source="a")


class TestTraining:
    def test_synthesis_runs_deterministic(self, tmp_path):
        clips = small_clips()[:1]
        cfg = TrainingConfig(batch_size=1, max_steps=4, log_every=2, warmup=2)
        a = train_synthesis(clips, cfg, TINY_SYNTH, out_dir=tmp_path / "a")
        b = train_synthesis(clips, cfg, TINY_SYNTH, out_dir=tmp_path / "b")
        assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
        assert [r["step"] for r in a.metrics] == [2, 4]
        assert b.checkpoint.exists()

    def test_validation_reported_separately(self):
        clips = small_clips()
        assert len(clips) >= 2
        train, val = clips[:1], clips[1:2]
        cfg = TrainingConfig(batch_size=1, max_steps=2, log_every=2, warmup=2)
        res = train_synthesis(train, cfg, TINY_SYNTH, validation=val)
        last = res.metrics[-1]
        assert last["val_loss"] == pytest.approx(evaluate_mse(res.model, val))
        assert last["eval_train_loss"] == pytest.approx(evaluate_mse(res.model, train))

    def test_checkpoint_round_trip_bit_identical(self, tmp_path):
        clips = small_clips()[:1]
        res = train_synthesis(clips, TrainingConfig(batch_size=1, max_steps=3, warmup=2), TINY_SYNTH,
                              out_dir=tmp_path)
        before = evaluate_mse(res.model, clips)
        assert evaluate_mse(res.model, clips) == before
        assert evaluate_mse(load_model(res.checkpoint, "synthesis"), clips) == before

    def test_kind_mismatch(self, tmp_path):
        save_model(tmp_path / "a.ckpt", AlignmentModel(TINY_ALIGN))
        with pytest.raises(CheckpointError, match="alignment"):
            load_model(tmp_path / "a.ckpt", "synthesis")

    def test_alignment_runs(self, tmp_path):
        rng = np.random.default_rng(0)
        exs = [synthetic_example(rng, num_notes=6, render=False) for _ in range(3)]
        cfg = TrainingConfig(batch_size=2, max_steps=3, log_every=1, warmup=2)
        res = train_alignment(exs, cfg, TINY_ALIGN, out_dir=tmp_path)
        assert len(res.metrics) == 3 and all(np.isfinite(r["train_loss"]) for r in res.metrics)
        assert {"onset_mae", "duration_mae"} <= set(res.metrics[0])
        reloaded = load_model(res.checkpoint, "alignment")
        assert reloaded.cfg.output_scale == res.model.cfg.output_scale

    def test_nan_aborts_and_keeps_last_good(self, tmp_path):
        model = AlignmentModel(TINY_ALIGN)
        calls = {"n": 0}

        def batch_loss(idx):
            calls["n"] += 1
            loss = (model.head.bias * model.head.bias).sum()
            return loss * float("nan") if calls["n"] == 3 else loss

        cfg = TrainingConfig(max_steps=10, checkpoint_every=2, warmup=1)
        with pytest.raises(TrainingError, match="step 3"):
            _run("alignment", model, batch_loss, lambda: {}, 1, cfg, tmp_path)
        saved = load_model(tmp_path / "model.ckpt")
        np.testing.assert_array_equal(saved.head.bias.data, model.head.bias.data)


def test_mse_table_one_row_per_variant():
    table = format_mse_table({"proposed": {"synthetic": 0.5}, "no_encoder": {"synthetic": 0.7}})
    lines = table.splitlines()
    assert len(lines) == 3 and "synthetic" in lines[0]
    assert lines[1].split() == ["proposed", "0.500"] and lines[2].split() == ["no_encoder", "0.700"]


def test_alignment_overfit_loss_falls_epoch_over_epoch_after_warmup():
    rng = np.random.default_rng(0)
    exs = [synthetic_example(rng, num_notes=24, performer_id=i % 4, render=False) for i in range(10)]
    cfg = TrainingConfig(batch_size=10, max_steps=400, warmup=100, log_every=1)
    mcfg = AlignmentModelConfig(embed_dim=32, heads=2, mha_hidden=16, ffn_hidden=64, encoder_layers=2,
                                residual=True)
    res = train_alignment(exs, cfg, mcfg, eval_every=400)
    # one step is one epoch here; smooth over blocks of 25 epochs
    losses = np.array([r["train_loss"] for r in res.metrics])[100:]
    blocks = losses.reshape(-1, 25).mean(axis=1)
    assert (np.diff(blocks) < 0).all(), blocks
