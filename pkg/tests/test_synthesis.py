import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scoresynth.dsp import MelSpectrogram
from scoresynth.nn import autograd as ag
from scoresynth.score import AlignedScore, Note, ScoreError, make_aligned
from scoresynth.synthesis import (
    SynthesisModel,
    SynthesisModelConfig,
    mixing_matrices,
    npe_modulate,
    polyphonic_mix,
    synthesis_features,
    synthesis_loss,
    synthesize_mel,
    with_mel_stats,
)
from scoresynth.verify import synthesis_grad_check

from oracles import brute_force_mix

SMALL = dict(embed_dim=16, heads=2, mha_hidden=8, ffn_hidden=24, encoder_layers=1, decoder_layers=1)


def random_aligned(rng, N, T):
    onsets = rng.integers(0, T, size=N)
    durs = [int(rng.integers(1, T - o + 1)) for o in onsets]
    notes = [Note(int(rng.integers(0, 128)), 0, 1) for _ in range(N)]
    return make_aligned(notes, onsets, durs, num_frames=T)


class TestNpe:
    def test_p_zero_exact(self):
        v = np.random.default_rng(0).normal(size=128)
        w = np.random.default_rng(1).normal(size=128)
        assert np.array_equal(npe_modulate(v, 0.0, w), v)

    def test_w_zero_exact(self):
        v = np.random.default_rng(0).normal(size=128)
        assert np.array_equal(npe_modulate(v, 0.37, np.zeros(128)), v)

    def test_hand_example(self):
        np.testing.assert_array_equal(npe_modulate([2.0, 4.0], 0.5, [0.5, -0.25]), [2.5, 3.5])

    @pytest.mark.parametrize("p", [-0.1, 1.01])
    def test_range(self, p):
        with pytest.raises(ValueError):
            npe_modulate(np.ones(2), p, np.ones(2))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0, 1))
    def test_near_identity_bound(self, seed, p):
        rng = np.random.default_rng(seed)
        v, w = rng.normal(size=128), rng.normal(0, 1e-2, size=128)
        dev = np.abs(npe_modulate(v, p, w) - v).max()
        assert dev <= p * np.abs(w).max() * np.abs(v).max() * (1 + 1e-12)


class TestMixer:
    def test_single_note_w_zero(self):
        v = np.arange(4.0)[None]
        out = polyphonic_mix(v, make_aligned([Note(60, 0, 1)], [0], [3], num_frames=6), np.zeros(4), 6)
        np.testing.assert_array_equal(out[:3], np.repeat(v, 3, axis=0))
        assert not out[3:].any()

    def test_empty(self):
        out = polyphonic_mix(np.zeros((0, 5)), AlignedScore((), 7), np.ones(5), 7)
        assert out.shape == (7, 5) and not out.any()

    def test_two_overlapping_notes_sum(self):
        rng = np.random.default_rng(0)
        V = rng.normal(size=(2, 6))
        a = make_aligned([Note(60, 0, 1), Note(64, 0, 1)], [1, 1], [4, 4], num_frames=8)
        out = polyphonic_mix(V, a, np.zeros(6), 8)
        np.testing.assert_allclose(out[1:5], np.repeat((V[0] + V[1])[None], 4, axis=0))

    def test_span_beyond_T(self):
        a = make_aligned([Note(60, 0, 1)], [4], [4])
        with pytest.raises(ScoreError):
            polyphonic_mix(np.ones((1, 2)), a, np.zeros(2), 6)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        N, T = int(rng.integers(1, 33)), int(rng.integers(1, 257))
        a = random_aligned(rng, N, T)
        V, w = rng.normal(size=(N, 16)), rng.normal(0, 0.5, size=16)
        np.testing.assert_allclose(polyphonic_mix(V, a, w, T), brute_force_mix(V, a, w, T), atol=1e-9)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_additive_and_order_invariant(self, seed):
        rng = np.random.default_rng(seed)
        N, T = int(rng.integers(2, 20)), int(rng.integers(1, 64))
        a = random_aligned(rng, N, T)
        V, w = rng.normal(size=(N, 8)), rng.normal(size=8)
        k = int(rng.integers(1, N))
        A = AlignedScore(a.aligned_notes[:k], T)
        B = AlignedScore(a.aligned_notes[k:], T)
        whole = polyphonic_mix(V, a, w, T)
        np.testing.assert_allclose(whole, polyphonic_mix(V[:k], A, w, T) + polyphonic_mix(V[k:], B, w, T),
                                   atol=1e-12)
        perm = rng.permutation(N)
        shuffled = AlignedScore(tuple(a.aligned_notes[i] for i in perm), T)
        np.testing.assert_allclose(polyphonic_mix(V[perm], shuffled, w, T), whole, atol=1e-12)

    def test_mixing_matrices_positions(self):
        a = make_aligned([Note(60, 0, 1), Note(62, 0, 1)], [0, 2], [5, 1], num_frames=6)
        cover, pos = mixing_matrices(a, 6)
        np.testing.assert_array_equal(cover[:, 0], [1, 1, 1, 1, 1, 0])
        np.testing.assert_array_equal(pos[:5, 0], [0, 0.25, 0.5, 0.75, 1.0])
        assert pos[2, 1] == 0 and cover[2, 1] == 1


class TestModel:
    def model(self, **kw):
        return SynthesisModel(SynthesisModelConfig(**{**SMALL, "dropout": 0.0, **kw}))

    def test_defaults(self):
        c = SynthesisModelConfig()
        assert (c.encoder_layers, c.decoder_layers, c.heads, c.mha_hidden, c.ffn_hidden, c.embed_dim,
                c.max_seq_len, c.mel_bands) == (3, 6, 2, 128, 512, 128, 1000, 80)
        assert c.use_npe and c.use_performer_embedding and c.use_encoder

    @pytest.mark.parametrize("flags", [{}, {"use_npe": False}, {"use_performer_embedding": False},
                                       {"use_encoder": False}])
    def test_output_shape(self, flags):
        a = make_aligned([Note(60, 0, 1), Note(67, 0, 1)], [0, 3], [5, 4], num_frames=9)
        mel = synthesize_mel(a, self.model(**flags))
        assert isinstance(mel, MelSpectrogram) and mel.data.shape == (80, 9)

    def test_too_long(self):
        a = make_aligned([Note(60, 0, 1)], [0], [1001])
        with pytest.raises(ScoreError, match="max_seq_len"):
            synthesize_mel(a, self.model())

    def test_rest_frames_zero_before_pe(self):
        m = self.model()
        a = make_aligned([Note(60, 0, 1)], [2], [3], num_frames=8)
        with ag.no_grad():
            x = m.frame_inputs(synthesis_features([a], m.cfg)).data[0]
        assert not x[[0, 1, 5, 6, 7]].any()
        assert x[2:5].any()

    def test_without_npe_sustained_note_is_constant(self):
        m = self.model(use_npe=False)
        a = make_aligned([Note(60, 0, 1)], [1], [6], num_frames=8)
        with ag.no_grad():
            x = m.frame_inputs(synthesis_features([a], m.cfg)).data[0]
        assert all(np.array_equal(x[1], x[t]) for t in range(2, 7))

    def test_with_npe_sustained_note_frames_distinct(self):
        m = self.model()
        a = make_aligned([Note(60, 0, 1)], [1], [6], num_frames=8)
        with ag.no_grad():
            x = m.frame_inputs(synthesis_features([a], m.cfg)).data[0, 1:7]
        assert len({row.tobytes() for row in x}) == 6

    def test_performer_changes_output(self):
        m = self.model()
        a = make_aligned([Note(60, 0, 1)], [0], [4])
        b = AlignedScore(a.aligned_notes, a.num_frames, performer_id=3)
        assert not np.allclose(synthesize_mel(a, m).data, synthesize_mel(b, m).data)

    def test_mel_stats(self):
        cfg = with_mel_stats(SynthesisModelConfig(), [MelSpectrogram(np.full((80, 4), -3.0))])
        assert cfg.mel_mean == -3.0 and cfg.mel_scale == 1e-3

    def test_config_round_trip(self):
        c = SynthesisModelConfig(use_npe=False, mel_mean=-4.5)
        assert SynthesisModelConfig.from_dict(c.to_dict()) == c


class TestLoss:
    def test_equal_zero(self):
        m = MelSpectrogram(np.random.default_rng(0).normal(size=(80, 5)))
        assert synthesis_loss(m, m) == 0

    def test_unit_offset(self):
        x = np.random.default_rng(0).normal(size=(80, 5))
        assert synthesis_loss(MelSpectrogram(x + 1), MelSpectrogram(x)) == pytest.approx(1.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            synthesis_loss(MelSpectrogram(np.zeros((80, 5))), MelSpectrogram(np.zeros((80, 6))))


@pytest.mark.parametrize("flags", [{}, {"use_npe": False}, {"use_performer_embedding": False},
                                   {"use_encoder": False}])
def test_full_model_gradients(flags):
    assert synthesis_grad_check(seed=0, **flags) < 1e-4


def test_npe_weight_gradient_checked():
    from scoresynth.nn.autograd import default_dtype
    from scoresynth.nn.gradcheck import grad_check
    from scoresynth.verify import LOSS_SCALE, tiny_aligned

    with default_dtype(np.float64):
        m = SynthesisModel(SynthesisModelConfig(**SMALL, dropout=0.0, mel_bands=6, npe_init_std=0.3))
        a = tiny_aligned(0, num_notes=3)
        f = synthesis_features([a], m.cfg)
        target = np.random.default_rng(0).normal(size=(1, 8, 6))
        err = grad_check(lambda: ag.mse(m(f), target) * LOSS_SCALE, {"npe_w": m.npe_w}, max_coords=None)
    assert err < 1e-4
