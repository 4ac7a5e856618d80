"""Finite-difference gradient checks for each layer and both full models.

Everything runs in float64 on tiny inputs (a few notes, at most 8 frames) so
the central differences are accurate to well below the tolerances used by
the tests and by ``gradcheck`` on the command line.
"""

from __future__ import annotations

from typing import Callable, Dict, Tuple

import numpy as np

from .alignment import AlignmentModel, AlignmentModelConfig, alignment_loss, note_features
from .nn import autograd as ag
from .nn.autograd import Parameter, Tensor, default_dtype
from .nn.gradcheck import grad_check
from .nn.layers import (
    ConvFeedForward,
    Embedding,
    LayerNorm,
    Linear,
    MultiHeadAttention,
    TransformerLayer,
    TransformerLayerConfig,
)
from .score import Note, Score, make_aligned
from .synthesis import SynthesisModel, SynthesisModelConfig, mix_tensor, synthesis_features

TINY = dict(embed_dim=16, heads=2, mha_hidden=8, ffn_hidden=24, dropout=0.0)

# Losses are scaled down before differencing. Some gradients are exactly zero
# (a key-projection bias cannot change a softmax), and there the central
# difference only sees round-off, about ulp(f) / eps; against the 1e-8 floor
# of the relative error that reads as 1e-3 when f is of order one.
LOSS_SCALE = 1e-3


def _loss(pred, target) -> Tensor:
    return ag.mse(pred, target) * LOSS_SCALE


def tiny_score(seed: int = 0, num_notes: int = 4) -> Score:
    rng = np.random.default_rng(seed)
    notes = [Note(int(rng.integers(55, 80)), 12 * i, int(rng.choice([6, 12, 24])))
             for i in range(num_notes - 1)]
    # one chord note so the mixer sees polyphony
    notes.append(Note(notes[0].pitch + 4, 0, notes[0].duration))
    return Score(tuple(notes), tempo=120.0, performer_id=1)


def tiny_aligned(seed: int = 0, num_notes: int = 4, frames: int = 8):
    score = tiny_score(seed, num_notes)
    onsets = [min(2 * i, frames - 1) for i in range(len(score.notes))]
    onsets[-1] = 0
    durs = [max(1, min(3, frames - o)) for o in onsets]
    return make_aligned(score.notes, onsets, durs, performer_id=1, num_frames=frames)


def _layer_cases(rng) -> Dict[str, Tuple[Callable[[], Tensor], Dict[str, Parameter]]]:
    d = 8
    x = rng.normal(size=(2, 5, d))
    mask = np.zeros((2, 5), bool)
    mask[1, 3:] = True
    target = rng.normal(size=(2, 5, d))
    lc = TransformerLayerConfig(model_dim=d, mha_hidden=8, num_heads=2, ffn_hidden=12,
                                ffn_kernel_sizes=(3, 1), dropout=0.0)
    cases = {}

    def add(name, module, fn):
        cases[name] = (fn, module.parameters())

    lin = Linear(d, d, rng)
    add("linear", lin, lambda: _loss(lin(Tensor(x)), target))
    ln = LayerNorm(d)
    ln.gain.data += rng.normal(0, 0.1, d)
    add("layer_norm", ln, lambda: _loss(ln(Tensor(x)), target))
    emb = Embedding(10, d, rng)
    idx = rng.integers(0, 10, size=(2, 5))
    add("embedding", emb, lambda: _loss(emb(idx), target))
    mha = MultiHeadAttention(lc, rng)
    add("attention", mha, lambda: _loss(mha(Tensor(x), mask), target))
    ffn = ConvFeedForward(lc, rng)
    add("conv_ffn", ffn, lambda: _loss(ffn(Tensor(x)), target))
    layer = TransformerLayer(lc, rng)
    add("transformer_layer", layer, lambda: _loss(layer(Tensor(x), mask), target))

    notes = Parameter(rng.normal(size=(1, 4, d)))
    w = Parameter(rng.normal(0, 0.5, size=d))
    f = synthesis_features([tiny_aligned(int(rng.integers(1 << 16)))], SynthesisModelConfig(embed_dim=d))
    tgt = rng.normal(size=(1, 8, d))
    cases["mixer"] = (lambda: _loss(mix_tensor(notes, f["cover"], f["pos"], w), tgt),
                      {"notes": notes, "w": w})
    return cases


def layer_grad_checks(seed: int = 0) -> Dict[str, float]:
    """Max relative gradient error for each layer type."""
    with default_dtype(np.float64):
        rng = np.random.default_rng(seed)
        return {name: grad_check(fn, params, seed=seed) for name, (fn, params) in _layer_cases(rng).items()}


def alignment_grad_check(seed: int = 0, max_coords: int = 6) -> float:
    with default_dtype(np.float64):
        cfg = AlignmentModelConfig(encoder_layers=2, max_time=4, max_duration=4, num_performers=4,
                                   output_scale=(4.0, 2.0), seed=seed, **TINY)
        model = AlignmentModel(cfg)
        score = tiny_score(seed)
        feats = note_features([score], cfg)
        target = np.random.default_rng(seed).normal(2.0, 1.0, size=(1, len(score.notes), 2))
        return grad_check(lambda: alignment_loss(model(feats), target) * LOSS_SCALE, model.parameters(),
                          max_coords=max_coords, seed=seed)


def synthesis_grad_check(seed: int = 0, max_coords: int = 6, **overrides) -> float:
    with default_dtype(np.float64):
        cfg = SynthesisModelConfig(encoder_layers=1, decoder_layers=2, mel_bands=6, max_time=8,
                                   max_duration=8, num_performers=4, npe_init_std=0.3, seed=seed,
                                   **{**TINY, **overrides})
        model = SynthesisModel(cfg)
        aligned = tiny_aligned(seed)
        f = synthesis_features([aligned], cfg)
        target = np.random.default_rng(seed).normal(size=(1, aligned.num_frames, cfg.mel_bands))
        return grad_check(lambda: _loss(model(f), target), model.parameters(),
                          max_coords=max_coords, seed=seed)


def model_grad_check(kind: str, seed: int = 0) -> float:
    if kind == "alignment":
        return alignment_grad_check(seed)
    if kind == "synthesis":
        return synthesis_grad_check(seed)
    if kind == "layers":
        return max(layer_grad_checks(seed).values())
    raise ValueError(f"unknown model kind {kind!r}")
