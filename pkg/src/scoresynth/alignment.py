"""Expressive-timing model: note sequence + tempo + performer → per-note
onset and duration in spectrogram frames.

A three-layer transformer encoder reads the sum of pitch, onset, duration
(and optionally velocity) embeddings, a performer embedding, a linear
projection of the tempo and a sinusoidal positional encoding. A linear head
regresses two values per note.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np

from .nn import autograd as ag
from .nn.autograd import Tensor
from .nn.layers import Embedding, Linear, Module, TransformerLayerConfig, TransformerStack, sinusoidal_pe
from .score import RESOLUTION, AlignedNote, AlignedScore, Score, ScoreError, clip_index, ticks_to_frames

TEMPO_REFERENCE = 120.0


@dataclass(frozen=True)
class AlignmentModelConfig:
    encoder_layers: int = 3
    heads: int = 2
    mha_hidden: int = 64
    ffn_hidden: int = 256
    ffn_kernel_sizes: Tuple[int, int] = (9, 1)
    embed_dim: int = 128
    max_seq_len: int = 1000
    # in quarter notes; with one bucket per tick this is 96 · 24 embedding rows
    max_time: int = 96
    max_duration: int = 96
    ticks_per_bucket: int = 1
    clip_mode: str = "saturate"
    num_performers: int = 32
    use_velocity: bool = False
    dropout: float = 0.2
    # predictions are head outputs times this per-column scale (frames)
    output_scale: Tuple[float, float] = (1.0, 1.0)
    residual: bool = False
    seed: int = 0

    @property
    def time_buckets(self) -> int:
        return self.max_time * RESOLUTION // self.ticks_per_bucket

    @property
    def duration_buckets(self) -> int:
        return self.max_duration * RESOLUTION // self.ticks_per_bucket

    def layer_config(self) -> TransformerLayerConfig:
        return TransformerLayerConfig(
            model_dim=self.embed_dim, mha_hidden=self.mha_hidden, num_heads=self.heads,
            ffn_hidden=self.ffn_hidden, ffn_kernel_sizes=tuple(self.ffn_kernel_sizes),
            dropout=self.dropout,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = "alignment"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AlignmentModelConfig":
        d = {k: v for k, v in d.items() if k != "kind"}
        for key in ("ffn_kernel_sizes", "output_scale"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def note_features(scores: Sequence[Score], cfg: AlignmentModelConfig) -> Dict[str, np.ndarray]:
    """Pad a list of scores into index arrays; ``mask`` is True at padding."""
    B = len(scores)
    N = max((len(s.notes) for s in scores), default=0)
    if N > cfg.max_seq_len:
        raise ScoreError(
            f"score has {N} notes, more than max_seq_len={cfg.max_seq_len}; split it into segments"
        )
    pitch = np.zeros((B, N), np.int64)
    onset = np.zeros((B, N), np.int64)
    duration = np.zeros((B, N), np.int64)
    velocity = np.zeros((B, N), np.int64)
    baseline = np.zeros((B, N, 2))
    mask = np.ones((B, N), bool)
    for b, s in enumerate(scores):
        n = len(s.notes)
        if n == 0:
            continue
        mask[b, :n] = False
        pitch[b, :n] = [x.pitch for x in s.notes]
        ticks_on = np.array([x.onset for x in s.notes])
        ticks_dur = np.array([x.duration for x in s.notes])
        onset[b, :n] = clip_index(ticks_on // cfg.ticks_per_bucket, cfg.time_buckets, cfg.clip_mode)
        duration[b, :n] = clip_index(ticks_dur // cfg.ticks_per_bucket, cfg.duration_buckets, cfg.clip_mode)
        velocity[b, :n] = [x.velocity or 0 for x in s.notes]
        baseline[b, :n, 0] = ticks_to_frames(ticks_on, s.tempo)
        baseline[b, :n, 1] = np.maximum(1, ticks_to_frames(ticks_dur, s.tempo))
    performer = np.array([s.performer_id for s in scores], np.int64)
    if performer.size and performer.max() >= cfg.num_performers:
        raise ScoreError(f"performer_id {performer.max()} ≥ num_performers={cfg.num_performers}")
    tempo = np.array([s.tempo / TEMPO_REFERENCE for s in scores])
    return dict(pitch=pitch, onset=onset, duration=duration, velocity=velocity, mask=mask,
                performer=performer, tempo=tempo, baseline=baseline)


class AlignmentModel(Module):
    def __init__(self, cfg: AlignmentModelConfig = AlignmentModelConfig(), rng=None):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        d = cfg.embed_dim
        self.pitch = Embedding(128, d, rng)
        self.onset = Embedding(cfg.time_buckets, d, rng)
        self.duration = Embedding(cfg.duration_buckets, d, rng)
        self.velocity = Embedding(128, d, rng) if cfg.use_velocity else None
        self.performer = Embedding(cfg.num_performers, d, rng)
        self.tempo = Linear(1, d, rng)
        self.encoder = TransformerStack(cfg.encoder_layers, cfg.layer_config(), rng)
        self.head = Linear(d, 2, rng)
        self.rng = rng

    def encode(self, feats: Dict[str, np.ndarray]) -> Tensor:
        """Note encodings, ``B × N × embed_dim``."""
        B, N = feats["pitch"].shape
        x = self.pitch(feats["pitch"]) + self.onset(feats["onset"]) + self.duration(feats["duration"])
        if self.velocity is not None:
            x = x + self.velocity(feats["velocity"])
        x = x + self.performer(feats["performer"]).reshape(B, 1, self.cfg.embed_dim)
        tempo = Tensor(feats["tempo"].reshape(B, 1, 1))
        x = x + self.tempo(tempo)
        x = x + Tensor(sinusoidal_pe(N, self.cfg.embed_dim))
        return self.encoder(x, feats["mask"])

    def __call__(self, feats: Dict[str, np.ndarray]) -> Tensor:
        """Raw (unrounded) predictions in frames, ``B × N × 2``."""
        out = self.head(self.encode(feats)) * np.asarray(self.cfg.output_scale)
        if self.cfg.residual:
            out = out + Tensor(feats["baseline"])
        return out


def alignment_targets(aligned: Sequence[AlignedScore], N: Optional[int] = None) -> np.ndarray:
    N = max(len(a) for a in aligned) if N is None else N
    out = np.zeros((len(aligned), N, 2))
    for b, a in enumerate(aligned):
        out[b, : len(a), 0] = a.onsets()
        out[b, : len(a), 1] = a.durations()
    return out


def alignment_loss(pred, target: Union[AlignedScore, np.ndarray], mask: Optional[np.ndarray] = None):
    """Mean squared error over every predicted onset and duration, in frames.

    ``pred`` is an ``N × 2`` (or ``B × N × 2``) array or Tensor of unrounded
    predictions; the result has the same kind.
    """
    if isinstance(target, AlignedScore):
        target = np.stack([target.onsets(), target.durations()], axis=-1).astype(np.float64)
    pred_shape = pred.shape
    if tuple(pred_shape) != tuple(np.shape(target)):
        raise ValueError(f"prediction shape {tuple(pred_shape)} != target shape {np.shape(target)}")
    m = None if mask is None else (~np.asarray(mask))[..., None]
    if isinstance(pred, Tensor):
        return ag.mse(pred, target, m)
    diff = np.asarray(pred, dtype=np.float64) - target
    w = np.ones_like(diff) if m is None else np.broadcast_to(m, diff.shape).astype(np.float64)
    return float((w * diff**2).sum() / w.sum())


def to_aligned(score: Score, pred: np.ndarray) -> AlignedScore:
    """Round, clamp (onset ≥ 0, duration ≥ 1) and package predictions."""
    pred = np.asarray(pred, dtype=np.float64)
    onsets = np.maximum(0, np.floor(pred[:, 0] + 0.5)).astype(np.int64)
    durs = np.maximum(1, np.floor(pred[:, 1] + 0.5)).astype(np.int64)
    notes = tuple(AlignedNote(n, int(o), int(d)) for n, o, d in zip(score.notes, onsets, durs))
    num_frames = max((an.end_frame for an in notes), default=0)
    return AlignedScore(notes, num_frames=num_frames, performer_id=score.performer_id)


def predict_alignment(score: Score, model: AlignmentModel) -> AlignedScore:
    if not score.notes:
        return AlignedScore((), 0, score.performer_id)
    was_training = model.training
    model.eval()
    try:
        with ag.no_grad():
            pred = model(note_features([score], model.cfg)).data[0]
    finally:
        model.train(was_training)
    if not np.isfinite(pred).all():
        raise FloatingPointError("alignment model produced non-finite timing")
    return to_aligned(score, pred)


def encode_notes(score: Score, model: AlignmentModel) -> np.ndarray:
    """Encoder output for one score, ``N × embed_dim`` (eval mode)."""
    was_training = model.training
    model.eval()
    try:
        with ag.no_grad():
            return model.encode(note_features([score], model.cfg)).data[0]
    finally:
        model.train(was_training)


def with_output_scale(cfg: AlignmentModelConfig, targets: Sequence[AlignedScore]) -> AlignmentModelConfig:
    """Copy of ``cfg`` whose output scale is the RMS of the training targets."""
    t = alignment_targets(targets)
    live = np.concatenate([t[b, : len(a)] for b, a in enumerate(targets)])
    if cfg.residual:
        return cfg
    rms = np.sqrt(np.mean(live**2, axis=0))
    return replace(cfg, output_scale=(float(max(rms[0], 1.0)), float(max(rms[1], 1.0))))
