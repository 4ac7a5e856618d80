"""Aligned score → log-mel spectrogram.

Pipeline: note encoder → polyphonic mixer (with note-wise positional
modulation) → sinusoidal positional encoding → frame decoder → 80-band
linear head. Three ablation switches remove the positional modulation, the
performer embedding, or the encoder (replaced by a linear projection of
piano-roll and position-roll columns).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .dsp import MelSpectrogram, SpectrogramParams
from .nn import autograd as ag
from .nn.autograd import Parameter, Tensor
from .nn.layers import Embedding, Linear, Module, TransformerLayerConfig, TransformerStack, sinusoidal_pe
from .score import AlignedScore, ScoreError, build_rolls, clip_index, note_positions


@dataclass(frozen=True)
class SynthesisModelConfig:
    encoder_layers: int = 3
    decoder_layers: int = 6
    heads: int = 2
    mha_hidden: int = 128
    ffn_hidden: int = 512
    ffn_kernel_sizes: Tuple[int, int] = (9, 1)
    embed_dim: int = 128
    max_seq_len: int = 1000
    mel_bands: int = 80
    # clips for the frame-valued note features (duration, gap since previous onset)
    max_time: int = 96
    max_duration: int = 96
    clip_mode: str = "saturate"
    num_performers: int = 32
    use_velocity: bool = False
    use_npe: bool = True
    use_performer_embedding: bool = True
    use_encoder: bool = True
    dropout: float = 0.2
    npe_init_std: float = 1e-2
    # fixed affine map from head output to log-mel
    mel_mean: float = 0.0
    mel_scale: float = 1.0
    seed: int = 0

    def layer_config(self) -> TransformerLayerConfig:
        return TransformerLayerConfig(
            model_dim=self.embed_dim, mha_hidden=self.mha_hidden, num_heads=self.heads,
            ffn_hidden=self.ffn_hidden, ffn_kernel_sizes=tuple(self.ffn_kernel_sizes),
            dropout=self.dropout,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = "synthesis"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthesisModelConfig":
        d = {k: v for k, v in d.items() if k != "kind"}
        if "ffn_kernel_sizes" in d:
            d["ffn_kernel_sizes"] = tuple(d["ffn_kernel_sizes"])
        return cls(**d)


# ---------------------------------------------------------------------------
# Note-wise positional encoding and the polyphonic mixer


def npe_modulate(v_note, p: float, w) -> np.ndarray:
    """Frame embedding at relative position ``p`` of a note: ``(1 + p·w) ⊙ v``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"relative position must lie in [0, 1], got {p}")
    return (1.0 + p * np.asarray(w)) * np.asarray(v_note)


def mixing_matrices(aligned: AlignedScore, T: int, N: Optional[int] = None,
                    dtype=np.float64) -> Tuple[np.ndarray, np.ndarray]:
    """Coverage and position matrices, each ``T × N``.

    ``coverage[t, n]`` is 1 while note n sounds at frame t; ``position[t, n]``
    is its relative position ``(t - onset) / (dur - 1)`` there (0 for
    single-frame notes).
    """
    N = len(aligned) if N is None else N
    cover = np.zeros((T, N), dtype=dtype)
    pos = np.zeros((T, N), dtype=dtype)
    for n, an in enumerate(aligned.aligned_notes):
        s, e = an.onset_frames, an.end_frame
        if e > T:
            raise ScoreError(f"note {n} spans frames [{s}, {e}) beyond T={T}")
        cover[s:e, n] = 1.0
        pos[s:e, n] = note_positions(an.duration_frames)
    return cover, pos


def polyphonic_mix(note_embs, aligned: AlignedScore, w, T: int) -> np.ndarray:
    """Sum position-modulated note embeddings into ``T × D`` frame embeddings.

    Every (note, frame) pair contributes ``(1 + p·w) ⊙ v_note``; frames that no
    note covers stay exactly zero.
    """
    V = np.asarray(note_embs, dtype=np.float64)
    if V.shape[0] != len(aligned):
        raise ValueError(f"{V.shape[0]} note embeddings for {len(aligned)} notes")
    cover, pos = mixing_matrices(aligned, T)
    return cover @ V + (pos @ V) * np.asarray(w, dtype=np.float64)


def mix_tensor(notes: Tensor, cover: np.ndarray, pos: Optional[np.ndarray], w: Optional[Tensor]) -> Tensor:
    """Differentiable mixer over a batch: ``notes`` is B × N × D, matrices B × T × N."""
    frames = ag.matmul(Tensor(cover, dtype=notes.dtype), notes)
    if w is not None:
        frames = frames + ag.matmul(Tensor(pos, dtype=notes.dtype), notes) * w
    return frames


# ---------------------------------------------------------------------------
# Model


def synthesis_features(batch: Sequence[AlignedScore], cfg: SynthesisModelConfig,
                       T: Optional[int] = None) -> Dict[str, np.ndarray]:
    """Index arrays, mixing matrices and (for the roll input) rolls for a batch."""
    B = len(batch)
    T = max(a.num_frames for a in batch) if T is None else T
    if T > cfg.max_seq_len:
        raise ScoreError(
            f"{T} frames exceed max_seq_len={cfg.max_seq_len}; slice the input into clips"
        )
    N = max(max((len(a) for a in batch), default=0), 1)
    if N > cfg.max_seq_len:
        raise ScoreError(f"{N} notes exceed max_seq_len={cfg.max_seq_len}")
    pitch = np.zeros((B, N), np.int64)
    duration = np.zeros((B, N), np.int64)
    gap = np.zeros((B, N), np.int64)
    velocity = np.zeros((B, N), np.int64)
    note_mask = np.ones((B, N), bool)
    frame_mask = np.ones((B, T), bool)
    cover = np.zeros((B, T, N))
    pos = np.zeros((B, T, N))
    rolls = np.zeros((B, T, 256)) if not cfg.use_encoder else None
    for b, a in enumerate(batch):
        n = len(a)
        frame_mask[b, : a.num_frames] = False
        if a.num_frames > T:
            raise ScoreError(f"item {b} has {a.num_frames} frames, more than T={T}")
        cover[b], pos[b] = mixing_matrices(a, T, N)
        if rolls is not None:
            piano, position = build_rolls(a, use_velocity=cfg.use_velocity)
            rolls[b, : a.num_frames, :128] = piano.T
            rolls[b, : a.num_frames, 128:] = position.T
        if n == 0:
            continue
        note_mask[b, :n] = False
        onsets = a.onsets()
        pitch[b, :n] = a.pitches()
        duration[b, :n] = clip_index(a.durations(), cfg.max_duration, cfg.clip_mode)
        gap[b, :n] = clip_index(np.diff(onsets, prepend=onsets[0]), cfg.max_time, cfg.clip_mode)
        velocity[b, :n] = [an.note.velocity or 0 for an in a.aligned_notes]
    performer = np.array([a.performer_id for a in batch], np.int64)
    if performer.size and performer.max() >= cfg.num_performers:
        raise ScoreError(f"performer_id {performer.max()} ≥ num_performers={cfg.num_performers}")
    return dict(pitch=pitch, duration=duration, gap=gap, velocity=velocity, note_mask=note_mask,
                frame_mask=frame_mask, cover=cover, pos=pos, rolls=rolls, performer=performer)


class SynthesisModel(Module):
    def __init__(self, cfg: SynthesisModelConfig = SynthesisModelConfig(), rng=None):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        d = cfg.embed_dim
        lc = cfg.layer_config()
        self.performer = Embedding(cfg.num_performers, d, rng) if cfg.use_performer_embedding else None
        if cfg.use_encoder:
            self.pitch = Embedding(128, d, rng)
            self.duration = Embedding(cfg.max_duration, d, rng)
            self.gap = Embedding(cfg.max_time, d, rng)
            self.velocity = Embedding(128, d, rng) if cfg.use_velocity else None
            self.encoder = TransformerStack(cfg.encoder_layers, lc, rng)
            self.npe_w = Parameter(rng.normal(0.0, cfg.npe_init_std, size=d)) if cfg.use_npe else None
        else:
            self.roll_proj = Linear(256, d, rng)
        self.decoder = TransformerStack(cfg.decoder_layers, lc, rng)
        self.head = Linear(d, cfg.mel_bands, rng)
        self.rng = rng

    def encode_notes(self, f: Dict[str, np.ndarray]) -> Tensor:
        B, N = f["pitch"].shape
        x = self.pitch(f["pitch"]) + self.duration(f["duration"]) + self.gap(f["gap"])
        if self.velocity is not None:
            x = x + self.velocity(f["velocity"])
        if self.performer is not None:
            x = x + self.performer(f["performer"]).reshape(B, 1, self.cfg.embed_dim)
        x = x + Tensor(sinusoidal_pe(N, self.cfg.embed_dim))
        return self.encoder(x, f["note_mask"])

    def frame_inputs(self, f: Dict[str, np.ndarray]) -> Tensor:
        """Decoder input before the frame positional encoding, ``B × T × D``."""
        if self.cfg.use_encoder:
            notes = self.encode_notes(f)
            return mix_tensor(notes, f["cover"], f["pos"], self.npe_w)
        B = f["performer"].shape[0]
        x = self.roll_proj(Tensor(f["rolls"]))
        if self.performer is not None:
            x = x + self.performer(f["performer"]).reshape(B, 1, self.cfg.embed_dim)
        return x

    def __call__(self, f: Dict[str, np.ndarray]) -> Tensor:
        """Predicted log-mel, ``B × T × mel_bands``."""
        x = self.frame_inputs(f)
        T = x.shape[1]
        x = x + Tensor(sinusoidal_pe(T, self.cfg.embed_dim))
        x = self.decoder(x, f["frame_mask"])
        return self.head(x) * self.cfg.mel_scale + self.cfg.mel_mean


def synthesize_mel(aligned: AlignedScore, model: SynthesisModel,
                   params: SpectrogramParams = SpectrogramParams()) -> MelSpectrogram:
    """Run the model in eval mode on one aligned score."""
    was_training = model.training
    model.eval()
    try:
        with ag.no_grad():
            out = model(synthesis_features([aligned], model.cfg)).data[0]
    finally:
        model.train(was_training)
    if not np.isfinite(out).all():
        raise FloatingPointError("synthesis model produced non-finite mel values")
    return MelSpectrogram(out.T.astype(np.float64), params)


def synthesis_loss(pred, target, mask: Optional[np.ndarray] = None):
    """Mean squared error over all log-mel cells.

    Accepts MelSpectrogram/array pairs (returns a float) or a Tensor
    prediction with an array target (returns a Tensor).
    """
    p = pred.data if isinstance(pred, MelSpectrogram) else pred
    t = target.data if isinstance(target, MelSpectrogram) else np.asarray(target)
    if tuple(p.shape) != tuple(t.shape):
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(t.shape)}")
    if isinstance(p, Tensor):
        return ag.mse(p, t, mask)
    diff = np.asarray(p, dtype=np.float64) - t
    if mask is None:
        return float(np.mean(diff**2))
    w = np.broadcast_to(mask, diff.shape).astype(np.float64)
    return float((w * diff**2).sum() / w.sum())


def with_mel_stats(cfg: SynthesisModelConfig, mels: Sequence[MelSpectrogram]) -> SynthesisModelConfig:
    """Copy of ``cfg`` normalizing the head to the mean/std of ``mels``."""
    allv = np.concatenate([m.data.reshape(-1) for m in mels])
    return replace(cfg, mel_mean=float(allv.mean()), mel_scale=float(max(allv.std(), 1e-3)))
