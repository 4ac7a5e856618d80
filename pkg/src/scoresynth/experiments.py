"""Small end-to-end experiments shared by the acceptance tests and demos.

Each returns plain numbers so callers can print or assert on them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import dsp
from .alignment import AlignmentModelConfig
from .dtw import align_recording
from .score import make_aligned, naive_align
from .synthesis import SynthesisModelConfig
from .training import (
    TrainingConfig,
    evaluate_alignment,
    random_score,
    slice_clips,
    synthetic_example,
    train_alignment,
    train_synthesis,
)


def stretch_recovery(seed: int = 0, pieces: int = 5, num_notes: int = 24, factor: int = 2,
                     tolerance: int = 2) -> Dict[str, float]:
    """Render scores at constant tempo, stretch every onset and duration by
    ``factor``, re-render, and recover the stretched timing by DTW.

    Returns the share of notes whose onset and duration both land within
    ``tolerance`` frames, plus the worst errors.
    """
    rng = np.random.default_rng(seed)
    hits = total = 0
    worst_on = worst_dur = 0
    for _ in range(pieces):
        score = random_score(rng, num_notes=num_notes)
        base = naive_align(score)
        truth = make_aligned(score.notes, base.onsets() * factor, base.durations() * factor,
                             performer_id=score.performer_id)
        aligned, _, _ = align_recording(score, dsp.additive_synth(truth))
        on = np.abs(aligned.onsets() - truth.onsets())
        dur = np.abs(aligned.durations() - truth.durations())
        hits += int(((on <= tolerance) & (dur <= tolerance)).sum())
        total += len(score.notes)
        worst_on, worst_dur = max(worst_on, int(on.max())), max(worst_dur, int(dur.max()))
    return {"fraction": hits / total, "notes": total, "max_onset_error": worst_on,
            "max_duration_error": worst_dur}


@dataclass
class OverfitResult:
    steps: int
    metrics: Dict[str, float]
    history: List[dict] = field(default_factory=list)


def overfit_alignment(seed: int = 0, pairs: int = 10, num_notes: int = 24, max_steps: int = 3000,
                      onset_mae: float = 1.5, duration_mae: float = 2.0, eval_every: int = 250,
                      residual: bool = True, dropout: float = 0.2, warmup: Optional[int] = None) -> OverfitResult:
    """Fit the alignment model to ``pairs`` synthetic score/alignment pairs and
    stop once both training-set MAE thresholds are met."""
    rng = np.random.default_rng(seed)
    examples = [synthetic_example(rng, num_notes=num_notes, performer_id=i % 4, render=False)
                for i in range(pairs)]
    cfg = TrainingConfig(batch_size=pairs, max_steps=max_steps, warmup=warmup, dropout=dropout,
                         seed=seed, log_every=eval_every)
    mcfg = AlignmentModelConfig(dropout=dropout, seed=seed, residual=residual)

    def done(rec):
        return rec.get("onset_mae", np.inf) < onset_mae and rec.get("duration_mae", np.inf) < duration_mae

    res = train_alignment(examples, cfg, mcfg, eval_every=eval_every, stop_when=done)
    return OverfitResult(res.steps, evaluate_alignment(res.model, examples), res.metrics)


def oracle_clip(seed: int = 0, num_notes: int = 48, performer_id: int = 1):
    """First 5-second clip of an additive-synth rendering of a random score."""
    ex = synthetic_example(np.random.default_rng(seed), num_notes=num_notes, performer_id=performer_id)
    clips = slice_clips(ex.aligned, ex.mel(), source="oracle")
    if not clips:
        raise ValueError("rendering shorter than one clip; raise num_notes")
    return clips[0]


def overfit_synthesis(seed: int = 0, max_steps: int = 5000, target: float = 0.1, eval_every: int = 50,
                      warmup: Optional[int] = None, dropout: float = 0.2, clip=None,
                      ablation: Optional[Dict[str, bool]] = None) -> Dict[str, OverfitResult]:
    """Train the full synthesis model on one clip until its MSE < ``target``,
    then train ``ablation`` (default: no encoder) for the same step count."""
    clip = clip or oracle_clip(seed)
    ablation = {"use_encoder": False} if ablation is None else ablation
    cfg = TrainingConfig(batch_size=1, max_steps=max_steps, warmup=warmup, dropout=dropout, seed=seed,
                         log_every=eval_every, target_loss=target)
    full = train_synthesis([clip], cfg, SynthesisModelConfig(dropout=dropout, seed=seed), eval_every=eval_every)
    out = {"full": OverfitResult(full.steps, {"mse": full.metrics[-1]["eval_train_loss"]}, full.metrics)}
    cfg = TrainingConfig(batch_size=1, max_steps=full.steps, warmup=warmup, dropout=dropout, seed=seed,
                         log_every=eval_every)
    abl = train_synthesis([clip], cfg, SynthesisModelConfig(dropout=dropout, seed=seed, **ablation),
                          eval_every=eval_every)
    out["ablation"] = OverfitResult(abl.steps, {"mse": abl.metrics[-1]["eval_train_loss"]}, abl.metrics)
    return out


def smoothed(values, window: int = 3) -> np.ndarray:
    """Trailing moving average; the first ``window - 1`` entries average
    what is available."""
    v = np.asarray(values, dtype=float)
    c = np.cumsum(np.concatenate([[0.0], v]))
    idx = np.arange(1, v.size + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


def inversion_sanity(freq: float = 440.0, seconds: float = 1.0, iterations: int = 60,
                     seed: int = 0) -> Dict[str, object]:
    """Griffin-Lim on the log-mel of a pure tone: peak bin and the
    mel-consistency error after every iteration."""
    t = np.arange(int(dsp.SAMPLE_RATE * seconds)) / dsp.SAMPLE_RATE
    mel = dsp.log_mel(dsp.AudioClip(0.5 * np.sin(2 * np.pi * freq * t)))
    history: List[float] = []
    y = dsp.griffin_lim(mel, iterations=iterations, seed=seed, history=history)
    mag = np.abs(dsp.stft(y)).sum(axis=0)
    expected = freq * dsp.SpectrogramParams().filter_length / dsp.SAMPLE_RATE
    return {"peak_bin": int(np.argmax(mag)), "expected_bin": expected, "history": history}
