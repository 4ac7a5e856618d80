"""Dataset assembly, clip slicing, training loops and evaluation."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import dsp
from .alignment import (
    AlignmentModel,
    AlignmentModelConfig,
    alignment_loss,
    alignment_targets,
    note_features,
    with_output_scale,
)
from .dtw import align_recording
from .nn import autograd as ag
from .nn import checkpoint
from .nn.optim import ModelParams, TrainingError, adam_step, lr_schedule
from .score import (
    FRAME_SECONDS,
    AlignedNote,
    AlignedScore,
    Note,
    Score,
    aligned_from_dict,
    naive_align,
    parse_midi,
    parse_notes_json,
    serialize_aligned,
    serialize_score,
)
from .synthesis import (
    SynthesisModel,
    SynthesisModelConfig,
    synthesis_features,
    synthesis_loss,
    with_mel_stats,
)

log = logging.getLogger(__name__)

CLIP_FRAMES = int(5.0 / FRAME_SECONDS)  # 312


@dataclass(frozen=True)
class TrainingConfig:
    batch_size: int = 16
    dropout: float = 0.2
    warmup: Optional[int] = None  # None: 1000 for alignment, 4000 for synthesis
    anneal_steps: Tuple[int, ...] = (10000, 20000, 50000)
    anneal_rate: float = 0.5
    max_steps: int = 1000
    seed: int = 0
    clip_seconds: float = 5.0
    validation_fraction: float = 0.1
    log_every: int = 100
    checkpoint_every: int = 1000
    # stop once the evaluated training loss falls below this value
    target_loss: Optional[float] = None

    def warmup_for(self, kind: str) -> int:
        if self.warmup is not None:
            return self.warmup
        return 1000 if kind == "alignment" else 4000

    def schedule(self, kind: str, step: int, model_dim: int) -> float:
        if kind == "alignment":
            return lr_schedule(step, model_dim, self.warmup_for(kind), self.anneal_steps, self.anneal_rate)
        return lr_schedule(step, model_dim, self.warmup_for(kind))

    def to_dict(self) -> dict:
        return asdict(self)


def _parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        if "," in text:
            return [_parse_value(t) for t in text.split(",")]
        return text


def load_training_config(text: str, base: TrainingConfig = TrainingConfig()) -> TrainingConfig:
    """Parse a flat ``key = value`` file (``#`` comments) over ``base``."""
    known = {f.name for f in fields(TrainingConfig)}
    updates = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ValueError(f"config line {lineno}: unknown key '{key}'")
        updates[key] = _parse_value(value)
    if "anneal_steps" in updates:
        steps = updates["anneal_steps"]
        updates["anneal_steps"] = tuple(steps) if isinstance(steps, list) else (steps,)
    return replace(base, **updates)


# ---------------------------------------------------------------------------
# Clips


@dataclass
class Clip:
    aligned: AlignedScore
    mel: dsp.MelSpectrogram
    source: str = ""


def slice_clips(aligned: AlignedScore, mel: dsp.MelSpectrogram,
                clip_seconds: float = 5.0, source: str = "") -> List[Clip]:
    """Cut into non-overlapping fixed-length clips.

    Clips hold ``floor(clip_seconds / 0.016)`` frames; a trailing partial
    window is dropped, as are clips without notes. Notes crossing a boundary
    are truncated at it and re-based into each clip they touch.
    """
    size = int(clip_seconds / FRAME_SECONDS)
    if size < 1:
        raise ValueError("clip shorter than one frame")
    out = []
    for k in range(mel.num_frames // size):
        start, stop = k * size, (k + 1) * size
        notes = []
        for an in aligned.aligned_notes:
            s, e = max(an.onset_frames, start), min(an.end_frame, stop)
            if s < e:
                notes.append(AlignedNote(an.note, s - start, max(1, e - s)))
        if not notes:
            continue
        clip_aligned = AlignedScore(tuple(notes), num_frames=size, performer_id=aligned.performer_id)
        clip_mel = dsp.MelSpectrogram(mel.data[:, start:stop].copy(), mel.params)
        out.append(Clip(clip_aligned, clip_mel, f"{source}#{k}"))
    return out


# ---------------------------------------------------------------------------
# Synthetic corpus


_MAJOR = np.array([0, 2, 4, 5, 7, 9, 11])


def random_score(rng: np.random.Generator, num_notes: int = 24, performer_id: int = 0,
                 chord_prob: float = 0.15, tempo_range=(80.0, 140.0),
                 pitch_range=(55, 88)) -> Score:
    """Random diatonic melody with occasional two-note chords."""
    tonic = int(rng.integers(0, 12))
    scale = np.array([p for p in range(pitch_range[0], pitch_range[1] + 1)
                      if (p - tonic) % 12 in _MAJOR])
    idx = int(rng.integers(len(scale) // 4, 3 * len(scale) // 4))
    notes = []
    t = 0
    for _ in range(num_notes):
        idx = int(np.clip(idx + rng.choice([-2, -1, -1, 1, 1, 2, 3, -3]), 0, len(scale) - 1))
        dur = int(rng.choice([6, 12, 12, 18, 24, 24, 36, 48]))
        notes.append(Note(int(scale[idx]), t, dur))
        if rng.random() < chord_prob and idx >= 2:
            notes.append(Note(int(scale[idx - 2]), t, dur))
        t += dur
    tempo = float(np.round(rng.uniform(*tempo_range), 1))
    return Score(tuple(notes), tempo=tempo, performer_id=performer_id)


def performer_style(performer_id: int) -> Tuple[float, float]:
    """Deterministic (tempo factor, articulation ratio) for a performer."""
    r = np.random.default_rng(10_000 + performer_id)
    return float(r.uniform(0.9, 1.1)), float(r.uniform(0.75, 1.0))


def expressive_align(score: Score, rng: np.random.Generator, depth: float = 0.1) -> AlignedScore:
    """Ground-truth timing with a smooth random tempo curve and performer style."""
    tempo_factor, articulation = performer_style(score.performer_id)
    end_tick = max(n.onset + n.duration for n in score.notes)
    period = rng.uniform(4.0, 12.0)  # in beats
    phase = rng.uniform(0, 2 * np.pi)
    beats = np.arange(end_tick + 1) / 24.0
    local = (60.0 / (score.tempo * tempo_factor)) * (1.0 + depth * np.sin(2 * np.pi * beats / period + phase))
    seconds = np.concatenate([[0.0], np.cumsum(local[:-1] / 24.0)])

    def frame(ticks):
        return int(np.floor(seconds[ticks] / FRAME_SECONDS + 0.5))

    out = []
    for n in score.notes:
        on = frame(n.onset)
        off = frame(n.onset + n.duration)
        dur = max(1, int(round((off - on) * articulation)))
        out.append(AlignedNote(n, on, dur))
    num_frames = max(an.end_frame for an in out)
    return AlignedScore(tuple(out), num_frames=num_frames, performer_id=score.performer_id)


@dataclass
class Example:
    score: Score
    aligned: AlignedScore
    audio: Optional[dsp.AudioClip] = None
    name: str = ""

    def mel(self) -> dsp.MelSpectrogram:
        return dsp.log_mel(self.audio)


def synthetic_example(rng: np.random.Generator, num_notes: int = 24, performer_id: int = 0,
                      render: bool = True, name: str = "") -> Example:
    score = random_score(rng, num_notes=num_notes, performer_id=performer_id)
    aligned = expressive_align(score, rng)
    audio = dsp.additive_synth(aligned) if render else None
    return Example(score, aligned, audio, name)


def generate_corpus(out_dir, num_pieces: int = 20, num_notes: int = 24, num_performers: int = 4,
                    seed: int = 0) -> Path:
    """Write scores, ground-truth alignments, renders and a manifest.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    items = []
    for i in range(num_pieces):
        ex = synthetic_example(rng, num_notes=num_notes, performer_id=i % num_performers)
        stem = f"piece{i:03d}"
        (out / f"{stem}.json").write_text(serialize_score(ex.score))
        (out / f"{stem}.aligned.json").write_text(serialize_aligned(ex.aligned))
        dsp.write_wav(str(out / f"{stem}.wav"), ex.audio)
        items.append({"score": f"{stem}.json", "recording": f"{stem}.wav",
                      "alignment": f"{stem}.aligned.json", "performer_id": ex.score.performer_id})
    manifest = {"format_version": 1, "seed": seed, "items": items}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


# ---------------------------------------------------------------------------
# Manifest


@dataclass
class ManifestItem:
    score: str
    recording: Optional[str] = None
    alignment: Optional[str] = None
    performer_id: Optional[int] = None
    oracle: bool = False


@dataclass
class DatasetManifest:
    items: List[ManifestItem]
    root: Path = field(default_factory=Path)
    seed: int = 0

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        obj = json.loads(path.read_text())
        items = [ManifestItem(**it) for it in obj["items"]]
        if not items:
            raise ValueError("manifest has no items")
        return cls(items, path.parent, int(obj.get("seed", 0)))

    def _path(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def load_example(self, i: int) -> Example:
        it = self.items[i]
        spath = self._path(it.score)
        data = spath.read_bytes()
        if spath.suffix.lower() in (".mid", ".midi"):
            score = parse_midi(data)
        else:
            score = parse_notes_json(data.decode())
        if it.performer_id is not None:
            score = replace(score, performer_id=it.performer_id)
        if it.alignment:
            aligned = aligned_from_dict(json.loads(self._path(it.alignment).read_text()))
            aligned = replace(aligned, performer_id=score.performer_id)
        else:
            aligned = None
        audio = dsp.read_wav(str(self._path(it.recording))) if it.recording else None
        if audio is None:
            if not it.oracle:
                raise ValueError(f"item {i}: no recording and oracle flag not set")
            if aligned is None:
                aligned = naive_align(score)
            audio = dsp.additive_synth(aligned)
        if aligned is None:
            aligned, _, _ = align_recording(score, audio)
        return Example(score, aligned, audio, name=Path(it.score).stem)

    def examples(self) -> List[Example]:
        return [self.load_example(i) for i in range(len(self.items))]


def split_groups(group_sizes: Sequence[int], fraction: float = 0.1, seed: int = 0) -> List[bool]:
    """Assign whole groups (recordings) to validation, greedily approaching
    ``fraction`` of the total clip count in a seed-determined order."""
    total = sum(group_sizes)
    target = fraction * total
    order = np.random.default_rng(seed).permutation(len(group_sizes))
    is_val = [False] * len(group_sizes)
    count = 0
    for g in order:
        size = group_sizes[g]
        if size and abs(count + size - target) < abs(count - target):
            is_val[g] = True
            count += size
    return is_val


def split_clips(clips: Sequence[Clip], fraction: float = 0.1, seed: int = 0,
                by_recording: bool = True) -> Tuple[List[Clip], List[Clip]]:
    """Partition clips into (train, validation)."""
    if by_recording:
        sources = sorted({c.source.split("#")[0] for c in clips})
        sizes = [sum(1 for c in clips if c.source.split("#")[0] == s) for s in sources]
        val_sources = {s for s, v in zip(sources, split_groups(sizes, fraction, seed)) if v}
        val = [c for c in clips if c.source.split("#")[0] in val_sources]
        train = [c for c in clips if c.source.split("#")[0] not in val_sources]
        return train, val
    order = np.random.default_rng(seed).permutation(len(clips))
    n_val = int(round(fraction * len(clips)))
    val_idx = set(order[:n_val].tolist())
    return ([c for i, c in enumerate(clips) if i not in val_idx],
            [c for i, c in enumerate(clips) if i in val_idx])


# ---------------------------------------------------------------------------
# Checkpoints


def save_model(path, model, step: int = 0, training: Optional[TrainingConfig] = None,
               params: Optional[ModelParams] = None) -> None:
    cfg = {"model": model.cfg.to_dict(), "step": step,
           "training": training.to_dict() if training else None}
    tensors = model.state_dict()
    if params is not None:
        tensors.update(params.state())
    checkpoint.save(path, cfg, tensors)


def load_model(path, kind: Optional[str] = None):
    """Rebuild a model from a checkpoint; ``kind`` guards against mismatches."""
    cfg, tensors = checkpoint.load(path)
    model_cfg = cfg.get("model") or {}
    found = model_cfg.get("kind")
    if kind is not None and found != kind:
        raise checkpoint.CheckpointError(f"checkpoint holds a {found} model, expected {kind}")
    if found == "alignment":
        model = AlignmentModel(AlignmentModelConfig.from_dict(model_cfg))
    elif found == "synthesis":
        model = SynthesisModel(SynthesisModelConfig.from_dict(model_cfg))
    else:
        raise checkpoint.CheckpointError(f"unknown model kind {found!r}")
    model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("adam.")})
    model.eval()
    return model


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainResult:
    model: object
    metrics: List[dict]
    steps: int
    checkpoint: Optional[Path] = None


class _Logger:
    def __init__(self, path: Optional[Path]):
        self.records: List[dict] = []
        self.fh = open(path, "w") if path else None

    def __call__(self, record: dict) -> None:
        self.records.append(record)
        if self.fh:
            self.fh.write(json.dumps(record, sort_keys=True) + "\n")
            self.fh.flush()

    def close(self):
        if self.fh:
            self.fh.close()


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of index batches, reshuffled every epoch."""
    size = min(batch_size, n)
    while True:
        order = rng.permutation(n)
        for s in range(0, n - size + 1, size):
            yield order[s : s + size]


def _run(kind, model, batch_loss, eval_loss, n_train, cfg: TrainingConfig,
         out_dir: Optional[Path], eval_every: Optional[int] = None,
         stop_when: Optional[Callable[[dict], bool]] = None) -> TrainResult:
    rng = np.random.default_rng(cfg.seed + 1)
    params = ModelParams(model.parameters())
    logger = _Logger(out_dir / "metrics.jsonl" if out_dir else None)
    ckpt = out_dir / "model.ckpt" if out_dir else None
    last_good = model.state_dict()
    batches = _batches(n_train, cfg.batch_size, rng)
    eval_every = eval_every or cfg.log_every
    step = 0
    model.train()
    try:
        for step in range(1, cfg.max_steps + 1):
            idx = next(batches)
            params.zero_grad()
            loss = batch_loss(idx)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at step {step}")
            loss.backward()
            lr = cfg.schedule(kind, step, model.cfg.embed_dim)
            norm = adam_step(params, lr=lr)
            record = None
            if step % cfg.log_every == 0 or step == cfg.max_steps:
                record = {"step": step, "train_loss": value, "lr": lr, "grad_norm": norm}
            stop = False
            if step % eval_every == 0 or step == cfg.max_steps:
                record = record or {"step": step, "train_loss": value, "lr": lr, "grad_norm": norm}
                record.update(eval_loss())
                stop = cfg.target_loss is not None and record.get("eval_train_loss", np.inf) < cfg.target_loss
                stop = stop or bool(stop_when and stop_when(record))
            if record:
                logger(record)
            if ckpt and (step % cfg.checkpoint_every == 0):
                save_model(ckpt, model, step, cfg, params)
                last_good = model.state_dict()
            if stop:
                break
    except TrainingError:
        log.error("training aborted at step %d; restoring last good parameters", step)
        model.load_state_dict(last_good)
        logger.close()
        raise
    if ckpt:
        save_model(ckpt, model, step, cfg, params)
    logger.close()
    model.eval()
    return TrainResult(model, logger.records, step, ckpt)


def evaluate_alignment(model: AlignmentModel, examples: Sequence[Example]) -> Dict[str, float]:
    """MSE plus onset/duration mean absolute error of rounded predictions."""
    from .alignment import predict_alignment

    model.eval()
    on_err, dur_err = [], []
    for ex in examples:
        pred = predict_alignment(ex.score, model)
        on_err.append(np.abs(pred.onsets() - ex.aligned.onsets()))
        dur_err.append(np.abs(pred.durations() - ex.aligned.durations()))
    with ag.no_grad():
        feats = note_features([ex.score for ex in examples], model.cfg)
        raw = model(feats).data
    targets = alignment_targets([ex.aligned for ex in examples], raw.shape[1])
    mse = alignment_loss(raw.astype(np.float64), targets, feats["mask"])
    model.train()
    return {"mse": mse, "onset_mae": float(np.mean(np.concatenate(on_err))),
            "duration_mae": float(np.mean(np.concatenate(dur_err)))}


def train_alignment(examples: Sequence[Example], cfg: TrainingConfig = TrainingConfig(),
                    model_cfg: Optional[AlignmentModelConfig] = None, out_dir=None,
                    validation: Sequence[Example] = (), eval_every: Optional[int] = None,
                    stop_when: Optional[Callable[[dict], bool]] = None) -> TrainResult:
    """Fit the alignment model to (score, ground-truth alignment) pairs."""
    if not examples:
        raise ValueError("no training examples")
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    base = model_cfg or AlignmentModelConfig(dropout=cfg.dropout, seed=cfg.seed)
    mcfg = with_output_scale(base, [ex.aligned for ex in examples])
    model = AlignmentModel(mcfg)
    feats = note_features([ex.score for ex in examples], mcfg)
    targets = alignment_targets([ex.aligned for ex in examples], feats["pitch"].shape[1])

    def batch_loss(idx):
        sub = {k: v[idx] for k, v in feats.items()}
        # trim padding to the longest score in the batch
        n = int((~sub["mask"]).sum(1).max())
        sub = {k: (v[:, :n] if v.ndim >= 2 and k != "performer" and k != "tempo" else v) for k, v in sub.items()}
        pred = model(sub)
        return alignment_loss(pred, targets[idx][:, :n].astype(pred.data.dtype), sub["mask"])

    def eval_loss():
        out = {}
        m = evaluate_alignment(model, examples)
        out.update({"eval_train_loss": m["mse"], "onset_mae": m["onset_mae"],
                    "duration_mae": m["duration_mae"]})
        if validation:
            out["val_loss"] = evaluate_alignment(model, validation)["mse"]
        return out

    return _run("alignment", model, batch_loss, eval_loss, len(examples), cfg, out_dir, eval_every, stop_when)


def evaluate_mse(model: SynthesisModel, clips: Sequence[Clip]) -> float:
    """Mean log-mel MSE over clips, eval mode."""
    if not clips:
        raise ValueError("no clips to evaluate")
    was = model.training
    model.eval()
    losses = []
    with ag.no_grad():
        for c in clips:
            f = synthesis_features([c.aligned], model.cfg, T=c.mel.num_frames)
            pred = model(f).data[0].T
            losses.append(synthesis_loss(pred.astype(np.float64), c.mel.data))
    model.train(was)
    return float(np.mean(losses))


def train_synthesis(clips: Sequence[Clip], cfg: TrainingConfig = TrainingConfig(),
                    model_cfg: Optional[SynthesisModelConfig] = None, out_dir=None,
                    validation: Sequence[Clip] = (), eval_every: Optional[int] = None,
                    stop_when: Optional[Callable[[dict], bool]] = None) -> TrainResult:
    """Fit the synthesis model to (aligned clip, log-mel) pairs."""
    if not clips:
        raise ValueError("no training clips")
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    base = model_cfg or SynthesisModelConfig(dropout=cfg.dropout, seed=cfg.seed)
    mcfg = with_mel_stats(base, [c.mel for c in clips])
    model = SynthesisModel(mcfg)
    T = max(c.mel.num_frames for c in clips)
    feats = synthesis_features([c.aligned for c in clips], mcfg, T=T)
    targets = np.zeros((len(clips), T, mcfg.mel_bands))
    for b, c in enumerate(clips):
        targets[b, : c.mel.num_frames] = c.mel.data.T
    frame_valid = ~feats["frame_mask"]

    def batch_loss(idx):
        sub = {k: (v[idx] if isinstance(v, np.ndarray) and k != "performer" else v) for k, v in feats.items()}
        sub["performer"] = feats["performer"][idx]
        pred = model(sub)
        return synthesis_loss(pred, targets[idx].astype(pred.data.dtype), frame_valid[idx][..., None])

    def eval_loss():
        out = {"eval_train_loss": evaluate_mse(model, clips)}
        if validation:
            out["val_loss"] = evaluate_mse(model, validation)
        return out

    return _run("synthesis", model, batch_loss, eval_loss, len(clips), cfg, out_dir, eval_every, stop_when)


def format_mse_table(results: Dict[str, Dict[str, float]]) -> str:
    """Rows are model variants, columns datasets/splits."""
    columns = sorted({c for row in results.values() for c in row})
    width = max([len(r) for r in results] + [7])
    lines = [" " * width + "".join(f"  {c:>10}" for c in columns)]
    for name, row in results.items():
        cells = "".join(f"  {row[c]:>10.3f}" if c in row else f"  {'-':>10}" for c in columns)
        lines.append(f"{name:<{width}}{cells}")
    return "\n".join(lines)


ABLATIONS = {
    "proposed": {},
    "no_npe": {"use_npe": False},
    "no_performer": {"use_performer_embedding": False},
    "no_encoder": {"use_encoder": False},
}


def load_clips(manifest: DatasetManifest, clip_seconds: float = 5.0) -> List[Clip]:
    clips = []
    for i in range(len(manifest.items)):
        ex = manifest.load_example(i)
        clips.extend(slice_clips(ex.aligned, ex.mel(), clip_seconds, source=ex.name or str(i)))
    return clips
