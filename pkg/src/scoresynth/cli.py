"""Command-line entry point: ``python -m scoresynth <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical error. Any
failure prints exactly one line ``scoresynth: error kind=<kind> code=<n>:
<reason>`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from . import dsp
from .nn.checkpoint import CheckpointError
from .nn.optim import TrainingError
from .score import MidiParseError, ScoreError, naive_align, parse_aligned_json, parse_midi, parse_notes_json

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", required=True, help="dataset manifest JSON")
    p.add_argument("--out-dir", required=True, help="directory for model.ckpt and metrics.jsonl")
    p.add_argument("--config", help="flat key = value file of training settings")
    p.add_argument("--steps", type=int, help="maximum training steps (overrides config)")
    p.add_argument("--batch-size", type=int, help="clips or scores per step (overrides config)")
    p.add_argument("--warmup", type=int, help="learning-rate warmup steps (overrides config)")
    p.add_argument("--dropout", type=float, help="dropout rate (overrides config)")
    p.add_argument("--log-every", type=int, help="steps between metric records (overrides config)")
    p.add_argument("--validation-fraction", type=float, help="held-out share of clips (overrides config)")
    p.add_argument("--target-loss", type=float, help="stop once training-set loss falls below this")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="scoresynth", description="Score-to-audio synthesis pipeline.")
    parser.add_argument("--seed", type=int, help="single source of randomness (default 0, or the config file's)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("gen-corpus", help="write a synthetic rendered corpus and manifest")
    p.add_argument("--out-dir", required=True, help="output directory")
    p.add_argument("--pieces", type=int, default=20, help="number of pieces (default 20)")
    p.add_argument("--notes", type=int, default=24, help="melody notes per piece (default 24)")
    p.add_argument("--performers", type=int, default=4, help="distinct performer ids (default 4)")

    p = sub.add_parser("align-dataset", help="DTW-align a score to a recording")
    p.add_argument("--score", required=True, help="score JSON or MIDI file")
    p.add_argument("--audio", required=True, help="recording WAV")
    p.add_argument("--out", required=True, help="aligned score JSON to write")
    p.add_argument("--band", type=int, help="Sakoe-Chiba band half-width in frames")

    p = sub.add_parser("train-alignment", help="train the expressive-timing model")
    _training_flags(p)

    p = sub.add_parser("train-synthesis", help="train the mel synthesis model")
    _training_flags(p)
    p.add_argument("--no-npe", action="store_true", help="ablation: drop note-wise positional modulation")
    p.add_argument("--no-performer", action="store_true", help="ablation: drop the performer embedding")
    p.add_argument("--no-encoder", action="store_true", help="ablation: replace the encoder with rolls")

    p = sub.add_parser("predict-alignment", help="predict performed timing for a score")
    p.add_argument("--score", required=True, help="score JSON or MIDI file")
    p.add_argument("--ckpt", required=True, help="alignment model checkpoint")
    p.add_argument("--out", required=True, help="aligned score JSON to write")
    p.add_argument("--performer", type=int, help="override the score's performer id")

    p = sub.add_parser("synth", help="score to WAV: timing, mel synthesis, Griffin-Lim")
    p.add_argument("--score", required=True, help="score JSON or MIDI file")
    p.add_argument("--ckpt", required=True, help="synthesis model checkpoint")
    p.add_argument("--out", required=True, help="WAV file to write (16 kHz mono)")
    p.add_argument("--alignment-ckpt", help="alignment model checkpoint; without it, constant-tempo timing is used")
    p.add_argument("--use-ground-truth-alignment", metavar="ALIGNED_JSON",
                   help="skip timing prediction and use this aligned score")
    p.add_argument("--performer", type=int, help="override the score's performer id")
    p.add_argument("--iterations", type=int, default=60, help="Griffin-Lim iterations (default 60)")
    p.add_argument("--mel-out", help="also write the predicted mel spectrogram")

    p = sub.add_parser("invert", help="mel spectrogram file to WAV via Griffin-Lim")
    p.add_argument("--mel", required=True, help="mel spectrogram file")
    p.add_argument("--out", required=True, help="WAV file to write")
    p.add_argument("--iterations", type=int, default=60, help="Griffin-Lim iterations (default 60)")

    p = sub.add_parser("evaluate", help="log-mel MSE table for synthesis checkpoints")
    p.add_argument("--manifest", required=True, help="dataset manifest JSON")
    p.add_argument("--ckpt", required=True, action="append", metavar="NAME=PATH",
                   help="checkpoint to evaluate, repeatable; NAME labels the table row")
    p.add_argument("--split", choices=["train", "validation", "all"], default="validation",
                   help="which clips to score (default validation)")
    p.add_argument("--validation-fraction", type=float, default=0.1, help="held-out share (default 0.1)")
    p.add_argument("--out", help="also write the results as JSON")

    p = sub.add_parser("gradcheck", help="finite-difference gradient check; exit 0 iff error < 1e-4")
    p.add_argument("--model", choices=["alignment", "synthesis", "layers"], required=True,
                   help="which network to check")
    return parser


def _load_score(path: str):
    p = Path(path)
    if p.suffix.lower() in (".mid", ".midi"):
        return parse_midi(p.read_bytes())
    return parse_notes_json(p.read_text())


def _training_config(args):
    from .training import TrainingConfig, load_training_config

    cfg = TrainingConfig()
    if args.config:
        cfg = load_training_config(Path(args.config).read_text(), cfg)
    overrides = {
        "seed": args.seed,
        "max_steps": args.steps, "batch_size": args.batch_size, "warmup": args.warmup,
        "dropout": args.dropout, "log_every": args.log_every,
        "validation_fraction": args.validation_fraction, "target_loss": args.target_loss,
    }
    return replace(cfg, **{k: v for k, v in overrides.items() if v is not None})


def cmd_gen_corpus(args) -> None:
    from .training import generate_corpus

    path = generate_corpus(args.out_dir, args.pieces, args.notes, args.performers, seed=args.seed)
    print(path)


def cmd_align_dataset(args) -> None:
    from .dtw import align_recording, path_cost
    from .score import serialize_aligned

    aligned, path, cost = align_recording(_load_score(args.score), dsp.read_wav(args.audio), band=args.band)
    Path(args.out).write_text(serialize_aligned(aligned))
    print(f"dtw_cost={path_cost(cost, path):.6f}")


def cmd_train_alignment(args) -> None:
    from .alignment import AlignmentModelConfig
    from .training import DatasetManifest, split_groups, train_alignment

    cfg = _training_config(args)
    manifest = DatasetManifest.load(args.manifest)
    examples = manifest.examples()
    is_val = split_groups([1] * len(examples), cfg.validation_fraction, cfg.seed) if len(examples) > 1 else [False]
    train = [e for e, v in zip(examples, is_val) if not v]
    val = [e for e, v in zip(examples, is_val) if v]
    res = train_alignment(train, cfg, AlignmentModelConfig(dropout=cfg.dropout, seed=cfg.seed),
                          out_dir=args.out_dir, validation=val)
    print(res.checkpoint)


def cmd_train_synthesis(args) -> None:
    from .synthesis import SynthesisModelConfig
    from .training import DatasetManifest, load_clips, split_clips, train_synthesis

    cfg = _training_config(args)
    clips = load_clips(DatasetManifest.load(args.manifest), cfg.clip_seconds)
    if not clips:
        raise ValueError("manifest yields no clips (recordings shorter than one clip?)")
    train, val = split_clips(clips, cfg.validation_fraction, cfg.seed) if len(clips) > 1 else (clips, [])
    if not train:
        train, val = clips, []
    mcfg = SynthesisModelConfig(dropout=cfg.dropout, seed=cfg.seed, use_npe=not args.no_npe,
                                use_performer_embedding=not args.no_performer,
                                use_encoder=not args.no_encoder)
    res = train_synthesis(train, cfg, mcfg, out_dir=args.out_dir, validation=val)
    print(res.checkpoint)


def _predict(args, score):
    from .alignment import predict_alignment
    from .training import load_model

    return predict_alignment(score, load_model(args.ckpt if args.command == "predict-alignment"
                                               else args.alignment_ckpt, kind="alignment"))


def cmd_predict_alignment(args) -> None:
    from .score import serialize_aligned

    score = _load_score(args.score)
    if args.performer is not None:
        score = replace(score, performer_id=args.performer)
    Path(args.out).write_text(serialize_aligned(_predict(args, score)))


def cmd_synth(args) -> None:
    from .synthesis import synthesize_mel
    from .training import load_model

    score = _load_score(args.score)
    if args.performer is not None:
        score = replace(score, performer_id=args.performer)
    if args.use_ground_truth_alignment:
        aligned = parse_aligned_json(Path(args.use_ground_truth_alignment).read_text())
    elif args.alignment_ckpt:
        aligned = _predict(args, score)
    else:
        logging.getLogger(__name__).warning("no alignment checkpoint; using constant-tempo timing")
        aligned = naive_align(score)
    if args.performer is not None:
        aligned = replace(aligned, performer_id=args.performer)
    model = load_model(args.ckpt, kind="synthesis")
    mel = synthesize_mel(aligned, model)
    if args.mel_out:
        Path(args.mel_out).write_bytes(dsp.mel_to_bytes(mel))
    audio = dsp.griffin_lim(mel, iterations=args.iterations, seed=args.seed)
    dsp.write_wav(args.out, audio)


def cmd_invert(args) -> None:
    mel = dsp.mel_from_bytes(Path(args.mel).read_bytes())
    dsp.write_wav(args.out, dsp.griffin_lim(mel, iterations=args.iterations, seed=args.seed))


def cmd_evaluate(args) -> None:
    from .training import DatasetManifest, evaluate_mse, format_mse_table, load_clips, load_model, split_clips

    clips = load_clips(DatasetManifest.load(args.manifest))
    train, val = split_clips(clips, args.validation_fraction, args.seed)
    chosen = {"train": train, "validation": val, "all": clips}[args.split]
    if not chosen:
        raise ValueError(f"the {args.split} split is empty")
    column = Path(args.manifest).parent.name or "dataset"
    results = {}
    for spec in args.ckpt:
        name, _, path = spec.rpartition("=")
        name = name or Path(path).stem
        results[name] = {column: evaluate_mse(load_model(path, kind="synthesis"), chosen)}
    print(format_mse_table(results))
    if args.out:
        Path(args.out).write_text(json.dumps(results, indent=1, sort_keys=True))


def cmd_gradcheck(args) -> int:
    from .verify import model_grad_check

    err = model_grad_check(args.model, seed=args.seed)
    print(f"max_relative_error={err:.3e}")
    return 0 if err < 1e-4 else EXIT_NUMERIC


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "align-dataset": cmd_align_dataset,
    "train-alignment": cmd_train_alignment,
    "train-synthesis": cmd_train_synthesis,
    "predict-alignment": cmd_predict_alignment,
    "synth": cmd_synth,
    "invert": cmd_invert,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
}


def _fail(kind: str, code: int, err) -> int:
    reason = " ".join(str(err).split()) or type(err).__name__
    print(f"scoresynth: error kind={kind} code={code}: {reason}", file=sys.stderr)
    return code


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand")
    except UsageError as e:
        return _fail("usage", EXIT_USAGE, e)
    except SystemExit as e:  # --help
        return int(e.code or 0)
    if args.seed is None and args.command not in ("train-alignment", "train-synthesis"):
        args.seed = 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        code = COMMANDS[args.command](args)
    except (TrainingError, FloatingPointError) as e:
        return _fail("numerical", EXIT_NUMERIC, e)
    except (ScoreError, MidiParseError, CheckpointError, dsp.DSPError, OSError, ValueError, KeyError) as e:
        return _fail("data", EXIT_DATA, e)
    return int(code or 0)


def main() -> None:
    sys.exit(run())
