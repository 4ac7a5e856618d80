"""Symbolic score containers, parsers and roll encodings.

Scores live in metric time (24 ticks per quarter note); aligned scores live in
spectrogram frames (256 samples at 16 kHz, i.e. 16 ms per frame).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

RESOLUTION = 24
SAMPLE_RATE = 16000
HOP_LENGTH = 256
FRAME_SECONDS = HOP_LENGTH / SAMPLE_RATE
FORMAT_VERSION = 1
DEFAULT_TEMPO = 120.0


class ScoreError(ValueError):
    """Raised when a score or aligned score violates its invariants."""


class MidiParseError(ScoreError):
    """Malformed standard MIDI file; ``offset`` is the byte offset of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Note:
    pitch: int
    onset: int
    duration: int
    velocity: Optional[int] = None

    def __post_init__(self):
        _check_note(self.pitch, self.onset, self.duration, self.velocity)


def _check_note(pitch, onset, duration, velocity, index=None):
    where = "" if index is None else f"note {index}: "
    if not 0 <= pitch <= 127:
        raise ScoreError(f"{where}pitch must be in [0, 127], got {pitch}")
    if onset < 0:
        raise ScoreError(f"{where}onset must be ≥ 0, got {onset}")
    if duration < 1:
        raise ScoreError(f"{where}duration must be ≥ 1, got {duration}")
    if velocity is not None and not 1 <= velocity <= 127:
        raise ScoreError(f"{where}velocity must be in [1, 127], got {velocity}")


def _sort_key(note: Note):
    return (note.onset, note.pitch, note.duration, note.velocity or 0)


@dataclass(frozen=True)
class Score:
    notes: Tuple[Note, ...]
    tempo: float = DEFAULT_TEMPO
    performer_id: int = 0
    resolution: int = RESOLUTION

    def __post_init__(self):
        object.__setattr__(self, "notes", tuple(sorted(self.notes, key=_sort_key)))
        if self.resolution != RESOLUTION:
            raise ScoreError(f"resolution must be {RESOLUTION}, got {self.resolution}")
        if not (self.tempo > 0 and np.isfinite(self.tempo)):
            raise ScoreError(f"tempo must be positive, got {self.tempo}")
        if self.performer_id < 0:
            raise ScoreError(f"performer_id must be ≥ 0, got {self.performer_id}")

    @property
    def has_velocity(self) -> bool:
        return any(n.velocity is not None for n in self.notes)


@dataclass(frozen=True)
class AlignedNote:
    note: Note
    onset_frames: int
    duration_frames: int

    def __post_init__(self):
        if self.onset_frames < 0:
            raise ScoreError(f"onset_frames must be ≥ 0, got {self.onset_frames}")
        if self.duration_frames < 1:
            raise ScoreError(f"duration_frames must be ≥ 1, got {self.duration_frames}")

    @property
    def end_frame(self) -> int:
        return self.onset_frames + self.duration_frames


@dataclass(frozen=True)
class AlignedScore:
    aligned_notes: Tuple[AlignedNote, ...]
    num_frames: int
    performer_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "aligned_notes", tuple(self.aligned_notes))
        for i, an in enumerate(self.aligned_notes):
            if an.end_frame > self.num_frames:
                raise ScoreError(
                    f"note {i} ends at frame {an.end_frame} beyond num_frames={self.num_frames}"
                )

    def __len__(self):
        return len(self.aligned_notes)

    def onsets(self) -> np.ndarray:
        return np.array([an.onset_frames for an in self.aligned_notes], dtype=np.int64)

    def durations(self) -> np.ndarray:
        return np.array([an.duration_frames for an in self.aligned_notes], dtype=np.int64)

    def pitches(self) -> np.ndarray:
        return np.array([an.note.pitch for an in self.aligned_notes], dtype=np.int64)


# ---------------------------------------------------------------------------
# JSON interchange


def score_to_dict(score: Score) -> dict:
    notes = []
    for n in score.notes:
        d = {"pitch": n.pitch, "onset": n.onset, "duration": n.duration}
        if n.velocity is not None:
            d["velocity"] = n.velocity
        notes.append(d)
    return {
        "format_version": FORMAT_VERSION,
        "tempo": score.tempo,
        "performer_id": score.performer_id,
        "notes": notes,
    }


def serialize_score(score: Score) -> str:
    return json.dumps(score_to_dict(score), indent=1)


def _require(obj, key, where):
    if key not in obj:
        raise ScoreError(f"{where}missing key '{key}'")
    return obj[key]


def _as_int(value, name, where):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
        raise ScoreError(f"{where}{name} must be an integer, got {value!r}")
    return int(value)


def score_from_dict(obj: dict) -> Score:
    if not isinstance(obj, dict):
        raise ScoreError("score JSON must be an object")
    version = obj.get("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise ScoreError(f"unsupported format_version {version}")
    tempo = _require(obj, "tempo", "")
    performer_id = _require(obj, "performer_id", "")
    raw_notes = _require(obj, "notes", "")
    notes = []
    for i, raw in enumerate(raw_notes):
        where = f"note {i}: "
        pitch = _as_int(_require(raw, "pitch", where), "pitch", where)
        onset = _as_int(_require(raw, "onset", where), "onset", where)
        duration = _as_int(_require(raw, "duration", where), "duration", where)
        velocity = raw.get("velocity")
        if velocity is not None:
            velocity = _as_int(velocity, "velocity", where)
        _check_note(pitch, onset, duration, velocity, index=i)
        notes.append(Note(onset=onset, pitch=pitch, duration=duration, velocity=velocity))
    return Score(
        notes=tuple(notes),
        tempo=float(tempo),
        performer_id=_as_int(performer_id, "performer_id", ""),
    )


def parse_notes_json(text: str) -> Score:
    """Parse the canonical notes JSON into a validated, sorted :class:`Score`."""
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScoreError(f"invalid JSON: {exc}") from exc
    return score_from_dict(obj)


def aligned_to_dict(aligned: AlignedScore) -> dict:
    notes = []
    for an in aligned.aligned_notes:
        d = {
            "pitch": an.note.pitch,
            "onset": an.note.onset,
            "duration": an.note.duration,
            "onset_frames": an.onset_frames,
            "duration_frames": an.duration_frames,
        }
        if an.note.velocity is not None:
            d["velocity"] = an.note.velocity
        notes.append(d)
    return {
        "format_version": FORMAT_VERSION,
        "num_frames": aligned.num_frames,
        "performer_id": aligned.performer_id,
        "notes": notes,
    }


def serialize_aligned(aligned: AlignedScore) -> str:
    return json.dumps(aligned_to_dict(aligned), indent=1)


def aligned_from_dict(obj: dict) -> AlignedScore:
    if obj.get("format_version", FORMAT_VERSION) != FORMAT_VERSION:
        raise ScoreError(f"unsupported format_version {obj.get('format_version')}")
    out = []
    for i, raw in enumerate(_require(obj, "notes", "")):
        where = f"note {i}: "
        note = Note(
            onset=_as_int(_require(raw, "onset", where), "onset", where),
            pitch=_as_int(_require(raw, "pitch", where), "pitch", where),
            duration=_as_int(_require(raw, "duration", where), "duration", where),
            velocity=raw.get("velocity"),
        )
        out.append(
            AlignedNote(
                note,
                _as_int(_require(raw, "onset_frames", where), "onset_frames", where),
                _as_int(_require(raw, "duration_frames", where), "duration_frames", where),
            )
        )
    return AlignedScore(
        tuple(out),
        num_frames=_as_int(_require(obj, "num_frames", ""), "num_frames", ""),
        performer_id=_as_int(obj.get("performer_id", 0), "performer_id", ""),
    )


def parse_aligned_json(text: str) -> AlignedScore:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScoreError(f"invalid JSON: {exc}") from exc
    return aligned_from_dict(obj)


# ---------------------------------------------------------------------------
# Standard MIDI files


def _quantize(ticks: int, division: int) -> int:
    # round half up
    return int(np.floor(ticks * RESOLUTION / division + 0.5))


class _Reader:
    def __init__(self, data: bytes, pos: int = 0):
        self.data = data
        self.pos = pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise MidiParseError("unexpected end of data", self.pos)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def byte(self) -> int:
        return self.take(1)[0]

    def varlen(self) -> int:
        value = 0
        for _ in range(4):
            b = self.byte()
            value = (value << 7) | (b & 0x7F)
            if not b & 0x80:
                return value
        raise MidiParseError("variable-length quantity longer than 4 bytes", self.pos)


def _read_track(data: bytes, start: int, end: int):
    """Yield (abs_tick, kind, payload) events of one MTrk chunk body."""
    r = _Reader(data[:end], start)
    tick = 0
    status = None
    while r.pos < end:
        tick += r.varlen()
        event_pos = r.pos
        b = r.byte()
        if b == 0xFF:
            meta = r.byte()
            body = r.take(r.varlen())
            if meta == 0x51:
                if len(body) != 3:
                    raise MidiParseError("tempo meta event must have 3 bytes", event_pos)
                yield tick, "tempo", int.from_bytes(body, "big")
            elif meta == 0x2F:
                yield tick, "end", None
                return
            continue
        if b in (0xF0, 0xF7):
            r.take(r.varlen())
            continue
        if b & 0x80:
            status = b
            d1 = r.byte()
        else:
            if status is None:
                raise MidiParseError("running status without prior status byte", event_pos)
            d1 = b
        kind = status & 0xF0
        if kind in (0xC0, 0xD0):
            continue
        d2 = r.byte()
        if kind == 0x90 and d2 > 0:
            yield tick, "on", (status & 0x0F, d1, d2)
        elif kind == 0x80 or kind == 0x90:
            yield tick, "off", (status & 0x0F, d1, d2)
        elif kind not in (0xA0, 0xB0, 0xE0):
            raise MidiParseError(f"unknown status byte 0x{status:02X}", event_pos)
    yield tick, "end", None


def parse_midi(data: bytes, performer_id: int = 0) -> Score:
    """Parse a type 0/1 standard MIDI file into a :class:`Score`.

    Notes are quantized to 24 ticks per quarter (half-up rounding; zero-length
    results become 1 tick). The first tempo event sets the tempo. A note-on
    with no matching note-off is closed at the end of its track.
    """
    if len(data) < 14 or data[:4] != b"MThd":
        raise MidiParseError("missing MThd header", 0)
    hlen = struct.unpack(">I", data[4:8])[0]
    if hlen < 6:
        raise MidiParseError("header chunk too short", 4)
    fmt, ntracks, division = struct.unpack(">HHH", data[8:14])
    if fmt not in (0, 1):
        raise MidiParseError(f"unsupported SMF format {fmt}", 8)
    if division & 0x8000:
        raise MidiParseError("SMPTE time division is not supported", 12)
    if division == 0:
        raise MidiParseError("time division must be positive", 12)

    pos = 8 + hlen
    tempo = None
    notes = []
    for _ in range(ntracks):
        if pos + 8 > len(data):
            raise MidiParseError("missing track chunk", pos)
        if data[pos : pos + 4] != b"MTrk":
            raise MidiParseError("expected MTrk chunk", pos)
        length = struct.unpack(">I", data[pos + 4 : pos + 8])[0]
        body_start, body_end = pos + 8, pos + 8 + length
        if body_end > len(data):
            raise MidiParseError("track chunk overruns file", pos + 4)
        active = {}
        last_tick = 0
        for tick, kind, payload in _read_track(data, body_start, body_end):
            last_tick = tick
            if kind == "tempo":
                if tempo is None:
                    tempo = 60e6 / payload
            elif kind == "on":
                ch, pitch, vel = payload
                active.setdefault((ch, pitch), []).append((tick, vel))
            elif kind == "off":
                ch, pitch, _ = payload
                stack = active.get((ch, pitch))
                if stack:
                    start, vel = stack.pop(0)
                    notes.append((start, tick, pitch, vel))
        for (ch, pitch), stack in active.items():
            for start, vel in stack:
                notes.append((start, last_tick, pitch, vel))
        pos = body_end

    if not notes:
        raise ScoreError("MIDI file contains no note events")
    out = []
    for start, stop, pitch, vel in notes:
        onset = _quantize(start, division)
        duration = max(1, _quantize(stop, division) - onset)
        out.append(Note(onset=onset, pitch=pitch, duration=duration, velocity=vel))
    return Score(tuple(out), tempo=tempo or DEFAULT_TEMPO, performer_id=performer_id)


def _varlen_bytes(value: int) -> bytes:
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    return bytes(reversed(out))


def write_midi(score: Score) -> bytes:
    """Encode a score as a type 0 SMF at 24 ticks per quarter."""
    events = []
    for n in score.notes:
        vel = n.velocity or 100
        events.append((n.onset + n.duration, 0, bytes([0x80, n.pitch, 0])))
        events.append((n.onset, 1, bytes([0x90, n.pitch, vel])))
    events.sort(key=lambda e: (e[0], e[1]))
    usec = int(round(60e6 / score.tempo))
    track = bytearray(b"\x00\xff\x51\x03" + usec.to_bytes(3, "big"))
    tick = 0
    for t, _, msg in events:
        track += _varlen_bytes(t - tick) + msg
        tick = t
    track += b"\x00\xff\x2f\x00"
    header = b"MThd" + struct.pack(">IHHH", 6, 0, 1, RESOLUTION)
    return header + b"MTrk" + struct.pack(">I", len(track)) + bytes(track)


# ---------------------------------------------------------------------------
# Timing and rolls


def ticks_to_frames(ticks, tempo: float) -> np.ndarray:
    seconds = np.asarray(ticks, dtype=np.float64) * (60.0 / tempo / RESOLUTION)
    return np.floor(seconds / FRAME_SECONDS + 0.5).astype(np.int64)


def naive_align(score: Score) -> AlignedScore:
    """Constant-tempo alignment: ticks → seconds → 16 ms frames."""
    out = []
    for n in score.notes:
        onset = int(ticks_to_frames(n.onset, score.tempo))
        dur = max(1, int(ticks_to_frames(n.duration, score.tempo)))
        out.append(AlignedNote(n, onset, dur))
    num_frames = max((an.end_frame for an in out), default=0)
    return AlignedScore(tuple(out), num_frames=num_frames, performer_id=score.performer_id)


def note_positions(duration: int) -> np.ndarray:
    """Relative positions 0→1 across a note of ``duration`` frames."""
    if duration == 1:
        return np.zeros(1)
    return np.arange(duration) / (duration - 1)


def build_rolls(aligned: AlignedScore, use_velocity: Optional[bool] = None):
    """Return ``(piano_roll, position_roll)``, each 128 × num_frames.

    The position roll falls linearly from 1 at a note's first frame to 0 at
    its last. A later note overwrites an earlier one on the same pitch.
    """
    T = aligned.num_frames
    piano = np.zeros((128, T))
    position = np.zeros((128, T))
    if use_velocity is None:
        use_velocity = any(an.note.velocity is not None for an in aligned.aligned_notes)
    for an in aligned.aligned_notes:
        s, e = an.onset_frames, an.end_frame
        vel = an.note.velocity
        piano[an.note.pitch, s:e] = vel / 127.0 if (use_velocity and vel) else 1.0
        position[an.note.pitch, s:e] = 1.0 - note_positions(an.duration_frames)
    return piano, position


def clip_index(values, limit: int, mode: str = "saturate") -> np.ndarray:
    """Clip embedding indices to ``[0, limit)``; ``mode='error'`` raises instead."""
    values = np.asarray(values, dtype=np.int64)
    if mode == "error":
        bad = np.flatnonzero((values < 0) | (values >= limit))
        if bad.size:
            raise ScoreError(f"value {values[bad[0]]} at index {bad[0]} outside [0, {limit})")
        return values
    if mode != "saturate":
        raise ValueError(f"unknown clip mode {mode!r}")
    return np.clip(values, 0, limit - 1)


def make_aligned(
    notes: Sequence[Note],
    onsets: Sequence[int],
    durations: Sequence[int],
    performer_id: int = 0,
    num_frames: Optional[int] = None,
) -> AlignedScore:
    out = [
        AlignedNote(n, int(o), max(1, int(d))) for n, o, d in zip(notes, onsets, durations)
    ]
    end = max((an.end_frame for an in out), default=0)
    return AlignedScore(
        tuple(out), num_frames=end if num_frames is None else num_frames, performer_id=performer_id
    )


__all__: List[str] = [
    "Note", "Score", "AlignedNote", "AlignedScore", "ScoreError", "MidiParseError",
    "parse_midi", "write_midi", "parse_notes_json", "serialize_score", "score_to_dict",
    "score_from_dict", "parse_aligned_json", "serialize_aligned", "aligned_to_dict",
    "aligned_from_dict", "naive_align", "build_rolls", "note_positions", "clip_index",
    "make_aligned", "ticks_to_frames",
]
