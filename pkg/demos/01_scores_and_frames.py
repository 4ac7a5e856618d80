"""From a symbolic score to frame-level timing and piano rolls."""
# %%
import numpy as np

from scoresynth.score import build_rolls, naive_align, parse_notes_json, write_midi, parse_midi

text = """{"tempo": 96, "performer_id": 3, "notes": [
  {"pitch": 60, "onset": 0,  "duration": 24, "velocity": 80},
  {"pitch": 64, "onset": 0,  "duration": 24},
  {"pitch": 67, "onset": 24, "duration": 48},
  {"pitch": 72, "onset": 48, "duration": 12}]}"""
score = parse_notes_json(text)
print(score)

# %% ticks are 24 per quarter note; a constant tempo turns them into 16 ms frames
aligned = naive_align(score)
for an in aligned.aligned_notes:
    print(an.note.pitch, "onset frame", an.onset_frames, "duration", an.duration_frames)
print("num_frames", aligned.num_frames)

# %% piano roll and position roll (1 at a note's onset falling to 0 at its last frame)
piano, pos = build_rolls(aligned)
print(piano.shape, pos.shape)
print(np.round(pos[67, aligned.aligned_notes[2].onset_frames:][:8], 3))

# %% the same score through a standard MIDI file
back = parse_midi(write_midi(score), performer_id=score.performer_id)
print([(n.pitch, n.onset, n.duration) for n in back.notes])
