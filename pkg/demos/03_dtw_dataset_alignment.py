"""Building ground-truth alignments by DTW, as done for a real recording.

The "recording" here is the score rendered at half speed, so the right
answer is known: every onset and duration doubles.
"""
# %%
import numpy as np

from scoresynth import dsp
from scoresynth.dtw import align_recording
from scoresynth.score import make_aligned, naive_align
from scoresynth.training import random_score

score = random_score(np.random.default_rng(7), num_notes=16)
base = naive_align(score)
truth = make_aligned(score.notes, base.onsets() * 2, base.durations() * 2)
recording = dsp.additive_synth(truth)

# %%
aligned, path, cost = align_recording(score, recording)
print("path length", len(path), "cost matrix", cost.shape)
print("onset errors   ", np.abs(aligned.onsets() - truth.onsets()))
print("duration errors", np.abs(aligned.durations() - truth.durations()))

# %% the shared experiment used by the test suite, over several pieces
from scoresynth.experiments import stretch_recovery

print(stretch_recovery(pieces=3))
