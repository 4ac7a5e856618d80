"""Note-wise positional modulation and the polyphonic mixer."""
# %%
import numpy as np

from scoresynth.score import Note, make_aligned
from scoresynth.synthesis import mixing_matrices, npe_modulate, polyphonic_mix

v = np.array([2.0, 4.0])
w = np.array([0.5, -0.25])
for p in (0.0, 0.5, 1.0):
    print(p, npe_modulate(v, p, w))

# %% two overlapping notes; each frame is the sum of the notes sounding in it
aligned = make_aligned([Note(60, 0, 1), Note(67, 0, 1)], [0, 2], [5, 3], num_frames=6)
V = np.array([[1.0, 0.0], [0.0, 1.0]])
cover, pos = mixing_matrices(aligned, 6)
print(cover.T)
print(np.round(pos.T, 3))
print(polyphonic_mix(V, aligned, w, 6))
