"""Log-mel analysis and Griffin-Lim resynthesis of a rendered score."""
# %%
import numpy as np

from scoresynth import dsp
from scoresynth.score import Note, make_aligned

aligned = make_aligned([Note(57, 0, 1), Note(64, 0, 1), Note(69, 0, 1)], [0, 20, 40], [90, 70, 50])
audio = dsp.additive_synth(aligned)
mel = dsp.log_mel(audio)
print("samples", len(audio), "mel", mel.data.shape, "floor", np.log(1e-5))

# %% inversion: mel -> linear magnitude (non-negative least squares) -> phase iterations
history = []
rebuilt = dsp.griffin_lim(mel, iterations=60, seed=0, history=history)
print("consistency error, iterations 1/10/60:", [round(history[i], 3) for i in (0, 9, 59)])

# %% how close is the round trip in the log-mel domain?
again = dsp.log_mel(rebuilt).data[:, : mel.num_frames]
print("log-mel MAE", np.abs(again - mel.data).mean())
dsp.write_wav("demo_inversion.wav", rebuilt)
