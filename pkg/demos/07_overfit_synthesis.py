"""One 5-second clip, memorized by the full model and by the no-encoder
variant for the same number of steps.

Slow on one core (a few minutes); the first argument caps the steps.
"""
# %%
import sys

from scoresynth.experiments import oracle_clip, overfit_synthesis

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 5000
clip = oracle_clip(seed=0)
print(len(clip.aligned), "notes in", clip.mel.num_frames, "frames")

# %%
r = overfit_synthesis(seed=0, max_steps=steps, clip=clip)
for name, res in r.items():
    print(name, "steps", res.steps, "log-mel MSE", round(res.metrics["mse"], 4))
    print("   ", [(h["step"], round(h["eval_train_loss"], 3)) for h in res.history])
