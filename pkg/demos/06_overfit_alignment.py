"""Overfitting the timing model on ten synthetic performances.

Pass a step budget on the command line; the default is short. With 3000
steps training stops once onset MAE < 1.5 and duration MAE < 2 frames.
"""
# %%
import sys

from scoresynth.experiments import overfit_alignment

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 250
r = overfit_alignment(seed=0, pairs=10, max_steps=steps, eval_every=min(250, steps))
for rec in r.history:
    print(rec["step"], round(rec["train_loss"], 3), "onset MAE", round(rec["onset_mae"], 2),
          "duration MAE", round(rec["duration_mae"], 2))
print("final", r.metrics, "after", r.steps, "steps")
