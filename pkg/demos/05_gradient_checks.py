"""Finite-difference checks of the hand-written backward passes."""
# %%
from scoresynth.verify import alignment_grad_check, layer_grad_checks, synthesis_grad_check

for name, err in layer_grad_checks(seed=0).items():
    print(f"{name:18s} {err:.2e}")

# %% whole networks on a four-note score in double precision
print("alignment model", f"{alignment_grad_check(seed=0):.2e}")
print("synthesis model", f"{synthesis_grad_check(seed=0):.2e}")
print("synthesis, no encoder", f"{synthesis_grad_check(seed=0, use_encoder=False):.2e}")
