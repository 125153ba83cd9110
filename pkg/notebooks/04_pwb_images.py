# %% [markdown]
# # Searching a binary representation on colored digits
#
# A small binary conv + ternary fc network is improved by random
# perturbations, kept only when they reduce the drift between two
# latent-conditioned ridge fits (conv steps) or the prediction loss (fc steps).

# %%
import numpy as np

from spurion.colored_mdp import ColoredMDP, EnvConfig
from spurion.mnist_data import synth_digits
from spurion.pwb import PwbConfig, fit_readout, pwb_run, readout_accuracy

rng = np.random.default_rng(0)
pool = synth_digits(np.random.default_rng(7))
env = ColoredMDP(EnvConfig(mode="images", latent_set=(0.76, 0.99)), pool)
unseen = ColoredMDP(EnvConfig(mode="images").unseen(), pool)

cfg = PwbConfig(iterations=100)
rln, history = pwb_run(cfg, env, rng)
kept = [s for s in history if s.accepted]
print(f"kept {len(kept)} of {len(history)} perturbations")
print("drift  first %.4f  last %.4f" % (history[0].v_before, history[-1].v_after))

# %%
readout = fit_readout(rln, env, cfg.ridge_lambda, 8192, rng)
print("seen   %.3f" % readout_accuracy(readout, env, 20_000, rng))
print("unseen %.3f" % readout_accuracy(readout, unseen, 20_000, rng))
