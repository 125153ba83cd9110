# %% [markdown]
# # The colored MDP
#
# A slowly switching hidden variable decides how strongly color predicts the
# target. Inside one region of the state space color looks like a great
# feature; in the held-out region the relationship is reversed.

# %%
import numpy as np

from spurion.colored_mdp import ColoredMDP, EnvConfig

rng = np.random.default_rng(0)
env = ColoredMDP(EnvConfig(latent_set=(0.8, 0.9)))
traj = env.rollout(200_000, rng)
X = traj.features()
print("feature matrix", X.shape, "active per row", X.sum(1)[:5])

# %% [markdown]
# Class transitions follow a drift: the class shifts by k with probabilities
# decreasing in k, so consecutive samples are strongly correlated.

# %%
shifts = (traj.classes[1:] - traj.classes[:-1]) % 10
print("shift frequencies", np.round(np.bincount(shifts, minlength=10)[:6] / len(shifts), 3))

# %% [markdown]
# The latent level changes rarely, so green agrees with the target at 0.8 for
# long stretches and at 0.9 for others.

# %%
for level in (0.8, 0.9):
    sel = traj.latent == level
    print(f"latent {level}: {sel.mean():.2f} of steps, "
          f"P(y=1 | green) = {traj.y[sel & (traj.green == 1)].mean():.3f}")

# %% [markdown]
# The color rule scores well on the seen region and badly on the unseen one.

# %%
def color_rule(features):
    return features[:, 10].astype(float)

unseen = ColoredMDP(EnvConfig().unseen())
for name, e in (("seen", env), ("unseen", unseen)):
    t = e.rollout(100_000, rng)
    print(name, "color-rule accuracy", np.mean(color_rule(t.features()) == t.y).round(3))
