"""The diffusion machinery on its own, without any hand in sight.

Three things are worth seeing in isolation before trusting the trained
pipeline. First, the forward process obeys the closed form
Var(x_t) = abar_t Var(x0) + (1 - abar_t) for the linear beta schedule.
Second, the ancestral sampler run with an oracle denoiser (one that knows
the true noise because we hand it x0) reconstructs x0 essentially exactly,
since every reverse step then reduces to the deterministic posterior mean.
Third, respacing a 1000-step training schedule down to a few dozen
inference steps preserves the cumulative alpha-bar products, which is the
quantity the sampler actually consumes.
"""

import numpy as np

from handkin import OracleDenoiser, forward_noise, make_schedule, respace_schedule, sample
from handkin.diffusion import training_step
from handkin.models import DenoiserNet

rng = np.random.default_rng(0)

sched = make_schedule(100, 1e-4, 0.02)
x0 = rng.normal(size=(20000, 8)) * 1.7  # known variance 2.89

print("forward process variance against the closed form:")
for t in (1, 25, 50, 100):
    eps = rng.standard_normal(x0.shape)
    x_t = forward_noise(x0, np.full(len(x0), t), eps, sched)
    expected = sched.alpha_bars[t - 1] * x0.var() + (1.0 - sched.alpha_bars[t - 1])
    got = np.asarray(x_t).var()
    print(f"  t={t:3d}: measured {got:.4f}, closed form {expected:.4f}")

# oracle inversion: the sampler with sigma suppressed at the last step
target = rng.normal(size=(4, 8))
short = make_schedule(1)
out = sample(OracleDenoiser(target, short), np.zeros((4, 0)), short, np.random.default_rng(1))
print(f"\noracle recovery at T=1: max |err| = {np.max(np.abs(out - target)):.2e}")

ten = make_schedule(10)
out = sample(OracleDenoiser(target, ten), np.zeros((4, 0)), ten, np.random.default_rng(2))
print(f"oracle recovery at T=10: mean |err| = {np.mean(np.abs(out - target)):.2e}")

# respacing keeps alpha-bar at the kept timesteps
full = make_schedule(1000, 1e-4, 0.02)
fast = respace_schedule(full, 50)
kept = fast.timestep_map
drift = np.max(np.abs(fast.alpha_bars - full.alpha_bars[kept - 1]))
print(f"\nrespaced 1000 -> 50 steps, alpha-bar drift at kept steps: {drift:.2e}")

# a fresh denoiser's stochastic objective, with gradients for every parameter
den = DenoiserNet(8, 0, 16, 64, 2, rng=np.random.default_rng(3))
batch = rng.normal(size=(64, 8))
feats = np.zeros((64, 0))
loss0, grads = training_step(den, batch, feats, np.random.default_rng(4), sched)
print(f"\nfresh denoiser eps-loss on a batch: {loss0:.3f} ({len(grads)} grad arrays)")
print("(training loops live in handkin.training; see demo 04)")
