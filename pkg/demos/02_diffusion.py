"""Forward noising, the budget rule and a reverse chain with the closed-form Gaussian denoiser.

Run: python3 demos/02_diffusion.py
"""
import numpy as np

from adadiff.core import make_rng
from adadiff.denoiser import AnalyticGaussianDenoiser
from adadiff.diffusion import forward_diffuse, make_schedule, max_timestep_from_budget, reverse_denoise

sched = make_schedule()  # T=1000, linear betas 1e-4..0.02, posterior reverse variance
for lam in (5, 10, 15, 20):
    print(f"lambda {lam:2d}: signal scale {np.sqrt(sched.alpha_bar[lam]):.4f}, "
          f"noise std {np.sqrt(1 - sched.alpha_bar[lam]):.4f}")

# Smallest step whose noise quantile covers a perturbation budget.
for budget in (0.05, 0.1, 0.16, 0.2):
    print(f"budget {budget:.2f} -> lambda_max {max_timestep_from_budget(budget, 0.988, sched)}")

# Marginal moments after 20 steps from a constant cloud.
x = forward_diffuse(np.full((10_000, 3), 0.7), 20, sched, make_rng(0))
print("mean", x.mean(0).round(4), "expected", round(0.7 * np.sqrt(sched.alpha_bar[20]), 4))
print("var ", x.var(0).round(5), "expected", round(1 - sched.alpha_bar[20], 5))

# If the data really is N(mu, var I), the exact noise predictor turns pure noise back into it.
mu, var = np.array([0.5, -0.4, 0.3]), 0.25
den = AnalyticGaussianDenoiser(mu, var, sched)
out = reverse_denoise(make_rng(1).standard_normal((2000, 3)), sched.T, den, sched, make_rng(2))
print("recovered mean", out.mean(0).round(3), "pooled var", round(float(((out - out.mean(0)) ** 2).mean()), 4))
