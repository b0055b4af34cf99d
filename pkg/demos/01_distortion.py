"""Distortion estimates on clean and jittered primitives, and the timestep each one selects.

Run: python3 demos/01_distortion.py
"""
import numpy as np

from adadiff.adversary import jitter_attack, tangent_jitter
from adadiff.core import SHAPES, make_dataset, make_rng, sample_primitive
from adadiff.distortion import estimate_distortion, profile_dataset, select_timestep

# A clean cube is mostly flat faces, so its score comes from the edges only.
cube = sample_primitive("cube", 256, make_rng(0))
report = estimate_distortion(cube, k=10)
print(f"cube E_x = {report.cloud_estimate:.4f}  (max per-point {report.per_point.max():.4f})")

# Isotropic jitter pushes points off their local planes; tangent jitter does not.
for sigma in (0.01, 0.03, 0.05):
    iso = estimate_distortion(jitter_attack(cube, sigma, make_rng(1))).cloud_estimate
    tan = estimate_distortion(tangent_jitter(cube, sigma, 10, make_rng(1))).cloud_estimate
    print(f"sigma {sigma:.2f}: isotropic {iso:.4f}  tangent {tan:.4f}")

# The profile quarters the clean training distribution; levels quarter lambda_max.
train, test = make_dataset(150, 30, 256, seed=0)
profile = profile_dataset(train, k=10, lambda_max=20)
print("thresholds", np.round(profile.thresholds, 4), "levels", profile.lambda_levels)

for shape in SHAPES:
    c = sample_primitive(shape, 256, make_rng(2))
    e_clean = estimate_distortion(c).cloud_estimate
    e_jit = estimate_distortion(jitter_attack(c, 0.05, make_rng(3))).cloud_estimate
    print(f"{shape:>6}: clean -> lambda {select_timestep(e_clean, profile):2d}, "
          f"jitter 0.05 -> lambda {select_timestep(e_jit, profile):2d}")
