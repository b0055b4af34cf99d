"""A small attack-then-purify walk-through with freshly trained models (about a minute on one core).

Run: python3 demos/03_purify.py
"""
import numpy as np

from adadiff.adversary import AttackConfig, ClassifierHyper, accuracy, pgd_attack, train_classifier
from adadiff.core import make_dataset, make_rng
from adadiff.denoiser import DenoiserHyper, train_denoiser
from adadiff.diffusion import PurifierConfig, make_schedule, purify_batch
from adadiff.distortion import cloud_distortions, profile_dataset
from adadiff.geometry import chamfer_distance

train, test = make_dataset(150, 45, 256, seed=0)
x, y = test.stacked(), test.labels

clf, _ = train_classifier(train, ClassifierHyper(epochs=30), make_rng(1), test)
print(f"clean accuracy {accuracy(clf, x, y):.3f}")

sched = make_schedule()
den, log = train_denoiser(train, sched, DenoiserHyper(epochs=80), make_rng(2))
print(f"denoiser validation loss {log.val_loss[0]:.3f} -> {log.val_loss[-1]:.3f}")

adv = pgd_attack(clf, x, AttackConfig(epsilon=0.16, steps=50, step_size=0.01), make_rng(3), label=y)
print(f"after PGD: accuracy {accuracy(clf, adv, y):.3f}, "
      f"mean E_x {cloud_distortions(x).mean():.4f} -> {cloud_distortions(adv).mean():.4f}")

profile = profile_dataset(train, k=10, lambda_max=20)
rngs = [make_rng(4, i) for i in range(len(adv))]
purified, logs = purify_batch(adv, profile, den, sched, PurifierConfig(rounds=4), rngs)
first = np.bincount([l[0].lam for l in logs], minlength=21)[list(profile.lambda_levels)]
print(f"round-1 timesteps {dict(zip(profile.lambda_levels, first.tolist()))}")
print(f"after purification: accuracy {accuracy(clf, purified, y):.3f}, "
      f"chamfer to clean {np.mean([chamfer_distance(p, c) for p, c in zip(purified, x)]):.4f}")
