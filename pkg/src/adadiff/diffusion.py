"""DDPM noise schedule, forward/reverse chains and multi-round adaptive purification."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import norm

from .core import PointCloud
from .distortion import MODES, DistortionProfile, cloud_distortions, select_timestep
from .errors import ConfigurationError, ContractError, InvalidArgumentError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-step noise quantities, stored 1-indexed (index 0 holds the t=0 identity values)."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    beta_start: float = 1e-4
    beta_end: float = 0.02
    variance: str = "posterior"


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02, rule: str = "linear",
                  variance: str = "posterior") -> NoiseSchedule:
    """Linear beta schedule.

    ``variance="beta"`` sets sigma_t^2 = beta_t; ``"posterior"`` uses
    (1 - abar_{t-1}) / (1 - abar_t) * beta_t.
    """
    if rule != "linear":
        raise ConfigurationError(f"unsupported schedule rule {rule!r}")
    if variance not in ("beta", "posterior"):
        raise ConfigurationError(f"unknown variance rule {variance!r}")
    if T < 1:
        raise ConfigurationError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigurationError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    beta = np.concatenate([[0.0], np.linspace(beta_start, beta_end, T)])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    if variance == "beta":
        var = beta.copy()
    else:
        var = np.zeros_like(beta)
        var[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]
    for a in (beta, alpha, alpha_bar, var):
        a.setflags(write=False)
    sigma = np.sqrt(var)
    sigma.setflags(write=False)
    return NoiseSchedule(T, beta, alpha, alpha_bar, sigma, float(beta_start), float(beta_end), variance)


def _check_step(lam, schedule):
    if not 0 <= lam <= schedule.T:
        raise InvalidArgumentError(f"timestep must be in [0, {schedule.T}], got {lam}")


def forward_diffuse(cloud, lam: int, schedule: NoiseSchedule, rng: np.random.Generator, eps=None):
    """Jump straight to step ``lam``: sqrt(abar) * x0 + sqrt(1 - abar) * eps.

    ``eps`` overrides the drawn noise (same shape as the points).
    """
    _check_step(lam, schedule)
    x0 = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if lam == 0:
        return cloud
    if eps is None:
        eps = rng.standard_normal(x0.shape)
    ab = schedule.alpha_bar[lam]
    xt = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    return cloud.with_points(xt) if isinstance(cloud, PointCloud) else xt


def max_timestep_from_budget(budget: float, confidence: float, schedule: NoiseSchedule,
                             two_sided: bool = False) -> int:
    """Smallest step at which the scaled noise quantile covers the scaled budget.

    Solves sqrt(1 - abar) * z >= sqrt(abar) * budget, i.e.
    abar <= z^2 / (z^2 + budget^2), with z the standard-normal quantile.
    """
    if budget < 0:
        raise InvalidArgumentError("budget must be >= 0")
    if not 0.5 < confidence < 1.0:
        raise InvalidArgumentError("confidence must lie in (0.5, 1)")
    z = norm.ppf((1.0 + confidence) / 2.0 if two_sided else confidence)
    cutoff = z * z / (z * z + budget * budget)
    hits = np.flatnonzero(schedule.alpha_bar[1:] <= cutoff)
    if hits.size == 0:
        logger.warning("budget %.4g not covered within T=%d steps; using T", budget, schedule.T)
        return schedule.T
    return int(hits[0]) + 1


def _predict(denoiser, x, t):
    eps = denoiser.predict(x, t)
    if eps.shape != x.shape:
        raise ContractError(f"denoiser returned shape {eps.shape} for input {x.shape}")
    return eps


def reverse_step(x, t: int, eps_hat, schedule: NoiseSchedule, z=None):
    """One ancestral step x_t -> x_{t-1}; ``z`` is ignored at t = 1."""
    coef = schedule.beta[t] / np.sqrt(1.0 - schedule.alpha_bar[t])
    mean = (x - coef * eps_hat) / np.sqrt(schedule.alpha[t])
    if t > 1 and z is not None:
        return mean + schedule.sigma[t] * z
    return mean


def reverse_denoise(noisy, lam: int, denoiser, schedule: NoiseSchedule, rng: np.random.Generator):
    """Run the reverse chain from step ``lam`` down to 0 on one cloud."""
    _check_step(lam, schedule)
    x = noisy.points if isinstance(noisy, PointCloud) else np.asarray(noisy, dtype=np.float64)
    out = reverse_denoise_batch(x[None], np.array([lam]), denoiser, schedule, [rng])[0]
    return noisy.with_points(out) if isinstance(noisy, PointCloud) else out


def reverse_denoise_batch(x: np.ndarray, lams, denoiser, schedule: NoiseSchedule,
                          rngs: Sequence[np.random.Generator]) -> np.ndarray:
    """Reverse chains for a stack of clouds, each starting at its own step.

    Cloud ``i`` only draws noise from ``rngs[i]``, so results do not depend
    on which other clouds share the batch.
    """
    x = np.array(x, dtype=np.float64, copy=True)
    lams = np.asarray(lams, dtype=np.int64)
    for lam in lams:
        _check_step(int(lam), schedule)
    top = int(lams.max()) if lams.size else 0
    for t in range(top, 0, -1):
        active = np.flatnonzero(lams >= t)
        xa = x[active]
        eps_hat = _predict(denoiser, xa, np.full(len(active), t))
        z = None
        if t > 1:
            z = np.stack([rngs[i].standard_normal(xa.shape[1:]) for i in active])
        x[active] = reverse_step(xa, t, eps_hat, schedule, z)
    return x


@dataclass(frozen=True)
class PurifierConfig:
    rounds: int = 4
    lambda_max: int = 20
    k: int = 10
    mode: str = "center"
    budget: float = 0.05
    confidence: float = 0.988
    reestimate_each_round: bool = True

    def validate(self, schedule: Optional[NoiseSchedule] = None) -> "PurifierConfig":
        if self.rounds < 1:
            raise ConfigurationError("rounds must be >= 1")
        if self.budget < 0:
            raise ConfigurationError("budget must be >= 0")
        if not 0.5 < self.confidence < 1.0:
            raise ConfigurationError("confidence must lie in (0.5, 1)")
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown distortion mode {self.mode!r}")
        if schedule is not None and not 0 <= self.lambda_max <= schedule.T:
            raise ConfigurationError(f"lambda_max {self.lambda_max} exceeds T={schedule.T}")
        return self


@dataclass
class RoundLog:
    round: int
    estimate: float
    lam: int


def purify_batch(x: np.ndarray, profile: Optional[DistortionProfile], denoiser, schedule: NoiseSchedule,
                 config: PurifierConfig, rngs: Sequence[np.random.Generator], fixed_lambda: Optional[int] = None,
                 on_round: Optional[Callable[[int, np.ndarray], None]] = None):
    """Multi-round diffuse-then-denoise for a stack of clouds.

    Each round re-estimates every cloud's distortion (unless frozen by the
    config), picks its timestep from ``profile`` and runs forward diffusion
    then the reverse chain on the previous round's output. ``fixed_lambda``
    bypasses the adaptive choice. ``on_round(r, stack)`` sees each round's
    output.

    Returns the purified stack and per-cloud lists of :class:`RoundLog`.
    """
    config.validate(schedule)
    x = np.array(x, dtype=np.float64, copy=True)
    if fixed_lambda is None:
        if profile is None:
            raise ConfigurationError("adaptive purification needs a distortion profile")
        if profile.lambda_max != config.lambda_max:
            raise ConfigurationError(
                f"profile top level {profile.lambda_max} != config lambda_max {config.lambda_max}")
    else:
        _check_step(fixed_lambda, schedule)
    logs = [[] for _ in range(len(x))]
    lams = None
    for r in range(config.rounds):
        if fixed_lambda is None and (lams is None or config.reestimate_each_round):
            est = cloud_distortions(x, config.k, config.mode)
            lams = np.array([select_timestep(e, profile) for e in est])
        elif fixed_lambda is not None:
            est = np.full(len(x), np.nan)
            lams = np.full(len(x), fixed_lambda)
        else:
            est = cloud_distortions(x, config.k, config.mode)
        for i in range(len(x)):
            logs[i].append(RoundLog(r, float(est[i]), int(lams[i])))
        noisy = np.stack([forward_diffuse(x[i], int(lams[i]), schedule, rngs[i]) for i in range(len(x))])
        x = reverse_denoise_batch(noisy, lams, denoiser, schedule, rngs)
        if on_round is not None:
            on_round(r, x)
    return x, logs


def purify(cloud: PointCloud, profile: DistortionProfile, denoiser, schedule: NoiseSchedule,
           config: PurifierConfig, rng: np.random.Generator):
    """Purify one cloud; returns (purified cloud, round logs)."""
    out, logs = purify_batch(cloud.points[None], profile, denoiser, schedule, config, [rng])
    return cloud.with_points(out[0]), logs[0]
