"""Local-plane distortion scores and distortion-adaptive timestep selection."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import LabeledDataset, PointCloud
from .errors import FormatError, InvalidArgumentError
from .geometry import KdIndex, fit_planes, neighborhoods

logger = logging.getLogger(__name__)

MODES = ("center", "sum")


@dataclass(frozen=True)
class DistortionReport:
    per_point: np.ndarray
    cloud_estimate: float
    degenerate_count: int = 0


def _check(k, n, mode):
    if mode not in MODES:
        raise InvalidArgumentError(f"mode must be one of {MODES}, got {mode!r}")
    if k < 3 or k > n:
        raise InvalidArgumentError(f"k must satisfy 3 <= k <= N={n}, got {k}")


def per_point_distortion(points: np.ndarray, k: int = 10, mode: str = "center"):
    """Distance of every point (or its whole neighbourhood) to the local best-fit plane.

    Returns the (N,) scores and the number of degenerate neighbourhoods,
    which are scored 0.
    """
    points = np.asarray(points, dtype=np.float64)
    _check(k, len(points), mode)
    members = neighborhoods(KdIndex(points), k)
    normals, anchors, residual, degenerate = fit_planes(points, members)
    if mode == "center":
        d = np.abs(((points - anchors) * normals).sum(-1))
    else:
        d = residual
    d[degenerate] = 0.0
    return d, int(degenerate.sum())


def estimate_distortion(cloud: PointCloud, k: int = 10, mode: str = "center") -> DistortionReport:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    d, bad = per_point_distortion(pts, k, mode)
    if bad:
        logger.warning("%d degenerate neighbourhoods scored as 0", bad)
    d.setflags(write=False)
    return DistortionReport(d, float(d.mean()), bad)


def cloud_distortions(stack: np.ndarray, k: int = 10, mode: str = "center") -> np.ndarray:
    """Cloud-level estimate E_x for every cloud of an (M, N, 3) stack."""
    return np.array([per_point_distortion(p, k, mode)[0].mean() for p in stack])


@dataclass(frozen=True)
class DistortionProfile:
    """Quantile thresholds of clean-data distortion and their timesteps.

    ``thresholds`` has one entry fewer than ``lambda_levels``; with the usual
    4 intervals they are the 25th/50th/75th percentiles.
    """

    thresholds: tuple
    lambda_levels: tuple
    source_size: int

    def __post_init__(self):
        object.__setattr__(self, "thresholds", tuple(float(x) for x in self.thresholds))
        object.__setattr__(self, "lambda_levels", tuple(int(x) for x in self.lambda_levels))
        if len(self.lambda_levels) != len(self.thresholds) + 1:
            raise InvalidArgumentError("need exactly one more lambda level than thresholds")
        if list(self.lambda_levels) != sorted(self.lambda_levels):
            raise InvalidArgumentError("lambda levels must ascend")

    @property
    def degenerate(self) -> bool:
        t = np.asarray(self.thresholds)
        return bool(np.any(np.diff(t) <= 0))

    @property
    def lambda_max(self) -> int:
        return self.lambda_levels[-1]

    def to_json(self) -> str:
        return json.dumps({"thresholds": list(self.thresholds), "lambda_levels": list(self.lambda_levels),
                           "source_size": self.source_size}, indent=2) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "DistortionProfile":
        try:
            d = json.loads(Path(path).read_text())
            return cls(d["thresholds"], d["lambda_levels"], int(d["source_size"]))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: malformed distortion profile ({exc})") from None


def quartered_levels(lambda_max: int, intervals: int = 4) -> tuple:
    step = math.ceil(lambda_max / intervals)
    return tuple(min(step * j, lambda_max) for j in range(1, intervals + 1))


def profile_from_estimates(estimates, lambda_max: int, intervals: int = 4) -> DistortionProfile:
    est = np.asarray(estimates, dtype=np.float64)
    if est.size == 0:
        raise InvalidArgumentError("cannot profile an empty set of estimates")
    if lambda_max < intervals:
        raise InvalidArgumentError(f"lambda_max must be >= {intervals}, got {lambda_max}")
    q = 100.0 * np.arange(1, intervals) / intervals
    thresholds = np.percentile(est, q, method="linear")
    return DistortionProfile(tuple(thresholds), quartered_levels(lambda_max, intervals), int(est.size))


def profile_dataset(dataset: LabeledDataset, k: int = 10, lambda_max: int = 20, mode: str = "center",
                    intervals: int = 4) -> DistortionProfile:
    """Profile the clean distortion distribution of ``dataset`` into quantile buckets."""
    if len(dataset) == 0:
        raise InvalidArgumentError("dataset is empty")
    return profile_from_estimates(cloud_distortions(dataset.stacked(), k, mode), lambda_max, intervals)


def bucket_index(estimate, profile: DistortionProfile):
    """Interval index for each estimate (0 = lowest); closed on the right of each threshold."""
    return np.searchsorted(np.asarray(profile.thresholds), estimate, side="left")


def select_timestep(estimate: float, profile: DistortionProfile) -> int:
    """Diffusion depth for a cloud with distortion ``estimate``.

    A degenerate profile (tied thresholds) always yields the top level.
    """
    if np.isnan(estimate) or estimate < 0:
        raise InvalidArgumentError(f"distortion estimate must be >= 0, got {estimate}")
    if profile.degenerate:
        return profile.lambda_max
    return profile.lambda_levels[int(bucket_index(estimate, profile))]
