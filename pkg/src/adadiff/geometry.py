"""Nearest neighbours, local plane fitting and the Chamfer distance."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import PointCloud
from .errors import DegenerateNeighborhoodError, InvalidArgumentError

# extra candidates fetched from the tree so distance ties can be re-ordered by index
_TIE_SLACK = 4


@dataclass(frozen=True)
class Neighborhood:
    center_index: int
    member_indices: np.ndarray

    @property
    def K(self) -> int:
        return len(self.member_indices)


@dataclass(frozen=True)
class FittedPlane:
    normal: np.ndarray
    anchor: np.ndarray
    residual_sum: float


def _points(cloud) -> np.ndarray:
    return cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)


def _sorted_candidates(points, centers, cand):
    d2 = ((points[cand] - points[centers][:, None, :]) ** 2).sum(-1)
    order = np.lexsort((cand, d2), axis=-1)
    return np.take_along_axis(cand, order, -1), np.take_along_axis(d2, order, -1)


def brute_knn(points: np.ndarray, center: int, k: int) -> np.ndarray:
    """Exhaustive k-nearest search ordered by (squared distance, index)."""
    d2 = ((points - points[center]) ** 2).sum(-1)
    return np.lexsort((np.arange(len(points)), d2))[:k]


class KdIndex:
    """kd-tree over a cloud whose answers match exhaustive search exactly.

    Ties in distance are broken towards the lower point index. Rows where a
    tie straddles the k-th position fall back to an exhaustive scan.
    """

    def __init__(self, cloud):
        self.points = _points(cloud)
        if self.points.ndim != 2 or self.points.shape[0] < 1:
            raise InvalidArgumentError("cannot index an empty cloud")
        self._tree = cKDTree(self.points)

    def __len__(self):
        return self.points.shape[0]

    def query(self, centers, k: int) -> np.ndarray:
        """Indices of the ``k`` nearest points (self included) for each center, shape (len(centers), k)."""
        n = len(self)
        if not 1 <= k <= n:
            raise InvalidArgumentError(f"k must be in [1, {n}], got {k}")
        centers = np.atleast_1d(np.asarray(centers, dtype=np.int64))
        m = min(n, k + _TIE_SLACK)
        _, cand = self._tree.query(self.points[centers], k=m)
        cand = np.asarray(cand, dtype=np.int64).reshape(len(centers), m)
        idx, d2 = _sorted_candidates(self.points, centers, cand)
        if m < n:
            # the k-th pick must be strictly closer than anything left out
            unsafe = ~(d2[:, k - 1] < d2[:, m - 1] * (1.0 - 1e-12))
            for row in np.flatnonzero(unsafe):
                idx[row, :k] = brute_knn(self.points, centers[row], k)
        return idx[:, :k]

    def query_all(self, k: int) -> np.ndarray:
        return self.query(np.arange(len(self)), k)


def build_index(cloud) -> KdIndex:
    return KdIndex(cloud)


def knn(index: KdIndex, center_index: int, k: int) -> Neighborhood:
    """Neighbourhood of ``k`` points around ``center_index`` (the center plus k-1 neighbours)."""
    members = index.query([center_index], k)[0]
    if members[0] != center_index:
        # a duplicate with a lower index can outrank the center itself
        members = np.concatenate([[center_index], members[members != center_index]])[:k]
    return Neighborhood(int(center_index), members)


def neighborhoods(index: KdIndex, k: int) -> np.ndarray:
    """(N, k) member indices for every point, center always in column 0."""
    idx = index.query_all(k)
    centers = np.arange(len(index))
    missing = idx[:, 0] != centers
    for row in np.flatnonzero(missing):
        rest = idx[row][idx[row] != row]
        idx[row] = np.concatenate([[row], rest])[:k]
    return idx


def _canonical_sign(normals: np.ndarray) -> np.ndarray:
    pivot = np.argmax(np.abs(normals), axis=-1)
    sign = np.sign(np.take_along_axis(normals, pivot[..., None], -1))
    sign[sign == 0] = 1.0
    return normals * sign


def fit_planes(points: np.ndarray, members: np.ndarray):
    """Least-squares planes for a batch of neighbourhoods.

    Parameters
    ----------
    points : (N, 3) array
    members : (M, K) integer array of neighbourhood indices

    Returns
    -------
    normals : (M, 3) unit normals, largest-magnitude component positive
    anchors : (M, 3) neighbourhood centroids
    residual_sum : (M,) sum of absolute point-plane distances of the members
    degenerate : (M,) bool, True where all members coincide
    """
    sub = points[members]
    anchors = sub.mean(axis=1)
    centered = sub - anchors[:, None, :]
    scatter = np.einsum("mki,mkj->mij", centered, centered)
    _, vecs = np.linalg.eigh(scatter)
    normals = _canonical_sign(vecs[:, :, 0])
    residual = np.abs(np.einsum("mki,mi->mk", centered, normals)).sum(-1)
    scale = np.abs(sub).max(axis=(1, 2))
    degenerate = np.trace(scatter, axis1=1, axis2=2) <= (1e-14 * np.maximum(scale, 1e-300)) ** 2 * members.shape[1]
    return normals, anchors, residual, degenerate


def fit_plane(cloud, nb: Neighborhood) -> FittedPlane:
    """Best-fit plane through a neighbourhood.

    The anchor is the members' centroid and the normal is the eigenvector of
    their 3x3 scatter matrix with the smallest eigenvalue (the last right
    singular vector of the centered member matrix).
    """
    if nb.K < 3:
        raise InvalidArgumentError(f"plane fitting needs at least 3 points, got {nb.K}")
    pts = _points(cloud)
    normals, anchors, residual, degenerate = fit_planes(pts, np.asarray(nb.member_indices)[None, :])
    if degenerate[0]:
        raise DegenerateNeighborhoodError(f"all {nb.K} points around index {nb.center_index} coincide")
    return FittedPlane(normals[0], anchors[0], float(residual[0]))


def point_plane_distance(x, plane: FittedPlane) -> float:
    return float(abs(np.dot(np.asarray(x, dtype=np.float64) - plane.anchor, plane.normal)))


def _nn_sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _, idx = cKDTree(b).query(a, k=1)
    return ((a - b[idx]) ** 2).sum(-1)


def chamfer_distance(a, b) -> float:
    """Mean squared nearest-neighbour distance from a to b plus from b to a."""
    pa, pb = _points(a), _points(b)
    if len(pa) == 0 or len(pb) == 0:
        raise InvalidArgumentError("chamfer distance needs two non-empty clouds")
    return float(_nn_sq(pa, pb).mean() + _nn_sq(pb, pa).mean())
