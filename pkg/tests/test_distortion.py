import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation
from scipy.stats import spearmanr

from adadiff.core import PointCloud, make_dataset, make_rng, sample_primitive, SHAPES
from adadiff.distortion import (DistortionProfile, cloud_distortions, estimate_distortion, per_point_distortion,
                                profile_dataset, profile_from_estimates, quartered_levels, select_timestep)
from adadiff.errors import FormatError, InvalidArgumentError
from adadiff.adversary import tangent_jitter


def plane_grid(n=12, spacing=0.1):
    g = np.arange(n) * spacing
    X, Y = np.meshgrid(g, g)
    return np.column_stack([X.ravel(), Y.ravel(), np.zeros(n * n)])


def slow_distortion(points, k):
    """Sort-by-distance neighbourhoods and SVD plane fits, one point at a time."""
    out = []
    for i, x in enumerate(points):
        d2 = ((points - x) ** 2).sum(1)
        order = np.lexsort((np.arange(len(points)), d2))[:k]
        nb = points[order]
        c = nb.mean(0)
        normal = np.linalg.svd(nb - c)[2][-1]
        out.append(abs((x - c) @ normal))
    return np.array(out)


def test_coplanar_grid_scores_zero():
    rep = estimate_distortion(PointCloud(plane_grid()))
    assert rep.cloud_estimate <= 1e-12
    assert np.all(rep.per_point <= 1e-12)
    rep = estimate_distortion(PointCloud(plane_grid()), mode="sum")
    assert rep.cloud_estimate <= 1e-12


def test_matches_pointwise_svd_oracle():
    pts = sample_primitive("torus", 80, make_rng(3)).points
    d, bad = per_point_distortion(pts, 10)
    assert bad == 0
    np.testing.assert_allclose(d, slow_distortion(pts, 10), atol=1e-12, rtol=0)


def test_jitter_raises_estimate():
    e = []
    for sigma in (0.02, 0.05):
        e.append(np.mean([estimate_distortion(PointCloud(plane_grid() + make_rng(i).normal(0, sigma, (144, 3))))
                          .cloud_estimate for i in range(20)]))
    assert e[0] < e[1]


def test_duplicates_are_scoreable():
    pts = np.vstack([np.zeros((12, 3)), make_rng(0).normal(size=(20, 3))])
    rep = estimate_distortion(PointCloud(pts), k=10)
    assert rep.degenerate_count >= 12
    assert np.all(rep.per_point[:12] == 0.0)
    assert np.isfinite(rep.cloud_estimate)


def test_argument_errors():
    pts = make_rng(0).normal(size=(20, 3))
    with pytest.raises(InvalidArgumentError):
        estimate_distortion(PointCloud(pts), k=2)
    with pytest.raises(InvalidArgumentError):
        estimate_distortion(PointCloud(pts), k=21)
    with pytest.raises(InvalidArgumentError):
        estimate_distortion(PointCloud(pts), mode="median")


@given(st.integers(0, 2**32 - 1), st.sampled_from(SHAPES))
@settings(max_examples=25, deadline=None)
def test_isometry_invariance(seed, shape):
    pts = sample_primitive(shape, 64, make_rng(seed)).points + make_rng(seed, 1).normal(0, 0.02, (64, 3))
    R = Rotation.random(random_state=seed).as_matrix()
    moved = pts @ R.T + make_rng(seed, 2).normal(size=3)
    for mode in ("center", "sum"):
        a = estimate_distortion(PointCloud(pts), mode=mode)
        b = estimate_distortion(PointCloud(moved), mode=mode)
        assert abs(a.cloud_estimate - b.cloud_estimate) < 1e-9


@given(st.integers(0, 2**32 - 1), st.floats(0.1, 10.0))
@settings(max_examples=25, deadline=None)
def test_scale_covariance(seed, s):
    pts = make_rng(seed).normal(size=(40, 3))
    a, _ = per_point_distortion(pts)
    b, _ = per_point_distortion(s * pts)
    np.testing.assert_allclose(b, s * a, atol=1e-9 * s, rtol=1e-9)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=20, deadline=None)
def test_permutation_invariant_estimate(seed):
    pts = make_rng(seed).normal(size=(40, 3))
    perm = make_rng(seed, 1).permutation(40)
    a, _ = per_point_distortion(pts)
    b, _ = per_point_distortion(pts[perm])
    np.testing.assert_allclose(b, a[perm], atol=1e-12)


def test_monotone_response_small():
    sigmas = np.arange(7) * 0.01
    means, xs, ys = [], [], []
    for s in sigmas:
        e = [estimate_distortion(sample_primitive(SHAPES[i % 3], 128, make_rng(i)).points
                                 + make_rng(i, 9).normal(0, s, (128, 3))).cloud_estimate for i in range(15)]
        means.append(np.mean(e))
        xs += [s] * len(e)
        ys += e
    assert np.all(np.diff(means) > 0)
    assert spearmanr(sigmas, means).statistic > 0.99


def test_tangent_jitter_keeps_plane_score():
    pts = plane_grid()
    before = estimate_distortion(PointCloud(pts)).cloud_estimate
    moved = tangent_jitter(PointCloud(pts), 0.02, 10, make_rng(1))
    after = estimate_distortion(moved).cloud_estimate
    assert abs(after - before) < 1e-9
    assert not np.array_equal(moved.points, pts)


# ---------------------------------------------------------------------------
# profile and selection

def test_profile_quartiles_example():
    prof = profile_from_estimates([1, 2, 3, 4], 20)
    assert prof.thresholds == (1.75, 2.5, 3.25)
    assert prof.lambda_levels == (5, 10, 15, 20)
    assert prof.source_size == 4


def test_select_examples():
    prof = DistortionProfile((1.75, 2.5, 3.25), (5, 10, 15, 20), 4)
    assert select_timestep(0.0, prof) == 5
    assert select_timestep(2.6, prof) == 15
    assert select_timestep(1e300, prof) == 20
    assert select_timestep(np.inf, prof) == 20
    # thresholds belong to the lower bucket
    assert select_timestep(1.75, prof) == 5
    assert select_timestep(3.25, prof) == 15
    with pytest.raises(InvalidArgumentError):
        select_timestep(-1.0, prof)
    with pytest.raises(InvalidArgumentError):
        select_timestep(np.nan, prof)


def test_degenerate_profile_selects_top():
    prof = profile_from_estimates([0.3] * 10, 20)
    assert prof.degenerate
    assert {select_timestep(e, prof) for e in (0.0, 0.3, 5.0)} == {20}


def test_quartered_levels():
    assert quartered_levels(20) == (5, 10, 15, 20)
    assert quartered_levels(10) == (3, 6, 9, 10)
    assert quartered_levels(4) == (1, 2, 3, 4)
    with pytest.raises(InvalidArgumentError):
        profile_from_estimates([1.0, 2.0], 3)
    with pytest.raises(InvalidArgumentError):
        profile_from_estimates([], 20)


@given(st.lists(st.floats(0, 10), min_size=1, max_size=50), st.floats(0, 12), st.floats(0, 12))
@settings(max_examples=100, deadline=None)
def test_selection_monotone_step_function(est, a, b):
    prof = profile_from_estimates(est, 20)
    lo, hi = min(a, b), max(a, b)
    assert select_timestep(lo, prof) <= select_timestep(hi, prof)
    assert select_timestep(lo, prof) in prof.lambda_levels


def test_profile_roundtrip(tmp_path):
    prof = profile_from_estimates(make_rng(0).uniform(size=30), 20)
    prof.save(tmp_path / "p.json")
    assert DistortionProfile.load(tmp_path / "p.json") == prof
    (tmp_path / "bad.json").write_text('{"thresholds": [1]}')
    with pytest.raises(FormatError):
        DistortionProfile.load(tmp_path / "bad.json")


def test_profile_dataset_uses_cloud_estimates():
    train, _ = make_dataset(12, 3, 64, seed=2)
    prof = profile_dataset(train, k=10, lambda_max=20)
    est = cloud_distortions(train.stacked(), 10)
    np.testing.assert_allclose(prof.thresholds, np.percentile(est, [25, 50, 75]))
    assert prof.source_size == 12
