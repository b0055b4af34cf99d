import itertools
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from adadiff.core import (PointCloud, LabeledDataset, TORUS_MAJOR, TORUS_MINOR, make_dataset, make_rng,
                          normalize_unit_cube, raw_primitive, read_cloud, read_manifest, sample_primitive,
                          write_cloud, write_manifest)
from adadiff.errors import ConfigurationError, FormatError, InvalidInputError

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False, width=64)
clouds = arrays(np.float64, st.tuples(st.integers(1, 40), st.just(3)), elements=finite)


def test_normalize_cube_corners():
    corners = np.array(list(itertools.product([-1.0, 1.0], repeat=3)))
    out = normalize_unit_cube(PointCloud(corners))
    np.testing.assert_array_equal(out.points, corners * 0.5)


def test_normalize_degenerate_maps_to_zero():
    out = normalize_unit_cube(PointCloud(np.full((4, 3), 7.0)))
    np.testing.assert_array_equal(out.points, np.zeros((4, 3)))


def test_normalize_random_box_spans_unit_on_longest_axis():
    pts = make_rng(0).uniform(0, 3, size=(100, 3))
    out = normalize_unit_cube(PointCloud(pts)).points
    lo, hi = out.min(0), out.max(0)
    axis = np.argmax(pts.max(0) - pts.min(0))
    assert lo[axis] == -0.5 and hi[axis] == 0.5
    np.testing.assert_allclose((lo + hi) / 2, 0.0, atol=1e-15)
    assert np.all(hi - lo <= 1.0)


def test_normalize_preserves_order_and_label():
    pts = make_rng(1).normal(size=(20, 3))
    out = normalize_unit_cube(PointCloud(pts, label=2))
    assert out.label == 2
    assert np.all(np.argsort(pts[:, 0]) == np.argsort(out.points[:, 0]))


def test_non_finite_rejected():
    with pytest.raises(InvalidInputError):
        PointCloud([[0.0, np.nan, 0.0]])
    with pytest.raises(InvalidInputError):
        PointCloud(np.zeros((0, 3)))


@given(clouds)
@settings(max_examples=60, deadline=None)
def test_normalize_idempotent(pts):
    once = normalize_unit_cube(PointCloud(pts))
    twice = normalize_unit_cube(once)
    np.testing.assert_allclose(twice.points, once.points, atol=1e-12, rtol=0)
    assert np.all(np.abs(once.points) <= 0.5)


def test_sphere_samples_equidistant_from_center():
    c = sample_primitive("sphere", 256, make_rng(1))
    r = np.linalg.norm(c.points, axis=1)
    assert r.std() / r.mean() < 0.01
    assert c.label == 0 and len(c) == 256


def test_cube_samples_on_bbox_faces():
    pts = sample_primitive("cube", 8, make_rng(3)).points
    lo, hi = pts.min(0), pts.max(0)
    on_face = np.isclose(pts, lo, atol=1e-15, rtol=0) | np.isclose(pts, hi, atol=1e-15, rtol=0)
    assert on_face.any(axis=1).all()


def test_torus_satisfies_implicit_equation():
    pts = raw_primitive("torus", 512, make_rng(2))
    rho = np.hypot(pts[:, 0], pts[:, 1])
    assert np.all(rho >= TORUS_MAJOR - TORUS_MINOR - 1e-12)
    assert np.all(rho <= TORUS_MAJOR + TORUS_MINOR + 1e-12)
    residual = (rho - TORUS_MAJOR) ** 2 + pts[:, 2] ** 2 - TORUS_MINOR ** 2
    assert np.abs(residual).max() < 1e-6
    # normalized version is the same sample rescaled
    norm = sample_primitive("torus", 512, make_rng(2))
    np.testing.assert_array_equal(norm.points, normalize_unit_cube(PointCloud(pts)).points)


def test_torus_area_weighting():
    # uniform-by-area sampling puts more points on the outer half of the tube
    pts = raw_primitive("torus", 20000, make_rng(5))
    rho = np.hypot(pts[:, 0], pts[:, 1])
    outer = (rho > TORUS_MAJOR).mean()
    # exact share: (pi R + 2 r) / (2 pi R)
    expected = (np.pi * TORUS_MAJOR + 2 * TORUS_MINOR) / (2 * np.pi * TORUS_MAJOR)
    assert abs(outer - expected) < 0.015


def test_unknown_shape():
    with pytest.raises(ConfigurationError):
        sample_primitive("cone", 10, make_rng(0))


def test_rng_streams_reproducible_and_distinct():
    a = make_rng(7, 1).standard_normal(5)
    b = make_rng(7, 1).standard_normal(5)
    c = make_rng(7, 2).standard_normal(5)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_make_dataset_shapes_and_labels():
    train, test = make_dataset(12, 6, 32, seed=3)
    assert len(train) == 12 and len(test) == 6
    assert train.stacked().shape == (12, 32, 3)
    assert list(train.labels) == [0, 1, 2] * 4
    assert train.split == "train" and test.split == "test"
    again, _ = make_dataset(12, 6, 32, seed=3)
    np.testing.assert_array_equal(train.stacked(), again.stacked())


def test_dataset_invariants():
    a = PointCloud(np.zeros((4, 3)), 0)
    b = PointCloud(np.zeros((5, 3)), 0)
    with pytest.raises(InvalidInputError):
        LabeledDataset((a, b), ("x",))
    with pytest.raises(InvalidInputError):
        LabeledDataset((PointCloud(np.zeros((4, 3)), 3),), ("x",))


# ---------------------------------------------------------------------------
# I/O

def test_binary_roundtrip_bit_identical(tmp_path):
    pts = np.array([[0.1, 0.2, 0.3], [1.0, -2.5, 3.25], [1e-8, 4.0, -0.0]], dtype=np.float32).astype(np.float64)
    write_cloud(PointCloud(pts), tmp_path / "c.pcb")
    back = read_cloud(tmp_path / "c.pcb")
    assert back.points.tobytes() == pts.tobytes()


def test_binary_layout(tmp_path):
    write_cloud(PointCloud([[1.0, 2.0, 3.0]]), tmp_path / "c.pcb", "pcb-binary")
    raw = (tmp_path / "c.pcb").read_bytes()
    assert raw == b"PCB1" + struct.pack("<I", 1) + struct.pack("<3f", 1.0, 2.0, 3.0)


def test_text_line_parses(tmp_path):
    p = tmp_path / "c.xyz"
    p.write_text("# comment\n0.1 0.2 0.3\n")
    c = read_cloud(p)
    np.testing.assert_array_equal(c.points, [[0.1, 0.2, 0.3]])


@given(arrays(np.float64, st.tuples(st.integers(1, 20), st.just(3)), elements=st.floats(-100, 100)))
@settings(max_examples=40, deadline=None)
def test_roundtrip_property(tmp_path_factory, pts):
    d = tmp_path_factory.mktemp("rt")
    c = PointCloud(pts)
    write_cloud(c, d / "a.pcb")
    write_cloud(c, d / "a.xyz")
    np.testing.assert_array_equal(read_cloud(d / "a.pcb").points, pts.astype(np.float32))
    np.testing.assert_allclose(read_cloud(d / "a.xyz").points, pts, atol=1e-6 * max(1.0, np.abs(pts).max()), rtol=0)


def test_truncated_binary_reports_sizes(tmp_path):
    p = tmp_path / "c.pcb"
    write_cloud(PointCloud(np.zeros((3, 3))), p)
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(FormatError, match="44 bytes.*39 bytes"):
        read_cloud(p)


def test_bad_magic(tmp_path):
    p = tmp_path / "c.pcb"
    p.write_bytes(b"XXXX" + struct.pack("<I", 0))
    with pytest.raises(FormatError, match="magic"):
        read_cloud(p)


def test_malformed_text_line_number(tmp_path):
    p = tmp_path / "c.xyz"
    p.write_text("0 0 0\n1 2\n")
    with pytest.raises(FormatError, match=":2:"):
        read_cloud(p)
    p.write_text("0 0 0\n1 x 2\n")
    with pytest.raises(FormatError, match=":2:"):
        read_cloud(p)


def test_manifest_roundtrip(tmp_path):
    train, test = make_dataset(6, 3, 16, seed=1)
    write_manifest([train, test], tmp_path)
    back = read_manifest(tmp_path / "manifest.json")
    assert back["train"].class_names == train.class_names
    np.testing.assert_array_equal(back["test"].labels, test.labels)
    np.testing.assert_array_equal(back["train"].stacked(), train.stacked().astype(np.float32))
