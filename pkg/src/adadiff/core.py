"""Point-cloud value types, seeded randomness, synthetic shapes and file formats.

Coordinates are held as float64 in memory and written as float32 on disk.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, FormatError, InvalidArgumentError, InvalidInputError

SHAPES = ("sphere", "cube", "torus")

# raw torus radii before normalization (axis = z)
TORUS_MAJOR = 1.0
TORUS_MINOR = 0.4

PCB_MAGIC = b"PCB1"


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Return a PCG64 generator for ``seed`` and an optional stream key.

    Streams are split with ``SeedSequence(seed, spawn_key=stream)``, so
    ``make_rng(s, w)`` gives worker ``w`` a stream independent of every other
    worker while depending only on ``(s, w)``.
    """
    seed = int(seed)
    if seed < 0 or seed >= 2**64:
        raise InvalidArgumentError(f"seed must be a 64-bit unsigned integer, got {seed}")
    ss = np.random.SeedSequence(seed, spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.PCG64(ss))


def _as_points(points) -> np.ndarray:
    arr = np.array(points, dtype=np.float64, copy=True)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise InvalidInputError(f"points must have shape (N, 3), got {arr.shape}")
    if arr.shape[0] < 1:
        raise InvalidInputError("a point cloud needs at least one point")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("point coordinates must be finite")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Immutable ordered set of N points in R^3 with an optional class label."""

    points: np.ndarray
    label: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "points", _as_points(self.points))
        if self.label is not None:
            object.__setattr__(self, "label", int(self.label))

    def __len__(self):
        return self.points.shape[0]

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        return self.label == other.label and np.array_equal(self.points, other.points)

    __hash__ = None

    def with_points(self, points) -> "PointCloud":
        return PointCloud(points, self.label)


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Fixed-size labelled clouds for one split.

    All clouds share the same point count so they stack into one
    ``(M, N, 3)`` array (see :meth:`stacked`).
    """

    clouds: tuple
    class_names: tuple
    split: str = "train"
    _stack: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        clouds = tuple(self.clouds)
        names = tuple(str(c) for c in self.class_names)
        object.__setattr__(self, "clouds", clouds)
        object.__setattr__(self, "class_names", names)
        if self.split not in ("train", "test"):
            raise ConfigurationError(f"split must be 'train' or 'test', got {self.split!r}")
        sizes = {len(c) for c in clouds}
        if len(sizes) > 1:
            raise InvalidInputError(f"all clouds in a dataset need the same point count, got {sorted(sizes)}")
        for c in clouds:
            if c.label is None or not 0 <= c.label < len(names):
                raise InvalidInputError(f"label {c.label} out of range for {len(names)} classes")
        if clouds:
            stack = np.stack([c.points for c in clouds])
        else:
            stack = np.zeros((0, 0, 3))
        stack.setflags(write=False)
        object.__setattr__(self, "_stack", stack)

    def __len__(self):
        return len(self.clouds)

    @property
    def num_points(self) -> int:
        return self._stack.shape[1] if len(self) else 0

    @property
    def labels(self) -> np.ndarray:
        return np.array([c.label for c in self.clouds], dtype=np.int64)

    def stacked(self) -> np.ndarray:
        """All coordinates as a read-only ``(M, N, 3)`` array."""
        return self._stack

    def subset(self, indices: Iterable[int]) -> "LabeledDataset":
        return LabeledDataset(tuple(self.clouds[i] for i in indices), self.class_names, self.split)


def normalize_unit_cube(cloud: PointCloud) -> PointCloud:
    """Center the bounding box at the origin and scale its longest side to 1.

    Point order is preserved. A cloud whose points all coincide maps to zeros.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else _as_points(cloud)
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    extent = hi - lo
    span = extent.max()
    if span == 0.0:
        out = np.zeros_like(pts)
    else:
        # written so the longest axis lands on exactly +-0.5
        out = (pts - lo) / span - 0.5 * (extent / span)
    label = cloud.label if isinstance(cloud, PointCloud) else None
    return PointCloud(out, label)


def raw_primitive(shape: str, n: int, rng: np.random.Generator) -> np.ndarray:
    """Sample ``n`` points uniformly (by area) on an unnormalized primitive surface.

    sphere: unit sphere. cube: surface of [-1, 1]^3. torus: major radius
    ``TORUS_MAJOR``, tube radius ``TORUS_MINOR``, symmetric about the z axis.
    """
    if shape not in SHAPES:
        raise ConfigurationError(f"unknown shape {shape!r}; expected one of {SHAPES}")
    if n < 1:
        raise InvalidArgumentError("n must be >= 1")
    if shape == "sphere":
        v = rng.standard_normal((n, 3))
        return v / np.linalg.norm(v, axis=1, keepdims=True)
    if shape == "cube":
        face = rng.integers(0, 6, size=n)
        uv = rng.uniform(-1.0, 1.0, size=(n, 2))
        axis = face % 3
        sign = np.where(face < 3, 1.0, -1.0)
        pts = np.empty((n, 3))
        for a in range(3):
            rows = axis == a
            others = [b for b in range(3) if b != a]
            pts[rows, a] = sign[rows]
            pts[np.ix_(rows, others)] = uv[rows]
        return pts
    # torus: area element is proportional to (R + r cos(theta)); rejection-sample theta
    R, r = TORUS_MAJOR, TORUS_MINOR
    theta = np.empty(0)
    while theta.size < n:
        cand = rng.uniform(0.0, 2 * np.pi, size=2 * n)
        keep = rng.uniform(0.0, R + r, size=2 * n) < R + r * np.cos(cand)
        theta = np.concatenate([theta, cand[keep]])
    theta = theta[:n]
    phi = rng.uniform(0.0, 2 * np.pi, size=n)
    ring = R + r * np.cos(theta)
    return np.column_stack([ring * np.cos(phi), ring * np.sin(phi), r * np.sin(theta)])


def sample_primitive(shape: str, n: int, rng: np.random.Generator) -> PointCloud:
    """Sample a labelled primitive cloud normalized to the unit cube."""
    pts = raw_primitive(shape, n, rng)
    return normalize_unit_cube(PointCloud(pts, SHAPES.index(shape)))


def make_dataset(n_train: int = 300, n_test: int = 150, n_points: int = 256, seed: int = 0,
                 shapes: Sequence[str] = SHAPES):
    """Build balanced train/test splits of normalized primitive clouds.

    Cloud ``i`` of a split has class ``i % len(shapes)`` and is drawn from the
    stream ``(seed, split_id, i)``, so the two splits never share samples.
    """
    for s in shapes:
        if s not in SHAPES:
            raise ConfigurationError(f"unknown shape {s!r}")
    out = []
    for split_id, (split, count) in enumerate((("train", n_train), ("test", n_test))):
        clouds = []
        for i in range(count):
            shape = shapes[i % len(shapes)]
            c = sample_primitive(shape, n_points, make_rng(seed, split_id, i))
            clouds.append(PointCloud(c.points, i % len(shapes)))
        out.append(LabeledDataset(tuple(clouds), tuple(shapes), split))
    return tuple(out)


# ---------------------------------------------------------------------------
# file formats

def _fmt(path) -> str:
    suffix = Path(path).suffix.lower()
    return "pcb-binary" if suffix == ".pcb" else "xyz-text"


def write_cloud(cloud: PointCloud, path, format: Optional[str] = None) -> None:
    """Write ``cloud`` as ``xyz-text`` or ``pcb-binary`` (inferred from suffix if omitted)."""
    format = format or _fmt(path)
    pts32 = np.asarray(cloud.points, dtype="<f4")
    if format == "pcb-binary":
        with open(path, "wb") as fh:
            fh.write(PCB_MAGIC)
            fh.write(struct.pack("<I", pts32.shape[0]))
            fh.write(pts32.tobytes(order="C"))
    elif format == "xyz-text":
        with open(path, "w", newline="\n") as fh:
            for x, y, z in pts32.astype(np.float64):
                fh.write(f"{x:.9g} {y:.9g} {z:.9g}\n")
    else:
        raise ConfigurationError(f"unknown cloud format {format!r}")


def read_cloud(path, format: Optional[str] = None, label: Optional[int] = None) -> PointCloud:
    """Read a cloud written by :func:`write_cloud`; raises :class:`FormatError` on malformed input."""
    format = format or _fmt(path)
    if format == "pcb-binary":
        data = Path(path).read_bytes()
        if len(data) < 8:
            raise FormatError(f"{path}: header needs 8 bytes, file has {len(data)}")
        if data[:4] != PCB_MAGIC:
            raise FormatError(f"{path}: bad magic {data[:4]!r} at offset 0, expected {PCB_MAGIC!r}")
        (n,) = struct.unpack("<I", data[4:8])
        expected = 8 + 12 * n
        if len(data) != expected:
            raise FormatError(f"{path}: header declares {n} points ({expected} bytes), file has {len(data)} bytes")
        pts = np.frombuffer(data, dtype="<f4", offset=8).reshape(n, 3).astype(np.float64)
    elif format == "xyz-text":
        rows = []
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not rows and line.startswith("#"):
                    continue
                parts = line.split(" ")
                if len(parts) != 3:
                    raise FormatError(f"{path}:{lineno}: expected 3 space-separated values, got {line!r}")
                try:
                    rows.append([float(p) for p in parts])
                except ValueError:
                    raise FormatError(f"{path}:{lineno}: non-numeric value in {line!r}") from None
        pts = np.array(rows, dtype=np.float64).reshape(-1, 3)
    else:
        raise ConfigurationError(f"unknown cloud format {format!r}")
    try:
        return PointCloud(pts, label)
    except InvalidInputError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_manifest(datasets: Sequence[LabeledDataset], root, format: str = "pcb-binary") -> Path:
    """Write every cloud under ``root/<split>/`` plus ``root/manifest.json``."""
    root = Path(root)
    ext = ".pcb" if format == "pcb-binary" else ".xyz"
    manifest = {"class_names": list(datasets[0].class_names), "format": format, "splits": {}}
    for ds in datasets:
        (root / ds.split).mkdir(parents=True, exist_ok=True)
        entries = []
        for i, c in enumerate(ds.clouds):
            rel = f"{ds.split}/{i:05d}{ext}"
            write_cloud(c, root / rel, format)
            entries.append({"path": rel, "label": c.label})
        manifest["splits"][ds.split] = entries
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> dict:
    """Load a dataset manifest and return ``{split: LabeledDataset}``."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
        names = manifest["class_names"]
        fmt = manifest.get("format")
        splits = manifest["splits"]
    except (KeyError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed manifest ({exc})") from None
    out = {}
    for split, entries in splits.items():
        clouds = tuple(read_cloud(path.parent / e["path"], fmt, e["label"]) for e in entries)
        out[split] = LabeledDataset(clouds, names, split)
    return out


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
