"""Small building blocks for the hand-differentiated point networks."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError


def init_linear(rng: np.random.Generator, fan_in: int, fan_out: int):
    """Symmetric uniform fan-in init, returns (W, b)."""
    bound = 1.0 / np.sqrt(fan_in)
    W = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    b = rng.uniform(-bound, bound, size=fan_out)
    return W, b


def max_pool(h: np.ndarray):
    """Max over the point axis of (B, N, H); ties resolve to the lowest point index."""
    idx = np.argmax(h, axis=1)
    return np.take_along_axis(h, idx[:, None, :], 1)[:, 0, :], idx


def max_pool_backward(dg: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    B, H = dg.shape
    dh = np.zeros((B, n, H))
    np.put_along_axis(dh, idx[:, None, :], dg[:, None, :], 1)
    return dh


def timestep_embedding(t, dim: int, base: float = 10000.0) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, shape (len(t), dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(base) * np.arange(half) / max(half, 1))
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


def clip_by_global_norm(grads: dict, max_norm: float) -> float:
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if np.isfinite(norm) and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def round_to_f32(params: dict) -> dict:
    """Make parameters exactly representable in a float32 checkpoint."""
    return {k: v.astype(np.float32).astype(np.float64) for k, v in params.items()}


def save_checkpoint(path, magic: bytes, hyper: dict, params: dict, version: int = 1) -> None:
    """Write ``magic``, u32 version, a length-prefixed JSON hyperparameter block,
    then each tensor as (name, shape, little-endian f32 data)."""
    blob = json.dumps(hyper, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", version, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            arr = np.asarray(params[name], dtype="<f4")
            key = name.encode("utf-8")
            fh.write(struct.pack("<I", len(key)))
            fh.write(key)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def load_checkpoint(path, magic: bytes):
    """Inverse of :func:`save_checkpoint`; returns (version, hyper, params)."""
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"{path}: truncated at offset {pos}, needed {n} more bytes, file has {len(data)}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    got = take(len(magic))
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r}, expected {magic!r}")
    version, hlen = struct.unpack("<II", take(8))
    try:
        hyper = json.loads(take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable hyperparameter block ({exc})") from None
    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (klen,) = struct.unpack("<I", take(4))
        name = take(klen).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape)
        params[name] = arr.astype(np.float64)
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes after last tensor")
    return version, hyper, params
