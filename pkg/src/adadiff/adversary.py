"""Victim classifier, gradient and geometric attacks, and classical defenses."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import LabeledDataset, PointCloud
from .errors import ConfigurationError, ContractError, InvalidArgumentError, TrainingFailure
from .geometry import KdIndex, fit_planes, neighborhoods
from .nn import (clip_by_global_norm, init_linear, load_checkpoint, max_pool, max_pool_backward,
                 round_to_f32, save_checkpoint)

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"ACLS"


class ToyClassifier:
    """Shared per-point MLP, max-pool over points, linear head.

    Logits are invariant to point order. Max-pool gradients go to the first
    point attaining the maximum.
    """

    def __init__(self, params: dict, widths: tuple, num_classes: int):
        self.params = params
        self.widths = tuple(int(w) for w in widths)
        self.num_classes = int(num_classes)

    @classmethod
    def initialize(cls, widths, num_classes: int, rng: np.random.Generator) -> "ToyClassifier":
        widths = tuple(widths)
        p = {}
        dims = (3,) + widths
        for i in range(len(widths)):
            p[f"W{i}"], p[f"b{i}"] = init_linear(rng, dims[i], dims[i + 1])
        p["Wh"], p["bh"] = init_linear(rng, widths[-1], num_classes)
        return cls(p, widths, num_classes)

    @property
    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    def _forward(self, x):
        p = self.params
        pre, acts = [], [x]
        h = x
        for i in range(len(self.widths)):
            a = h @ p[f"W{i}"] + p[f"b{i}"]
            h = np.maximum(a, 0.0)
            pre.append(a)
            acts.append(h)
        g, arg = max_pool(h)
        logits = g @ p["Wh"] + p["bh"]
        return logits, (pre, acts, g, arg)

    def logits(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            return self._forward(x[None])[0][0]
        return self._forward(x)[0]

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.logits(x), axis=-1)

    def backward(self, cache, dlogits, want_params=True, want_input=False):
        p = self.params
        pre, acts, g, arg = cache
        n = acts[0].shape[1]
        grads = {}
        if want_params:
            grads["Wh"] = g.T @ dlogits
            grads["bh"] = dlogits.sum(axis=0)
        dh = max_pool_backward(dlogits @ p["Wh"].T, arg, n)
        for i in reversed(range(len(self.widths))):
            da = dh * (pre[i] > 0)
            if want_params:
                grads[f"W{i}"] = acts[i].reshape(-1, acts[i].shape[-1]).T @ da.reshape(-1, da.shape[-1])
                grads[f"b{i}"] = da.sum(axis=(0, 1))
            if i > 0 or want_input:
                dh = da @ p[f"W{i}"].T
        return grads, (dh if want_input else None)

    def loss_and_grads(self, x, y, loss: str = "cross-entropy", want_params=True, want_input=False):
        """Summed per-cloud loss with gradients; returns (per-cloud losses, param grads, input grad).

        ``cross-entropy`` is the training loss; ``max-margin`` is
        max_{j != y} z_j - z_y, which attacks ascend.
        """
        logits, cache = self._forward(np.asarray(x, dtype=np.float64))
        B = len(logits)
        rows = np.arange(B)
        if loss == "cross-entropy":
            z = logits - logits.max(axis=1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            values = -logp[rows, y]
            dlogits = np.exp(logp)
            dlogits[rows, y] -= 1.0
        elif loss == "max-margin":
            other = logits.copy()
            other[rows, y] = -np.inf
            j = np.argmax(other, axis=1)
            values = logits[rows, j] - logits[rows, y]
            dlogits = np.zeros_like(logits)
            dlogits[rows, j] = 1.0
            dlogits[rows, y] -= 1.0
        else:
            raise ConfigurationError(f"unknown loss {loss!r}")
        pg, ig = self.backward(cache, dlogits, want_params, want_input)
        return values, pg, ig

    def save(self, path) -> None:
        save_checkpoint(path, CHECKPOINT_MAGIC, {"widths": list(self.widths), "num_classes": self.num_classes},
                        self.params)

    @classmethod
    def load(cls, path) -> "ToyClassifier":
        _, hyper, params = load_checkpoint(path, CHECKPOINT_MAGIC)
        return cls(params, tuple(hyper["widths"]), hyper["num_classes"])


@dataclass
class ClassifierHyper:
    epochs: int = 40
    batch: int = 16
    lr: float = 0.05
    widths: tuple = (32, 64)
    clip: float = 5.0
    jitter: float = 0.0
    min_accuracy: float = 0.90


def accuracy(model: ToyClassifier, stack: np.ndarray, labels: np.ndarray) -> float:
    if len(stack) == 0:
        return float("nan")
    return float((model.predict(stack) == np.asarray(labels)).mean())


def batch_accuracy(model: ToyClassifier, clouds, labels) -> float:
    """Accuracy over clouds that may differ in point count."""
    hits = [int(model.predict(np.asarray(c))) == int(y) for c, y in zip(clouds, labels)]
    return float(np.mean(hits)) if hits else float("nan")


@dataclass
class ClassifierLog:
    train_loss: list = field(default_factory=list)
    test_accuracy: list = field(default_factory=list)


def train_classifier(train: LabeledDataset, hyper: ClassifierHyper, rng: np.random.Generator,
                     test: Optional[LabeledDataset] = None, check: bool = True):
    """Train a :class:`ToyClassifier` with clipped SGD on cross-entropy.

    With ``check`` set, a final test accuracy below ``hyper.min_accuracy``
    raises :class:`TrainingFailure`.
    """
    data, labels = train.stacked(), train.labels
    model = ToyClassifier.initialize(hyper.widths, len(train.class_names), rng)
    log = ClassifierLog()
    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(len(data))
        losses = []
        for s in range(0, len(order), hyper.batch):
            sel = order[s:s + hyper.batch]
            x = data[sel]
            if hyper.jitter > 0:
                x = x + hyper.jitter * rng.standard_normal(x.shape)
            values, grads, _ = model.loss_and_grads(x, labels[sel])
            loss = float(values.mean())
            if not np.isfinite(loss):
                raise TrainingFailure(f"classifier loss became {loss} in epoch {epoch}", epoch)
            for k in grads:
                grads[k] /= len(sel)
            clip_by_global_norm(grads, hyper.clip)
            for k, gk in grads.items():
                model.params[k] -= hyper.lr * gk
            losses.append(loss)
        log.train_loss.append(float(np.mean(losses)))
        if test is not None:
            log.test_accuracy.append(accuracy(model, test.stacked(), test.labels))
        logger.info("classifier epoch %d loss %.4f", epoch, log.train_loss[-1])
    if hyper.epochs:
        model.params = round_to_f32(model.params)
    if check and test is not None and hyper.epochs:
        acc = accuracy(model, test.stacked(), test.labels)
        if acc < hyper.min_accuracy:
            raise TrainingFailure(f"clean test accuracy {acc:.3f} below {hyper.min_accuracy}", hyper.epochs)
    return model, log


# ---------------------------------------------------------------------------
# attacks

@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.05
    steps: int = 50
    step_size: float = 0.007
    loss: str = "max-margin"
    variant: str = "pgd"
    random_start: bool = True
    drop_count: int = 0

    def validate(self) -> "AttackConfig":
        if self.epsilon < 0 or self.steps < 0:
            raise ConfigurationError("epsilon and steps must be >= 0")
        if self.steps > 0 and self.step_size <= 0:
            raise ConfigurationError("step_size must be > 0 when steps > 0")
        if self.loss not in ("max-margin", "cross-entropy"):
            raise ConfigurationError(f"unknown attack loss {self.loss!r}")
        if self.variant not in ("pgd", "bpda-pgd"):
            raise ConfigurationError(f"unknown gradient attack variant {self.variant!r}")
        return self


def _project(x_adv, x, eps):
    return np.clip(x_adv, x - eps, x + eps)


def _gradient_attack(model, x, y, cfg, rng, purify_fn=None):
    cfg.validate()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if cfg.epsilon == 0 or cfg.steps == 0:
        return x.copy()
    x_adv = x.copy()
    if cfg.random_start:
        x_adv = x_adv + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape)
    x_adv = _project(x_adv, x, cfg.epsilon)
    for _ in range(cfg.steps):
        probe = x_adv
        if purify_fn is not None:
            probe = purify_fn(x_adv)
            if probe.shape != x_adv.shape:
                raise ContractError(f"purifier changed shape {x_adv.shape} -> {probe.shape}")
        _, _, grad = model.loss_and_grads(probe, y, cfg.loss, want_params=False, want_input=True)
        x_adv = _project(x_adv + cfg.step_size * np.sign(grad), x, cfg.epsilon)
        assert np.all(np.abs(x_adv - x) <= cfg.epsilon + 1e-9)
    return x_adv


def pgd_attack(model: ToyClassifier, cloud, cfg: AttackConfig, rng: np.random.Generator, label=None):
    """Untargeted L-inf PGD with sign steps and per-coordinate projection.

    Accepts one :class:`PointCloud` (label taken from the cloud unless given)
    or an (M, N, 3) stack with an (M,) label array.
    """
    if isinstance(cloud, PointCloud):
        y = cloud.label if label is None else label
        out = _gradient_attack(model, cloud.points[None], np.array([y]), cfg, rng)[0]
        return cloud.with_points(out)
    return _gradient_attack(model, cloud, label, cfg, rng)


def bpda_pgd_attack(model: ToyClassifier, purify_fn: Callable, cloud, cfg: AttackConfig,
                    rng: np.random.Generator, label=None):
    """PGD through a purifier, treating the purifier's Jacobian as the identity.

    ``purify_fn`` maps an (M, N, 3) stack to a stack of the same shape.
    """
    if isinstance(cloud, PointCloud):
        y = cloud.label if label is None else label
        out = _gradient_attack(model, cloud.points[None], np.array([y]), cfg, rng, purify_fn)[0]
        return cloud.with_points(out)
    return _gradient_attack(model, cloud, label, cfg, rng, purify_fn)


def jitter_attack(cloud, sigma: float, rng: np.random.Generator):
    """Add isotropic Gaussian noise of std ``sigma`` to every coordinate."""
    if sigma < 0:
        raise InvalidArgumentError("sigma must be >= 0")
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if sigma == 0:
        return cloud
    out = pts + sigma * rng.standard_normal(pts.shape)
    return cloud.with_points(out) if isinstance(cloud, PointCloud) else out


def tangent_jitter(cloud, sigma: float, k: int, rng: np.random.Generator):
    """Gaussian offsets projected onto each point's local best-fit plane."""
    if sigma < 0:
        raise InvalidArgumentError("sigma must be >= 0")
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if sigma == 0:
        return cloud
    normals, _, _, degenerate = fit_planes(pts, neighborhoods(KdIndex(pts), k))
    off = sigma * rng.standard_normal(pts.shape)
    off -= (off * normals).sum(-1, keepdims=True) * normals
    off[degenerate] = 0.0
    out = pts + off
    return cloud.with_points(out) if isinstance(cloud, PointCloud) else out


def saliency(model: ToyClassifier, points: np.ndarray, label: int) -> np.ndarray:
    """Per-point norm of the gradient of the true-class logit."""
    logits, cache = model._forward(np.asarray(points, dtype=np.float64)[None])
    dlogits = np.zeros_like(logits)
    dlogits[0, label] = 1.0
    _, dx = model.backward(cache, dlogits, want_params=False, want_input=True)
    return np.linalg.norm(dx[0], axis=-1)


def drop_attack(model: ToyClassifier, cloud, drop_count: int, label=None):
    """Remove the ``drop_count`` points with the largest saliency; order of the rest is kept."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    y = cloud.label if label is None else label
    if not 0 <= drop_count < len(pts):
        raise InvalidArgumentError(f"drop_count must be in [0, {len(pts)}), got {drop_count}")
    if drop_count == 0:
        return cloud
    s = saliency(model, pts, y)
    order = np.lexsort((np.arange(len(pts)), -s))
    keep = np.sort(order[drop_count:])
    return cloud.with_points(pts[keep]) if isinstance(cloud, PointCloud) else pts[keep]


# ---------------------------------------------------------------------------
# classical defenses

def srs_defense(cloud, keep: int, rng: np.random.Generator):
    """Uniformly subsample ``keep`` points without replacement, preserving their order."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if not 0 < keep <= len(pts):
        raise InvalidArgumentError(f"keep must be in [1, {len(pts)}], got {keep}")
    idx = np.sort(rng.choice(len(pts), size=keep, replace=False))
    return cloud.with_points(pts[idx]) if isinstance(cloud, PointCloud) else pts[idx]


def sor_defense(cloud, k: int = 2, alpha: float = 1.1):
    """Drop points whose mean distance to their k nearest neighbours exceeds mean + alpha * std."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if k < 1 or k >= len(pts):
        raise InvalidArgumentError(f"k must be in [1, {len(pts) - 1}], got {k}")
    nb = KdIndex(pts).query_all(k + 1)
    d = np.sqrt(((pts[nb] - pts[:, None, :]) ** 2).sum(-1))
    # nb includes the point itself at distance 0; average over the k others
    mean_d = d.sum(axis=1) / k
    if np.isposinf(alpha):
        keep = np.ones(len(pts), dtype=bool)
    else:
        keep = mean_d <= mean_d.mean() + alpha * mean_d.std(ddof=1)
    return cloud.with_points(pts[keep]) if isinstance(cloud, PointCloud) else pts[keep]
