"""Noise-prediction models: an exact Gaussian oracle and a trainable point MLP."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import LabeledDataset
from .diffusion import NoiseSchedule
from .errors import ContractError, InvalidArgumentError, TrainingFailure
from .nn import (clip_by_global_norm, init_linear, load_checkpoint, max_pool, max_pool_backward,
                 round_to_f32, save_checkpoint, timestep_embedding)

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"ADNZ"


def _batched(x, t):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[-1] != 3:
        raise ContractError(f"expected points of shape (B, N, 3) or (N, 3), got {x.shape}")
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (x.shape[0],))
    return x, t, single


class AnalyticGaussianDenoiser:
    """Posterior-mean noise prediction when clean points are i.i.d. N(mu, var * I)."""

    def __init__(self, mu, var: float, schedule: NoiseSchedule):
        self.mu = np.asarray(mu, dtype=np.float64).reshape(3)
        self.var = float(var)
        self.schedule = schedule

    def predict(self, x, t):
        x, t, single = _batched(x, t)
        if np.any(t < 1) or np.any(t > self.schedule.T):
            raise ContractError(f"timestep outside [1, {self.schedule.T}]")
        ab = self.schedule.alpha_bar[t][:, None, None]
        eps = np.sqrt(1.0 - ab) * (x - np.sqrt(ab) * self.mu) / (ab * self.var + 1.0 - ab)
        return eps[0] if single else eps


@dataclass
class DenoiserHyper:
    epochs: int = 80
    batch: int = 16
    lr: float = 0.002
    H: int = 128
    E: int = 32
    enc_layers: int = 2
    dec_layers: int = 3
    optimizer: str = "adam"
    clip: float = 5.0
    t_max: int = 20  # 0 means the full schedule length
    val_size: int = 16

    def as_dict(self):
        return dict(self.__dict__)


class PointMlpDenoiser:
    """Permutation-equivariant epsilon predictor.

    Encoder: ``enc_layers`` shared per-point ReLU layers (3 -> H -> ... -> H),
    with a projected sinusoidal timestep embedding added to the first
    pre-activation. A max-pooled global feature is concatenated back onto
    every point and ``dec_layers`` per-point layers map (2H -> H -> ... -> 3).
    """

    def __init__(self, params: dict, H: int, E: int, T: int, enc_layers: int = 2, dec_layers: int = 3):
        self.params = params
        self.H, self.E, self.T = int(H), int(E), int(T)
        self.enc_layers, self.dec_layers = int(enc_layers), int(dec_layers)
        if enc_layers < 1 or dec_layers < 1:
            raise InvalidArgumentError("need at least one encoder and one decoder layer")

    @classmethod
    def initialize(cls, H: int, E: int, T: int, rng: np.random.Generator, enc_layers: int = 2,
                   dec_layers: int = 3) -> "PointMlpDenoiser":
        p = {}
        p["Wt"], p["bt"] = init_linear(rng, E, H)
        for i in range(enc_layers):
            p[f"We{i}"], p[f"be{i}"] = init_linear(rng, 3 if i == 0 else H, H)
        for i in range(dec_layers):
            fan_out = 3 if i == dec_layers - 1 else H
            p[f"Wd{i}"], p[f"bd{i}"] = init_linear(rng, 2 * H if i == 0 else H, fan_out)
        last = dec_layers - 1
        p[f"Wd{last}"] *= 0.1
        p[f"bd{last}"][:] = 0.0
        return cls(p, H, E, T, enc_layers, dec_layers)

    @property
    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    def _forward(self, x, t):
        p = self.params
        emb = timestep_embedding(t, self.E)
        tproj = emb @ p["Wt"] + p["bt"]
        pre, acts = [], [x]
        h = x
        for i in range(self.enc_layers):
            a = h @ p[f"We{i}"] + p[f"be{i}"]
            if i == 0:
                a = a + tproj[:, None, :]
            h = np.maximum(a, 0.0)
            pre.append(a)
            acts.append(h)
        g, arg = max_pool(h)
        h = np.concatenate([h, np.broadcast_to(g[:, None, :], h.shape)], axis=-1)
        acts[-1] = h
        for i in range(self.dec_layers):
            a = h @ p[f"Wd{i}"] + p[f"bd{i}"]
            pre.append(a)
            if i < self.dec_layers - 1:
                h = np.maximum(a, 0.0)
                acts.append(h)
        return a, (emb, pre, acts, arg)

    def predict(self, x, t):
        x, t, single = _batched(x, t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ContractError(f"timestep outside [1, {self.T}]")
        out, _ = self._forward(x, t)
        return out[0] if single else out

    def _backward(self, cache, dout):
        p = self.params
        emb, pre, acts, arg = cache
        H, L = self.H, self.enc_layers
        n = acts[0].shape[1]
        g = {}
        da = dout
        for i in reversed(range(self.dec_layers)):
            inp = acts[L + i]
            g[f"Wd{i}"] = inp.reshape(-1, inp.shape[-1]).T @ da.reshape(-1, da.shape[-1])
            g[f"bd{i}"] = da.sum(axis=(0, 1))
            dh = da @ p[f"Wd{i}"].T
            if i > 0:
                da = dh * (pre[L + i - 1] > 0)
        dh = dh[..., :H] + max_pool_backward(dh[..., H:].sum(axis=1), arg, n)
        for i in reversed(range(L)):
            da = dh * (pre[i] > 0)
            inp = acts[i]
            g[f"We{i}"] = inp.reshape(-1, inp.shape[-1]).T @ da.reshape(-1, H)
            g[f"be{i}"] = da.sum(axis=(0, 1))
            if i > 0:
                dh = da @ p[f"We{i}"].T
        dt = da.sum(axis=1)
        g["Wt"] = emb.T @ dt
        g["bt"] = dt.sum(axis=0)
        return g

    def loss_and_grads(self, xt, t, eps):
        """Mean squared error between predicted and true noise, with parameter gradients."""
        out, cache = self._forward(xt, t)
        diff = out - eps
        return float((diff ** 2).mean()), self._backward(cache, 2.0 * diff / diff.size)

    def loss(self, xt, t, eps) -> float:
        out, _ = self._forward(xt, t)
        return float(((out - eps) ** 2).mean())

    def save(self, path, extra: dict | None = None) -> None:
        hyper = {"H": self.H, "E": self.E, "T": self.T, "enc_layers": self.enc_layers,
                 "dec_layers": self.dec_layers}
        hyper.update(extra or {})
        save_checkpoint(path, CHECKPOINT_MAGIC, hyper, self.params)

    @classmethod
    def load(cls, path) -> "PointMlpDenoiser":
        _, hyper, params = load_checkpoint(path, CHECKPOINT_MAGIC)
        return cls(params, hyper["H"], hyper["E"], hyper["T"], hyper["enc_layers"], hyper["dec_layers"])


@dataclass
class TrainingLog:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)


OPTIMIZERS = ("sgd", "momentum", "adam")


class _Optimizer:
    """Plain, heavy-ball (0.9) or Adam (0.9, 0.999) parameter updates."""

    def __init__(self, kind: str, lr: float, params: dict):
        if kind not in OPTIMIZERS:
            raise InvalidArgumentError(f"unknown optimizer {kind!r}; expected one of {OPTIMIZERS}")
        self.kind, self.lr, self.step = kind, lr, 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def update(self, params: dict, grads: dict) -> None:
        self.step += 1
        for k, g in grads.items():
            if self.kind == "sgd":
                params[k] -= self.lr * g
            elif self.kind == "momentum":
                self.m[k] = 0.9 * self.m[k] + g
                params[k] -= self.lr * self.m[k]
            else:
                self.m[k] = 0.9 * self.m[k] + 0.1 * g
                self.v[k] = 0.999 * self.v[k] + 0.001 * g * g
                mhat = self.m[k] / (1 - 0.9 ** self.step)
                vhat = self.v[k] / (1 - 0.999 ** self.step)
                params[k] -= self.lr * mhat / (np.sqrt(vhat) + 1e-8)


def train_denoiser(dataset: LabeledDataset, schedule: NoiseSchedule, hyper: DenoiserHyper,
                   rng: np.random.Generator):
    """Fit a :class:`PointMlpDenoiser` to the epsilon-matching loss.

    Timesteps are drawn uniformly from 1..t_max and gradients are clipped to
    a global norm of ``hyper.clip`` before each update. ``val_loss[0]`` is the
    loss of the initial parameters on a fixed validation batch drawn up front.
    """
    if len(dataset) == 0:
        raise InvalidArgumentError("training set is empty")
    t_max = hyper.t_max or schedule.T
    if not 1 <= t_max <= schedule.T:
        raise InvalidArgumentError(f"t_max must be in [1, {schedule.T}]")
    data = dataset.stacked()
    model = PointMlpDenoiser.initialize(hyper.H, hyper.E, schedule.T, rng, hyper.enc_layers, hyper.dec_layers)
    opt = _Optimizer(hyper.optimizer, hyper.lr, model.params)

    def noised(x0, t, eps):
        ab = schedule.alpha_bar[t][:, None, None]
        return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps

    vi = rng.integers(0, len(data), size=hyper.val_size)
    vt = rng.integers(1, t_max + 1, size=hyper.val_size)
    veps = rng.standard_normal(data[vi].shape)
    val = (noised(data[vi], vt, veps), vt, veps)
    log = TrainingLog()
    log.val_loss.append(model.loss(*val))
    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(len(data))
        losses = []
        for s in range(0, len(order), hyper.batch):
            x0 = data[order[s:s + hyper.batch]]
            t = rng.integers(1, t_max + 1, size=len(x0))
            eps = rng.standard_normal(x0.shape)
            loss, grads = model.loss_and_grads(noised(x0, t, eps), t, eps)
            if not np.isfinite(loss):
                raise TrainingFailure(f"denoiser loss became {loss} in epoch {epoch}", epoch)
            clip_by_global_norm(grads, hyper.clip)
            opt.update(model.params, grads)
            losses.append(loss)
        log.train_loss.append(float(np.mean(losses)))
        log.val_loss.append(model.loss(*val))
        if not np.isfinite(log.val_loss[-1]):
            raise TrainingFailure(f"validation loss became {log.val_loss[-1]} in epoch {epoch}", epoch)
        logger.info("denoiser epoch %d train %.4f val %.4f", epoch, log.train_loss[-1], log.val_loss[-1])
    if hyper.epochs:
        model.params = round_to_f32(model.params)
    return model, log
