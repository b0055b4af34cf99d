"""Experiment orchestration: configuration, cached artifacts, the attack x defense matrix and sweeps."""
from __future__ import annotations

import csv
import io
import json
import logging
import multiprocessing
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .adversary import (AttackConfig, ClassifierHyper, ToyClassifier, batch_accuracy, bpda_pgd_attack, drop_attack,
                        jitter_attack, pgd_attack, sor_defense, srs_defense, tangent_jitter, train_classifier)
from .core import SHAPES, atomic_write_text, make_dataset, make_rng, read_manifest, write_manifest
from .denoiser import OPTIMIZERS, DenoiserHyper, PointMlpDenoiser, train_denoiser
from .diffusion import NoiseSchedule, PurifierConfig, make_schedule, purify_batch
from .distortion import (DistortionProfile, bucket_index, cloud_distortions, profile_from_estimates,
                         quartered_levels)
from .errors import AdaDiffError, ConfigurationError
from .geometry import chamfer_distance

logger = logging.getLogger(__name__)

ATTACK_KINDS = ("none", "pgd", "bpda-pgd", "jitter", "tangent", "drop")
DEFENSE_KINDS = ("none", "srs", "sor", "fixed", "ada3diff")
CHUNK = 25  # clouds per work unit; fixed so results never depend on the worker count


class ArtifactMissing(AdaDiffError):
    """A required dataset or checkpoint is absent and training is disabled."""


# ---------------------------------------------------------------------------
# configuration

@dataclass
class DataSpec:
    n_train: int = 300
    n_test: int = 150
    n_points: int = 256
    shapes: tuple = SHAPES


@dataclass
class ScheduleSpec:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    rule: str = "linear"
    variance: str = "posterior"

    def build(self) -> NoiseSchedule:
        return make_schedule(self.T, self.beta_start, self.beta_end, self.rule, self.variance)


@dataclass
class AttackSpec:
    name: str = ""
    kind: str = "none"
    epsilon: float = 0.16
    steps: int = 50
    step_size: float = 0.01
    loss: str = "max-margin"
    random_start: bool = True
    sigma: float = 0.0
    k: int = 10
    drop_count: int = 0

    def attack_config(self) -> AttackConfig:
        variant = "bpda-pgd" if self.kind == "bpda-pgd" else "pgd"
        return AttackConfig(self.epsilon, self.steps, self.step_size, self.loss, variant, self.random_start,
                            self.drop_count)


@dataclass
class DefenseSpec:
    name: str = ""
    kind: str = "none"
    keep: int = 0  # srs; 0 keeps half the points
    k: int = 2  # sor
    alpha: float = 1.1  # sor
    lam: int = 0  # fixed
    rounds: Optional[int] = None  # diffusion defenses; None uses the purifier setting
    lambda_max: Optional[int] = None


def default_attacks():
    return [AttackSpec("none", "none"),
            AttackSpec("pgd", "pgd"),
            AttackSpec("bpda-pgd", "bpda-pgd", steps=20, step_size=0.016),
            AttackSpec("jitter-large", "jitter", sigma=0.1),
            AttackSpec("tangent-small", "tangent", sigma=0.03),
            AttackSpec("drop", "drop", drop_count=32)]


def default_defenses():
    return [DefenseSpec("none", "none"), DefenseSpec("srs", "srs"), DefenseSpec("sor", "sor"),
            DefenseSpec("ada3diff", "ada3diff")]


@dataclass
class ExperimentConfig:
    """Everything one experiment needs; loaded from JSON with unknown keys rejected."""

    seed: int = 0
    out_dir: str = "runs/default"
    jobs: int = 1
    train_missing: bool = True
    record_wall_time: bool = True
    data: DataSpec = field(default_factory=DataSpec)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    classifier: ClassifierHyper = field(default_factory=ClassifierHyper)
    denoiser: DenoiserHyper = field(default_factory=DenoiserHyper)
    purifier: PurifierConfig = field(default_factory=PurifierConfig)
    attacks: list = field(default_factory=default_attacks)
    defenses: list = field(default_factory=default_defenses)
    sweep_attacks: tuple = ("pgd", "jitter-large")

    def validate(self) -> "ExperimentConfig":
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ConfigurationError("seed must be an unsigned 64-bit integer")
        if self.jobs < 1:
            raise ConfigurationError("jobs must be >= 1")
        d = self.data
        if min(d.n_train, d.n_test) < 1 or d.n_points < max(self.purifier.k, 3):
            raise ConfigurationError("data needs n_train, n_test >= 1 and n_points >= the neighbourhood size")
        for s in d.shapes:
            if s not in SHAPES:
                raise ConfigurationError(f"unknown shape {s!r}")
        schedule = self.schedule.build()
        self.purifier.validate(schedule)
        c = self.classifier
        if c.epochs < 0 or c.batch < 1 or c.lr <= 0 or not c.widths or min(c.widths) < 1:
            raise ConfigurationError("classifier needs epochs >= 0, batch >= 1, lr > 0 and positive widths")
        h = self.denoiser
        if h.epochs < 0 or h.batch < 1 or h.lr <= 0 or min(h.H, h.E, h.enc_layers, h.dec_layers) < 1:
            raise ConfigurationError("denoiser needs epochs >= 0, batch >= 1, lr > 0 and positive sizes")
        if h.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"unknown optimizer {h.optimizer!r}")
        if not 0 <= h.t_max <= schedule.T:
            raise ConfigurationError(f"denoiser t_max must be in [0, {schedule.T}]")
        _unique([a.name for a in self.attacks], "attack")
        _unique([d.name for d in self.defenses], "defense")
        for a in self.attacks:
            if a.kind not in ATTACK_KINDS:
                raise ConfigurationError(f"attack {a.name!r}: unknown kind {a.kind!r}; expected one of {ATTACK_KINDS}")
            a.attack_config().validate()
            if a.sigma < 0 or not 0 <= a.drop_count < d.n_points or a.k < 3:
                raise ConfigurationError(f"attack {a.name!r}: invalid sigma, drop_count or k")
        for df in self.defenses:
            if df.kind not in DEFENSE_KINDS:
                raise ConfigurationError(
                    f"defense {df.name!r}: unknown kind {df.kind!r}; expected one of {DEFENSE_KINDS}")
            if df.kind == "srs" and not 0 <= df.keep <= d.n_points:
                raise ConfigurationError(f"defense {df.name!r}: keep must be in [0, {d.n_points}]")
            if df.kind == "sor" and (df.k < 1 or df.alpha < 0):
                raise ConfigurationError(f"defense {df.name!r}: need k >= 1 and alpha >= 0")
            if df.kind in ("fixed", "ada3diff"):
                self.purifier_for(df).validate(schedule)
                if df.kind == "fixed" and not 0 <= df.lam <= schedule.T:
                    raise ConfigurationError(f"defense {df.name!r}: lam must be in [0, {schedule.T}]")
        names = {a.name for a in self.attacks}
        for s in self.sweep_attacks:
            if s not in names:
                raise ConfigurationError(f"sweep attack {s!r} is not in the attack list")
        return self

    def purifier_for(self, defense: DefenseSpec) -> PurifierConfig:
        p = self.purifier
        if defense.rounds is not None:
            p = replace(p, rounds=defense.rounds)
        if defense.lambda_max is not None:
            p = replace(p, lambda_max=defense.lambda_max)
        return p

    def attack(self, name: str) -> AttackSpec:
        for a in self.attacks:
            if a.name == name:
                return a
        raise ConfigurationError(f"no attack named {name!r}")

    def to_dict(self) -> dict:
        return _plain(asdict(self))


def _unique(names, what):
    seen = set()
    for n in names:
        if not n:
            raise ConfigurationError(f"every {what} needs a non-empty name")
        if n in seen:
            raise ConfigurationError(f"duplicate {what} name {n!r}")
        seen.add(n)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(value, default, where):
    """Convert a JSON value to the type of the field's default."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigurationError(f"{where}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigurationError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigurationError(f"{where}: expected a list, got {value!r}")
        return tuple(_coerce(v, default[0], where) if default else v for v in value)
    if default is None:
        if value is not None and (isinstance(value, bool) or not isinstance(value, int)):
            raise ConfigurationError(f"{where}: expected an integer or null, got {value!r}")
        return value
    return value


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigurationError(f"{where}: unknown key(s) {', '.join(unknown)}")
    template = cls()
    kwargs = {}
    for key, value in data.items():
        default = getattr(template, key)
        path = f"{where}.{key}"
        if is_dataclass(default):
            kwargs[key] = _build(type(default), value, path)
        elif key in ("attacks", "defenses") and cls is ExperimentConfig:
            spec = AttackSpec if key == "attacks" else DefenseSpec
            if not isinstance(value, list):
                raise ConfigurationError(f"{path}: expected a list")
            kwargs[key] = [_build(spec, v, f"{path}[{i}]") for i, v in enumerate(value)]
        elif key == "widths":
            kwargs[key] = _coerce(value, (1,), path)
        elif key == "sweep_attacks":
            kwargs[key] = _coerce(value, ("",), path)
        else:
            kwargs[key] = _coerce(value, default, path)
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "config").validate()


def load_config(path=None, **overrides) -> ExperimentConfig:
    """Read a JSON config (defaults when ``path`` is None) and apply top-level overrides."""
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: not valid JSON ({exc})") from None
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    for key, value in overrides.items():
        if value is not None:
            data[key] = value
    return config_from_dict(data)


# ---------------------------------------------------------------------------
# cached artifacts

def _fingerprint(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True)


class Workspace:
    """Dataset, classifier, denoiser and profile for one config, cached under ``out_dir``.

    Everything is read back from disk after being produced, so a fresh run
    and a cached run see bit-identical float32-rounded inputs.
    """

    def __init__(self, config: ExperimentConfig):
        self.config = config.validate()
        self.root = Path(config.out_dir)
        self.schedule = config.schedule.build()
        self._data = self._clf = self._den = self._profile = None

    def _key(self, *parts):
        return _fingerprint({"seed": self.config.seed, "parts": [asdict(p) if is_dataclass(p) else p
                                                                  for p in parts]})

    def _fresh(self, stamp: Path, key: str) -> bool:
        return stamp.exists() and stamp.read_text() == key

    def _missing(self, what, command):
        raise ArtifactMissing(f"{what} not found or stale under {self.root}; run `adadiff {command} "
                              f"--config <file> --out {self.root}` first or set train_missing")

    def data(self):
        if self._data is None:
            d = self.root / "data"
            key = self._key(self.config.data)
            if not self._fresh(d / "stamp.json", key):
                if not self.config.train_missing:
                    self._missing("dataset", "gen-data")
                spec = self.config.data
                train, test = make_dataset(spec.n_train, spec.n_test, spec.n_points, self.config.seed, spec.shapes)
                d.mkdir(parents=True, exist_ok=True)
                write_manifest([train, test], d)
                atomic_write_text(d / "stamp.json", key)
            splits = read_manifest(d / "manifest.json")
            self._data = (splits["train"], splits["test"])
        return self._data

    def classifier(self) -> ToyClassifier:
        if self._clf is None:
            path = self.root / "models" / "classifier.ckpt"
            key = self._key(self.config.data, self.config.classifier)
            stamp = path.with_suffix(".json")
            if not (path.exists() and self._fresh(stamp, key)):
                if not self.config.train_missing:
                    self._missing("classifier checkpoint", "train-classifier")
                train, test = self.data()
                model, log = train_classifier(train, self.config.classifier, make_rng(self.config.seed, 1), test)
                path.parent.mkdir(parents=True, exist_ok=True)
                model.save(path)
                atomic_write_text(path.parent / "classifier_log.json", json.dumps(asdict(log), indent=1) + "\n")
                atomic_write_text(stamp, key)
            self._clf = ToyClassifier.load(path)
        return self._clf

    def denoiser(self) -> PointMlpDenoiser:
        if self._den is None:
            path = self.root / "models" / "denoiser.ckpt"
            key = self._key(self.config.data, self.config.schedule, self.config.denoiser)
            stamp = path.with_suffix(".json")
            if not (path.exists() and self._fresh(stamp, key)):
                if not self.config.train_missing:
                    self._missing("denoiser checkpoint", "train-denoiser")
                train, _ = self.data()
                model, log = train_denoiser(train, self.schedule, self.config.denoiser,
                                            make_rng(self.config.seed, 2))
                path.parent.mkdir(parents=True, exist_ok=True)
                model.save(path)
                atomic_write_text(path.parent / "denoiser_log.json", json.dumps(asdict(log), indent=1) + "\n")
                atomic_write_text(stamp, key)
            self._den = PointMlpDenoiser.load(path)
            if self._den.T != self.schedule.T:
                raise ConfigurationError(f"denoiser was trained for T={self._den.T}, schedule has T={self.schedule.T}")
        return self._den

    def profile(self, lambda_max: Optional[int] = None) -> DistortionProfile:
        lm = self.config.purifier.lambda_max if lambda_max is None else lambda_max
        if self._profile is None:
            path = self.root / "profile.json"
            p = self.config.purifier
            key = self._key(self.config.data, {"k": p.k, "mode": p.mode, "lambda_max": p.lambda_max})
            stamp = self.root / "profile.stamp"
            if not (path.exists() and self._fresh(stamp, key)):
                train, _ = self.data()
                est = cloud_distortions(train.stacked(), p.k, p.mode)
                profile_from_estimates(est, p.lambda_max).save(path)
                atomic_write_text(stamp, key)
            self._profile = DistortionProfile.load(path)
        prof = self._profile
        if lm != prof.lambda_max:
            prof = DistortionProfile(prof.thresholds, quartered_levels(lm, len(prof.lambda_levels)), prof.source_size)
        return prof


# ---------------------------------------------------------------------------
# parallel execution

_WS: Optional[Workspace] = None


def _run_units(fn, units, jobs):
    """Apply ``fn`` to every unit, in order; forks ``jobs`` workers sharing the loaded workspace."""
    if jobs <= 1 or len(units) <= 1:
        return [fn(u) for u in units]
    ctx = multiprocessing.get_context("fork")
    with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
        return list(pool.map(fn, units))


def _sid(name: str) -> int:
    return zlib.crc32(name.encode())


def _chunks(n):
    return [(s, min(s + CHUNK, n)) for s in range(0, n, CHUNK)]


# ---------------------------------------------------------------------------
# attacks and defenses on stacks

def _purify_fn(ws: Workspace, defense: DefenseSpec, stream: tuple):
    """Stack -> purified stack for a diffusion defense, or None for other kinds."""
    if defense.kind not in ("fixed", "ada3diff"):
        return None
    cfg = ws.config.purifier_for(defense)
    fixed = defense.lam if defense.kind == "fixed" else None
    prof = ws.profile(cfg.lambda_max) if fixed is None else None
    den, sched = ws.denoiser(), ws.schedule

    calls = 0

    def run(stack, start):
        # BPDA calls this once per attack step; each call draws fresh noise
        nonlocal calls
        calls += 1
        rngs = [make_rng(ws.config.seed, *stream, calls, start + i) for i in range(len(stack))]
        return purify_batch(stack, prof, den, sched, cfg, rngs, fixed_lambda=fixed)

    return run


def _attack_unit(unit):
    attack_name, defense_name, start, stop = unit
    ws = _WS
    cfg = ws.config
    spec = cfg.attack(attack_name)
    _, test = ws.data()
    x, y = test.stacked()[start:stop], test.labels[start:stop]
    clf = ws.classifier()
    rng = make_rng(cfg.seed, 10, _sid(attack_name), start)
    if spec.kind == "none":
        return list(x)
    if spec.kind == "pgd":
        return list(pgd_attack(clf, x, spec.attack_config(), rng, label=y))
    if spec.kind == "bpda-pgd":
        defense = next(d for d in cfg.defenses if d.name == defense_name) if defense_name else DefenseSpec()
        fn = _purify_fn(ws, defense, (11, _sid(attack_name), _sid(defense.name)))
        if fn is None:
            # non-diffusion defenses: SRS/SOR change the point count, so the attack
            # falls back to plain PGD on the undefended classifier (transfer)
            return list(pgd_attack(clf, x, replace(spec.attack_config(), variant="pgd"), rng, label=y))
        return list(bpda_pgd_attack(clf, lambda s: fn(s, start)[0], x, spec.attack_config(), rng, label=y))
    if spec.kind == "jitter":
        return list(jitter_attack(x, spec.sigma, rng))
    if spec.kind == "tangent":
        return [tangent_jitter(c, spec.sigma, spec.k, make_rng(cfg.seed, 10, _sid(attack_name), start + i))
                for i, c in enumerate(x)]
    if spec.kind == "drop":
        return [drop_attack(clf, c, spec.drop_count, label=int(l)) for c, l in zip(x, y)]
    raise ConfigurationError(f"unknown attack kind {spec.kind!r}")


def _defend_unit(unit):
    defense_name, attack_name, start, clouds = unit
    ws = _WS
    cfg = ws.config
    defense = next(d for d in cfg.defenses if d.name == defense_name) if isinstance(defense_name, str) \
        else defense_name
    stream = (20, _sid(defense.name), _sid(attack_name))
    logs = None
    if defense.kind == "none":
        out = list(clouds)
    elif defense.kind == "srs":
        keep = defense.keep or len(clouds[0]) // 2
        out = [srs_defense(c, keep, make_rng(cfg.seed, *stream, start + i)) for i, c in enumerate(clouds)]
    elif defense.kind == "sor":
        out = [sor_defense(c, defense.k, defense.alpha) for c in clouds]
    else:
        fn = _purify_fn(ws, defense, stream)
        res, logs = fn(np.stack(clouds), start)
        out = list(res)
    return out, logs


@dataclass
class ResultRecord:
    attack: str
    defense: str
    robust_accuracy: float
    mean_chamfer_to_clean: float
    mean_E_x_pre: float
    mean_E_x_post: float
    wall_time_seconds: float
    seed: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=False)


class _Evaluator:
    """Runs attacks and defenses for one workspace and turns them into records."""

    def __init__(self, ws: Workspace):
        global _WS
        _WS = ws
        self.ws = ws
        self.cfg = ws.config
        self.jobs = self.cfg.jobs
        ws.data(), ws.classifier()
        if any(d.kind in ("fixed", "ada3diff") for d in self.cfg.defenses):
            ws.denoiser(), ws.profile()
        self._attacked = {}
        self._pre = {}

    def attacked(self, attack_name: str, defense_name: Optional[str] = None):
        spec = self.cfg.attack(attack_name)
        key = (attack_name, defense_name if spec.kind == "bpda-pgd" else None)
        if key not in self._attacked:
            n = len(self.ws.data()[1])
            units = [(attack_name, key[1], s, e) for s, e in _chunks(n)]
            parts = _run_units(_attack_unit, units, self.jobs)
            self._attacked[key] = [c for part in parts for c in part]
        return self._attacked[key]

    def pre_estimate(self, key, clouds):
        if key not in self._pre:
            self._pre[key] = _mean_estimate(clouds, self.cfg.purifier)
        return self._pre[key]

    def cell(self, defense: DefenseSpec, attack_name: str):
        """Evaluate one (defense, attack) pair; returns the record and round-1 lambdas if adaptive."""
        t0 = time.perf_counter()
        clouds = self.attacked(attack_name, defense.name)
        spec = self.cfg.attack(attack_name)
        units = [(defense, attack_name, s, clouds[s:e]) for s, e in _chunks(len(clouds))]
        parts = _run_units(_defend_unit, units, self.jobs)
        out = [c for part, _ in parts for c in part]
        logs = None
        if parts and parts[0][1] is not None:
            logs = [l for _, part_logs in parts for l in part_logs]
        _, test = self.ws.data()
        clf = self.ws.classifier()
        acc = batch_accuracy(clf, out, test.labels)
        cd = float(np.mean([chamfer_distance(o, c) for o, c in zip(out, test.stacked())]))
        pre = self.pre_estimate((attack_name, defense.name if spec.kind == "bpda-pgd" else None), clouds)
        post = _mean_estimate(out, self.cfg.purifier)
        wall = time.perf_counter() - t0 if self.cfg.record_wall_time else 0.0
        rec = ResultRecord(attack_name, defense.name, acc, cd, pre, post, round(wall, 3), self.cfg.seed)
        logger.info("%s / %s: accuracy %.3f", defense.name, attack_name, acc)
        return rec, logs


def _mean_estimate(clouds, purifier: PurifierConfig) -> float:
    vals = []
    for c in clouds:
        c = np.asarray(c)
        k = min(purifier.k, len(c))
        vals.append(cloud_distortions(c[None], k, purifier.mode)[0] if k >= 3 else 0.0)
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# output files

def _fmt(v) -> str:
    return repr(float(v))


def write_records(records, path) -> None:
    atomic_write_text(path, "".join(r.to_json() + "\n" for r in records))


def read_records(path):
    return [ResultRecord(**json.loads(line)) for line in Path(path).read_text().splitlines() if line]


def write_pivot(rows, cols, values, path, corner="defense") -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([corner] + list(cols))
    for r in rows:
        w.writerow([r] + [_fmt(values[(r, c)]) for c in cols])
    atomic_write_text(path, buf.getvalue())


def read_pivot(path):
    """Inverse of :func:`write_pivot`: returns (row names, column names, {(row, col): value})."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    cols = rows[0][1:]
    names, values = [], {}
    for row in rows[1:]:
        names.append(row[0])
        for c, v in zip(cols, row[1:]):
            values[(row[0], c)] = float(v)
    return names, cols, values


def _write_config(cfg: ExperimentConfig, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(path, json.dumps(cfg.to_dict(), indent=2) + "\n")


# ---------------------------------------------------------------------------
# experiments

def run_matrix(config: ExperimentConfig, prefix: str = "results"):
    """Evaluate every (defense, attack) pair.

    Writes ``<prefix>.jsonl``, the ``<prefix>.csv`` pivot and the resolved
    config as ``<prefix>_config.json``.
    """
    ws = Workspace(config)
    ev = _Evaluator(ws)
    records = []
    for d in config.defenses:
        for a in config.attacks:
            records.append(ev.cell(d, a.name)[0])
    root = ws.root
    _write_config(config, root / f"{prefix}_config.json")
    write_records(records, root / f"{prefix}.jsonl")
    values = {(r.defense, r.attack): r.robust_accuracy for r in records}
    write_pivot([d.name for d in config.defenses], [a.name for a in config.attacks], values, root / f"{prefix}.csv")
    return records


def timestep_sweep(config: ExperimentConfig, lambdas, attacks=None):
    """Fixed-timestep defenses at each of ``lambdas`` plus the adaptive defense, per attack.

    Writes ``timesteps.csv`` (rows ``fixed-<lam>`` and ``adaptive``),
    ``timesteps.jsonl`` and ``lambda_histogram.csv`` (round-1 timestep
    counts of the adaptive defense per attack).
    """
    attacks = list(attacks or config.sweep_attacks)
    lambdas = [int(l) for l in lambdas]
    if not lambdas:
        raise ConfigurationError("need at least one timestep")
    defenses = [DefenseSpec(f"fixed-{l}", "fixed", lam=l) for l in lambdas] + [DefenseSpec("adaptive", "ada3diff")]
    cfg = replace(config, defenses=defenses)
    ws = Workspace(cfg)
    ev = _Evaluator(ws)
    records, hist = [], {}
    levels = ws.profile().lambda_levels
    for d in defenses:
        for a in attacks:
            rec, logs = ev.cell(d, a)
            records.append(rec)
            if d.kind == "ada3diff":
                first = [l[0].lam for l in logs]
                for lv in levels:
                    hist[(a, str(lv))] = first.count(lv)
    root = ws.root
    write_records(records, root / "timesteps.jsonl")
    write_pivot([d.name for d in defenses], attacks, {(r.defense, r.attack): r.robust_accuracy for r in records},
                root / "timesteps.csv")
    write_pivot(attacks, [str(l) for l in levels], hist, root / "lambda_histogram.csv", corner="attack")
    return records, hist


def rounds_sweep(config: ExperimentConfig, rounds_list, attacks=None):
    """Adaptive defense with each round count; writes ``rounds.csv`` (one row per round count)."""
    attacks = list(attacks or config.sweep_attacks)
    rounds_list = [int(r) for r in rounds_list]
    if not rounds_list or min(rounds_list) < 1:
        raise ConfigurationError("round counts must be >= 1")
    defenses = [DefenseSpec(f"rounds-{r}", "ada3diff", rounds=r) for r in rounds_list]
    cfg = replace(config, defenses=defenses)
    ws = Workspace(cfg)
    ev = _Evaluator(ws)
    records = [ev.cell(d, a)[0] for d in defenses for a in attacks]
    root = ws.root
    write_records(records, root / "rounds.jsonl")
    values = {(str(r), a): rec.robust_accuracy for r in rounds_list for a in attacks
              for rec in records if rec.defense == f"rounds-{r}" and rec.attack == a}
    write_pivot([str(r) for r in rounds_list], attacks, values, root / "rounds.csv", corner="rounds")
    return records


def selection_histogram(config: ExperimentConfig, attacks):
    """Round-1 timestep counts of the adaptive rule for each attacked test set; writes ``selection.csv``."""
    ws = Workspace(config)
    ev = _Evaluator(ws)
    prof = ws.profile()
    p = config.purifier
    counts = {}
    for a in attacks:
        est = cloud_distortions(np.stack(ev.attacked(a)), p.k, p.mode)
        idx = np.full(len(est), len(prof.lambda_levels) - 1) if prof.degenerate else bucket_index(est, prof)
        for j, lv in enumerate(prof.lambda_levels):
            counts[(a, str(lv))] = int(np.sum(idx == j))
    write_pivot(list(attacks), [str(l) for l in prof.lambda_levels], counts, ws.root / "selection.csv",
                corner="attack")
    return counts


# ---------------------------------------------------------------------------
# profile stability

@dataclass
class StabilityRow:
    subset: str
    size: int
    intervals: int
    cov_mean: float
    cov_std: float
    warning: str = ""


def interval_counts(estimates, thresholds, intervals: int) -> np.ndarray:
    idx = np.searchsorted(np.asarray(thresholds), estimates, side="left")
    return np.bincount(idx, minlength=intervals)


def cov_statistics(s_p, s_all):
    """Per-interval COV between two count vectors, reduced to (mean, std) over intervals.

    mu_i = (s_p + s_all) / 2, sigma_i = (s_p - mu_i)^2 + (s_all - mu_i)^2,
    COV_i = sigma_i / mu_i (0 where both counts are 0).
    """
    s_p, s_all = np.asarray(s_p, dtype=np.float64), np.asarray(s_all, dtype=np.float64)
    mu = (s_p + s_all) / 2.0
    sigma = (s_p - mu) ** 2 + (s_all - mu) ** 2
    cov = np.divide(sigma, mu, out=np.zeros_like(mu), where=mu > 0)
    return float(cov.mean()), float(cov.std())


def profile_stability_report(estimates, labels, fractions, intervals: int = 4, uniform_per_class=(),
                             eval_estimates=None, seed: int = 0, min_size: int = 8):
    """Compare interval counts under thresholds from data subsets against the full set.

    ``estimates`` are clean cloud-level distortions with class ``labels``.
    Counts are taken over ``eval_estimates`` (the estimates themselves by
    default). Each fraction draws a uniform subset; each entry of
    ``uniform_per_class`` draws that many clouds per class.
    """
    est = np.asarray(estimates, dtype=np.float64)
    labels = np.asarray(labels)
    if est.size == 0:
        raise ConfigurationError("stability report needs a nonempty dataset")
    target = est if eval_estimates is None else np.asarray(eval_estimates, dtype=np.float64)
    q = 100.0 * np.arange(1, intervals) / intervals
    s_all = interval_counts(target, np.percentile(est, q), intervals)
    subsets = []
    for j, f in enumerate(fractions):
        if not 0 < f <= 1:
            raise ConfigurationError(f"fraction must be in (0, 1], got {f}")
        n = int(round(f * len(est)))
        idx = np.sort(make_rng(seed, 30, j).choice(len(est), size=n, replace=False))
        subsets.append((f"{f:g}", idx))
    for j, m in enumerate(uniform_per_class):
        rng = make_rng(seed, 31, j)
        idx = []
        for c in np.unique(labels):
            members = np.flatnonzero(labels == c)
            idx.extend(rng.choice(members, size=min(m, len(members)), replace=False))
        subsets.append((f"uniform-{m}", np.sort(np.array(idx, dtype=np.int64))))
    rows = []
    for name, idx in subsets:
        warn = ""
        if len(idx) < min_size:
            warn = f"only {len(idx)} clouds"
            logger.warning("stability subset %s has only %d clouds", name, len(idx))
        if len(idx) == 0:
            rows.append(StabilityRow(name, 0, intervals, float("nan"), float("nan"), warn))
            continue
        s_p = interval_counts(target, np.percentile(est[idx], q), intervals)
        m, s = cov_statistics(s_p, s_all)
        rows.append(StabilityRow(name, int(len(idx)), intervals, m, s, warn))
    return rows


def write_stability(rows, path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["subset", "size", "intervals", "cov_mean", "cov_std", "warning"])
    for r in rows:
        w.writerow([r.subset, r.size, r.intervals, _fmt(r.cov_mean), _fmt(r.cov_std), r.warning])
    atomic_write_text(path, buf.getvalue())


def stability_for_config(config: ExperimentConfig, fractions, intervals_list=(4,), uniform_per_class=()):
    """Stability rows for the config's clean training set; writes ``stability.csv``."""
    ws = Workspace(config)
    train, _ = ws.data()
    p = config.purifier
    est = cloud_distortions(train.stacked(), p.k, p.mode)
    rows = []
    for n in intervals_list:
        rows += profile_stability_report(est, train.labels, fractions, n, uniform_per_class, seed=config.seed)
    write_stability(rows, ws.root / "stability.csv")
    return rows
