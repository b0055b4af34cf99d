"""Command-line entry point: ``adadiff <subcommand> [--config FILE] [--seed N] [--out DIR] [--jobs N]``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness
from .adversary import ToyClassifier, drop_attack, jitter_attack, pgd_attack, tangent_jitter, train_classifier
from .core import atomic_write_text, make_rng, read_cloud, read_manifest, write_cloud
from .denoiser import PointMlpDenoiser, train_denoiser
from .diffusion import purify_batch
from .distortion import MODES, DistortionProfile, estimate_distortion
from .errors import AdaDiffError, ConfigurationError
from .geometry import chamfer_distance

logger = logging.getLogger("adadiff")


def _ints(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _config(args, **extra) -> harness.ExperimentConfig:
    jobs = os.environ.get("ADADIFF_JOBS")
    if jobs is not None:
        try:
            jobs = int(jobs)
        except ValueError:
            raise ConfigurationError(f"ADADIFF_JOBS must be an integer, got {jobs!r}") from None
    else:
        jobs = args.jobs
    return harness.load_config(args.config, seed=args.seed, out_dir=args.out, jobs=jobs, **extra)


def _with(cfg, section, **changes):
    """Copy of ``cfg`` with some fields of one nested section replaced (None leaves a field alone)."""
    changes = {k: v for k, v in changes.items() if v is not None}
    if not changes:
        return cfg
    return replace(cfg, **{section: replace(getattr(cfg, section), **changes)}).validate()


def _cloud_dir(path):
    """(ids, clouds) from a directory holding a manifest, or loose ``.pcb``/``.xyz`` files."""
    path = Path(path)
    if (path / "manifest.json").exists():
        splits = read_manifest(path)
        split = "test" if "test" in splits else sorted(splits)[0]
        ds = splits[split]
        return [f"{split}-{i:05d}" for i in range(len(ds))], list(ds.clouds)
    labels = {}
    if (path / "labels.json").exists():
        labels = json.loads((path / "labels.json").read_text())
    files = sorted(p for p in path.iterdir() if p.suffix in (".pcb", ".xyz"))
    if not files:
        raise ConfigurationError(f"{path}: no manifest.json or .pcb/.xyz clouds found")
    return [p.stem for p in files], [read_cloud(p, label=labels.get(p.stem)) for p in files]


def _write_cloud_dir(root, ids, clouds):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for cid, c in zip(ids, clouds):
        write_cloud(c, root / f"{cid}.pcb")
    labels = {cid: c.label for cid, c in zip(ids, clouds) if c.label is not None}
    atomic_write_text(root / "labels.json", json.dumps(labels, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args):
    cfg = _with(_config(args), "data", n_train=args.n_train, n_test=args.n_test, n_points=args.n_points)
    train, test = harness.Workspace(cfg).data()
    print(f"wrote {len(train)} train and {len(test)} test clouds of {train.num_points} points to "
          f"{Path(cfg.out_dir) / 'data'}")


def cmd_train_denoiser(args):
    cfg = _with(_config(args), "denoiser", epochs=args.epochs)
    if args.data:
        train = read_manifest(args.data)["train"]
        model, log = train_denoiser(train, cfg.schedule.build(), cfg.denoiser, make_rng(cfg.seed, 2))
        path = Path(cfg.out_dir) / "denoiser.ckpt"
        path.parent.mkdir(parents=True, exist_ok=True)
        model.save(path)
    else:
        ws = harness.Workspace(cfg)
        ws.denoiser()
        path = ws.root / "models" / "denoiser.ckpt"
    print(f"denoiser checkpoint: {path}")


def cmd_train_classifier(args):
    cfg = _with(_config(args), "classifier", epochs=args.epochs)
    if args.data:
        splits = read_manifest(args.data)
        model, log = train_classifier(splits["train"], cfg.classifier, make_rng(cfg.seed, 1), splits.get("test"))
        path = Path(cfg.out_dir) / "classifier.ckpt"
        path.parent.mkdir(parents=True, exist_ok=True)
        model.save(path)
    else:
        ws = harness.Workspace(cfg)
        ws.classifier()
        path = ws.root / "models" / "classifier.ckpt"
    print(f"classifier checkpoint: {path}")


def cmd_attack(args):
    cfg = _config(args)
    ws = harness.Workspace(cfg)
    model = ToyClassifier.load(args.model) if args.model else ws.classifier()
    if args.input_dir:
        ids, clouds = _cloud_dir(args.input_dir)
    else:
        test = ws.data()[1]
        ids, clouds = [f"test-{i:05d}" for i in range(len(test))], list(test.clouds)
    spec = harness.AttackSpec(args.variant, args.variant, epsilon=args.eps, steps=args.steps,
                              step_size=args.step_size, sigma=args.sigma, k=args.k, drop_count=args.drop_count)
    spec.attack_config().validate()
    out = []
    for i, c in enumerate(clouds):
        rng = make_rng(cfg.seed, 40, i)
        if args.variant in ("pgd", "bpda-pgd"):
            if c.label is None:
                raise ConfigurationError(f"cloud {ids[i]} has no label; gradient attacks need one")
            # without a purifier in the loop BPDA reduces to plain PGD
            out.append(pgd_attack(model, c, replace(spec.attack_config(), variant="pgd"), rng))
        elif args.variant == "jitter":
            out.append(jitter_attack(c, args.sigma, rng))
        elif args.variant == "tangent":
            out.append(tangent_jitter(c, args.sigma, args.k, rng))
        else:
            out.append(drop_attack(model, c, args.drop_count))
    dest = Path(args.out_dir or Path(cfg.out_dir) / f"attack-{args.variant}")
    _write_cloud_dir(dest, ids, out)
    labels = [c.label for c in out]
    if all(l is not None for l in labels):
        acc = float(np.mean([model.predict(c.points) == l for c, l in zip(out, labels)]))
        print(f"accuracy on attacked clouds: {acc:.4f}")
    print(f"wrote {len(out)} clouds to {dest}")


def cmd_purify(args):
    cfg = _config(args)
    cfg = _with(cfg, "purifier", rounds=args.rounds, lambda_max=args.lambda_max)
    ws = harness.Workspace(cfg)
    den = PointMlpDenoiser.load(args.denoiser) if args.denoiser else ws.denoiser()
    prof = DistortionProfile.load(args.profile) if args.profile else ws.profile()
    ids, clouds = _cloud_dir(args.input_dir)
    sizes = {len(c) for c in clouds}
    if len(sizes) != 1:
        raise ConfigurationError(f"purify needs clouds of one point count, got {sorted(sizes)}")
    x = np.stack([c.points for c in clouds])
    rounds_out = []
    out, logs = purify_batch(x, prof, den, ws.schedule, cfg.purifier,
                             [make_rng(cfg.seed, 50, i) for i in range(len(x))],
                             on_round=lambda r, s: rounds_out.append(s.copy()))
    dest = Path(args.out_dir or Path(cfg.out_dir) / "purified")
    _write_cloud_dir(dest, ids, [c.with_points(p) for c, p in zip(clouds, out)])
    lines = []
    for i, cid in enumerate(ids):
        for entry, stack in zip(logs[i], rounds_out):
            lines.append(json.dumps({"cloud_id": cid, "round": entry.round, "E_x": entry.estimate,
                                     "lambda": entry.lam, "chamfer_to_input": chamfer_distance(stack[i], x[i])}))
    atomic_write_text(dest / "purify_log.jsonl", "".join(l + "\n" for l in lines))
    print(f"purified {len(ids)} clouds into {dest}")


def cmd_eval(args):
    cfg = _config(args)
    records = harness.run_matrix(cfg)
    _print_pivot(Path(cfg.out_dir) / "results.csv")
    print(f"{len(records)} records in {Path(cfg.out_dir) / 'results.jsonl'}")


def cmd_sweep_timesteps(args):
    cfg = _config(args)
    harness.timestep_sweep(cfg, args.lambdas, args.attacks)
    _print_pivot(Path(cfg.out_dir) / "timesteps.csv")
    _print_pivot(Path(cfg.out_dir) / "lambda_histogram.csv")


def cmd_sweep_rounds(args):
    cfg = _config(args)
    harness.rounds_sweep(cfg, args.rounds, args.attacks)
    _print_pivot(Path(cfg.out_dir) / "rounds.csv")


def cmd_profile_stability(args):
    cfg = _config(args)
    rows = harness.stability_for_config(cfg, args.fractions, args.intervals, args.per_class)
    for r in rows:
        note = f"  ({r.warning})" if r.warning else ""
        print(f"{r.subset:>12} n={r.size:<4d} intervals={r.intervals:<3d} COV {r.cov_mean:.4f} +- {r.cov_std:.4f}{note}")


def cmd_estimate_distortion(args):
    cloud = read_cloud(args.input)
    report = estimate_distortion(cloud, args.k, args.mode)
    print(f"E_x = {report.cloud_estimate!r}")
    dest = Path(args.scores_out or Path(args.input).with_suffix(".scores.txt"))
    np.savetxt(dest, report.per_point, fmt="%.9g")
    print(f"per-point scores: {dest}")


def _print_pivot(path):
    rows, cols, values = harness.read_pivot(path)
    width = max(len(r) for r in rows) + 2
    print(" " * width + "".join(f"{c:>15}" for c in cols))
    for r in rows:
        print(f"{r:<{width}}" + "".join(f"{values[(r, c)]:>15.4g}" for c in cols))


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON experiment config")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed (u64)")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--jobs", type=int, default=argparse.SUPPRESS,
                        help="worker processes (ADADIFF_JOBS overrides)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="adadiff", parents=[common],
                                     description="Adaptive diffusion purification for point clouds.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        p = sub.add_parser(name, parents=[common], help=help)
        p.set_defaults(func=fn)
        return p

    p = add("gen-data", cmd_gen_data, "generate the synthetic shape dataset")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--n-points", type=int)

    for name, fn, what in (("train-denoiser", cmd_train_denoiser, "noise-prediction network"),
                           ("train-classifier", cmd_train_classifier, "point classifier")):
        p = add(name, fn, f"train the {what}")
        p.add_argument("--data", help="dataset manifest (default: the workspace dataset)")
        p.add_argument("--epochs", type=int)

    p = add("attack", cmd_attack, "attack clouds and write the results")
    p.add_argument("--model", help="classifier checkpoint (default: the workspace classifier)")
    p.add_argument("--variant", choices=("pgd", "bpda-pgd", "jitter", "tangent", "drop"), default="pgd")
    p.add_argument("--eps", type=float, default=0.16)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--step-size", type=float, default=0.01)
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--drop-count", type=int, default=32)
    p.add_argument("--input-dir", help="clouds to attack (default: the workspace test split)")
    p.add_argument("--out-dir")

    p = add("purify", cmd_purify, "purify a directory of clouds")
    p.add_argument("--input-dir", required=True)
    p.add_argument("--profile", help="distortion profile JSON (default: the workspace profile)")
    p.add_argument("--denoiser", help="denoiser checkpoint (default: the workspace denoiser)")
    p.add_argument("--rounds", type=int)
    p.add_argument("--lambda-max", type=int)
    p.add_argument("--out-dir")

    add("eval", cmd_eval, "evaluate every attack against every defense")

    p = add("sweep-timesteps", cmd_sweep_timesteps, "fixed timesteps against the adaptive rule")
    p.add_argument("--lambdas", type=_ints, default=[0, 5, 10, 15, 20])
    p.add_argument("--attacks", type=lambda s: s.split(","), help="comma-separated attack names")

    p = add("sweep-rounds", cmd_sweep_rounds, "accuracy against the number of purification rounds")
    p.add_argument("--rounds", type=_ints, default=[1, 2, 3, 4, 5, 6])
    p.add_argument("--attacks", type=lambda s: s.split(","), help="comma-separated attack names")

    p = add("profile-stability", cmd_profile_stability, "COV of interval counts under data subsets")
    p.add_argument("--fractions", type=_floats, default=[1.0, 0.5, 0.25, 0.1])
    p.add_argument("--intervals", type=_ints, default=[4, 10])
    p.add_argument("--per-class", type=_ints, default=[20], help="clouds per class for uniform subsets")

    p = add("estimate-distortion", cmd_estimate_distortion, "distortion of a single cloud")
    p.add_argument("--input", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--mode", choices=MODES, default="center")
    p.add_argument("--scores-out", help="per-point score file (default: <input>.scores.txt)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name, default in (("config", None), ("seed", None), ("out", None), ("jobs", None), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (AdaDiffError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
