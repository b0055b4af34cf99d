import json

import numpy as np
import pytest

from adadiff.cli import main
from adadiff.core import make_rng, read_cloud, sample_primitive, write_cloud

TINY = {
    "data": {"n_train": 24, "n_test": 9, "n_points": 48},
    "classifier": {"epochs": 5, "min_accuracy": 0.0},
    "denoiser": {"epochs": 1, "H": 16, "E": 8},
    "attacks": [{"name": "none"}, {"name": "jitter", "kind": "jitter", "sigma": 0.05}],
    "defenses": [{"name": "none"}, {"name": "ada3diff", "kind": "ada3diff", "rounds": 2}],
    "sweep_attacks": ["jitter"],
}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.json").write_text(json.dumps(TINY))
    base = ["--config", str(root / "tiny.json"), "--out", str(root / "run")]
    assert main(["gen-data"] + base) == 0
    return root, base


def test_train_and_eval(work, capsys):
    root, base = work
    assert main(["train-classifier"] + base) == 0
    assert main(["train-denoiser"] + base) == 0
    assert (root / "run" / "models" / "denoiser.ckpt").exists()
    assert main(["eval"] + base) == 0
    out = capsys.readouterr().out
    assert "ada3diff" in out and (root / "run" / "results.csv").exists()


def test_train_from_explicit_manifest(work, tmp_path):
    root, base = work
    args = ["--config", str(root / "tiny.json"), "--out", str(tmp_path)]
    assert main(["train-denoiser", "--data", str(root / "run" / "data"), "--epochs", "1"] + args) == 0
    assert (tmp_path / "denoiser.ckpt").exists()


def test_attack_then_purify(work):
    root, base = work
    adv = root / "adv"
    assert main(["attack", "--variant", "jitter", "--sigma", "0.05", "--out-dir", str(adv)] + base) == 0
    assert len(list(adv.glob("*.pcb"))) == TINY["data"]["n_test"]
    clean = read_cloud(root / "run" / "data" / "test" / "00000.pcb")
    moved = read_cloud(adv / "test-00000.pcb")
    assert 0 < np.abs(moved.points - clean.points).max() < 0.5

    pur = root / "pur"
    assert main(["purify", "--input-dir", str(adv), "--rounds", "2", "--out-dir", str(pur)] + base) == 0
    log = [json.loads(l) for l in (pur / "purify_log.jsonl").read_text().splitlines()]
    assert len(log) == 2 * TINY["data"]["n_test"]
    assert set(log[0]) == {"cloud_id", "round", "E_x", "lambda", "chamfer_to_input"}
    assert [e["round"] for e in log[:2]] == [0, 1]
    label = json.loads((root / "run" / "data" / "manifest.json").read_text())["splits"]["test"][0]["label"]
    assert json.loads((pur / "labels.json").read_text())["test-00000"] == label


def test_sweeps_and_stability(work, capsys):
    root, base = work
    assert main(["sweep-timesteps", "--lambdas", "0,5"] + base) == 0
    assert main(["sweep-rounds", "--rounds", "1,2"] + base) == 0
    assert main(["profile-stability", "--fractions", "1,0.5", "--intervals", "4", "--per-class", "4"] + base) == 0
    out = capsys.readouterr().out
    assert "COV 0.0000" in out
    assert (root / "run" / "rounds.csv").read_text().splitlines()[0] == "rounds,jitter"


def test_estimate_distortion(tmp_path, capsys):
    c = sample_primitive("cube", 64, make_rng(0))
    write_cloud(c, tmp_path / "c.xyz")
    assert main(["estimate-distortion", "--input", str(tmp_path / "c.xyz"), "--k", "8"]) == 0
    assert "E_x =" in capsys.readouterr().out
    scores = np.loadtxt(tmp_path / "c.scores.txt")
    assert scores.shape == (64,) and np.all(scores >= 0)


def test_exit_codes(tmp_path, capsys):
    (tmp_path / "bad.json").write_text(json.dumps({"unknown_key": 1}))
    assert main(["eval", "--config", str(tmp_path / "bad.json")]) == 2
    assert "unknown_key" in capsys.readouterr().err
    assert main(["eval", "--out", str(tmp_path / "r"), "--config", str(tmp_path / "bad.json")]) == 2
    # runtime failure: unreadable cloud
    (tmp_path / "x.pcb").write_bytes(b"junk")
    assert main(["estimate-distortion", "--input", str(tmp_path / "x.pcb")]) == 3
    with pytest.raises(SystemExit) as info:
        main(["no-such-command"])
    assert info.value.code == 2


def test_env_overrides_jobs(work, monkeypatch):
    root, base = work
    monkeypatch.setenv("ADADIFF_JOBS", "zero")
    assert main(["eval"] + base) == 2
    monkeypatch.setenv("ADADIFF_JOBS", "2")
    assert main(["eval", "--jobs", "1"] + base) == 0


def test_global_flags_before_subcommand(work):
    root, base = work
    assert main(base + ["gen-data"]) == 0


def test_missing_artifact_exit_code(tmp_path):
    cfg = dict(TINY, train_missing=False)
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert main(["eval", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "r")]) == 3
