"""Run the attack x defense matrix from a config file and print the pivot table.

Run: python3 demos/04_experiment.py [configs/quick.json]
The full benchmark (configs/desk.json) takes roughly ten minutes on one core.
"""
import sys

from adadiff import harness

cfg = harness.load_config(sys.argv[1] if len(sys.argv) > 1 else "configs/quick.json")
records = harness.run_matrix(cfg)

names = [a.name for a in cfg.attacks]
print(f"{'':>10}" + "".join(f"{n:>15}" for n in names))
for d in cfg.defenses:
    row = {r.attack: r.robust_accuracy for r in records if r.defense == d.name}
    print(f"{d.name:>10}" + "".join(f"{row[n]:>15.3f}" for n in names))
print(f"results in {cfg.out_dir}/results.csv and results.jsonl")
