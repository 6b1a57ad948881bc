"""The same workflow, driven entirely through the command line.

Runs each subcommand the way a shell user would; everything lands in
demos/out/cli/. The equivalent shell session is printed before each step.
"""

import json
from pathlib import Path

from sal.cli import main

root = Path(__file__).parent / "out" / "cli"
root.mkdir(parents=True, exist_ok=True)


def run(*argv):
    print("\n$ sal " + " ".join(str(a) for a in argv))
    rc = main([str(a) for a in argv])
    assert rc == 0, f"exit code {rc}"


(root / "sim.json").write_text(json.dumps({
    "n_tx": 2, "n_rx": 12, "n_range": 12, "n_azimuth": 12,
    "n_train": 60, "n_test": 15, "noise_sigma": 0.5,
}, indent=2))
(root / "train.json").write_text(json.dumps({
    "scenario": "discrete", "budget": 5, "epochs": 15, "batch_size": 10,
    "learning_rate": 1e-3, "design_lr": 0.05, "temperature": 0.5,
    "model_depth": 1, "model_channels": 4,
}, indent=2))

run("simulate", "--config", root / "sim.json", "--seed", 3,
    "--threads", 2, "--out", root / "desk.sald", "--force")
run("train", "--data", root / "desk.sald", "--config", root / "train.json",
    "--seed", 3, "--out", root / "run", "--force")
run("eval", "--data", root / "desk.sald", "--run", root / "run",
    "--seed", 3, "--baselines", 5, "--out", root / "metrics.csv", "--force")
run("export-design", "--run", root / "run", "--out", root / "design.txt",
    "--force")
run("render", "--data", root / "desk.sald", "--index", 0,
    "--design", root / "design.txt", "--checkpoint", root / "run" / "model.salc",
    "--out", root / "maps" / "rec0", "--force")

print("\nmetrics.csv:")
print((root / "metrics.csv").read_text())
print("design.txt:")
print((root / "design.txt").read_text())
