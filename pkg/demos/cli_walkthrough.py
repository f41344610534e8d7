"""The command-line workflow end to end on a small synthetic problem.

prepare -> train (stl and dos) -> eval -> report, all inside a temporary
directory. Equivalent shell commands are printed as they run.
"""
import json
import tempfile
from pathlib import Path

from deep_oversampling.cli import main

config = {
    "data": {"n_classes": 4, "train_per_class": 150, "test_per_class": 50,
             "dims": [1, 12, 12], "latent_dim": 6},
    "imbalance": {"minority_count": 1, "p": 0.9},
    "network": {"conv_filters": [[4, 3]], "fc_widths": [32, 16], "batch_size": 25},
    "plan": {"k_mnr": 5, "rounds": 3, "stl_epochs": 10},
}


def run(*argv):
    print("$ deep-oversampling", " ".join(argv))
    assert main(list(argv)) == 0


with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    cfg = tmp / "config.json"
    cfg.write_text(json.dumps(config))
    run("prepare", "--config", str(cfg), "--seed", "0", "--out", str(tmp / "data"))
    print((tmp / "data" / "manifest.txt").read_text())
    for mode in ("stl", "dos"):
        out = str(tmp / mode)
        run("train", "--config", str(cfg), "--data", str(tmp / "data"), "--mode", mode,
            "--out", out)
        run("eval", "--model", f"{out}/model.dosm", "--data", str(tmp / "data"), "--out", out)
    run("report", str(tmp / "stl"), str(tmp / "dos"), "--out", str(tmp / "report"))
