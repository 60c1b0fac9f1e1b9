"""Regenerate the frozen golden files.  Run once; the eval test then pins them.

    python tests/golden/make_golden.py
"""

import json
import shutil
from pathlib import Path

from sifdal.cli import main

HERE = Path(__file__).resolve().parent

CONFIG = {"data_dir": "data", "width": 4, "fpn_channels": 4, "epochs": 40, "batch_size": 4, "seed": 18, "base_lr": 0.01}


def build():
    data = HERE / "data"
    if data.exists():
        shutil.rmtree(data)
    assert main(["gen-data", "--out", str(data), "--count", "20", "--seed", "7", "--modes", "20,50,80"]) == 0
    assert main(["cluster-heights", "--data", str(data), "--k-range", "2:4", "--seed", "18"]) == 0
    (HERE / "config.json").write_text(json.dumps(CONFIG, indent=2) + "\n")
    work = HERE / "_run"
    assert main(["train", "--config", str(HERE / "config.json"), "--out", str(work)]) == 0
    shutil.copy(work / "checkpoint.stz", HERE / "checkpoint.stz")
    shutil.rmtree(work)
    assert main(["eval", "--checkpoint", str(HERE / "checkpoint.stz"), "--data", str(data),
                 "--report", str(HERE / "report.json")]) == 0


if __name__ == "__main__":
    build()
