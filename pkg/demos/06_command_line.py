"""
Driving a run from the command line
===================================

Writes a YAML config, then calls the same entry point as the ``lomoe``
console script: train, inspect, continue, eval and merge.
"""

import sys
import tempfile
from pathlib import Path

import yaml

from lomoe.cli import main

work = Path(tempfile.mkdtemp(prefix="lomoe-demo-"))
small = {"image_size": 16, "d_model": 32, "heads": 2, "n_blocks": 1, "rank": 2, "d_txt": 8}
step = {"epochs": 3, "n_train": 40, "n_test": 16}

(work / "run.yaml").write_text(yaml.safe_dump({
    "mode": "task", "seed": 0, "out": str(work / "run"), "model": small,
    "optim": {"base_lr": 0.01, "warmup_epochs": 1},
    "steps": [{**step, "task": "A", "classes": [1, 2], "profile": "cardiac"}],
}))
(work / "more.yaml").write_text(yaml.safe_dump({
    "steps": [{**step, "task": "B", "classes": [3], "profile": "dermoscopy"}],
}))


def lomoe(*args):
    print(f"\n$ lomoe {' '.join(args)}")
    code = main(list(args))
    if code:
        sys.exit(code)


lomoe("train", "--config", str(work / "run.yaml"))
lomoe("inspect", "--checkpoint", str(work / "run" / "step1.lmoe"))
lomoe("continue", "--checkpoint", str(work / "run" / "step1.lmoe"), "--config", str(work / "more.yaml"))
lomoe("eval", "--checkpoint", str(work / "run" / "step2.lmoe"))
lomoe("merge", "--checkpoint", str(work / "run" / "step2.lmoe"), "--task", "A",
      "--out", str(work / "A.dense.lmoe"))
lomoe("inspect", "--checkpoint", str(work / "A.dense.lmoe"))
