"""simulate, train, predict, fuse and evaluate through the command line.

Equivalent to running the ``icdnet`` subcommands one after another; outputs
land in ``demo_run/`` under the current directory.
"""

# %%
from pathlib import Path

from icdnet.cli import main
from icdnet.io import dump_config

out = Path("demo_run")
out.mkdir(exist_ok=True)
dump_config({"seed": 3, "duration": 12.0, "trajectory": {"kind": "circle"},
             "observations": {"blackouts": [[5.0, 8.0]]}}, out / "scenario.yaml")
dump_config({"seed": 0, "network": {"hidden_dims": [32, 16], "vel_hidden": 16, "logvar_hidden": 8},
             "schedule": {"stages": [{"epochs": 3, "alpha": 1.0, "beta": 0.0, "gamma": 0.0},
                                     {"epochs": 3, "alpha": 1.0, "beta": 0.1, "gamma": 8.0}]}},
            out / "train.yaml")

# %%
steps = [
    ["simulate", "--config", out / "scenario.yaml", "--out", out / "data"],
    ["train", out / "data", "--config", out / "train.yaml", "--out", out / "model"],
    ["predict", out / "model" / "best.ckpt", out / "data" / "imu.csv", "--rate", 1, "--out", out / "pred.csv"],
    ["fuse", out / "data", "--no-nn", "--out", out / "baseline"],
    ["fuse", out / "data", "--predictions", out / "pred.csv", "--out", out / "fused"],
    ["evaluate", out / "baseline" / "trajectory.csv", out / "data" / "gt.csv", "--out", out / "eval_baseline"],
    ["evaluate", out / "fused" / "trajectory.csv", out / "data" / "gt.csv",
     "--baseline", out / "eval_baseline" / "report.txt", "--out", out / "eval_fused"],
]
for s in steps:
    code = main([str(a) for a in s])
    print(s[0], "exit", code)
    if code:
        raise SystemExit(code)
