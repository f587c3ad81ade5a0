"""Sliding-window fusion through an observation blackout.

A stand-in predictor supplies one-second displacements with honest
uncertainty so the effect of the extra factors can be studied without
training a network first.
"""

# %%
import logging

import numpy as np

from icdnet.core import DisplacementPrediction
from icdnet.evaluation import compare_runs, evaluate, format_report
from icdnet.fusion import FusionConfig, run_fusion
from icdnet.simulator import ScenarioConfig, simulate

logging.basicConfig(level=logging.ERROR)
cfg = ScenarioConfig(seed=0, kind="aggressive-spline", duration=20.0, blackouts=((9.0, 14.0),))
run = simulate(cfg)
print(f"{len(run.obs)} observations; none between 9 and 14 s")

# %%
sigma = 0.1
rng = np.random.default_rng(1)
preds = []
for ts in np.arange(0.0, cfg.duration - 1.0 + 1e-9, 1.0):
    d = run.truth.position(ts + 1.0)[0] - run.truth.position(ts)[0]
    preds.append(DisplacementPrediction(d + rng.normal(0, sigma, 3), np.full(3, np.log(sigma**2)), ts, ts + 1.0))

# %%
base = run_fusion(run.imu, run.obs, FusionConfig(use_nn=False))
with_nn = run_fusion(run.imu, run.obs, FusionConfig(), predictions=preds)
rb, rn = evaluate(base.trajectory, run.gt), evaluate(with_nn.trajectory, run.gt)
print("baseline\n" + format_report(rb))
print("with NN factors\n" + format_report(rn))
print("APE improvement (%):", compare_runs(rb, rn))

# %%
# Error inside the blackout, where only inertial data and the predictor help.
for name, res in (("baseline", base), ("with NN", with_nn)):
    t = res.trajectory.t
    inside = (t >= 9.0) & (t < 14.0)
    e = np.linalg.norm(res.trajectory.p - run.gt.interp_position(t), axis=1)
    print(f"{name}: max error inside blackout {e[inside].max():.3f} m")
