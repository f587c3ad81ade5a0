"""Train a narrow displacement network on synthetic flights.

The default width trains in tens of minutes on a CPU; this demo shrinks the
fully connected layers so it finishes in about a minute.
"""

# %%
import numpy as np

from icdnet.network import NetworkConfig, predict_batch
from icdnet.simulator import random_training_scenarios, simulate
from icdnet.training import LossWeights, TrainConfig, WindowedDataset, default_schedule, evaluate, make_samples, train

net = NetworkConfig(hidden_dims=(64, 32), vel_hidden=32, logvar_hidden=16)


def windows(n, seed):
    runs = (simulate(c) for c in random_training_scenarios(n, seed))
    return WindowedDataset.concat([make_samples(r.imu, r.gt, net, stride=0.5) for r in runs])


train_set, val_set = windows(30, 1), windows(6, 2)
print(f"{len(train_set)} training windows, {len(val_set)} validation windows")

# %%
# Stage one fits displacements only; stage two switches on the likelihood
# and log-variance regularisation terms.
res = train(train_set, default_schedule(15, 30), net, seed=0, train_cfg=TrainConfig(), val_dataset=val_set)
for rec in res.log[::9] + [res.log[-1]]:
    print(f"epoch {rec['epoch']:3d} stage {rec['stage']} val MAE {rec['val_mae']:.3f} m lr {rec['lr']:.1e}")

# %%
# Predicted standard deviations next to the errors they are meant to describe.
d, log_var = predict_batch(res.params, val_set.F, val_set.W, net)
err = np.abs(d - val_set.d_gt)
print("mean |error| per axis:", err.mean(0))
print("mean sigma per axis:  ", np.exp(0.5 * log_var).mean(0))
print("final val MAE:", evaluate(res.params, val_set, net, LossWeights())["mae"])
