"""Loss terms, AdamW, plateau scheduling and the two-stage training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ContractError, ImuStream, ImuWindow, Trajectory
from .network import (
    NetworkConfig,
    NetworkParameters,
    backward,
    forward_batch,
    init_parameters,
    save_checkpoint,
)

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.0
    gamma: float = 0.0
    lambda_smooth: float = 5e-5
    lambda_reg: tuple = (1e-3, 1e-3, 1e-3)

    def __post_init__(self):
        object.__setattr__(self, "lambda_reg", tuple(float(x) for x in np.broadcast_to(self.lambda_reg, 3)))
        if min(self.alpha, self.beta, self.gamma, self.lambda_smooth, *self.lambda_reg) < 0:
            raise ContractError("loss weights must be non-negative")

    def to_dict(self):
        return {"alpha": self.alpha, "beta": self.beta, "gamma": self.gamma,
                "lambda_smooth": self.lambda_smooth, "lambda_reg": list(self.lambda_reg)}


@dataclass(frozen=True)
class Stage:
    epochs: int
    weights: LossWeights


@dataclass(frozen=True)
class StageSchedule:
    stages: tuple

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if sum(s.epochs for s in self.stages) <= 0:
            raise ContractError("schedule must contain at least one epoch")

    @property
    def total_epochs(self) -> int:
        return sum(s.epochs for s in self.stages)

    def to_dict(self):
        return {"stages": [{"epochs": s.epochs, **s.weights.to_dict()} for s in self.stages]}

    @classmethod
    def from_dict(cls, d):
        stages = []
        for st in d["stages"]:
            st = dict(st)
            epochs = int(st.pop("epochs"))
            stages.append(Stage(epochs, LossWeights(**st)))
        return cls(tuple(stages))


def default_schedule(warmup_epochs: int = 100, main_epochs: int = 200) -> StageSchedule:
    """Warm-up on the base loss only, then switch on regularisation and NLL."""
    return StageSchedule((
        Stage(warmup_epochs, LossWeights(alpha=1.0, beta=0.0, gamma=0.0, lambda_smooth=5e-5)),
        Stage(main_epochs, LossWeights(alpha=1.0, beta=0.1, gamma=8.0, lambda_smooth=5e-5)),
    ))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def loss_base(profile, d_pred, d_gt, lambda_smooth: float, dt: float = 0.002) -> float:
    """L1 displacement error plus a penalty on step-to-step velocity changes.

    The smoothness sequence is the per-step displacement increment v[t] * dt.
    """
    v = profile.v if hasattr(profile, "v") else np.asarray(profile)
    if len(v) < 2:
        raise ContractError("velocity profile needs at least two rows")
    s = v * dt
    rate = (s[1:] - s[:-1]) / dt
    return float(np.abs(np.asarray(d_pred) - np.asarray(d_gt)).sum() + lambda_smooth * (rate * rate).sum())


def loss_nll(d_pred, d_gt, log_var) -> float:
    lv = np.asarray(log_var, dtype=float)
    e = np.asarray(d_gt, dtype=float) - np.asarray(d_pred, dtype=float)
    return float(0.5 * np.sum(lv + e * e * np.exp(-lv) + LOG_2PI))


def loss_reg(log_var, lambda_reg) -> float:
    lv = np.asarray(log_var, dtype=float)
    return float(np.sum(np.asarray(lambda_reg, dtype=float) * lv * lv))


def loss_total(components, weights: LossWeights) -> float:
    """Weighted sum; ``components`` is a mapping with keys base, reg and nll (or a 3-tuple)."""
    if isinstance(components, dict):
        base, reg, nll = components["base"], components["reg"], components["nll"]
    else:
        base, reg, nll = components
    return weights.alpha * base + weights.beta * reg + weights.gamma * nll


def batch_losses(v, d, log_var, d_gt, weights: LossWeights, dt: float, need_grad: bool = True):
    """Batch-mean loss terms and gradients w.r.t. (v, d, log_var).

    Returns (terms, grads) where terms has keys base, reg, nll, total and
    grads is (gv, gd, glv) or None.
    """
    B = len(d)
    e = d - d_gt
    s = v * dt
    rate = (s[:, 1:] - s[:, :-1]) / dt
    smooth = (rate * rate).sum(axis=(1, 2))
    base = np.abs(e).sum(axis=1) + weights.lambda_smooth * smooth
    lam = np.asarray(weights.lambda_reg)
    reg = (lam * log_var * log_var).sum(axis=1)
    inv_var = np.exp(-log_var)
    nll = 0.5 * (log_var + e * e * inv_var + LOG_2PI).sum(axis=1)
    terms = {"base": float(base.mean()), "reg": float(reg.mean()), "nll": float(nll.mean())}
    terms["total"] = loss_total(terms, weights)
    if not need_grad:
        return terms, None
    w = 1.0 / B
    gd = weights.alpha * np.sign(e) + weights.gamma * e * inv_var
    glv = weights.beta * 2.0 * lam * log_var + weights.gamma * 0.5 * (1.0 - e * e * inv_var)
    gv = np.zeros_like(v)
    if weights.lambda_smooth > 0:
        # d/dv of sum ||(s[t]-s[t-1])/dt||^2 with s = v dt
        gr = 2.0 * rate * weights.alpha * weights.lambda_smooth
        gv[:, 1:] += gr
        gv[:, :-1] -= gr
    return terms, (gv * w, gd * w, glv * w)


# ---------------------------------------------------------------------------
# optimiser and scheduler
# ---------------------------------------------------------------------------


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 0.002
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # plateau scheduler
    best: float = math.inf
    bad_epochs: int = 0
    factor: float = 0.5
    patience: int = 10
    min_lr: float = 0.0
    n_reductions: int = 0

    @classmethod
    def create(cls, n: int, **kw) -> "OptimizerState":
        return cls(np.zeros(n), np.zeros(n), **kw)


def adamw_step(params: np.ndarray, grads: np.ndarray, state: OptimizerState):
    """One decoupled-weight-decay Adam update. Moments in ``state`` are updated in place."""
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape:
        raise ContractError("params and grads must share a layout")
    if not np.all(np.isfinite(grads)):
        bad = np.flatnonzero(~np.isfinite(grads))
        raise NonFiniteGradientError(f"{bad.size} non-finite gradient entries (first at index {bad[0]}); step rejected")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grads
    state.v *= b2
    state.v += (1.0 - b2) * grads * grads
    mhat_scale = 1.0 / (1.0 - b1**state.step)
    vhat_scale = 1.0 / (1.0 - b2**state.step)
    update = (state.m * mhat_scale) / (np.sqrt(state.v * vhat_scale) + state.eps)
    new = params * (1.0 - state.lr * state.weight_decay) - state.lr * update
    return new, state


def scheduler_step(state: OptimizerState, metric: float) -> OptimizerState:
    """Halve the learning rate after ``patience`` consecutive calls without improvement."""
    if not np.isfinite(metric):
        raise ContractError("scheduler metric must be finite")
    if metric < state.best:
        state.best = float(metric)
        state.bad_epochs = 0
        return state
    state.bad_epochs += 1
    if state.bad_epochs >= state.patience:
        new_lr = max(state.lr * state.factor, state.min_lr)
        if new_lr < state.lr:
            state.lr = new_lr
            state.n_reductions += 1
        state.bad_epochs = 0
    return state


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainingSample:
    window: ImuWindow
    d_gt: np.ndarray


@dataclass
class WindowedDataset:
    """Stacked network inputs F, W with shape (N, 3, T) and labels (N, 3)."""

    F: np.ndarray
    W: np.ndarray
    d_gt: np.ndarray
    t_start: np.ndarray
    t_end: np.ndarray
    dt_in: float
    skipped: int = 0

    def __len__(self):
        return len(self.d_gt)

    def __getitem__(self, i) -> TrainingSample:
        T = self.F.shape[2]
        t = self.t_start[i] + self.dt_in * np.arange(T)
        return TrainingSample(ImuWindow(t, self.F[i].T, self.W[i].T, self.dt_in, T), self.d_gt[i])

    def subset(self, idx) -> "WindowedDataset":
        idx = np.asarray(idx)
        return WindowedDataset(self.F[idx], self.W[idx], self.d_gt[idx], self.t_start[idx], self.t_end[idx],
                               self.dt_in, 0)

    @classmethod
    def concat(cls, parts) -> "WindowedDataset":
        parts = [p for p in parts if len(p)]
        if not parts:
            raise ContractError("no windows to concatenate")
        return cls(
            np.concatenate([p.F for p in parts]), np.concatenate([p.W for p in parts]),
            np.concatenate([p.d_gt for p in parts]), np.concatenate([p.t_start for p in parts]),
            np.concatenate([p.t_end for p in parts]), parts[0].dt_in, sum(p.skipped for p in parts),
        )


def window_starts(n_samples: int, dt_in: float, T: int, stride: float) -> np.ndarray:
    """Start indices of full windows cut every ``stride`` seconds."""
    step = max(1, int(round(stride / dt_in)))
    return np.arange(0, n_samples - T + 1, step, dtype=int)


def make_samples(imu: ImuStream, gt: Trajectory, cfg: NetworkConfig, stride: float = 0.5) -> WindowedDataset:
    """Cut one-second windows and label them with the ground-truth displacement.

    Windows whose span is not covered by ``gt`` are skipped; the count is kept
    in ``WindowedDataset.skipped``.
    """
    dt_in = imu.dt
    starts = window_starts(len(imu), dt_in, cfg.T, stride)
    keep, t0s, t1s = [], [], []
    skipped = 0
    for i in starts:
        t0 = imu.t[i]
        t1 = t0 + cfg.T * dt_in
        if not gt.covers(t0, t1):
            skipped += 1
            continue
        keep.append(i)
        t0s.append(t0)
        t1s.append(t1)
    if skipped:
        log.warning("make_samples: skipped %d window(s) without ground-truth coverage", skipped)
    t0s, t1s = np.array(t0s), np.array(t1s)
    if keep:
        d_gt = gt.interp_position(t1s) - gt.interp_position(t0s)
        idx = np.asarray(keep)[:, None] + np.arange(cfg.T)[None, :]
        F = np.ascontiguousarray(imu.f[idx].transpose(0, 2, 1))
        W = np.ascontiguousarray(imu.w[idx].transpose(0, 2, 1))
    else:
        d_gt = np.zeros((0, 3))
        F = W = np.zeros((0, 3, cfg.T))
    return WindowedDataset(F, W, d_gt, t0s, t1s, dt_in, skipped)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


class TrainingDiverged(RuntimeError):
    def __init__(self, message, last_good: NetworkParameters, log_records):
        super().__init__(message)
        self.last_good = last_good
        self.log = log_records


@dataclass
class TrainConfig:
    batch_size: int = 64
    val_fraction: float = 0.1
    lr: float = 0.002
    weight_decay: float = 1e-2
    patience: int = 10
    factor: float = 0.5

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class TrainResult:
    params: NetworkParameters
    best_params: NetworkParameters
    stage_params: list
    log: list
    train_index: np.ndarray
    val_index: np.ndarray
    optimizer: OptimizerState = field(repr=False, default=None)


LOG_FIELDS = ["epoch", "stage", "lr",
              "train_base", "train_reg", "train_nll", "train_total",
              "val_base", "val_reg", "val_nll", "val_total", "val_mae"]


def split_indices(n: int, val_fraction: float, rng: np.random.Generator):
    if n < 2:
        idx = np.arange(n)
        return idx, idx
    perm = rng.permutation(n)
    n_val = min(n - 1, max(1, int(round(val_fraction * n))))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def evaluate(params: NetworkParameters, data: WindowedDataset, cfg: NetworkConfig, weights: LossWeights,
             batch_size: int = 256) -> dict:
    """Eval-mode mean loss terms plus the mean Euclidean displacement error."""
    sums = {"base": 0.0, "reg": 0.0, "nll": 0.0}
    err = 0.0
    n = len(data)
    for i in range(0, n, batch_size):
        sl = slice(i, i + batch_size)
        out = forward_batch(params, data.F[sl], data.W[sl], cfg)
        terms, _ = batch_losses(out.v, out.d, out.log_var, data.d_gt[sl], weights, cfg.dt_out, need_grad=False)
        b = len(out.d)
        for k in sums:
            sums[k] += terms[k] * b
        err += np.linalg.norm(out.d - data.d_gt[sl], axis=1).sum()
    res = {k: v / n for k, v in sums.items()}
    res["total"] = loss_total(res, weights)
    res["mae"] = err / n
    return res


def train(dataset: WindowedDataset, schedule: StageSchedule, cfg: NetworkConfig, seed: int,
          train_cfg: TrainConfig | None = None, init: NetworkParameters | None = None,
          out_dir=None, val_dataset: WindowedDataset | None = None) -> TrainResult:
    """Run every stage of ``schedule`` in order.

    The plateau scheduler watches the validation total loss; its best value is
    reset at each stage boundary because the loss definition changes there.
    When ``out_dir`` is given, a checkpoint is written at each stage end plus
    ``best.ckpt`` (best validation loss of the final stage) and ``metrics.csv``.
    """
    if len(dataset) == 0:
        raise ContractError("training dataset is empty")
    tc = train_cfg or TrainConfig()
    ss = np.random.SeedSequence(seed)
    init_ss, split_ss, shuffle_ss, drop_ss = ss.spawn(4)
    params = init if init is not None else init_parameters(cfg, np.random.default_rng(init_ss))
    if val_dataset is None:
        tr_idx, va_idx = split_indices(len(dataset), tc.val_fraction, np.random.default_rng(split_ss))
        train_set, val_set = dataset.subset(tr_idx), dataset.subset(va_idx)
    else:
        tr_idx, va_idx = np.arange(len(dataset)), np.arange(0)
        train_set, val_set = dataset, val_dataset
    shuffle_rng = np.random.default_rng(shuffle_ss)
    drop_rng = np.random.default_rng(drop_ss)
    opt = OptimizerState.create(params.layout.size, lr=tc.lr, weight_decay=tc.weight_decay,
                                patience=tc.patience, factor=tc.factor)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    records, stage_params = [], []
    best_params, best_val = params, math.inf
    epoch = 0
    for si, stage in enumerate(schedule.stages, start=1):
        opt.best, opt.bad_epochs = math.inf, 0
        best_val = math.inf
        for _ in range(stage.epochs):
            epoch += 1
            lr_used = opt.lr
            order = shuffle_rng.permutation(len(train_set))
            acc = {"base": 0.0, "reg": 0.0, "nll": 0.0}
            for b0 in range(0, len(order), tc.batch_size):
                bi = np.sort(order[b0:b0 + tc.batch_size])
                out = forward_batch(params, train_set.F[bi], train_set.W[bi], cfg, train_mode=True, rng=drop_rng)
                terms, (gv, gd, glv) = batch_losses(out.v, out.d, out.log_var, train_set.d_gt[bi],
                                                    stage.weights, cfg.dt_out)
                if not np.isfinite(terms["total"]):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}", params, records)
                g = backward(out.tape, gv, gd, glv)
                try:
                    new_flat, opt = adamw_step(params.flat, g, opt)
                except NonFiniteGradientError as exc:
                    raise TrainingDiverged(f"epoch {epoch}: {exc}", params, records) from exc
                params = params.with_flat(new_flat)
                for k in acc:
                    acc[k] += terms[k] * len(bi)
            tr = {k: v / len(train_set) for k, v in acc.items()}
            tr["total"] = loss_total(tr, stage.weights)
            va = evaluate(params, val_set, cfg, stage.weights)
            if not np.isfinite(va["total"]):
                raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}", best_params, records)
            scheduler_step(opt, va["total"])
            rec = {"epoch": epoch, "stage": si, "lr": lr_used,
                   "train_base": tr["base"], "train_reg": tr["reg"], "train_nll": tr["nll"], "train_total": tr["total"],
                   "val_base": va["base"], "val_reg": va["reg"], "val_nll": va["nll"], "val_total": va["total"],
                   "val_mae": va["mae"]}
            records.append(rec)
            log.info("epoch %d stage %d lr %.3g train %.5g val %.5g mae %.4g", epoch, si, lr_used,
                     tr["total"], va["total"], va["mae"])
            if va["total"] < best_val:
                best_val, best_params = va["total"], params
        stage_params.append(params)
        if out_dir is not None:
            save_checkpoint(out_dir / f"stage{si}.ckpt", params, cfg, {"epoch": epoch, "stage": si})
    if out_dir is not None:
        save_checkpoint(out_dir / "best.ckpt", best_params, cfg, {"stage": len(schedule.stages)})
        save_checkpoint(out_dir / "final.ckpt", params, cfg, {"epoch": epoch})
        write_metrics_log(out_dir / "metrics.csv", records)
    return TrainResult(params, best_params, stage_params, records, tr_idx, va_idx, opt)


def write_metrics_log(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for r in records:
            w.writerow([r[k] if k in ("epoch", "stage") else repr(float(r[k])) for k in LOG_FIELDS])
