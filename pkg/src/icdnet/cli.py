"""``icdnet`` command line: simulate, train, predict, fuse, evaluate.

Exit status is 0 on success, 1 for usage or input errors and 2 for numeric
failures (training divergence, non-finite network outputs).
"""

from __future__ import annotations

import argparse
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .core import ContractError, ImuWindow
from .io import (
    ConfigError,
    dump_config,
    load_config,
    read_dataset,
    read_imu,
    read_predictions,
    read_trajectory,
    write_dataset,
    write_predictions,
    write_table,
    write_trajectory,
)

log = logging.getLogger("icdnet")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2
CONFIG_SNAPSHOT = "config.yaml"


class UsageError(Exception):
    pass


class NumericFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def default_config_path(name: str) -> Path:
    return Path(str(resources.files("icdnet") / "configs" / name))


def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name, {}) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    return sec


def _snapshot(path, command: str, seed, args: dict, resolved: dict) -> None:
    dump_config({"command": command, "version": __version__, "seed": seed, "args": args, **resolved}, path)


def _paths(ns, *names) -> dict:
    return {n: (None if getattr(ns, n) is None else str(getattr(ns, n))) for n in names}


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def cmd_simulate(ns) -> int:
    from .simulator import ScenarioConfig, simulate

    raw = load_config(ns.config) if ns.config else {}
    if ns.seed is not None:
        raw["seed"] = ns.seed
    cfg = ScenarioConfig.from_dict(raw)
    run = simulate(cfg)
    out = Path(ns.out)
    write_dataset(out, run.imu, run.gt, run.obs)
    _snapshot(out / CONFIG_SNAPSHOT, "simulate", cfg.seed, _paths(ns, "config"), {"scenario": cfg.to_dict()})
    log.info("wrote %d IMU samples, %d observations to %s", len(run.imu), len(run.obs), out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _train_setup(raw: dict, epochs=None):
    from .network import NetworkConfig
    from .training import Stage, StageSchedule, TrainConfig, default_schedule

    net = NetworkConfig.from_dict(_section(raw, "network"))
    sched_raw = _section(raw, "schedule")
    sched = StageSchedule.from_dict(sched_raw) if sched_raw else default_schedule()
    if epochs is not None:
        sched = StageSchedule(tuple(Stage(epochs, s.weights) for s in sched.stages))
    tc = TrainConfig(**_section(raw, "training"))
    data = {"stride": 0.5, **_section(raw, "data")}
    unknown = set(data) - {"stride"}
    if unknown:
        raise ConfigError(f"unknown data keys: {sorted(unknown)}")
    return net, sched, tc, data


def cmd_train(ns) -> int:
    from .network import NumericError
    from .training import TrainingDiverged, WindowedDataset, make_samples, train

    raw = load_config(ns.config or default_config_path("train_default.yaml"))
    seed = ns.seed if ns.seed is not None else int(raw.get("seed", 0))
    net, sched, tc, data = _train_setup(raw, ns.epochs)
    parts = []
    for d in ns.datasets:
        imu, gt, _ = read_dataset(d)
        parts.append(make_samples(imu, gt, net, stride=float(data["stride"])))
    dataset = WindowedDataset.concat(parts)
    if len(dataset) == 0:
        raise UsageError("datasets contain no complete training window")
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    _snapshot(out / CONFIG_SNAPSHOT, "train", seed, {"datasets": [str(d) for d in ns.datasets], "epochs": ns.epochs,
                                                     **_paths(ns, "config")},
              {"network": net.to_dict(), "schedule": sched.to_dict(), "training": tc.to_dict(), "data": data})
    log.info("training on %d windows for %d epochs", len(dataset), sched.total_epochs)
    try:
        train(dataset, sched, net, seed, tc, out_dir=out)
    except (TrainingDiverged, NumericError) as exc:
        raise NumericFailure(f"training diverged: {exc}") from exc
    return EXIT_OK


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------


def prediction_starts(n_samples: int, dt_in: float, T: int, rate: float) -> np.ndarray:
    """Start indices of windows emitted every 1/rate seconds.

    A window is emitted only when all T samples exist, so a stream of N samples
    yields floor((N - T) / step) + 1 windows.
    """
    step = int(round(1.0 / (rate * dt_in)))
    if step < 1:
        raise ContractError("prediction rate exceeds the IMU rate")
    if n_samples < T:
        return np.zeros(0, dtype=int)
    return np.arange(0, n_samples - T + 1, step, dtype=int)


def predict_stream(params, net, imu, rate: float) -> list:
    from .core import DisplacementPrediction
    from .network import predict_batch

    starts = prediction_starts(len(imu), imu.dt, net.T, rate)
    if len(starts) == 0:
        raise ContractError(f"IMU stream has {len(imu)} samples; one window needs {net.T}")
    idx = starts[:, None] + np.arange(net.T)[None, :]
    F = np.ascontiguousarray(imu.f[idx].transpose(0, 2, 1))
    W = np.ascontiguousarray(imu.w[idx].transpose(0, 2, 1))
    for s in starts:
        ImuWindow(imu.t[s:s + net.T], imu.f[s:s + net.T], imu.w[s:s + net.T], imu.dt, net.T)
    d, lv = predict_batch(params, F, W, net)
    return [DisplacementPrediction(d[k], lv[k], float(imu.t[s]), float(imu.t[s] + net.T * imu.dt))
            for k, s in enumerate(starts)]


def cmd_predict(ns) -> int:
    from .network import NumericError, load_checkpoint

    params, net, _ = load_checkpoint(ns.checkpoint)
    imu = read_imu(ns.imu)
    try:
        preds = predict_stream(params, net, imu, ns.rate)
    except NumericError as exc:
        raise NumericFailure(str(exc)) from exc
    out = Path(ns.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_predictions(out, preds)
    _snapshot(out.with_name(out.stem + "." + CONFIG_SNAPSHOT), "predict", None,
              {**_paths(ns, "checkpoint", "imu", "out"), "rate": ns.rate}, {"network": net.to_dict()})
    log.info("wrote %d predictions to %s", len(preds), out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# fuse
# ---------------------------------------------------------------------------


def _dataset_blackouts(dataset: Path):
    snap = dataset / CONFIG_SNAPSHOT
    if not snap.is_file():
        return ()
    sc = load_config(snap).get("scenario", {}) or {}
    return tuple(tuple(b) for b in (sc.get("observations", {}) or {}).get("blackouts", ()) or ())


def cmd_fuse(ns) -> int:
    from .alignment import anchor_predictions
    from .fusion import FusionConfig, run_fusion, write_report
    from .simulator import in_blackout
    from .core import Trajectory

    raw = load_config(ns.config) if ns.config else {}
    fraw = dict(_section(raw, "fusion"))
    blackouts = tuple(tuple(b) for b in fraw.pop("blackouts", ()) or ())
    if ns.no_nn:
        fraw["use_nn"] = False
    cfg = FusionConfig.from_dict(fraw)
    dataset = Path(ns.dataset)
    imu, gt, obs = read_dataset(dataset)
    preds = None
    if cfg.use_nn:
        if ns.predictions is None:
            raise UsageError("--predictions is required unless --no-nn is given")
        preds = read_predictions(ns.predictions)
    if ns.blackout_aware:
        blackouts = blackouts or _dataset_blackouts(dataset)
        keep = ~in_blackout(obs.t, blackouts)
        obs = Trajectory(obs.t[keep], obs.p[keep], obs.q[keep])
        log.info("blackout-aware: dropped %d observations", int((~keep).sum()))
    res = run_fusion(imu, obs, cfg, preds, gt=gt if cfg.align_with_gt else None)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    write_trajectory(out / "trajectory.csv", res.trajectory)
    write_report(out / "solver_log.csv", res.solver_rows, extra_fields=("keyframe",))
    summary = {"keyframes": len(res.trajectory), "nn_factors": res.n_nn_factors, "nn_dropped": res.n_nn_dropped,
               "nonconverged_windows": res.n_nonconverged}
    if res.alignment is not None:
        summary["alignment_R"] = res.alignment.R.tolist()
        summary["alignment_residual_angle"] = res.alignment.residual_angle
    if preds:
        spacing = np.median(np.diff([p.window_end for p in preds])) if len(preds) > 1 else 1.0
        lag = max(1, int(round((preds[0].window_end - preds[0].window_start) / spacing)))
        t_nn, p_nn = anchor_predictions(preds, res.trajectory, res.alignment, lag=lag)
        write_table(out / "nn_positions.csv", ("t", "px", "py", "pz"), np.column_stack([t_nn, p_nn]))
    dump_config(summary, out / "summary.yaml")
    _snapshot(out / CONFIG_SNAPSHOT, "fuse", None,
              {**_paths(ns, "dataset", "predictions", "config"), "no_nn": ns.no_nn,
               "blackout_aware": ns.blackout_aware},
              {"fusion": cfg.to_dict(), "blackouts": [list(b) for b in blackouts]})
    log.info("fused %d keyframes (%d NN factors, %d windows without convergence)", len(res.trajectory),
             res.n_nn_factors, res.n_nonconverged)
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def cmd_evaluate(ns) -> int:
    from .evaluation import (
        MetricReport,
        associate,
        compare_runs,
        evaluate_pairs,
        format_comparison,
        format_report,
        parse_report,
        write_plot_data,
    )

    est, gt = read_trajectory(ns.est), read_trajectory(ns.gt)
    pairs = associate(est, gt, ns.tol, ns.interpolate)
    report = evaluate_pairs(pairs, ns.tol, ns.align)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    text = format_report(report)
    if ns.baseline is not None:
        base = MetricReport.from_dict(parse_report(Path(ns.baseline).read_text()))
        text += format_comparison(compare_runs(base, report))
    (out / "report.txt").write_text(text)
    write_plot_data(pairs, out / "ape.csv", out / "axis_errors.csv", ns.align)
    _snapshot(out / CONFIG_SNAPSHOT, "evaluate", None,
              {**_paths(ns, "est", "gt", "baseline"), "tol": ns.tol, "align": ns.align, "interpolate": ns.interpolate},
              {})
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="icdnet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate a synthetic dataset")
    s.add_argument("--config", help="scenario YAML")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", help="train the displacement network")
    s.add_argument("datasets", nargs="+", help="dataset directories with imu.csv and gt.csv")
    s.add_argument("--config", help="training YAML (default: bundled two-stage schedule)")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int, help="override the epoch count of every stage")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="run a checkpoint over an IMU stream")
    s.add_argument("checkpoint")
    s.add_argument("imu", help="IMU CSV")
    s.add_argument("--rate", type=float, default=1.0, help="prediction rate in Hz (default 1)")
    s.add_argument("--out", required=True, help="output predictions CSV")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("fuse", help="sliding-window fusion over a dataset")
    s.add_argument("dataset")
    s.add_argument("--predictions", help="predictions CSV")
    s.add_argument("--no-nn", action="store_true", help="baseline run without NN factors")
    s.add_argument("--blackout-aware", action="store_true",
                   help="drop observations inside the dataset's blackout intervals")
    s.add_argument("--config", help="YAML with a 'fusion' section")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("evaluate", help="trajectory metrics against ground truth")
    s.add_argument("est")
    s.add_argument("gt")
    s.add_argument("--tol", type=float, default=0.02, help="association tolerance in seconds")
    s.add_argument("--align", action="store_true", help="rigidly align before APE")
    s.add_argument("--interpolate", action="store_true", help="interpolate ground truth at estimate times")
    s.add_argument("--baseline", help="baseline report.txt to compare against")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return ns.func(ns)
    except NumericFailure as exc:
        print(f"icdnet {ns.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"icdnet {ns.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ContractError, OSError, KeyError, TypeError) as exc:
        print(f"icdnet {ns.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
