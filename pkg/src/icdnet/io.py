"""CSV datasets and YAML configuration files."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import yaml

from .core import ContractError, DisplacementPrediction, ImuStream, Trajectory

IMU_COLUMNS = ("t", "fx", "fy", "fz", "wx", "wy", "wz")
POSE_COLUMNS = ("t", "px", "py", "pz", "qw", "qx", "qy", "qz")
PRED_COLUMNS = ("t_start", "t_end", "dx", "dy", "dz", "var_x", "var_y", "var_z")

IMU_FILE, GT_FILE, OBS_FILE = "imu.csv", "gt.csv", "obs.csv"


class ConfigError(ContractError):
    """Malformed configuration file; ``line`` is 1-based when known."""

    def __init__(self, msg, line=None, path=None):
        where = f"{path}:" if path else ""
        where += f"{line}: " if line is not None else (" " if path else "")
        super().__init__(f"{where}{msg}")
        self.line = line


def _fmt(x) -> str:
    return repr(float(x))


def write_table(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(x) for x in r])


def read_table(path, columns) -> np.ndarray:
    path = Path(path)
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        try:
            header = [h.strip() for h in next(rd)]
        except StopIteration:
            raise ContractError(f"{path}: empty file") from None
        if tuple(header) != tuple(columns):
            raise ContractError(f"{path}: expected header {','.join(columns)}, got {','.join(header)}")
        rows = []
        for n, r in enumerate(rd, 2):
            if not r:
                continue
            if len(r) != len(columns):
                raise ContractError(f"{path}:{n}: expected {len(columns)} fields, got {len(r)}")
            try:
                rows.append([float(x) for x in r])
            except ValueError as e:
                raise ContractError(f"{path}:{n}: {e}") from None
    return np.array(rows, dtype=float).reshape(-1, len(columns))


def write_imu(path, imu: ImuStream) -> None:
    write_table(path, IMU_COLUMNS, np.column_stack([imu.t, imu.f, imu.w]))


def read_imu(path) -> ImuStream:
    a = read_table(path, IMU_COLUMNS)
    return ImuStream(a[:, 0], a[:, 1:4], a[:, 4:7])


def write_trajectory(path, traj: Trajectory) -> None:
    q = traj.q if traj.q is not None else np.tile([1.0, 0.0, 0.0, 0.0], (len(traj), 1))
    write_table(path, POSE_COLUMNS, np.column_stack([traj.t, traj.p, q]))


def read_trajectory(path) -> Trajectory:
    a = read_table(path, POSE_COLUMNS)
    return Trajectory(a[:, 0], a[:, 1:4], a[:, 4:8])


def write_predictions(path, preds) -> None:
    rows = [[p.window_start, p.window_end, *p.d, *np.exp(p.log_var)] for p in preds]
    write_table(path, PRED_COLUMNS, rows)


def read_predictions(path) -> list:
    a = read_table(path, PRED_COLUMNS)
    if np.any(a[:, 5:8] <= 0):
        raise ContractError(f"{path}: prediction variances must be positive")
    return [DisplacementPrediction(r[2:5], np.log(r[5:8]), float(r[0]), float(r[1])) for r in a]


def write_dataset(out_dir, imu: ImuStream, gt: Trajectory, obs: Trajectory) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_imu(out / IMU_FILE, imu)
    write_trajectory(out / GT_FILE, gt)
    write_trajectory(out / OBS_FILE, obs)


def read_dataset(path):
    """(imu, gt, obs) from a directory holding imu.csv, gt.csv and obs.csv."""
    d = Path(path)
    for name in (IMU_FILE, GT_FILE, OBS_FILE):
        if not (d / name).is_file():
            raise ContractError(f"dataset {d} is missing {name}")
    return read_imu(d / IMU_FILE), read_trajectory(d / GT_FILE), read_trajectory(d / OBS_FILE)


def load_config(path) -> dict:
    """Parse a YAML mapping; syntax errors carry the offending line number."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(str(e), path=path) from None
    return parse_config(text, path)


def parse_config(text: str, path=None) -> dict:
    try:
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as e:
        mark = e.problem_mark or e.context_mark
        line = mark.line + 1 if mark is not None else None
        raise ConfigError(e.problem or str(e), line, path) from None
    except yaml.YAMLError as e:
        raise ConfigError(str(e), path=path) from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", 1, path)
    return data


def dump_config(data: dict, path) -> None:
    Path(path).write_text(yaml.safe_dump(_plain(data), sort_keys=True, default_flow_style=None))


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    return x
