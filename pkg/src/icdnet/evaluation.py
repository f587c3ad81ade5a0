"""Trajectory accuracy metrics and baseline-versus-ours comparison."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .core import ContractError, Trajectory

AXES = ("x", "y", "z")
DEFAULT_TOL = 0.02


@dataclass(frozen=True)
class Pairs:
    t: np.ndarray
    est: np.ndarray
    gt: np.ndarray
    n_unmatched: int = 0

    def __len__(self):
        return len(self.t)

    @property
    def err(self) -> np.ndarray:
        return self.est - self.gt


def associate(est: Trajectory, gt: Trajectory, tol: float = DEFAULT_TOL, interpolate: bool = False) -> Pairs:
    """Pair each estimate with the nearest ground-truth sample within ``tol`` seconds.

    With ``interpolate`` the ground truth is linearly interpolated at the
    estimate time instead, provided an actual sample lies within ``tol``.
    """
    if len(est) == 0 or len(gt) == 0:
        raise ContractError("association needs non-empty trajectories")
    k = np.clip(np.searchsorted(gt.t, est.t), 1, len(gt) - 1) if len(gt) > 1 else np.zeros(len(est), int)
    if len(gt) > 1:
        left = gt.t[k - 1]
        right = gt.t[k]
        k = np.where(np.abs(est.t - left) <= np.abs(right - est.t), k - 1, k)
    dist = np.abs(gt.t[k] - est.t)
    ok = dist <= tol + 1e-12
    if not ok.any():
        raise ContractError(f"no estimate lies within {tol} s of a ground-truth sample")
    if interpolate:
        inside = ok & (est.t >= gt.t[0]) & (est.t <= gt.t[-1])
        ok = inside
        if not ok.any():
            raise ContractError("no estimate inside the ground-truth time span")
        g = gt.interp_position(est.t[ok])
    else:
        g = gt.p[k[ok]]
    return Pairs(est.t[ok], est.p[ok], g, int((~ok).sum()))


def _median(x) -> float:
    # numpy averages the two central values for even lengths
    return float(np.median(x))


def per_axis_errors(pairs: Pairs | np.ndarray):
    """(MAE, MedAE) per axis as two length-3 arrays."""
    err = pairs.err if isinstance(pairs, Pairs) else np.asarray(pairs, dtype=float)
    if len(err) == 0:
        raise ContractError("need at least one pair")
    a = np.abs(err)
    return a.mean(axis=0), np.median(a, axis=0)


def overall_errors(pairs: Pairs | np.ndarray):
    """Mean and median of the per-sample Euclidean error."""
    err = pairs.err if isinstance(pairs, Pairs) else np.asarray(pairs, dtype=float)
    if len(err) == 0:
        raise ContractError("need at least one pair")
    e = np.linalg.norm(err, axis=1)
    return float(e.mean()), _median(e)


def umeyama_rotation_translation(src, dst):
    """Rigid (R, t) minimising sum ||R src + t - dst||^2."""
    mu_s, mu_d = src.mean(0), dst.mean(0)
    C = (dst - mu_d).T @ (src - mu_s)
    U, _, Vt = np.linalg.svd(C)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    R = U @ D @ Vt
    return R, mu_d - R @ mu_s


def ape_series(pairs: Pairs, align: bool = False) -> np.ndarray:
    est = pairs.est
    if align:
        R, t = umeyama_rotation_translation(pairs.est, pairs.gt)
        est = est @ R.T + t
    return np.linalg.norm(est - pairs.gt, axis=1)


def ape(est: Trajectory, gt: Trajectory, tol: float = DEFAULT_TOL, align: bool = False):
    """(mean, max) absolute position error over associated pairs."""
    e = ape_series(associate(est, gt, tol), align)
    return float(e.mean()), float(e.max())


@dataclass(frozen=True)
class MetricReport:
    mae: tuple
    medae: tuple
    overall_mae: float
    overall_medae: float
    ape_mean: float
    ape_max: float
    n: int
    tol: float
    n_unmatched: int = 0
    aligned: bool = False

    def to_dict(self) -> dict:
        d = {}
        for k, ax in enumerate(AXES):
            d[f"mae_{ax}"] = float(self.mae[k])
        for k, ax in enumerate(AXES):
            d[f"medae_{ax}"] = float(self.medae[k])
        d.update(overall_mae=self.overall_mae, overall_medae=self.overall_medae, ape_mean=self.ape_mean,
                 ape_max=self.ape_max, n=self.n, n_unmatched=self.n_unmatched, tol=self.tol,
                 aligned=int(self.aligned))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(tuple(float(d[f"mae_{a}"]) for a in AXES), tuple(float(d[f"medae_{a}"]) for a in AXES),
                   float(d["overall_mae"]), float(d["overall_medae"]), float(d["ape_mean"]), float(d["ape_max"]),
                   int(d["n"]), float(d["tol"]), int(d.get("n_unmatched", 0)), bool(int(d.get("aligned", 0))))


REPORT_KEYS = tuple(MetricReport((0,) * 3, (0,) * 3, 0, 0, 0, 0, 0, 0).to_dict())


def evaluate_pairs(pairs: Pairs, tol: float = DEFAULT_TOL, align: bool = False) -> MetricReport:
    mae, medae = per_axis_errors(pairs)
    om, omed = overall_errors(pairs)
    e = ape_series(pairs, align)
    return MetricReport(tuple(map(float, mae)), tuple(map(float, medae)), om, omed, float(e.mean()),
                        float(e.max()), len(pairs), tol, pairs.n_unmatched, align)


def evaluate(est: Trajectory, gt: Trajectory, tol: float = DEFAULT_TOL, align: bool = False,
             interpolate: bool = False) -> MetricReport:
    return evaluate_pairs(associate(est, gt, tol, interpolate), tol, align)


def improvement(baseline: float, ours: float):
    """Percentage reduction from baseline; None when the baseline is zero."""
    if baseline == 0:
        return None
    return (baseline - ours) / baseline * 100.0


def compare_runs(baseline: MetricReport, ours: MetricReport) -> dict:
    return {"ape_mean": improvement(baseline.ape_mean, ours.ape_mean),
            "ape_max": improvement(baseline.ape_max, ours.ape_max)}


def format_report(report: MetricReport) -> str:
    """One ``key = value`` line per metric."""
    lines = []
    for k, v in report.to_dict().items():
        lines.append(f"{k} = {v!r}" if isinstance(v, float) else f"{k} = {v}")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ContractError(f"line {n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def format_comparison(cmp: dict) -> str:
    return "".join(f"improvement_{k} = {'n/a' if v is None else repr(float(v))}\n" for k, v in cmp.items())


def write_plot_data(pairs: Pairs, ape_path, axis_path, align: bool = False) -> None:
    """Per-timestamp APE series and signed per-axis errors as CSV."""
    e = ape_series(pairs, align)
    with open(ape_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "ape"])
        for t, v in zip(pairs.t, e):
            w.writerow([repr(float(t)), repr(float(v))])
    with open(axis_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "ex", "ey", "ez"])
        for t, v in zip(pairs.t, pairs.err):
            w.writerow([repr(float(t))] + [repr(float(x)) for x in v])
