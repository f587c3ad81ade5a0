import numpy as np
import pytest

from icdnet.cli import EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main, prediction_starts
from icdnet.evaluation import REPORT_KEYS, parse_report
from icdnet.io import dump_config, load_config, read_imu, read_predictions, read_trajectory

TRAIN_CFG = {
    "seed": 0,
    "network": {"T": 1000, "hidden_dims": [16, 8], "vel_hidden": 8, "logvar_hidden": 6},
    "schedule": {"stages": [
        {"epochs": 1, "alpha": 1.0, "beta": 0.0, "gamma": 0.0},
        {"epochs": 1, "alpha": 1.0, "beta": 0.1, "gamma": 8.0},
    ]},
    "training": {"batch_size": 8},
    "data": {"stride": 0.5},
}


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """simulate -> train -> predict -> fuse (both modes) -> evaluate, run twice."""
    root = tmp_path_factory.mktemp("pipe")
    scen = root / "scenario.yaml"
    dump_config({"seed": 4, "duration": 10.0, "trajectory": {"kind": "circle"},
                 "observations": {"blackouts": [[4.0, 6.0]]}}, scen)
    train_cfg = root / "train.yaml"
    dump_config(TRAIN_CFG, train_cfg)
    out = {}
    for rep in ("a", "b"):
        d = root / rep
        codes = [
            run("simulate", "--config", scen, "--out", d / "data"),
            run("train", d / "data", "--config", train_cfg, "--seed", 1, "--out", d / "model"),
            run("predict", d / "model" / "final.ckpt", d / "data" / "imu.csv", "--rate", 1, "--out", d / "pred.csv"),
            run("fuse", d / "data", "--predictions", d / "pred.csv", "--blackout-aware", "--out", d / "nn"),
            run("fuse", d / "data", "--no-nn", "--blackout-aware", "--out", d / "base"),
            run("evaluate", d / "base" / "trajectory.csv", d / "data" / "gt.csv", "--out", d / "eval_base"),
            run("evaluate", d / "nn" / "trajectory.csv", d / "data" / "gt.csv",
                "--baseline", d / "eval_base" / "report.txt", "--out", d / "eval_nn"),
        ]
        out[rep] = (d, codes)
    return out


PRIMARY = ["data/imu.csv", "data/gt.csv", "data/obs.csv", "model/metrics.csv", "pred.csv",
           "nn/trajectory.csv", "base/trajectory.csv", "eval_base/report.txt", "eval_nn/report.txt"]


class TestPipeline:
    def test_exit_codes(self, pipeline):
        for d, codes in pipeline.values():
            assert codes == [EXIT_OK] * 7

    @pytest.mark.parametrize("name", PRIMARY)
    def test_byte_identical_rerun(self, pipeline, name):
        a, b = pipeline["a"][0], pipeline["b"][0]
        assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_checkpoints_identical(self, pipeline):
        a, b = pipeline["a"][0], pipeline["b"][0]
        for name in ("best.ckpt", "final.ckpt"):
            assert (a / "model" / name).read_bytes() == (b / "model" / name).read_bytes()

    def test_dataset_rows(self, pipeline):
        d = pipeline["a"][0]
        imu = read_imu(d / "data" / "imu.csv")
        obs = read_trajectory(d / "data" / "obs.csv")
        # both endpoints are sampled
        assert len(imu) == 10001
        assert not np.any((obs.t >= 4.0) & (obs.t < 6.0))
        assert np.max(np.diff(obs.t)) > 1.9

    def test_prediction_rows(self, pipeline):
        d = pipeline["a"][0]
        preds = read_predictions(d / "pred.csv")
        # floor((10001 - 1000) / 1000) + 1
        assert len(preds) == 10
        lv = np.array([p.log_var for p in preds])
        assert np.all(lv >= -9.2) and np.all(lv <= 4.6)
        np.testing.assert_allclose([p.window_end - p.window_start for p in preds], 1.0, atol=1e-9)

    def test_config_snapshots(self, pipeline):
        d = pipeline["a"][0]
        for sub in ("data", "model", "nn", "base", "eval_nn"):
            snap = load_config(d / sub / "config.yaml")
            assert "command" in snap and "seed" in snap
        assert load_config(d / "model" / "config.yaml")["seed"] == 1
        assert load_config(d / "data" / "config.yaml")["scenario"]["seed"] == 4
        assert (d / "pred.config.yaml").is_file()

    def test_report_keys(self, pipeline):
        d = pipeline["a"][0]
        rep = parse_report((d / "eval_nn" / "report.txt").read_text())
        assert set(REPORT_KEYS) <= set(rep)
        assert "improvement_ape_mean" in rep
        assert (d / "eval_nn" / "ape.csv").is_file()
        assert (d / "eval_nn" / "axis_errors.csv").is_file()

    def test_metrics_log(self, pipeline):
        lines = (pipeline["a"][0] / "model" / "metrics.csv").read_text().splitlines()
        assert len(lines) == 3


class TestPredictionCount:
    @pytest.mark.parametrize("n,expected", [(10000, 10), (9999, 9), (1000, 1), (999, 0), (10500, 10)])
    def test_counting_oracle(self, n, expected):
        assert len(prediction_starts(n, 0.001, 1000, 1.0)) == expected

    def test_rate_too_high(self):
        from icdnet.core import ContractError
        with pytest.raises(ContractError):
            prediction_starts(10000, 0.001, 1000, 5000.0)


class TestEvaluateCommand:
    def write(self, path, t, p):
        from icdnet.core import Trajectory
        from icdnet.io import write_trajectory
        write_trajectory(path, Trajectory(t, p))

    def test_identical_is_zero(self, tmp_path, capsys):
        t = np.arange(20) * 0.1
        p = np.column_stack([t, t ** 2, np.cos(t)])
        self.write(tmp_path / "gt.csv", t, p)
        assert run("evaluate", tmp_path / "gt.csv", tmp_path / "gt.csv", "--out", tmp_path / "r") == EXIT_OK
        rep = parse_report((tmp_path / "r" / "report.txt").read_text())
        for k in ("mae_x", "medae_z", "overall_mae", "ape_mean", "ape_max"):
            assert float(rep[k]) == 0.0
        assert "ape_mean" in capsys.readouterr().out

    def test_shift(self, tmp_path):
        t = np.arange(20) * 0.1
        p = np.zeros((20, 3))
        self.write(tmp_path / "gt.csv", t, p)
        self.write(tmp_path / "est.csv", t, p + [0.0, 3.0, 4.0])
        run("evaluate", tmp_path / "est.csv", tmp_path / "gt.csv", "--out", tmp_path / "r")
        rep = parse_report((tmp_path / "r" / "report.txt").read_text())
        assert float(rep["ape_mean"]) == 5.0 and float(rep["ape_max"]) == 5.0

    def test_association_failure(self, tmp_path):
        t = np.arange(20) * 0.1
        self.write(tmp_path / "gt.csv", t, np.zeros((20, 3)))
        self.write(tmp_path / "est.csv", t + 50.0, np.zeros((20, 3)))
        assert run("evaluate", tmp_path / "est.csv", tmp_path / "gt.csv", "--out", tmp_path / "r") == EXIT_USAGE


class TestErrors:
    def test_unknown_command(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == EXIT_USAGE

    def test_missing_required_flag(self):
        with pytest.raises(SystemExit) as exc:
            main(["simulate"])
        assert exc.value.code == EXIT_USAGE

    def test_scenario_parse_error_line(self, tmp_path, capsys):
        bad = tmp_path / "bad.yaml"
        bad.write_text("seed: 1\nduration: [3\nkind: hover\n")
        assert run("simulate", "--config", bad, "--out", tmp_path / "o") == EXIT_USAGE
        err = capsys.readouterr().err
        assert f"{bad}:" in err and "error" in err

    def test_unknown_scenario_key(self, tmp_path):
        bad = tmp_path / "bad.yaml"
        bad.write_text("seed: 1\nnot_a_key: 3\n")
        assert run("simulate", "--config", bad, "--out", tmp_path / "o") == EXIT_USAGE

    def test_fuse_needs_predictions(self, tmp_path):
        run("simulate", "--seed", 0, "--out", tmp_path / "d")
        assert run("fuse", tmp_path / "d", "--out", tmp_path / "f") == EXIT_USAGE

    def test_missing_dataset(self, tmp_path):
        assert run("fuse", tmp_path / "nothing", "--no-nn", "--out", tmp_path / "f") == EXIT_USAGE

    def test_predict_insufficient_imu(self, tmp_path, pipeline):
        d = pipeline["a"][0]
        lines = (d / "data" / "imu.csv").read_text().splitlines()[:500]
        (tmp_path / "short.csv").write_text("\n".join(lines) + "\n")
        assert run("predict", d / "model" / "final.ckpt", tmp_path / "short.csv", "--out", tmp_path / "p.csv") \
            == EXIT_USAGE

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_is_numeric_failure(self, tmp_path, pipeline):
        cfg = {**TRAIN_CFG, "training": {"batch_size": 8, "lr": 1e30}}
        dump_config(cfg, tmp_path / "t.yaml")
        code = run("train", pipeline["a"][0] / "data", "--config", tmp_path / "t.yaml", "--out", tmp_path / "m")
        assert code == EXIT_NUMERIC


class TestDefaults:
    def test_default_schedule_file(self):
        from icdnet.cli import default_config_path
        cfg = load_config(default_config_path("train_default.yaml"))
        s1, s2 = cfg["schedule"]["stages"]
        assert (s1["epochs"], s1["beta"], s1["gamma"]) == (100, 0.0, 0.0)
        assert (s2["epochs"], s2["beta"], s2["gamma"]) == (200, 0.1, 8.0)
        assert cfg["network"]["T"] == 1000
