import numpy as np
import pytest

from icdnet.core import ContractError, DisplacementPrediction, ImuStream, Trajectory
from icdnet.io import (
    ConfigError,
    dump_config,
    load_config,
    parse_config,
    read_dataset,
    read_imu,
    read_predictions,
    read_trajectory,
    write_dataset,
    write_imu,
    write_predictions,
    write_trajectory,
)
from icdnet.simulator import ScenarioConfig, simulate


class TestCsv:
    def test_imu_round_trip_exact(self, tmp_path, rng):
        imu = ImuStream(np.arange(5) * 1e-3, rng.normal(size=(5, 3)), rng.normal(size=(5, 3)))
        write_imu(tmp_path / "imu.csv", imu)
        back = read_imu(tmp_path / "imu.csv")
        np.testing.assert_array_equal(back.f, imu.f)
        np.testing.assert_array_equal(back.t, imu.t)
        assert (tmp_path / "imu.csv").read_text().splitlines()[0] == "t,fx,fy,fz,wx,wy,wz"

    def test_trajectory_header(self, tmp_path):
        write_trajectory(tmp_path / "gt.csv", Trajectory([0.0, 1.0], np.zeros((2, 3))))
        assert (tmp_path / "gt.csv").read_text().splitlines()[0] == "t,px,py,pz,qw,qx,qy,qz"
        assert read_trajectory(tmp_path / "gt.csv").q[0, 0] == 1.0

    def test_wrong_header(self, tmp_path):
        (tmp_path / "x.csv").write_text("t,a,b\n0,1,2\n")
        with pytest.raises(ContractError, match="expected header"):
            read_imu(tmp_path / "x.csv")

    def test_bad_number_has_line(self, tmp_path):
        (tmp_path / "x.csv").write_text("t,fx,fy,fz,wx,wy,wz\n0,0,0,0,0,0,0\n0.001,0,zz,0,0,0,0\n")
        with pytest.raises(ContractError, match=":3:"):
            read_imu(tmp_path / "x.csv")

    def test_predictions_round_trip(self, tmp_path):
        preds = [DisplacementPrediction([0.1, 0.2, 0.3], np.log([0.01, 0.02, 0.03]), 0.0, 1.0),
                 DisplacementPrediction([-1, 0, 1], np.zeros(3), 1.0, 2.0)]
        write_predictions(tmp_path / "p.csv", preds)
        back = read_predictions(tmp_path / "p.csv")
        assert len(back) == 2
        np.testing.assert_array_equal(back[0].d, preds[0].d)
        np.testing.assert_allclose(back[0].log_var, preds[0].log_var, rtol=1e-15)
        assert (back[1].window_start, back[1].window_end) == (1.0, 2.0)

    def test_non_positive_variance(self, tmp_path):
        (tmp_path / "p.csv").write_text("t_start,t_end,dx,dy,dz,var_x,var_y,var_z\n0,1,0,0,0,1,0,1\n")
        with pytest.raises(ContractError):
            read_predictions(tmp_path / "p.csv")

    def test_dataset_round_trip(self, tmp_path):
        run = simulate(ScenarioConfig(duration=0.5, blackouts=[(0.1, 0.2)]))
        write_dataset(tmp_path / "d", run.imu, run.gt, run.obs)
        imu, gt, obs = read_dataset(tmp_path / "d")
        np.testing.assert_array_equal(imu.w, run.imu.w)
        np.testing.assert_array_equal(gt.q, run.gt.q)
        np.testing.assert_array_equal(obs.t, run.obs.t)

    def test_missing_dataset_file(self, tmp_path):
        with pytest.raises(ContractError, match="missing"):
            read_dataset(tmp_path)


class TestYaml:
    def test_round_trip(self, tmp_path):
        cfg = {"seed": 3, "network": {"hidden_dims": [8, 4]}, "x": np.float64(0.5), "arr": np.arange(3)}
        dump_config(cfg, tmp_path / "c.yaml")
        back = load_config(tmp_path / "c.yaml")
        assert back == {"seed": 3, "network": {"hidden_dims": [8, 4]}, "x": 0.5, "arr": [0, 1, 2]}

    def test_deterministic_dump(self, tmp_path):
        dump_config({"b": 1, "a": {"z": 2, "y": 3}}, tmp_path / "a.yaml")
        dump_config({"a": {"y": 3, "z": 2}, "b": 1}, tmp_path / "b.yaml")
        assert (tmp_path / "a.yaml").read_bytes() == (tmp_path / "b.yaml").read_bytes()

    def test_syntax_error_line(self):
        with pytest.raises(ConfigError) as exc:
            parse_config("a: 1\nb: [1, 2\nc: 3\n")
        assert exc.value.line is not None and exc.value.line >= 2

    def test_empty_and_non_mapping(self):
        assert parse_config("") == {}
        with pytest.raises(ConfigError):
            parse_config("- 1\n- 2\n")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.yaml")
