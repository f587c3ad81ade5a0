import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icdnet.core import ContractError, geodesic_angle, quat_to_rot
from icdnet.simulator import (
    GRAVITY,
    ScenarioConfig,
    generate_truth,
    in_blackout,
    observation_times,
    random_training_scenarios,
    simulate,
    synthesize_imu,
    synthesize_observations,
)

QUIET = dict(accel_noise_density=0.0, gyro_noise_density=0.0, accel_bias_instability=0.0,
             gyro_bias_instability=0.0, obs_noise_pos=0.0, obs_noise_rot=0.0)


class TestScenarioConfig:
    def test_blackout_outside_duration(self):
        with pytest.raises(ContractError):
            ScenarioConfig(duration=10, blackouts=[(8, 12)])

    def test_overlapping_blackouts(self):
        with pytest.raises(ContractError):
            ScenarioConfig(duration=30, blackouts=[(5, 10), (9, 12)])

    def test_unknown_kind(self):
        with pytest.raises(ContractError):
            ScenarioConfig(kind="loop")

    def test_nested_round_trip(self):
        cfg = ScenarioConfig(seed=3, kind="circle", blackouts=[(2, 4)], accel_bias=(0.1, 0, 0))
        d = cfg.to_dict()
        assert set(d) == {"seed", "duration", "trajectory", "imu", "observations"}
        assert ScenarioConfig.from_dict(d) == cfg

    def test_unknown_section_key(self):
        with pytest.raises(ContractError):
            ScenarioConfig.from_dict({"imu": {"rate": 100}})


class TestGenerateTruth:
    def test_hover(self):
        tr = generate_truth(ScenarioConfig(kind="hover", position=(1, 2, 3)))
        t = np.linspace(0, 20, 50)
        np.testing.assert_array_equal(tr.position(t), np.tile([1, 2, 3], (50, 1)))
        np.testing.assert_array_equal(tr.velocity(t), 0.0)

    def test_circle_centripetal(self):
        tr = generate_truth(ScenarioConfig(kind="circle", radius=2.0, period=4.0))
        a = np.linalg.norm(tr.acceleration(np.linspace(0, 20, 400)), axis=1)
        np.testing.assert_allclose(a, 4 * np.pi**2 * 2 / 16, rtol=1e-12)
        assert a[0] == pytest.approx(4.93, abs=5e-3)

    def test_derivatives_consistent(self):
        tr = generate_truth(ScenarioConfig(kind="aggressive-spline", seed=2))
        t = np.linspace(1, 19, 37)
        h = 1e-5
        np.testing.assert_allclose((tr.position(t + h) - tr.position(t - h)) / (2 * h), tr.velocity(t), atol=1e-6)
        np.testing.assert_allclose((tr.velocity(t + h) - tr.velocity(t - h)) / (2 * h), tr.acceleration(t), atol=1e-5)

    def test_angular_velocity_matches_rotation(self):
        tr = generate_truth(ScenarioConfig(kind="aggressive-spline", seed=4))
        t = np.linspace(1, 19, 19)
        h = 1e-6
        R0, R1 = tr.rotation(t - h), tr.rotation(t + h)
        for k in range(len(t)):
            O = R0[k].T @ (R1[k] - R0[k]) / (2 * h)
            w_fd = 0.5 * np.array([O[2, 1] - O[1, 2], O[0, 2] - O[2, 0], O[1, 0] - O[0, 1]])
            np.testing.assert_allclose(tr.angular_velocity(t[k])[0], w_fd, atol=1e-5)

    def test_aggressive_peak_and_yaw(self):
        tr = generate_truth(ScenarioConfig(kind="aggressive-spline", seed=0))
        t = np.linspace(0, 20, 4001)
        a = np.linalg.norm(tr.acceleration(t), axis=1)
        assert a.max() >= 2 * 9.81
        yaw_rate = np.abs(np.gradient(tr.yaw(t), t))
        assert yaw_rate.max() > 1.0

    def test_deterministic(self):
        cfg = ScenarioConfig(kind="aggressive-spline", seed=9)
        t = np.linspace(0, 20, 100)
        np.testing.assert_array_equal(generate_truth(cfg).position(t), generate_truth(cfg).position(t))

    def test_rotations_proper(self):
        tr = generate_truth(ScenarioConfig(kind="aggressive-spline", seed=1))
        R = tr.rotation(np.linspace(0, 20, 50))
        np.testing.assert_allclose(np.einsum("nji,njk->nik", R, R), np.tile(np.eye(3), (50, 1, 1)), atol=1e-12)
        np.testing.assert_allclose(np.linalg.det(R), 1.0, atol=1e-12)


class TestSynthesizeImu:
    def test_hover_static(self):
        cfg = ScenarioConfig(kind="hover", duration=2.0, **QUIET)
        imu = synthesize_imu(generate_truth(cfg), cfg)
        np.testing.assert_allclose(imu.f, np.tile([0, 0, 9.81], (len(imu), 1)), atol=1e-12)
        np.testing.assert_allclose(imu.w, 0.0, atol=1e-12)
        assert len(imu) == 2001

    def test_noise_variance(self):
        cfg = ScenarioConfig(kind="hover", duration=20.0, accel_bias_instability=0.0, gyro_bias_instability=0.0)
        imu = synthesize_imu(generate_truth(cfg), cfg)
        expected_f = cfg.accel_noise_density**2 * cfg.imu_rate
        expected_w = cfg.gyro_noise_density**2 * cfg.imu_rate
        np.testing.assert_allclose(imu.f.var(axis=0), expected_f, rtol=0.1)
        np.testing.assert_allclose(imu.w.var(axis=0), expected_w, rtol=0.1)

    def test_constant_bias(self):
        cfg = ScenarioConfig(kind="hover", duration=1.0, accel_bias=(0.1, 0.2, 0.3), gyro_bias=(0.01, 0, 0), **QUIET)
        imu = synthesize_imu(generate_truth(cfg), cfg)
        np.testing.assert_allclose(imu.f[0], [0.1, 0.2, 9.81 + 0.3], atol=1e-12)
        np.testing.assert_allclose(imu.w[0], [0.01, 0, 0], atol=1e-12)

    def test_sensor_scale_and_misalignment(self):
        base = ScenarioConfig(kind="hover", duration=0.1, **QUIET)
        imu = synthesize_imu(generate_truth(base), ScenarioConfig(kind="hover", duration=0.1, accel_scale=(0, 0, 0.01),
                                                                  **QUIET))
        np.testing.assert_allclose(imu.f[0], [0, 0, 9.81 * 1.01], atol=1e-12)
        tilt = ScenarioConfig(kind="hover", duration=0.1, misalignment=(0.01, 0, 0), **QUIET)
        imu2 = synthesize_imu(generate_truth(tilt), tilt)
        assert np.linalg.norm(imu2.f[0]) == pytest.approx(9.81, rel=1e-12)
        assert imu2.f[0, 1] == pytest.approx(-9.81 * np.sin(0.01), rel=1e-9)

    def test_specific_force_model(self):
        cfg = ScenarioConfig(kind="aggressive-spline", seed=3, duration=3.0, **QUIET)
        tr = generate_truth(cfg)
        imu = synthesize_imu(tr, cfg)
        k = 1234
        R = tr.rotation(imu.t[k])[0]
        np.testing.assert_allclose(imu.f[k], R.T @ (tr.acceleration(imu.t[k])[0] - GRAVITY), atol=1e-12)


class TestObservations:
    def test_noiseless_equals_truth(self):
        cfg = ScenarioConfig(kind="circle", duration=2.0, **QUIET)
        tr = generate_truth(cfg)
        obs = synthesize_observations(tr, cfg)
        np.testing.assert_allclose(obs.p, tr.position(obs.t), atol=1e-15)
        np.testing.assert_allclose(obs.q, tr.quaternion(obs.t), atol=1e-15)

    def test_blackout_empty(self):
        cfg = ScenarioConfig(duration=20.0, blackouts=[(10, 15)])
        obs = synthesize_observations(generate_truth(cfg), cfg)
        assert not np.any((obs.t >= 10) & (obs.t <= 15))

    def test_blackout_count(self):
        cfg = ScenarioConfig(duration=60.0, blackouts=[(20, 25)])
        obs = synthesize_observations(generate_truth(cfg), cfg)
        assert abs(len(obs) - 30 * 55) <= 1

    @given(st.floats(0.0, 14.0), st.floats(0.5, 5.0))
    @settings(max_examples=30, deadline=None)
    def test_blackout_partition(self, start, length):
        cfg = ScenarioConfig(duration=20.0, blackouts=[(start, start + length)])
        obs = synthesize_observations(generate_truth(cfg), cfg)
        all_t = observation_times(cfg)
        dark = in_blackout(all_t, cfg.blackouts)
        np.testing.assert_array_equal(obs.t, all_t[~dark])

    def test_corrupted_mode_keeps_samples(self):
        cfg = ScenarioConfig(duration=10.0, blackouts=[(4, 6)], blackout_mode="corrupted")
        tr = generate_truth(cfg)
        obs = synthesize_observations(tr, cfg)
        assert len(obs) == len(observation_times(cfg))
        dark = in_blackout(obs.t, cfg.blackouts)
        err = np.linalg.norm(obs.p - tr.position(obs.t), axis=1)
        assert err[dark].mean() > 10 * err[~dark].mean()

    def test_rotation_noise_level(self):
        cfg = ScenarioConfig(kind="hover", duration=60.0, obs_noise_rot=0.01)
        tr = generate_truth(cfg)
        obs = synthesize_observations(tr, cfg)
        ang = [geodesic_angle(quat_to_rot(a), quat_to_rot(b)) for a, b in zip(obs.q, tr.quaternion(obs.t))]
        # the angle of an isotropic 3-d Gaussian rotation vector has RMS sigma * sqrt(3)
        assert np.sqrt(np.mean(np.square(ang))) == pytest.approx(0.01 * np.sqrt(3), rel=0.05)


class TestSimulate:
    def test_deterministic(self):
        cfg = ScenarioConfig(kind="aggressive-spline", seed=5, duration=3.0)
        a, b = simulate(cfg), simulate(cfg)
        np.testing.assert_array_equal(a.imu.f, b.imu.f)
        np.testing.assert_array_equal(a.obs.p, b.obs.p)

    def test_seed_changes_noise(self):
        a = simulate(ScenarioConfig(seed=1, duration=1.0))
        b = simulate(ScenarioConfig(seed=2, duration=1.0))
        assert not np.array_equal(a.imu.f, b.imu.f)

    def test_gt_on_imu_clock(self):
        run = simulate(ScenarioConfig(duration=2.0))
        np.testing.assert_array_equal(run.gt.t, run.imu.t)

    def test_training_scenarios(self):
        cfgs = random_training_scenarios(6, 0)
        assert [c.kind for c in cfgs] == ["constant-velocity", "circle"] * 3
        assert cfgs == random_training_scenarios(6, 0)
        assert len({c.seed for c in cfgs}) == 6
