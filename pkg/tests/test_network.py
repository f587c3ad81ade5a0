import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SMALL
from gradcheck import central_differences, relative_errors
from icdnet.core import ContractError, ImuWindow
from icdnet.network import (
    Layout,
    NetworkConfig,
    NetworkParameters,
    NumericError,
    backward,
    forward,
    forward_batch,
    init_parameters,
    layer_shapes,
    load_checkpoint,
    predict_batch,
    save_checkpoint,
)


def make_window(rng, T, t0=0.0):
    t = t0 + 1e-3 * np.arange(T)
    f = rng.normal(size=(T, 3)) + [0, 0, 9.81]
    w = 0.5 * rng.normal(size=(T, 3))
    return ImuWindow(t, f, w, 1e-3, T)


def batch(rng, B, T):
    F = rng.normal(size=(B, 3, T))
    F[:, 2] += 9.81
    return F, 0.5 * rng.normal(size=(B, 3, T))


class TestConfig:
    def test_defaults(self):
        cfg = NetworkConfig()
        assert cfg.conv_len == 500 and cfg.n_out == 500
        assert cfg.fused_dim == 2 * 7 * 500 + 6 * 1000

    def test_invalid_clamp(self):
        with pytest.raises(ContractError):
            NetworkConfig(logvar_clamp=(1.0, 1.0))

    def test_odd_window_rejected(self):
        with pytest.raises(ContractError):
            NetworkConfig(T=999)

    def test_dict_round_trip(self):
        cfg = NetworkConfig(hidden_dims=(32, 16), dropout_rate=0.2)
        assert NetworkConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ContractError):
            NetworkConfig.from_dict({"T": 1000, "width": 3})


class TestInitParameters:
    def test_deterministic(self):
        a = init_parameters(NetworkConfig(), np.random.default_rng(3))
        b = init_parameters(NetworkConfig(), np.random.default_rng(3))
        np.testing.assert_array_equal(a.flat, b.flat)

    def test_layout_is_bijection(self):
        cfg = NetworkConfig()
        layout = Layout.for_config(cfg)
        cover = np.zeros(layout.size, int)
        for name in layout.entries:
            cover[layout.slice(name)] += 1
        np.testing.assert_array_equal(cover, 1)
        assert layout.size == sum(int(np.prod(s)) for _, s in layer_shapes(cfg))

    def test_conv_weight_std(self):
        # fan-in is 3 channels x kernel 2, uniform(-b, b) has std b / sqrt(3)
        cfg = NetworkConfig(conv_channels=400)
        p = init_parameters(cfg, np.random.default_rng(0))
        target = (1.0 / np.sqrt(6.0)) / np.sqrt(3.0)
        for name in ("conv_f.W", "conv_w.W"):
            assert abs(p[name].std() - target) < 0.2 * target

    def test_biases_zero_gains_one(self):
        p = init_parameters(SMALL, np.random.default_rng(0))
        for name in p.layout.entries:
            if name.endswith(".b"):
                np.testing.assert_array_equal(p[name], 0.0)
            if name.endswith(".g"):
                np.testing.assert_array_equal(p[name], 1.0)

    def test_wrong_flat_size(self):
        with pytest.raises(ContractError):
            NetworkParameters(np.zeros(3), Layout.for_config(SMALL))


class TestForward:
    def test_shapes_default_config(self, rng):
        cfg = NetworkConfig()
        p = init_parameters(cfg, rng)
        prof, pred, _ = forward(p, make_window(rng, 1000), cfg)
        assert prof.v.shape == (500, 3)
        assert pred.d.shape == (3,) and pred.log_var.shape == (3,)

    def test_zero_network(self, rng):
        p = NetworkParameters.zeros(SMALL)
        _, pred, _ = forward(p, make_window(rng, SMALL.T), SMALL)
        np.testing.assert_array_equal(pred.d, 0.0)
        np.testing.assert_array_equal(pred.log_var, 0.0)

    def test_eval_mode_bitwise_repeatable(self, rng):
        p = init_parameters(SMALL, rng)
        win = make_window(rng, SMALL.T)
        a = forward(p, win, SMALL)[1]
        b = forward(p, win, SMALL, rng=np.random.default_rng(99))[1]
        np.testing.assert_array_equal(a.d, b.d)
        np.testing.assert_array_equal(a.log_var, b.log_var)

    def test_displacement_is_profile_sum(self, rng):
        cfg = NetworkConfig()
        p = init_parameters(cfg, rng)
        prof, pred, _ = forward(p, make_window(rng, 1000), cfg)
        assert np.abs(prof.v.sum(axis=0) * 0.002 - pred.d).max() < 1e-12

    def test_wrong_length(self, rng):
        p = init_parameters(SMALL, rng)
        with pytest.raises(ContractError):
            forward(p, make_window(rng, SMALL.T + 2), SMALL)

    def test_non_finite_reports_layer(self, rng):
        p = init_parameters(SMALL, rng)
        F, W = batch(rng, 1, SMALL.T)
        F[0, 0, 0] = np.inf
        with pytest.raises(NumericError) as exc:
            forward_batch(p, F, W, SMALL)
        assert exc.value.layer == "conv_f"

    def test_dropout_only_in_train_mode(self, rng):
        p = init_parameters(SMALL, rng)
        F, W = batch(rng, 4, SMALL.T)
        a = forward_batch(p, F, W, SMALL, train_mode=True, rng=np.random.default_rng(1))
        b = forward_batch(p, F, W, SMALL, train_mode=True, rng=np.random.default_rng(2))
        assert not np.array_equal(a.d, b.d)
        assert set(a.tape.layers["masks"]) == {"conv_f", "conv_w", "fc1"}

    def test_train_mode_needs_rng(self, rng):
        p = init_parameters(SMALL, rng)
        F, W = batch(rng, 1, SMALL.T)
        with pytest.raises(ContractError):
            forward_batch(p, F, W, SMALL, train_mode=True)

    def test_predict_batch_matches_forward(self, rng):
        p = init_parameters(SMALL, rng)
        F, W = batch(rng, 7, SMALL.T)
        d, lv = predict_batch(p, F, W, SMALL, batch_size=3)
        out = forward_batch(p, F, W, SMALL)
        np.testing.assert_allclose(d, out.d, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(lv, out.log_var, rtol=1e-12, atol=1e-15)

    @given(st.integers(0, 2**32 - 1), st.floats(0.1, 50.0))
    @settings(max_examples=30, deadline=None)
    def test_clamp_invariant(self, seed, scale):
        r = np.random.default_rng(seed)
        p = init_parameters(SMALL, r)
        p = p.with_flat(p.flat * scale + r.normal(size=p.flat.size))
        F, W = batch(r, 3, SMALL.T)
        lv = forward_batch(p, F * scale, W, SMALL).log_var
        lo, hi = SMALL.logvar_clamp
        assert np.all(lv >= lo) and np.all(lv <= hi)


class TestBackward:
    def test_zero_output_gradient(self, rng):
        p = init_parameters(SMALL, rng)
        F, W = batch(rng, 2, SMALL.T)
        out = forward_batch(p, F, W, SMALL, train_mode=True, rng=rng)
        g = backward(out.tape, np.zeros_like(out.v), np.zeros_like(out.d), np.zeros_like(out.log_var))
        np.testing.assert_array_equal(g, 0.0)

    def test_dx_matches_finite_differences(self):
        cfg = NetworkConfig(T=100, hidden_dims=(32, 16), vel_hidden=16, logvar_hidden=8)
        rng = np.random.default_rng(5)
        p = init_parameters(cfg, rng)
        F, W = batch(rng, 1, cfg.T)
        out = forward_batch(p, F, W, cfg)
        gd = np.zeros((1, 3))
        gd[0, 0] = 1.0
        g = backward(out.tape, grad_d=gd)

        def dx(flat):
            return forward_batch(p.with_flat(flat), F, W, cfg).d[0, 0]

        idx = rng.choice(p.layout.size, 200, replace=False)
        fd = central_differences(dx, p.flat, idx)
        rel = relative_errors(g[idx], fd, 1e-6 * max(1.0, abs(out.d[0, 0])))
        assert rel.max() < 1e-4

    def test_mask_reuse_repeatable(self, rng):
        p = init_parameters(SMALL, rng)
        F, W = batch(rng, 3, SMALL.T)
        out = forward_batch(p, F, W, SMALL, train_mode=True, rng=rng)
        again = forward_batch(p, F, W, SMALL, train_mode=True, masks=out.tape.layers["masks"])
        np.testing.assert_array_equal(out.d, again.d)
        gd = np.ones((3, 3))
        np.testing.assert_array_equal(backward(out.tape, grad_d=gd), backward(again.tape, grad_d=gd))

    def test_train_mode_gradient_with_dropout(self):
        cfg = NetworkConfig(T=40, hidden_dims=(16, 8), vel_hidden=8, logvar_hidden=4, dropout_rate=0.3)
        rng = np.random.default_rng(8)
        p = init_parameters(cfg, rng)
        F, W = batch(rng, 2, cfg.T)
        out = forward_batch(p, F, W, cfg, train_mode=True, rng=rng)
        masks = out.tape.layers["masks"]
        glv = rng.normal(size=(2, 3))
        gd = rng.normal(size=(2, 3))
        g = backward(out.tape, grad_d=gd, grad_log_var=glv)

        def f(flat):
            o = forward_batch(p.with_flat(flat), F, W, cfg, train_mode=True, masks=masks)
            return float((o.d * gd).sum() + (o.log_var * glv).sum())

        idx = rng.choice(p.layout.size, 150, replace=False)
        fd = central_differences(f, p.flat, idx)
        assert relative_errors(g[idx], fd, 1e-6).max() < 1e-4

    def test_clamped_logvar_blocks_gradient(self, rng):
        p = NetworkParameters.zeros(SMALL)
        flat = p.flat.copy()
        flat[p.layout.slice("lv2.b")] = 100.0
        p = p.with_flat(flat)
        F, W = batch(rng, 1, SMALL.T)
        out = forward_batch(p, F, W, SMALL)
        np.testing.assert_array_equal(out.log_var, SMALL.logvar_clamp[1])
        g = backward(out.tape, grad_log_var=np.ones((1, 3)))
        np.testing.assert_array_equal(g, 0.0)

    def test_mismatched_tape(self, rng):
        p = init_parameters(SMALL, rng)
        F, W = batch(rng, 1, SMALL.T)
        out = forward_batch(p, F, W, SMALL)
        out.tape.layers["params"] = NetworkParameters.zeros(NetworkConfig(T=20, hidden_dims=(4, 4)))
        with pytest.raises(ContractError):
            backward(out.tape, grad_d=np.ones((1, 3)))


class TestCheckpoint:
    def test_bit_exact_round_trip(self, tmp_path, rng):
        cfg = NetworkConfig(hidden_dims=(24, 12))
        p = init_parameters(cfg, rng)
        save_checkpoint(tmp_path / "a.ckpt", p, cfg, {"epoch": 3})
        q, cfg2, extra = load_checkpoint(tmp_path / "a.ckpt")
        assert cfg2 == cfg and extra == {"epoch": 3}
        assert q.flat.tobytes() == p.flat.tobytes()
        assert q.layout == p.layout

    def test_rejects_foreign_file(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"not a checkpoint")
        with pytest.raises(ContractError):
            load_checkpoint(tmp_path / "x.ckpt")

    def test_save_is_deterministic(self, tmp_path, rng):
        p = init_parameters(SMALL, rng)
        save_checkpoint(tmp_path / "a.ckpt", p, SMALL)
        save_checkpoint(tmp_path / "b.ckpt", p, SMALL)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
