"""Dual-branch convolutional displacement network with a hand-written backward pass.

Graph (per window of ``T`` samples)::

    f (3,T) -> conv k2 s2 -> LeakyReLU -> dropout -> c_f (7, T/2)
    w (3,T) -> conv k2 s2 -> LeakyReLU -> dropout -> c_w (7, T/2)
    x = [c_f ; c_w ; f ; w]  (flattened row-major)
    FC1 -> LayerNorm -> LeakyReLU -> dropout -> FC2 -> LayerNorm -> LeakyReLU -> h
    velocity head: h -> FC -> LeakyReLU -> FC -> v (T/2, 3);  d = sum(v) * dt_out
    log-variance head: h -> FC -> LeakyReLU -> FC -> clamp -> log_var (3,)

Everything runs batched over a leading axis in float64.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import ContractError, DisplacementPrediction, ImuWindow, VelocityProfile

LN_EPS = 1e-5
CHECKPOINT_MAGIC = b"ICDNETCK"
CHECKPOINT_VERSION = 1


class NumericError(FloatingPointError):
    """A layer produced a non-finite activation."""

    def __init__(self, layer: str):
        super().__init__(f"non-finite activation in layer '{layer}'")
        self.layer = layer


@dataclass(frozen=True)
class NetworkConfig:
    T: int = 1000
    conv_kernel: int = 2
    conv_stride: int = 2
    conv_channels: int = 7
    hidden_dims: tuple = (512, 256)
    vel_hidden: int = 256
    logvar_hidden: int = 64
    dropout_rate: float = 0.1
    leaky_slope: float = 0.01
    logvar_clamp: tuple = (-9.2, 4.6)
    dt_out: float = 0.002
    dt_in: float = 0.001

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        object.__setattr__(self, "logvar_clamp", tuple(float(c) for c in self.logvar_clamp))
        if self.conv_kernel != self.conv_stride:
            raise ContractError("only non-overlapping convolutions (kernel == stride) are supported")
        if self.T % self.conv_stride or self.T % 2:
            raise ContractError("T must be divisible by the conv stride and by 2")
        if len(self.hidden_dims) != 2:
            raise ContractError("hidden_dims must list the widths of FC1 and FC2")
        if not self.logvar_clamp[0] < self.logvar_clamp[1]:
            raise ContractError("logvar_clamp min must be below max")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ContractError("dropout_rate must lie in [0, 1)")

    @property
    def conv_len(self) -> int:
        return self.T // self.conv_stride

    @property
    def n_out(self) -> int:
        return self.T // 2

    @property
    def fused_dim(self) -> int:
        return 2 * self.conv_channels * self.conv_len + 6 * self.T

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        d["logvar_clamp"] = list(self.logvar_clamp)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ContractError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


def layer_shapes(cfg: NetworkConfig) -> list[tuple[str, tuple]]:
    h1, h2 = cfg.hidden_dims
    C, K = cfg.conv_channels, cfg.conv_kernel
    return [
        ("conv_f.W", (C, 3, K)), ("conv_f.b", (C,)),
        ("conv_w.W", (C, 3, K)), ("conv_w.b", (C,)),
        ("fc1.W", (cfg.fused_dim, h1)), ("fc1.b", (h1,)),
        ("ln1.g", (h1,)), ("ln1.b", (h1,)),
        ("fc2.W", (h1, h2)), ("fc2.b", (h2,)),
        ("ln2.g", (h2,)), ("ln2.b", (h2,)),
        ("vel1.W", (h2, cfg.vel_hidden)), ("vel1.b", (cfg.vel_hidden,)),
        ("vel2.W", (cfg.vel_hidden, 3 * cfg.n_out)), ("vel2.b", (3 * cfg.n_out,)),
        ("lv1.W", (h2, cfg.logvar_hidden)), ("lv1.b", (cfg.logvar_hidden,)),
        ("lv2.W", (cfg.logvar_hidden, 3)), ("lv2.b", (3,)),
    ]


@dataclass(frozen=True)
class Layout:
    """Maps layer names to (offset, shape) inside a flat parameter vector."""

    entries: dict
    size: int

    @classmethod
    def for_config(cls, cfg: NetworkConfig) -> "Layout":
        entries, off = {}, 0
        for name, shape in layer_shapes(cfg):
            n = int(np.prod(shape))
            entries[name] = (off, tuple(shape))
            off += n
        return cls(entries, off)

    def slice(self, name: str) -> slice:
        off, shape = self.entries[name]
        return slice(off, off + int(np.prod(shape)))

    def view(self, flat: np.ndarray, name: str) -> np.ndarray:
        off, shape = self.entries[name]
        return flat[off:off + int(np.prod(shape))].reshape(shape)


@dataclass(frozen=True)
class NetworkParameters:
    flat: np.ndarray
    layout: Layout

    def __post_init__(self):
        flat = np.asarray(self.flat, dtype=np.float64)
        if flat.shape != (self.layout.size,):
            raise ContractError(f"parameter vector has {flat.size} entries, layout expects {self.layout.size}")
        object.__setattr__(self, "flat", flat)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.layout.view(self.flat, name)

    def with_flat(self, flat: np.ndarray) -> "NetworkParameters":
        return NetworkParameters(flat, self.layout)

    @classmethod
    def zeros(cls, cfg: NetworkConfig) -> "NetworkParameters":
        layout = Layout.for_config(cfg)
        return cls(np.zeros(layout.size), layout)


def fan_in(name: str, shape: tuple) -> int:
    if name.startswith("conv"):
        return shape[1] * shape[2]
    return shape[0]


def init_parameters(cfg: NetworkConfig, rng: np.random.Generator) -> NetworkParameters:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, unit LayerNorm gains."""
    layout = Layout.for_config(cfg)
    flat = np.zeros(layout.size)
    for name, (off, shape) in layout.entries.items():
        n = int(np.prod(shape))
        if name.endswith(".W"):
            bound = 1.0 / np.sqrt(fan_in(name, shape))
            flat[off:off + n] = rng.uniform(-bound, bound, size=n)
        elif name.endswith(".g"):
            flat[off:off + n] = 1.0
    return NetworkParameters(flat, layout)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


@dataclass
class Tape:
    """Intermediates of one batched forward pass, enough for exact backprop."""

    cfg: NetworkConfig
    layout: Layout
    layers: dict = field(default_factory=dict)


@dataclass
class ForwardOutput:
    v: np.ndarray          # (B, T/2, 3)
    d: np.ndarray          # (B, 3)
    log_var: np.ndarray    # (B, 3)
    tape: Tape


def _leaky(z, slope):
    return np.where(z > 0, z, slope * z)


def _leaky_grad(z, slope):
    return np.where(z > 0, 1.0, slope)


def _check(name, a):
    if not np.all(np.isfinite(a)):
        raise NumericError(name)
    return a


def _dropout_mask(rng, shape, rate):
    if rate <= 0.0:
        return None
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def _layer_norm(z, g, b):
    mu = z.mean(axis=-1, keepdims=True)
    xc = z - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, xhat, inv


def _layer_norm_backward(dy, xhat, inv, g):
    dxhat = dy * g
    dz = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dz, (dy * xhat).sum(axis=0), dy.sum(axis=0)


def forward_batch(params: NetworkParameters, F, W, cfg: NetworkConfig, train_mode: bool = False,
                  rng: np.random.Generator | None = None, masks: dict | None = None) -> ForwardOutput:
    """Batched forward pass.

    ``F`` and ``W`` have shape (B, 3, T). In train mode dropout masks are drawn
    from ``rng`` unless ``masks`` (from an earlier tape) is given.
    """
    F = np.asarray(F, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if F.ndim != 3 or F.shape[1:] != (3, cfg.T) or W.shape != F.shape:
        raise ContractError(f"expected inputs of shape (B, 3, {cfg.T}), got {F.shape} and {W.shape}")
    if params.layout.size != Layout.for_config(cfg).size:
        raise ContractError("parameters do not match the network configuration")
    B = F.shape[0]
    s = cfg.leaky_slope
    rate = cfg.dropout_rate if train_mode else 0.0
    if train_mode and masks is None and rate > 0 and rng is None:
        raise ContractError("train mode with dropout needs a random stream")
    L = {}
    use_masks = {} if masks is None else masks

    def mask(name, shape):
        if rate <= 0.0:
            return None
        if name not in use_masks:
            use_masks[name] = _dropout_mask(rng, shape, rate)
        return use_masks[name]

    conv_out = []
    for branch, x in (("conv_f", F), ("conv_w", W)):
        xr = x.reshape(B, 3, cfg.conv_len, cfg.conv_kernel)
        z = np.einsum("bitk,cik->bct", xr, params[branch + ".W"], optimize=True) + params[branch + ".b"][None, :, None]
        a = _check(branch, _leaky(z, s))
        m = mask(branch, a.shape)
        if m is not None:
            a = a * m
        L[branch] = (xr, z)
        conv_out.append(a.reshape(B, -1))

    x = np.concatenate(conv_out + [F.reshape(B, -1), W.reshape(B, -1)], axis=1)
    z1 = x @ params["fc1.W"] + params["fc1.b"]
    y1, xh1, inv1 = _layer_norm(z1, params["ln1.g"], params["ln1.b"])
    a1 = _check("fc1", _leaky(y1, s))
    m1 = mask("fc1", a1.shape)
    if m1 is not None:
        a1 = a1 * m1
    z2 = a1 @ params["fc2.W"] + params["fc2.b"]
    y2, xh2, inv2 = _layer_norm(z2, params["ln2.g"], params["ln2.b"])
    h = _check("fc2", _leaky(y2, s))

    zv1 = h @ params["vel1.W"] + params["vel1.b"]
    av1 = _leaky(zv1, s)
    vflat = _check("velocity_head", av1 @ params["vel2.W"] + params["vel2.b"])
    v = vflat.reshape(B, cfg.n_out, 3)
    d = v.sum(axis=1) * cfg.dt_out

    zl1 = h @ params["lv1.W"] + params["lv1.b"]
    al1 = _leaky(zl1, s)
    lv_raw = _check("logvar_head", al1 @ params["lv2.W"] + params["lv2.b"])
    lo, hi = cfg.logvar_clamp
    log_var = np.clip(lv_raw, lo, hi)

    L.update(x=x, z1=z1, xh1=xh1, inv1=inv1, y1=y1, a1=a1, z2=z2, xh2=xh2, inv2=inv2, y2=y2, h=h,
             zv1=zv1, av1=av1, zl1=zl1, al1=al1, lv_raw=lv_raw)
    tape = Tape(cfg, params.layout, L)
    tape.layers["masks"] = use_masks if rate > 0 else {}
    tape.layers["params"] = params
    return ForwardOutput(v, d, log_var, tape)


def backward(tape: Tape, grad_v=None, grad_d=None, grad_log_var=None) -> np.ndarray:
    """Gradient of sum(grad_out * output) w.r.t. the flat parameter vector.

    Output gradients are batched like the forward outputs; any may be None.
    """
    cfg, L = tape.cfg, tape.layers
    params: NetworkParameters = L["params"]
    if params.layout.size != tape.layout.size:
        raise ContractError("tape and parameters disagree")
    s = cfg.leaky_slope
    B = L["x"].shape[0]
    masks = L["masks"]
    grad = np.zeros(tape.layout.size)

    def put(name, g):
        grad[tape.layout.slice(name)] = g.reshape(-1)

    gv = np.zeros((B, cfg.n_out, 3)) if grad_v is None else np.asarray(grad_v, dtype=float).copy()
    if grad_d is not None:
        gv = gv + np.asarray(grad_d, dtype=float)[:, None, :] * cfg.dt_out
    glv = np.zeros((B, 3)) if grad_log_var is None else np.asarray(grad_log_var, dtype=float)
    lo, hi = cfg.logvar_clamp
    glv = glv * ((L["lv_raw"] > lo) & (L["lv_raw"] < hi))

    # velocity head
    gvf = gv.reshape(B, -1)
    put("vel2.W", L["av1"].T @ gvf)
    put("vel2.b", gvf.sum(axis=0))
    gav1 = gvf @ params["vel2.W"].T
    gzv1 = gav1 * _leaky_grad(L["zv1"], s)
    put("vel1.W", L["h"].T @ gzv1)
    put("vel1.b", gzv1.sum(axis=0))
    gh = gzv1 @ params["vel1.W"].T

    # log-variance head
    put("lv2.W", L["al1"].T @ glv)
    put("lv2.b", glv.sum(axis=0))
    gal1 = glv @ params["lv2.W"].T
    gzl1 = gal1 * _leaky_grad(L["zl1"], s)
    put("lv1.W", L["h"].T @ gzl1)
    put("lv1.b", gzl1.sum(axis=0))
    gh = gh + gzl1 @ params["lv1.W"].T

    # trunk
    gy2 = gh * _leaky_grad(L["y2"], s)
    gz2, gg2, gb2 = _layer_norm_backward(gy2, L["xh2"], L["inv2"], params["ln2.g"])
    put("ln2.g", gg2)
    put("ln2.b", gb2)
    put("fc2.W", L["a1"].T @ gz2)
    put("fc2.b", gz2.sum(axis=0))
    ga1 = gz2 @ params["fc2.W"].T
    if "fc1" in masks:
        ga1 = ga1 * masks["fc1"]
    gy1 = ga1 * _leaky_grad(L["y1"], s)
    gz1, gg1, gb1 = _layer_norm_backward(gy1, L["xh1"], L["inv1"], params["ln1.g"])
    put("ln1.g", gg1)
    put("ln1.b", gb1)
    put("fc1.W", L["x"].T @ gz1)
    put("fc1.b", gz1.sum(axis=0))

    # only the conv-feature columns of the fused input carry parameter gradients
    n_conv = cfg.conv_channels * cfg.conv_len
    gx_conv = gz1 @ params["fc1.W"][: 2 * n_conv].T
    for k, branch in enumerate(("conv_f", "conv_w")):
        ga = gx_conv[:, k * n_conv:(k + 1) * n_conv].reshape(B, cfg.conv_channels, cfg.conv_len)
        if branch in masks:
            ga = ga * masks[branch]
        xr, z = L[branch]
        gz = ga * _leaky_grad(z, s)
        put(branch + ".W", np.einsum("bct,bitk->cik", gz, xr, optimize=True))
        put(branch + ".b", gz.sum(axis=(0, 2)))
    return grad


def forward(params: NetworkParameters, window: ImuWindow, cfg: NetworkConfig, train_mode: bool = False,
            rng: np.random.Generator | None = None):
    """Single-window forward pass returning (VelocityProfile, DisplacementPrediction, tape)."""
    if len(window.t) != cfg.T:
        raise ContractError(f"window length {len(window.t)} != T={cfg.T}")
    out = forward_batch(params, window.f.T[None], window.w.T[None], cfg, train_mode, rng)
    profile = VelocityProfile(out.v[0], cfg.dt_out)
    pred = DisplacementPrediction(out.d[0], out.log_var[0], window.start, window.end)
    return profile, pred, out.tape


def predict_batch(params: NetworkParameters, F, W, cfg: NetworkConfig, batch_size: int = 256):
    """Eval-mode displacement and log-variance for many windows."""
    ds, lvs = [], []
    for i in range(0, len(F), batch_size):
        out = forward_batch(params, F[i:i + batch_size], W[i:i + batch_size], cfg)
        ds.append(out.d)
        lvs.append(out.log_var)
    if not ds:
        return np.zeros((0, 3)), np.zeros((0, 3))
    return np.concatenate(ds), np.concatenate(lvs)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: NetworkParameters, cfg: NetworkConfig, extra: dict | None = None) -> None:
    """Write magic, version, a JSON header and the raw little-endian float64 vector."""
    header = {
        "config": cfg.to_dict(),
        "layout": {k: [off, list(shape)] for k, (off, shape) in params.layout.entries.items()},
        "size": params.layout.size,
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(hb)))
        fh.write(hb)
        fh.write(params.flat.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[NetworkParameters, NetworkConfig, dict]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ContractError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != CHECKPOINT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + hlen])
    cfg = NetworkConfig.from_dict(header["config"])
    layout = Layout({k: (off, tuple(shape)) for k, (off, shape) in header["layout"].items()}, header["size"])
    if layout != Layout.for_config(cfg):
        raise ContractError(f"{path}: layout does not match stored configuration")
    flat = np.frombuffer(data[16 + hlen:], dtype="<f8").astype(np.float64)
    return NetworkParameters(flat, layout), cfg, header.get("extra", {})
