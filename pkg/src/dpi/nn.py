"""Small convolutional encoder-decoder with hand-derived gradients.

Everything here is plain numpy: forward passes return an explicit cache,
and backward passes consume it to produce exact parameter gradients, which
the test suite verifies against central finite differences.  The same
backbone serves both the condition corrector (with a luminance condition
pathway) and the tiny noise-prediction denoiser (without it).

Shapes are channels-last: activations are (B, H, W, C) and 3x3 kernels are
(3, 3, Cin, Cout).  Convolutions use zero padding and stride 1 or 2; the
3x3 kernel is fixed, which lets both directions run as nine shifted
matmuls instead of an im2col buffer.

Architecture (two 2x downsamplings, skips, per-level time injection):

    stem -> enc0 -> down0 -> enc1 -> down1 -> mid0 -> mid1
         -> up1 + skip(enc1) -> dec1 -> up0 + skip(enc0) -> dec0 -> head

A 64-dim sinusoidal timestep embedding passes through a two-layer MLP and
is added per level as a channel bias.  The output head is zero-initialized
so a fresh network is the identity in residual setups.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ParameterError
from .rng import RandomStream

Params = dict


# ---------------------------------------------------------------------------
# primitives

def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu_forward(x):
    s = sigmoid(x)
    return x * s, (x, s)


def silu_backward(dy, cache):
    x, s = cache
    return dy * (s * (1.0 + x * (1.0 - s)))


def conv3x3_forward(x, W, b, stride=1):
    B, H, Wd, Cin = x.shape
    if H % stride or Wd % stride:
        raise ParameterError(f"stride {stride} must divide feature size ({H}, {Wd})")
    Ho, Wo = H // stride, Wd // stride
    Cout = W.shape[-1]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.broadcast_to(b, (B, Ho, Wo, Cout)).copy()
    for di in range(3):
        for dj in range(3):
            patch = xp[:, di:di + stride * Ho:stride, dj:dj + stride * Wo:stride, :]
            out += (patch.reshape(-1, Cin) @ W[di, dj]).reshape(B, Ho, Wo, Cout)
    return out, (xp, x.shape, stride)


def conv3x3_backward(dy, W, cache):
    xp, x_shape, stride = cache
    B, H, Wd, Cin = x_shape
    Ho, Wo, Cout = dy.shape[1], dy.shape[2], dy.shape[3]
    dy_flat = dy.reshape(-1, Cout)
    dW = np.zeros_like(W)
    db = dy_flat.sum(axis=0)
    dxp = np.zeros_like(xp)
    for di in range(3):
        for dj in range(3):
            rows = slice(di, di + stride * Ho, stride)
            cols = slice(dj, dj + stride * Wo, stride)
            patch = xp[:, rows, cols, :].reshape(-1, Cin)
            dW[di, dj] = patch.T @ dy_flat
            dxp[:, rows, cols, :] += (dy_flat @ W[di, dj].T).reshape(B, Ho, Wo, Cin)
    dx = dxp[:, 1:-1, 1:-1, :]
    return dx, dW, db


def linear_forward(x, W, b):
    return x @ W + b, x


def linear_backward(dy, W, cache):
    x = cache
    return dy @ W.T, x.T @ dy, dy.sum(axis=0)


def upsample2_forward(x):
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def upsample2_backward(dy):
    B, H2, W2, C = dy.shape
    return dy.reshape(B, H2 // 2, 2, W2 // 2, 2, C).sum(axis=(2, 4))


def sinusoidal_embedding(t, dim):
    """Standard sin/cos position features of integer timesteps, shape (B, dim)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / (half - 1))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


# ---------------------------------------------------------------------------
# backbone

@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 1
    out_channels: int = 1
    base_width: int = 32
    channel_mults: tuple = (1, 2, 4)
    time_dim: int = 64
    time_hidden: int = 128
    cond_pathway: bool = False
    dtype: str = "float64"

    @property
    def widths(self) -> tuple:
        if len(self.channel_mults) != 3:
            raise ParameterError("channel_mults must list three levels")
        return tuple(self.base_width * m for m in self.channel_mults)


class UNet:
    """Parameter container plus pure forward/backward functions."""

    def __init__(self, cfg: UNetConfig):
        self.cfg = cfg
        w0, w1, w2 = cfg.widths
        self._convs = {
            "stem": (cfg.in_channels, w0, 1),
            "enc0": (w0, w0, 1),
            "down0": (w0, w1, 2),
            "enc1": (w1, w1, 1),
            "down1": (w1, w2, 2),
            "mid0": (w2, w2, 1),
            "mid1": (w2, w2, 1),
            "up1": (w2, w1, 1),
            "dec1": (2 * w1, w1, 1),
            "up0": (w1, w0, 1),
            "dec0": (2 * w0, w0, 1),
            "head": (w0, cfg.out_channels, 1),
        }
        self._tprojs = {"t_enc0": w0, "t_enc1": w1, "t_mid": w2,
                        "t_dec1": w1, "t_dec0": w0}

    # -- parameters ---------------------------------------------------------

    def init_params(self, rng: RandomStream) -> Params:
        dt = np.dtype(self.cfg.dtype)
        params: Params = {}
        for name, (cin, cout, _) in self._convs.items():
            if name == "head":
                W = np.zeros((3, 3, cin, cout))
            else:
                W = rng.child("init", name).normal((3, 3, cin, cout)) * np.sqrt(2.0 / (9 * cin))
            params[f"{name}.W"] = W.astype(dt)
            params[f"{name}.b"] = np.zeros(cout, dtype=dt)
        td, th = self.cfg.time_dim, self.cfg.time_hidden
        for name, (fin, fout) in {"tm1": (td, th), "tm2": (th, th)}.items():
            W = rng.child("init", name).normal((fin, fout)) * np.sqrt(1.0 / fin)
            params[f"{name}.W"] = W.astype(dt)
            params[f"{name}.b"] = np.zeros(fout, dtype=dt)
        for name, cout in self._tprojs.items():
            W = rng.child("init", name).normal((th, cout)) * np.sqrt(1.0 / th)
            params[f"{name}.W"] = W.astype(dt)
            params[f"{name}.b"] = np.zeros(cout, dtype=dt)
        return params

    def param_count(self, params: Params) -> int:
        return int(sum(p.size for p in params.values()))

    # -- forward ------------------------------------------------------------

    def forward(self, params: Params, x: np.ndarray, t, cond_lum: np.ndarray | None = None):
        """Returns (output, cache).  cond_lum is (B, H, W) when the condition
        pathway is enabled; it is broadcast-added to the stem feature map."""
        cfg = self.cfg
        dt = np.dtype(cfg.dtype)
        x = np.asarray(x, dtype=dt)
        if x.ndim != 4 or x.shape[3] != cfg.in_channels:
            raise ParameterError(f"expected (B, H, W, {cfg.in_channels}) input, got {x.shape}")
        if (cond_lum is not None) != cfg.cond_pathway:
            raise ParameterError("condition input must match the configured pathway")

        cache: dict = {}
        emb = sinusoidal_embedding(t, cfg.time_dim).astype(dt)
        if emb.shape[0] != x.shape[0]:
            raise ParameterError(f"timestep batch {emb.shape[0]} != input batch {x.shape[0]}")
        h1, cache["tm1.lin"] = linear_forward(emb, params["tm1.W"], params["tm1.b"])
        h1s, cache["tm1.act"] = silu_forward(h1)
        temb, cache["tm2.lin"] = linear_forward(h1s, params["tm2.W"], params["tm2.b"])

        def conv(name, h, stride=1):
            out, c = conv3x3_forward(h, params[f"{name}.W"], params[f"{name}.b"], stride)
            cache[name] = c
            return out

        def inject(name, h):
            proj, cache[f"{name}.lin"] = linear_forward(temb, params[f"{name}.W"], params[f"{name}.b"])
            return h + proj[:, None, None, :]

        def act(name, h):
            out, cache[f"{name}.act"] = silu_forward(h)
            return out

        h = conv("stem", x)
        if cond_lum is not None:
            cond_lum = np.asarray(cond_lum, dtype=dt)
            if cond_lum.shape != x.shape[:3]:
                raise ParameterError(f"condition shape {cond_lum.shape} != {x.shape[:3]}")
            h = h + cond_lum[:, :, :, None]
        h = act("stem", h)
        h = act("enc0", inject("t_enc0", conv("enc0", h)))
        skip0 = h
        h = act("down0", conv("down0", h, stride=2))
        h = act("enc1", inject("t_enc1", conv("enc1", h)))
        skip1 = h
        h = act("down1", conv("down1", h, stride=2))
        h = act("mid0", inject("t_mid", conv("mid0", h)))
        h = act("mid1", conv("mid1", h))
        h = act("up1", conv("up1", upsample2_forward(h)))
        h = act("dec1", inject("t_dec1", conv("dec1", np.concatenate([h, skip1], axis=3))))
        h = act("up0", conv("up0", upsample2_forward(h)))
        h = act("dec0", inject("t_dec0", conv("dec0", np.concatenate([h, skip0], axis=3))))
        out = conv("head", h)
        return out, cache

    # -- backward -----------------------------------------------------------

    def backward(self, params: Params, cache: dict, dout: np.ndarray) -> Params:
        """Exact gradients of a scalar loss wrt every parameter, given
        d(loss)/d(output).  Inputs receive no gradient (they are data)."""
        cfg = self.cfg
        w0, w1 = cfg.widths[0], cfg.widths[1]
        grads: Params = {}
        dtemb = None

        def conv_b(name, dy):
            dx, dW, db = conv3x3_backward(dy, params[f"{name}.W"], cache[name])
            grads[f"{name}.W"] = dW
            grads[f"{name}.b"] = db
            return dx

        def inject_b(name, dy):
            nonlocal dtemb
            dproj = dy.sum(axis=(1, 2))
            dt_in, dW, db = linear_backward(dproj, params[f"{name}.W"], cache[f"{name}.lin"])
            grads[f"{name}.W"] = dW
            grads[f"{name}.b"] = db
            dtemb = dt_in if dtemb is None else dtemb + dt_in
            return dy

        def act_b(name, dy):
            return silu_backward(dy, cache[f"{name}.act"])

        dh = conv_b("head", np.asarray(dout, dtype=np.dtype(cfg.dtype)))
        dh = conv_b("dec0", inject_b("t_dec0", act_b("dec0", dh)))
        dh, dskip0 = dh[..., :w0], dh[..., w0:]
        dh = upsample2_backward(conv_b("up0", act_b("up0", dh)))
        dh = conv_b("dec1", inject_b("t_dec1", act_b("dec1", dh)))
        dh, dskip1 = dh[..., :w1], dh[..., w1:]
        dh = upsample2_backward(conv_b("up1", act_b("up1", dh)))
        dh = conv_b("mid1", act_b("mid1", dh))
        dh = conv_b("mid0", inject_b("t_mid", act_b("mid0", dh)))
        dh = conv_b("down1", act_b("down1", dh))
        dh = dh + dskip1
        dh = conv_b("enc1", inject_b("t_enc1", act_b("enc1", dh)))
        dh = conv_b("down0", act_b("down0", dh))
        dh = dh + dskip0
        dh = conv_b("enc0", inject_b("t_enc0", act_b("enc0", dh)))
        conv_b("stem", act_b("stem", dh))

        dh1s, dW2, db2 = linear_backward(dtemb, params["tm2.W"], cache["tm2.lin"])
        grads["tm2.W"], grads["tm2.b"] = dW2, db2
        dh1 = silu_backward(dh1s, cache["tm1.act"])
        _, dW1, db1 = linear_backward(dh1, params["tm1.W"], cache["tm1.lin"])
        grads["tm1.W"], grads["tm1.b"] = dW1, db1
        return grads


# ---------------------------------------------------------------------------
# optimization

class Adam:
    """Adaptive-moment optimizer with bias correction."""

    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: Params = {}
        self.v: Params = {}

    def step(self, params: Params, grads: Params) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** self.t
        corr2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient in {name}")
            if name not in self.m:
                self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / corr1
            v_hat = self.v[name] / corr2
            params[name] = params[name] - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class EmaTracker:
    """Exponential moving average of a parameter trajectory.

    shadow_0 = params_0; shadow_n = decay * shadow_{n-1} + (1 - decay) * params_n.
    """

    def __init__(self, params: Params, decay: float):
        if not 0.0 < decay < 1.0:
            raise ParameterError(f"EMA decay must be in (0, 1), got {decay}")
        self.decay = decay
        self.shadow: Params = {k: v.copy() for k, v in params.items()}

    def update(self, params: Params) -> None:
        d = self.decay
        for k, v in params.items():
            self.shadow[k] = d * self.shadow[k] + (1.0 - d) * v


# ---------------------------------------------------------------------------
# gradient checking support

def sample_param_positions(params: Params, n: int, rng: RandomStream) -> list:
    """n (tensor name, flat index) pairs covering every tensor at least once."""
    names = sorted(params)
    positions = []
    for name in names:
        positions.append((name, int(rng.child("pos", name).integers(0, params[name].size - 1))))
    extra = rng.child("extra")
    while len(positions) < n:
        name = names[int(extra.integers(0, len(names) - 1))]
        positions.append((name, int(extra.integers(0, params[name].size - 1))))
    return positions[:n]


def finite_difference_grad(loss_fn, params: Params, positions: list, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of loss_fn(params) at the given positions."""
    out = np.zeros(len(positions))
    for i, (name, idx) in enumerate(positions):
        flat = params[name].reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + h
        up = loss_fn(params)
        flat[idx] = orig - h
        dn = loss_fn(params)
        flat[idx] = orig
        out[i] = (up - dn) / (2.0 * h)
    return out
