"""Dual-conditional denoiser with adaLN-Zero modulation, and the first-stage
codec (identity passthrough or a small trained autoencoder)."""

from __future__ import annotations

import math

import numpy as np

from dualfusion import tensor as T
from dualfusion.tensor import Rng, ShapeError, Tensor


def timestep_embedding(t, dim):
    """Sinusoidal features of the step index, interleaved [sin, cos, sin, ...].

    Deterministic in (t, dim); t may be an int or an int array (N,).
    """
    if dim % 2 != 0:
        raise ValueError(f"embedding dim must be even, got {dim}")
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    exponents = np.arange(half) / max(half - 1, 1)
    freqs = np.exp(-math.log(10000.0) * exponents)
    angles = t_arr[:, None] * freqs[None, :]
    out = np.empty((t_arr.size, dim))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out if np.ndim(t) else out[0]


def _he(rng, shape, fan_in):
    return Tensor(rng.normal(shape) * np.sqrt(2.0 / fan_in), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


class AdaLNBlock:
    """Residual conv block gated by affine heads of the embedding.

    out = h + gate(e) * F(norm(h) * (1 + scale(e)) + shift(e)), with F two
    3x3 convs around a silu. The gate head starts at zero, so the block is
    the identity until training moves it.
    """

    def __init__(self, name, channels, embed_dim, rng):
        self.name = name
        self.channels = channels
        c, e = channels, embed_dim
        self.params = {
            f"{name}.conv1.w": _he(rng, (c, c, 3, 3), c * 9),
            f"{name}.conv1.b": _zeros(c),
            f"{name}.conv2.w": _he(rng, (c, c, 3, 3), c * 9),
            f"{name}.conv2.b": _zeros(c),
            f"{name}.scale.w": _zeros((e, c)),
            f"{name}.scale.b": _zeros(c),
            f"{name}.shift.w": _zeros((e, c)),
            f"{name}.shift.b": _zeros(c),
            f"{name}.gate.w": _zeros((e, c)),
            f"{name}.gate.b": _zeros(c),
        }

    def _head(self, e, kind):
        p = self.params
        return T.add_bias(T.matmul(e, p[f"{self.name}.{kind}.w"]), p[f"{self.name}.{kind}.b"])

    def forward(self, h, e):
        if h.data.shape[1] != self.channels:
            raise ShapeError(f"{self.name}: width {self.channels} vs input {h.data.shape}")
        p = self.params
        s = self._head(e, "scale")
        b = self._head(e, "shift")
        g = self._head(e, "gate")
        u = T.shift_channels(T.scale_channels(T.normalize_channels(h), T.add(s, 1.0)), b)
        u = T.conv2d_k3_same(u, p[f"{self.name}.conv1.w"], p[f"{self.name}.conv1.b"])
        u = T.silu(u)
        u = T.conv2d_k3_same(u, p[f"{self.name}.conv2.w"], p[f"{self.name}.conv2.b"])
        return T.add(h, T.scale_channels(u, g))


class Denoiser:
    """Noise predictor over concat(z_t, refined content), conditioned on the
    combined timestep + style embedding.

    Two-resolution U-Net: blocks at full latent resolution, a 2x downsampled
    stage, then an upsample with additive skip. The output projection is
    zero-initialized, so the untrained model predicts exactly zero.
    """

    def __init__(
        self,
        z_channels,
        refined_channels,
        style_dim,
        base_channels=64,
        channel_mult=(1, 2),
        blocks_per_res=2,
        embed_dim=128,
        rng=None,
    ):
        if len(channel_mult) != 2:
            raise ValueError(f"exactly two resolutions are supported, got {channel_mult}")
        if embed_dim % 2 != 0:
            raise ValueError("embed_dim must be even")
        rng = rng or Rng(0)
        self.z_channels = z_channels
        self.refined_channels = refined_channels
        self.style_dim = style_dim
        self.embed_dim = embed_dim
        self.eval_count = 0

        b1 = base_channels * channel_mult[0]
        b2 = base_channels * channel_mult[1]
        self.widths = (b1, b2)
        cin = z_channels + refined_channels
        e = embed_dim

        self.params = {
            "denoiser.style_mlp.w1": _he(rng, (style_dim, e), style_dim),
            "denoiser.style_mlp.b1": _zeros(e),
            "denoiser.style_mlp.w2": _he(rng, (e, e), e),
            "denoiser.style_mlp.b2": _zeros(e),
            "denoiser.stem.w": _he(rng, (b1, cin, 3, 3), cin * 9),
            "denoiser.stem.b": _zeros(b1),
        }
        self.enc = [AdaLNBlock(f"denoiser.enc{i}", b1, e, rng) for i in range(blocks_per_res)]
        self.params["denoiser.down.w"] = _he(rng, (b2, b1), b1)
        self.params["denoiser.down.b"] = _zeros(b2)
        self.mid = [AdaLNBlock(f"denoiser.mid{i}", b2, e, rng) for i in range(blocks_per_res)]
        self.params["denoiser.up.w"] = _he(rng, (b1, b2), b2)
        self.params["denoiser.up.b"] = _zeros(b1)
        self.dec = [AdaLNBlock(f"denoiser.dec{i}", b1, e, rng) for i in range(blocks_per_res)]
        self.params["denoiser.out.w"] = _zeros((z_channels, b1, 3, 3))
        self.params["denoiser.out.b"] = _zeros(z_channels)
        for block in self.enc + self.mid + self.dec:
            self.params.update(block.params)

    def style_embedding(self, f_rows, t):
        """e = sinusoid(t) + MLP(style features); f_rows is (N, style_dim)."""
        f_rows = T.as_tensor(f_rows)
        if f_rows.data.ndim != 2 or f_rows.data.shape[1] != self.style_dim:
            raise ShapeError(
                f"style features must be (N, {self.style_dim}), got {f_rows.data.shape}"
            )
        p = self.params
        h = T.add_bias(T.matmul(f_rows, p["denoiser.style_mlp.w1"]), p["denoiser.style_mlp.b1"])
        h = T.silu(h)
        h = T.add_bias(T.matmul(h, p["denoiser.style_mlp.w2"]), p["denoiser.style_mlp.b2"])
        e_t = timestep_embedding(np.broadcast_to(np.asarray(t), (f_rows.data.shape[0],)), self.embed_dim)
        return T.add(h, Tensor(e_t))

    def forward(self, z_t, z_r, f_rows, t):
        """Predict the noise in z_t; output matches z_t's shape."""
        z_t, z_r = T.as_tensor(z_t), T.as_tensor(z_r)
        if z_t.data.ndim != 4 or z_t.data.shape[1] != self.z_channels:
            raise ShapeError(f"z_t must be (N,{self.z_channels},H,W), got {z_t.data.shape}")
        if z_r.data.shape != (z_t.data.shape[0], self.refined_channels) + z_t.data.shape[2:]:
            raise ShapeError(
                f"refined content {z_r.data.shape} does not match z_t {z_t.data.shape}"
            )
        self.eval_count += 1
        p = self.params
        e = self.style_embedding(f_rows, t)

        x = T.concat_channels([z_t, z_r])
        h = T.conv2d_k3_same(x, p["denoiser.stem.w"], p["denoiser.stem.b"])
        for block in self.enc:
            h = block.forward(h, e)
        skip = h
        h = T.conv2d_k1(T.downsample2x(h), p["denoiser.down.w"], p["denoiser.down.b"])
        for block in self.mid:
            h = block.forward(h, e)
        h = T.conv2d_k1(T.upsample2x_nearest(h), p["denoiser.up.w"], p["denoiser.up.b"])
        h = T.add(h, skip)
        for block in self.dec:
            h = block.forward(h, e)
        return T.conv2d_k3_same(h, p["denoiser.out.w"], p["denoiser.out.b"])


class IdentityCodec:
    """First-stage passthrough: the latent is the image itself."""

    factor = 1

    def __init__(self, channels=3):
        self.z_channels = channels
        self.params = {}

    def encode(self, image):
        return T.as_tensor(image)

    def decode(self, z):
        return T.as_tensor(z)


class ConvCodec:
    """Small conv autoencoder with a power-of-two spatial reduction."""

    def __init__(self, z_channels=16, widths=(16, 32), factor=4, rng=None):
        stages = int(math.log2(factor))
        if 2 ** stages != factor or stages < 1:
            raise ValueError(f"factor must be a power of two >= 2, got {factor}")
        if len(widths) != stages:
            raise ValueError(f"need one width per stage: {stages} stages, widths {widths}")
        rng = rng or Rng(0)
        self.z_channels = z_channels
        self.widths = tuple(widths)
        self.factor = factor
        self.params = {}
        chain = [3] + list(widths)
        for i in range(stages):
            self.params[f"codec.enc{i}.w"] = _he(rng, (chain[i + 1], chain[i], 3, 3), chain[i] * 9)
            self.params[f"codec.enc{i}.b"] = _zeros(chain[i + 1])
        self.params["codec.enc_out.w"] = _he(rng, (z_channels, chain[-1], 3, 3), chain[-1] * 9)
        self.params["codec.enc_out.b"] = _zeros(z_channels)
        self.params["codec.dec_in.w"] = _he(rng, (chain[-1], z_channels, 3, 3), z_channels * 9)
        self.params["codec.dec_in.b"] = _zeros(chain[-1])
        for i in range(stages - 1, 0, -1):
            self.params[f"codec.dec{i}.w"] = _he(rng, (chain[i], chain[i + 1], 3, 3), chain[i + 1] * 9)
            self.params[f"codec.dec{i}.b"] = _zeros(chain[i])
        self.params["codec.dec_out.w"] = _he(rng, (3, chain[1], 3, 3), chain[1] * 9)
        self.params["codec.dec_out.b"] = _zeros(3)

    def encode(self, image):
        x = T.as_tensor(image)
        if x.data.ndim != 4 or x.data.shape[1] != 3:
            raise ShapeError(f"codec expects (N,3,H,W), got {x.data.shape}")
        if x.data.shape[2] % self.factor or x.data.shape[3] % self.factor:
            raise ShapeError(
                f"resolution {x.data.shape[2:]} not divisible by factor {self.factor}"
            )
        p = self.params
        h = x
        for i in range(len(self.widths)):
            h = T.conv2d_k3_same(h, p[f"codec.enc{i}.w"], p[f"codec.enc{i}.b"])
            h = T.silu(h)
            h = T.downsample2x(h)
        return T.conv2d_k3_same(h, p["codec.enc_out.w"], p["codec.enc_out.b"])

    def decode(self, z):
        z = T.as_tensor(z)
        if z.data.ndim != 4 or z.data.shape[1] != self.z_channels:
            raise ShapeError(f"codec latent must be (N,{self.z_channels},h,w), got {z.data.shape}")
        p = self.params
        h = T.conv2d_k3_same(z, p["codec.dec_in.w"], p["codec.dec_in.b"])
        h = T.silu(h)
        h = T.upsample2x_nearest(h)
        for i in range(len(self.widths) - 1, 0, -1):
            h = T.conv2d_k3_same(h, p[f"codec.dec{i}.w"], p[f"codec.dec{i}.b"])
            h = T.silu(h)
            h = T.upsample2x_nearest(h)
        return T.conv2d_k3_same(h, p["codec.dec_out.w"], p["codec.dec_out.b"])
