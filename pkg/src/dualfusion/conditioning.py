"""Style-statistics extraction, the content refiner, null conditions, and
condition dropout for classifier-free training."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dualfusion import tensor as T
from dualfusion.tensor import Rng, ShapeError, Tensor, no_grad


class StyleExtractor:
    """Frozen multi-scale conv pyramid; emits per-channel means and variances.

    Weights are fixed at build time from the seed and never trained. Each
    level applies a same-size conv and silu, records its statistics, then
    halves the resolution for the next level. The feature vector is
    [means_1, vars_1, means_2, vars_2, ...] and has length 2 * sum(channels).
    """

    def __init__(self, in_channels=3, channels=(8, 16, 32, 64, 128), kernel=3, seed=101):
        if kernel not in (1, 3):
            raise ValueError(f"extractor kernel must be 1 or 3, got {kernel}")
        self.in_channels = in_channels
        self.channels = tuple(channels)
        self.kernel = kernel
        self.seed = seed
        rng = Rng(seed)
        self.weights = []
        prev = in_channels
        for c in self.channels:
            fan_in = prev * kernel * kernel
            std = np.sqrt(2.0 / fan_in)
            shape = (c, prev) if kernel == 1 else (c, prev, 3, 3)
            self.weights.append(Tensor(rng.normal(shape) * std))
            prev = c

    def feature_length(self):
        return 2 * sum(self.channels)

    def extract(self, image):
        """image: Tensor or array (C,H,W) or (N,C,H,W) in [-1,1] -> features
        (feature_length,) or (N, feature_length)."""
        x = T.as_tensor(image)
        single = x.data.ndim == 3
        if single:
            x = Tensor(x.data[None])
        if x.data.ndim != 4 or x.data.shape[1] != self.in_channels:
            raise ShapeError(
                f"extractor expects {self.in_channels}-channel images, got {x.data.shape}"
            )
        stats = []
        with no_grad():
            h = x
            for i, w in enumerate(self.weights):
                h = T.conv2d_k1(h, w) if self.kernel == 1 else T.conv2d_k3_same(h, w)
                h = T.silu(h)
                stats.append(T.channel_mean(h).data)
                stats.append(T.channel_var(h).data)
                if i < len(self.weights) - 1:
                    if h.data.shape[-1] < 2 or h.data.shape[-2] < 2:
                        raise ShapeError(f"image too small for pyramid level {i + 1}")
                    h = T.downsample2x(h)
        out = np.concatenate(stats, axis=1)
        return out[0] if single else out


def style_stat_distance(features_a, features_b):
    """Squared L2 over concatenated level means and variances."""
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"style features differ in shape: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.dot(d, d))


class ContentRefiner:
    """Two pointwise convolutions with silu between; compresses latent depth."""

    def __init__(self, in_channels, out_channels, rng, allow_equal=False):
        if out_channels > in_channels or (out_channels == in_channels and not allow_equal):
            raise ValueError(
                f"refiner must not widen the latent: {in_channels} -> {out_channels}"
            )
        self.in_channels = in_channels
        self.out_channels = out_channels
        std1 = np.sqrt(2.0 / in_channels)
        self.params = {
            "refiner.conv1.w": Tensor(rng.normal((in_channels, in_channels)) * std1, requires_grad=True),
            "refiner.conv1.b": Tensor(np.zeros(in_channels), requires_grad=True),
            "refiner.conv2.w": Tensor(rng.normal((out_channels, in_channels)) * std1, requires_grad=True),
            "refiner.conv2.b": Tensor(np.zeros(out_channels), requires_grad=True),
        }

    def forward(self, z_c):
        z_c = T.as_tensor(z_c)
        if z_c.data.ndim != 4 or z_c.data.shape[1] != self.in_channels:
            raise ShapeError(
                f"refiner expects {self.in_channels}-channel latents, got {z_c.data.shape}"
            )
        p = self.params
        h = T.conv2d_k1(z_c, p["refiner.conv1.w"], p["refiner.conv1.b"])
        h = T.silu(h)
        return T.conv2d_k1(h, p["refiner.conv2.w"], p["refiner.conv2.b"])


@dataclass
class NullConditions:
    """Learnable null style vector; null content is a zero latent."""

    null_style: Tensor
    refined_channels: int

    @classmethod
    def build(cls, feature_length, refined_channels, rng):
        vec = Tensor(rng.normal(feature_length) * 0.01, requires_grad=True)
        return cls(null_style=vec, refined_channels=refined_channels)

    def null_content(self, height, width, batch=None):
        shape = (self.refined_channels, height, width)
        if batch is not None:
            shape = (batch,) + shape
        return Tensor(np.zeros(shape))


CONTENT_ONLY = "content_only"
STYLE_ONLY = "style_only"
DUAL = "dual"


def draw_condition_mode(rng, p_content_only, p_style_only):
    """One uniform draw partitions [0,1) into content-only / style-only / dual."""
    if p_content_only < 0 or p_style_only < 0 or p_content_only + p_style_only > 1.0:
        raise ValueError(
            f"need p_content_only + p_style_only <= 1, got {p_content_only}, {p_style_only}"
        )
    u = rng.uniform()
    if u < p_content_only:
        return CONTENT_ONLY
    if u < p_content_only + p_style_only:
        return STYLE_ONLY
    return DUAL


def apply_condition_dropout(rng, p_content_only, p_style_only, f_s, z_r, nulls):
    """Replace one condition with its null according to the drawn mode."""
    mode = draw_condition_mode(rng, p_content_only, p_style_only)
    if mode == CONTENT_ONLY:
        return nulls.null_style, z_r, mode
    if mode == STYLE_ONLY:
        z = T.as_tensor(z_r)
        if z.data.ndim == 4:
            null_c = nulls.null_content(z.data.shape[2], z.data.shape[3], batch=z.data.shape[0])
        else:
            null_c = nulls.null_content(z.data.shape[1], z.data.shape[2])
        return f_s, null_c, mode
    return f_s, z_r, mode
