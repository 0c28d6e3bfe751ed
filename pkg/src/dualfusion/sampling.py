"""Inference: two-dimensional classifier-free guidance, the stylization
pipeline, style visualization, multi-style interpolation, and masked blends."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dualfusion import tensor as T
from dualfusion.diffusion import ddim_step, ddim_timesteps, ddpm_step
from dualfusion.tensor import Rng, ShapeError, Tensor, no_grad


@dataclass
class GuidanceScales:
    content: float
    style: float

    def __post_init__(self):
        if self.content <= 0 or self.style <= 0:
            raise ValueError(f"guidance scales must be > 0, got {self.content}, {self.style}")


@dataclass
class SamplerSpec:
    kind: str = "ddim"            # "ddim" or "ddpm"
    steps: int = 250
    seed: int = 0
    variance: str = "beta_tilde"  # ddpm only

    def __post_init__(self):
        if self.kind not in ("ddim", "ddpm"):
            raise ValueError(f"sampler kind must be ddim or ddpm, got {self.kind!r}")


def cfg2d(eps_dual, eps_style_only, eps_content_only, scales):
    """Two-dimensional guidance, collapsed to a single affine combination:

    (s_cnt + s_sty - 1) * dual - (s_cnt - 1) * style_only - (s_sty - 1) * content_only
    """
    d = T.as_tensor(eps_dual)
    s = T.as_tensor(eps_style_only)
    c = T.as_tensor(eps_content_only)
    if d.shape != s.shape or d.shape != c.shape:
        raise ShapeError(f"cfg2d shapes differ: {d.shape}, {s.shape}, {c.shape}")
    sc, ss = float(scales.content), float(scales.style)
    if sc == 1.0 and ss == 1.0:
        return d
    out = (sc + ss - 1.0) * d.data - (sc - 1.0) * s.data - (ss - 1.0) * c.data
    return Tensor(out)


class ConditionSet:
    """Frozen per-sample conditioning: refined content, style features, nulls."""

    def __init__(self, model, content_image=None, style_features=None):
        self.model = model
        cr, h, w = model.refiner.out_channels, model.config.latent_size(), model.config.latent_size()
        with no_grad():
            if content_image is not None:
                z_c = model.encode_images(content_image[None])
                self.z_r = model.refiner.forward(z_c)
            else:
                self.z_r = Tensor(np.zeros((1, cr, h, w)))
            if style_features is not None:
                self.f_rows = Tensor(np.asarray(style_features)[None])
            else:
                self.f_rows = Tensor(model.nulls.null_style.data[None])
        self.null_content = Tensor(np.zeros_like(self.z_r.data))
        self.null_style_rows = Tensor(model.nulls.null_style.data[None])

    def eps_dual(self, z_t, t):
        return self.model.denoiser.forward(z_t, self.z_r, self.f_rows, t)

    def eps_style_only(self, z_t, t):
        return self.model.denoiser.forward(z_t, self.null_content, self.f_rows, t)

    def eps_content_only(self, z_t, t):
        return self.model.denoiser.forward(z_t, self.z_r, self.null_style_rows, t)

    def eps_guided(self, z_t, t, scales):
        return cfg2d(
            self.eps_dual(z_t, t),
            self.eps_style_only(z_t, t),
            self.eps_content_only(z_t, t),
            scales,
        )


def sample_latent(model, eps_fn, spec):
    """Run the reverse chain from seeded Gaussian noise; returns z0 (1,C,H,W).

    eps_fn(z_t, t) supplies the (guided) noise estimate per step.
    """
    rng = Rng(spec.seed)
    shape = (1,) + model.latent_shape()
    z = Tensor(rng.normal(shape))
    sched = model.sched
    with no_grad():
        if spec.kind == "ddim":
            ts = ddim_timesteps(sched.timesteps, spec.steps)
            for t, t_next in zip(ts[:-1], ts[1:]):
                z = ddim_step(z, t, t_next, eps_fn(z, t), sched)
        else:
            start = sched.timesteps
            for t in range(start, 0, -1):
                z = ddpm_step(z, t, eps_fn(z, t), sched, rng, spec.variance)
    return z


def _decode_clipped(model, z0):
    img = model.decode_latents(z0).data[0]
    return np.clip(img, -1.0, 1.0)


def stylize(model, content_image, style_image, scales, spec):
    """Fig-2 style pipeline: three denoiser passes per step combined by 2D-CFG."""
    f_s = model.style_features(style_image)
    cond = ConditionSet(model, content_image=content_image, style_features=f_s)
    z0 = sample_latent(model, lambda z, t: cond.eps_guided(z, t, scales), spec)
    return _decode_clipped(model, z0)


def style_visualize(model, style_image, spec):
    """Sample from the style-only partial model (content held at null)."""
    f_s = model.style_features(style_image)
    cond = ConditionSet(model, content_image=None, style_features=f_s)
    z0 = sample_latent(model, cond.eps_style_only, spec)
    return _decode_clipped(model, z0)


def interpolate_styles(model, content_image, style_mix, scales, spec):
    """Combine per-style guided predictions with the mix weights each step.

    style_mix is a list of (style_image, weight); weights must be nonnegative
    and sum to one.
    """
    if len(style_mix) < 1:
        raise ValueError("style mix needs at least one entry")
    weights = np.array([w for _, w in style_mix], dtype=np.float64)
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError(f"mix weights must be >= 0 and sum to 1, got {weights}")
    conds = [
        ConditionSet(model, content_image=content_image, style_features=model.style_features(img))
        for img, _ in style_mix
    ]

    def eps_fn(z, t):
        acc = None
        for cond, w in zip(conds, weights):
            term = T.scale(cond.eps_guided(z, t, scales), float(w))
            acc = term if acc is None else T.add(acc, term)
        return acc

    z0 = sample_latent(model, eps_fn, spec)
    return _decode_clipped(model, z0)


def resize_mask_to_latent(mask, latent_size):
    """Average-pool an (H,W) mask in [0,1] down to the latent resolution."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2:
        raise ShapeError(f"mask must be 2-d, got shape {mask.shape}")
    if np.any(mask < 0) or np.any(mask > 1):
        raise ValueError("mask values must lie in [0, 1]")
    h, w = mask.shape
    if (h, w) == (latent_size, latent_size):
        return mask
    if h % latent_size or w % latent_size:
        raise ShapeError(f"mask {mask.shape} not divisible down to {latent_size}")
    fh, fw = h // latent_size, w // latent_size
    return mask.reshape(latent_size, fh, latent_size, fw).mean(axis=(1, 3))


def spatial_blend(model, content_image, style_a, style_b, mask, scales, spec):
    """Per-step blend of two guided predictions under a spatial mask.

    eps = mask * eps_a + (1 - mask) * eps_b, mask broadcast over channels.
    """
    latent = model.config.latent_size()
    m = resize_mask_to_latent(mask, latent)
    cond_a = ConditionSet(model, content_image=content_image,
                          style_features=model.style_features(style_a))
    cond_b = ConditionSet(model, content_image=content_image,
                          style_features=model.style_features(style_b))
    mb = m[None, None, :, :]

    def eps_fn(z, t):
        ea = cond_a.eps_guided(z, t, scales)
        eb = cond_b.eps_guided(z, t, scales)
        return Tensor(mb * ea.data + (1.0 - mb) * eb.data)

    z0 = sample_latent(model, eps_fn, spec)
    return _decode_clipped(model, z0)
