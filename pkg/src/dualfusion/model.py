"""Assembly of the full model from a RunConfig, and parameter bookkeeping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dualfusion import tensor as T
from dualfusion.conditioning import ContentRefiner, NullConditions, StyleExtractor
from dualfusion.config import RunConfig
from dualfusion.diffusion import Schedule, linear_schedule
from dualfusion.networks import ConvCodec, Denoiser, IdentityCodec
from dualfusion.tensor import Rng, Tensor, no_grad


@dataclass
class DualModel:
    config: RunConfig
    denoiser: Denoiser
    refiner: ContentRefiner
    nulls: NullConditions
    codec: object
    extractor: StyleExtractor
    sched: Schedule

    def trainable_params(self):
        """Denoiser, refiner, and null style; the codec and extractor stay frozen."""
        params = {}
        params.update(self.denoiser.params)
        params.update(self.refiner.params)
        params["cond.null_style"] = self.nulls.null_style
        return params

    def all_params(self):
        params = self.trainable_params()
        params.update(self.codec.params)
        return params

    def encode_images(self, images):
        """Frozen encode of (N,3,H,W) pixels in [-1,1] to latents."""
        with no_grad():
            return self.codec.encode(T.as_tensor(images))

    def decode_latents(self, z):
        with no_grad():
            return self.codec.decode(T.as_tensor(z))

    def style_features(self, images):
        return self.extractor.extract(T.as_tensor(images))

    def latent_shape(self):
        c = self.config.latent_channels()
        s = self.config.latent_size()
        return (c, s, s)


def build_model(config, sched=None):
    config.validate()
    extractor = StyleExtractor(
        channels=config.extractor_channels,
        kernel=config.extractor_kernel,
        seed=config.extractor_seed,
    )
    if config.codec == "identity":
        codec = IdentityCodec(channels=3)
    else:
        codec = ConvCodec(
            z_channels=config.codec_latent_channels,
            widths=config.codec_widths,
            factor=config.codec_factor,
            rng=Rng(config.codec_seed),
        )
    init_rng = Rng(config.init_seed)
    cz = config.latent_channels()
    cr = config.refiner_channels()
    refiner = ContentRefiner(cz, cr, init_rng, allow_equal=config.refiner_allow_equal)
    denoiser = Denoiser(
        z_channels=cz,
        refined_channels=cr,
        style_dim=extractor.feature_length(),
        base_channels=config.base_channels,
        channel_mult=config.channel_mult,
        blocks_per_res=config.blocks_per_res,
        embed_dim=config.embed_dim,
        rng=init_rng,
    )
    nulls = NullConditions.build(extractor.feature_length(), cr, init_rng)
    sched = sched or linear_schedule(config.timesteps, config.beta_start, config.beta_end)
    return DualModel(
        config=config,
        denoiser=denoiser,
        refiner=refiner,
        nulls=nulls,
        codec=codec,
        extractor=extractor,
        sched=sched,
    )
