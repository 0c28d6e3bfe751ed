"""Flat key=value run configuration with typed fields and strict parsing."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
import typing


class ConfigError(ValueError):
    """Bad configuration text or invariant violation."""


@dataclass
class RunConfig:
    """Every tunable of corpus, model, training, and sampling.

    Unknown keys in a config file are hard errors. Tuples are written as
    comma lists, booleans as true/false.
    """

    # toy corpus
    image_size: int = 32
    corpus_count: int = 512
    corpus_styles: int = 32
    corpus_families: tuple = ("stripes", "checker", "blobs")
    corpus_seed: int = 7

    # frozen style feature extractor
    extractor_channels: tuple = (8, 16, 32, 64, 128)
    extractor_kernel: int = 3
    extractor_seed: int = 101

    # first-stage codec ("identity" or "conv")
    codec: str = "identity"
    codec_latent_channels: int = 16
    codec_widths: tuple = (16, 32)
    codec_factor: int = 4
    codec_train_steps: int = 1500
    codec_batch_size: int = 16
    codec_lr: float = 1e-3
    codec_seed: int = 11

    # content refiner; 0 selects three quarters of the latent depth
    refined_channels: int = 0
    refiner_allow_equal: bool = False

    # denoiser
    base_channels: int = 64
    channel_mult: tuple = (1, 2)
    blocks_per_res: int = 2
    embed_dim: int = 128
    use_attention: bool = False
    init_seed: int = 42

    # diffusion schedule
    timesteps: int = 1000
    schedule: str = "linear"
    beta_start: float = 1e-4
    beta_end: float = 0.02
    variance: str = "beta_tilde"

    # training
    learning_rate: float = 1e-4
    batch_size: int = 16
    iterations: int = 2000
    p_content_only: float = 0.1
    p_style_only: float = 0.5
    ema_decay: float = 0.9999
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    train_seed: int = 1234
    checkpoint_every: int = 1000
    dual_corpus: bool = False

    # sampling defaults
    sample_steps: int = 250
    sampler: str = "ddim"
    scale_content: float = 0.6
    scale_style: float = 3.0
    grid_content_scales: tuple = (0.15, 0.25, 0.5, 1.0, 2.0, 3.0, 4.0)
    grid_style_scales: tuple = (0.15, 0.25, 0.5, 1.0, 3.0, 5.0, 7.0)

    def latent_channels(self):
        return 3 if self.codec == "identity" else self.codec_latent_channels

    def latent_size(self):
        return self.image_size if self.codec == "identity" else self.image_size // self.codec_factor

    def refiner_channels(self):
        if self.refined_channels > 0:
            return self.refined_channels
        return max(1, (3 * self.latent_channels()) // 4)

    def validate(self):
        cz = self.latent_channels()
        cr = self.refiner_channels()
        checks = [
            (self.image_size >= 8 and self.image_size % 4 == 0, "image_size must be >= 8 and divisible by 4"),
            (self.corpus_count > 0, "corpus_count must be positive"),
            (len(self.corpus_families) > 0, "corpus_families must not be empty"),
            (all(f in ("stripes", "checker", "blobs", "plain") for f in self.corpus_families),
             f"unknown corpus family in {self.corpus_families}"),
            (self.extractor_kernel in (1, 3), "extractor_kernel must be 1 or 3"),
            (len(self.extractor_channels) >= 1, "extractor_channels must not be empty"),
            (self.codec in ("identity", "conv"), f"codec must be identity or conv, got {self.codec!r}"),
            (self.codec_factor in (2, 4), "codec_factor must be 2 or 4"),
            (self.codec == "identity" or self.image_size % self.codec_factor == 0,
             "image_size must be divisible by codec_factor"),
            (cr <= cz, f"refined channels {cr} exceed latent channels {cz}"),
            (cr < cz or self.refiner_allow_equal,
             f"refined channels must compress the latent ({cr} vs {cz}); "
             "set refiner_allow_equal=true only for the no-compression arm"),
            (not self.use_attention, "attention blocks are not available at this scale"),
            (self.schedule == "linear", f"only the linear schedule exists, got {self.schedule!r}"),
            (0.0 < self.beta_start <= self.beta_end < 1.0, "need 0 < beta_start <= beta_end < 1"),
            (self.timesteps >= 1, "timesteps must be >= 1"),
            (self.variance in ("beta", "beta_tilde"), "variance must be beta or beta_tilde"),
            (self.learning_rate > 0, "learning_rate must be > 0"),
            (self.batch_size > 0, "batch_size must be positive"),
            (self.p_content_only >= 0 and self.p_style_only >= 0
             and self.p_content_only + self.p_style_only <= 1.0,
             "need p_content_only + p_style_only <= 1"),
            (0.0 < self.ema_decay < 1.0, "ema_decay must lie in (0, 1)"),
            (self.sampler in ("ddpm", "ddim"), "sampler must be ddpm or ddim"),
            (1 <= self.sample_steps <= self.timesteps, "sample_steps must lie in 1..timesteps"),
            (self.scale_content > 0 and self.scale_style > 0, "guidance scales must be > 0"),
            (self.embed_dim % 2 == 0, "embed_dim must be even"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self


def _field_types():
    return {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _parse_value(key, ftype, raw, lineno):
    raw = raw.strip()
    try:
        if ftype is int or ftype == "int":
            return int(raw)
        if ftype is float or ftype == "float":
            return float(raw)
        if ftype is bool or ftype == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if ftype is tuple or ftype == "tuple":
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            if not parts:
                return ()
            try:
                return tuple(int(p) for p in parts)
            except ValueError:
                try:
                    return tuple(float(p) for p in parts)
                except ValueError:
                    return tuple(parts)
        return raw
    except ValueError:
        raise ConfigError(f"line {lineno}: malformed value for {key}: {raw!r}") from None


def parse_config(text):
    """Parse key=value lines ('#' starts a comment) into a validated RunConfig."""
    types = _field_types()
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {stripped!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, types[key], raw, lineno)
    return RunConfig(**values).validate()


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def _fmt(value):
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_text(cfg):
    """Canonical flat text; parse_config(config_text(c)) == c."""
    lines = [f"{f.name}={_fmt(getattr(cfg, f.name))}" for f in dataclasses.fields(RunConfig)]
    return "\n".join(lines) + "\n"
