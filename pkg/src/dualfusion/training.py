"""Self-reconstruction training: each image provides its own content and
style conditions. Includes the optimizer, EMA shadow, and run orchestration."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from dualfusion import tensor as T
from dualfusion.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from dualfusion.conditioning import CONTENT_ONLY, DUAL, STYLE_ONLY, draw_condition_mode
from dualfusion.config import parse_config
from dualfusion.data import ToyCorpusSpec, corpus_arrays
from dualfusion.diffusion import q_sample, simple_loss
from dualfusion.model import build_model
from dualfusion.networks import ConvCodec
from dualfusion.tensor import NumericError, Rng, Tensor


class TrainingDiverged(ArithmeticError):
    """Loss went non-finite; carries the diagnostics of the failing step."""

    def __init__(self, iteration, timesteps, modes):
        self.iteration = iteration
        self.timesteps = timesteps
        self.modes = modes
        super().__init__(
            f"non-finite loss at iteration {iteration}; t={list(timesteps)}, modes={list(modes)}"
        )


class AdamW:
    """Decoupled weight decay Adam over a named parameter dict."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name in sorted(self.params):
            p = self.params[name]
            if p.grad is None:
                raise ValueError(f"missing gradient for trainable tensor {name!r}")
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p.data = p.data - self.lr * (
                m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.data
            )


class Ema:
    """Shadow copy of trainable tensors: shadow <- d*shadow + (1-d)*live."""

    def __init__(self, params, decay):
        if not (0.0 < decay < 1.0) and decay != 0.0:
            raise ValueError(f"ema decay must lie in [0, 1), got {decay}")
        self.decay = decay
        self.shadow = {k: p.data.copy() for k, p in params.items()}

    def update(self, params):
        d = self.decay
        for name, p in params.items():
            if self.shadow[name].shape != p.data.shape:
                raise ValueError(f"ema shape drift for {name!r}")
            self.shadow[name] = d * self.shadow[name] + (1.0 - d) * p.data


@dataclass
class TrainState:
    model: object
    opt: AdamW
    ema: Ema
    rng: Rng
    iteration: int = 0


def init_train_state(model):
    cfg = model.config
    params = model.trainable_params()
    opt = AdamW(
        params,
        lr=cfg.learning_rate,
        betas=(cfg.adam_beta1, cfg.adam_beta2),
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
    )
    ema = Ema(params, cfg.ema_decay)
    return TrainState(model=model, opt=opt, ema=ema, rng=Rng(cfg.train_seed))


def train_step(state, batch, modes=None):
    """One optimizer update on a (N,3,H,W) pixel batch in [-1,1].

    RNG consumption order per step: condition modes (N draws, unless the
    caller drew them to pick mode-specific sources), timesteps (N draws),
    then the noise block. Returns (loss, mode counts, timesteps).
    """
    model, cfg = state.model, state.model.config
    n = batch.shape[0]
    if n == 0:
        raise ValueError("empty batch")

    z0 = model.encode_images(batch)              # frozen
    f_all = model.style_features(batch)          # frozen, (N, F)

    if modes is None:
        modes = [
            draw_condition_mode(state.rng, cfg.p_content_only, cfg.p_style_only)
            for _ in range(n)
        ]
    t = state.rng.integers(1, cfg.timesteps + 1, (n,))
    eps = state.rng.normal(z0.data.shape)
    z_t = q_sample(Tensor(z0.data), t, Tensor(eps), model.sched)

    style_null_mask = np.array([m == CONTENT_ONLY for m in modes], dtype=np.float64)
    content_keep_mask = np.array([m != STYLE_ONLY for m in modes], dtype=np.float64)

    z_r = model.refiner.forward(z0)
    z_r_cond = T.mul(
        z_r, Tensor(np.broadcast_to(content_keep_mask[:, None, None, None], z_r.data.shape).copy())
    )
    f_dim = f_all.shape[1]
    null_rows = T.tile_rows(model.nulls.null_style, n)
    mask_rows = np.broadcast_to(style_null_mask[:, None], (n, f_dim)).copy()
    f_rows = T.add(
        T.mul(null_rows, Tensor(mask_rows)),
        Tensor(f_all * (1.0 - mask_rows)),
    )

    try:
        eps_hat = model.denoiser.forward(z_t, z_r_cond, f_rows, t)
        loss = simple_loss(Tensor(eps), eps_hat)
    except NumericError as exc:
        raise TrainingDiverged(state.iteration, t, modes) from exc
    if not np.isfinite(loss.data):
        raise TrainingDiverged(state.iteration, t, modes)

    state.opt.zero_grad()
    loss.backward()
    state.opt.step()
    state.ema.update(state.opt.params)
    state.iteration += 1
    counts = {
        CONTENT_ONLY: sum(m == CONTENT_ONLY for m in modes),
        STYLE_ONLY: sum(m == STYLE_ONLY for m in modes),
        DUAL: sum(m == DUAL for m in modes),
    }
    return float(loss.data), counts, t


def state_checkpoint(state, include_codec=True):
    """Checkpoint referencing the live arrays (saving snaps them to f32)."""
    from dualfusion.config import config_text

    model = state.model
    ckpt = Checkpoint(config_text=config_text(model.config), iteration=state.iteration)
    for name, p in model.trainable_params().items():
        ckpt.add(name, p.data)
    if include_codec:
        for name, p in model.codec.params.items():
            ckpt.add(name, p.data)
    for name in sorted(state.opt.params):
        ckpt.add(f"opt.m.{name}", state.opt.m[name])
        ckpt.add(f"opt.v.{name}", state.opt.v[name])
    ckpt.add("opt.step", np.array(float(state.opt.step_count)))
    ckpt.add("opt.weight_decay", np.array(state.opt.weight_decay))
    for name, arr in state.ema.shadow.items():
        ckpt.add(f"ema.{name}", arr)
    return ckpt


def load_model_from_checkpoint(path, use_ema=True):
    """Rebuild the model a checkpoint describes; EMA weights by default."""
    ckpt = load_checkpoint(path)
    cfg = parse_config(ckpt.config_text)
    model = build_model(cfg)
    for name, p in model.trainable_params().items():
        key = f"ema.{name}" if use_ema and f"ema.{name}" in ckpt.tensors else name
        if key not in ckpt.tensors:
            raise ValueError(f"checkpoint lacks tensor {key!r}")
        p.data = ckpt.tensors[key].copy()
        p.requires_grad = False
    for name, p in model.codec.params.items():
        if name not in ckpt.tensors:
            raise ValueError(f"checkpoint lacks codec tensor {name!r}")
        p.data = ckpt.tensors[name].copy()
        p.requires_grad = False
    return model, ckpt


def pretrain_codec(cfg, images, log=None):
    """Fit the conv codec by plain reconstruction MSE; returns (codec, holdout mse).

    The first tenth of the corpus is held out for the reconstruction check.
    """
    codec = ConvCodec(
        z_channels=cfg.codec_latent_channels,
        widths=cfg.codec_widths,
        factor=cfg.codec_factor,
        rng=Rng(cfg.codec_seed),
    )
    n_hold = max(1, len(images) // 10)
    hold, train = images[:n_hold], images[n_hold:]
    opt = AdamW(codec.params, lr=cfg.codec_lr, weight_decay=0.0)
    rng = Rng(cfg.codec_seed + 1)
    for it in range(cfg.codec_train_steps):
        idx = rng.integers(0, len(train), (cfg.codec_batch_size,))
        batch = Tensor(train[idx])
        out = codec.decode(codec.encode(batch))
        loss = simple_loss(batch, out)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log and (it + 1) % 200 == 0:
            log(f"codec step {it + 1}/{cfg.codec_train_steps} loss {float(loss.data):.5f}")
    with T.no_grad():
        recon = codec.decode(codec.encode(Tensor(hold)))
        mse = float(np.mean((recon.data - hold) ** 2))
    for p in codec.params.values():
        p.requires_grad = False
    return codec, mse


def run_training(cfg, outdir, images=None, log=None):
    """Full run: corpus, optional codec pretraining, loop, CSV log, checkpoints.

    Returns (state, losses). Deterministic given the config.
    """
    os.makedirs(outdir, exist_ok=True)
    if images is None:
        spec = ToyCorpusSpec(
            count=cfg.corpus_count,
            size=cfg.image_size,
            n_styles=cfg.corpus_styles,
            families=cfg.corpus_families,
            seed=cfg.corpus_seed,
        )
        images = corpus_arrays(spec)

    model = build_model(cfg)
    if cfg.codec == "conv":
        codec, mse = pretrain_codec(cfg, images, log=log)
        model.codec = codec
        if log:
            log(f"codec holdout mse {mse:.5f}")

    if cfg.dual_corpus:
        plain_spec = ToyCorpusSpec(
            count=cfg.corpus_count,
            size=cfg.image_size,
            n_styles=cfg.corpus_styles,
            families=("plain",),
            seed=cfg.corpus_seed + 1,
        )
        content_pool = corpus_arrays(plain_spec)
    else:
        content_pool = images

    state = init_train_state(model)
    losses = []
    log_path = os.path.join(outdir, "loss_log.csv")
    with open(log_path, "w") as fh:
        fh.write("iteration,loss,n_content_only,n_style_only,n_dual\n")
        for it in range(cfg.iterations):
            if cfg.dual_corpus:
                # modes first, so content-only elements source the plain pool
                modes = [
                    draw_condition_mode(state.rng, cfg.p_content_only, cfg.p_style_only)
                    for _ in range(cfg.batch_size)
                ]
                batch = np.stack(
                    [
                        content_pool[state.rng.integers(0, len(content_pool))]
                        if m == CONTENT_ONLY
                        else images[state.rng.integers(0, len(images))]
                        for m in modes
                    ]
                )
                loss, counts, _ = train_step(state, batch, modes=modes)
            else:
                idx = state.rng.integers(0, len(images), (cfg.batch_size,))
                loss, counts, _ = train_step(state, images[idx])
            losses.append(loss)
            fh.write(
                f"{state.iteration},{loss!r},{counts[CONTENT_ONLY]},"
                f"{counts[STYLE_ONLY]},{counts[DUAL]}\n"
            )
            if log and (it + 1) % 100 == 0:
                log(f"iter {it + 1}/{cfg.iterations} loss {loss:.5f}")
            if cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
                save_checkpoint(
                    os.path.join(outdir, f"ckpt_{state.iteration:06d}.ckpt"),
                    state_checkpoint(state),
                )
    save_checkpoint(os.path.join(outdir, "final.ckpt"), state_checkpoint(state))
    return state, losses
