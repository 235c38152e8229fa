"""Denoising-diffusion machinery around the panel denoiser.

Epsilon-prediction with a linear beta schedule and plain ancestral sampling.
The training objective is a masked MSE: latent positions under the
speech-bubble mask are excluded from both numerator and denominator (their
gradient is exactly zero), while padded all-white panels stay included so the
model learns to emit white for "EMPTY" slots, which pixel-min composition then
ignores.

All randomness is derived from one root seed via (stream, counter) sub-seeds:
"train-step" uses the step counter and "data-order" the epoch counter, so a
restored checkpoint reproduces subsequent losses bit for bit given the same
data order; "sample" drives inference noise.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor

from .dataset import TrainingRecord
from .errors import ConfigError
from .model import (
    CaptionEmbedding,
    ImageCodec,
    MaskSet,
    ModelConfig,
    PanelDenoiser,
    TextEmbedder,
    build_codec,
    build_embedder,
    build_model,
    load_checkpoint,
    save_checkpoint,
)
from .panels import PanelImageStack
from .scripts import ScriptSet
from .seeding import derive_seed

__all__ = [
    "NoiseSchedule",
    "make_schedule",
    "q_sample",
    "expand_intra_mask",
    "masked_denoising_loss",
    "TrainState",
    "init_train_state",
    "train_step",
    "run_training",
    "smoothed_losses",
    "ancestral_sample",
    "sample",
    "save_train_state",
    "load_train_state",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Beta/alpha tables for the forward process, kept in float64."""

    timesteps: int
    beta: Tensor
    alpha: Tensor
    alpha_bar: Tensor


def make_schedule(
    timesteps: int = 1000,
    beta_start: float = 1e-4,
    beta_end: float = 2e-2,
    kind: str = "linear",
) -> NoiseSchedule:
    if kind != "linear":
        raise ConfigError(f"unsupported schedule kind {kind!r} (only 'linear')")
    if not 0.0 < beta_start < beta_end < 1.0:
        raise ConfigError(
            f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}"
        )
    if timesteps < 1:
        raise ConfigError("timesteps must be >= 1")
    beta = torch.linspace(beta_start, beta_end, timesteps, dtype=torch.float64)
    alpha = 1.0 - beta
    alpha_bar = torch.cumprod(alpha, dim=0)
    assert (alpha_bar > 0).all() and (alpha_bar < 1).all()
    return NoiseSchedule(timesteps=timesteps, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def _check_t(t: Tensor | int, batch: int, timesteps: int) -> Tensor:
    if isinstance(t, int):
        t = torch.full((batch,), t, dtype=torch.long)
    if bool((t < 0).any()) or bool((t >= timesteps).any()):
        raise ValueError(f"timestep out of range [0, {timesteps})")
    return t


def q_sample(z0: Tensor, t: Tensor | int, eps: Tensor, sched: NoiseSchedule) -> Tensor:
    """Forward noising: sqrt(a_bar_t) * z0 + sqrt(1 - a_bar_t) * eps."""
    if eps.shape != z0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != z0 shape {tuple(z0.shape)}")
    t = _check_t(t, z0.shape[0], sched.timesteps)
    shape = (z0.shape[0],) + (1,) * (z0.dim() - 1)
    ab = sched.alpha_bar[t].to(z0.dtype).reshape(shape)
    return ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps


def expand_intra_mask(intra: Tensor, latent_hw: tuple[int, int], patch: int) -> Tensor:
    """Token mask (B, K, n) -> latent-position mask (B, K, 1, h, w).

    Each token cell covers a patch x patch block of latent sites across all
    channels.
    """
    b, k, n = intra.shape
    h, w = latent_hw
    gh, gw = h // patch, w // patch
    if n != gh * gw:
        raise ValueError(f"{n} mask tokens cannot tile a {gh}x{gw} grid")
    m = intra.reshape(b, k, gh, gw)
    m = m.repeat_interleave(patch, dim=-2).repeat_interleave(patch, dim=-1)
    return m[:, :, None]


def masked_denoising_loss(
    eps: Tensor, eps_hat: Tensor, masks: MaskSet, patch: int = 2
) -> Tensor:
    """MSE over latent positions outside the bubble mask.

    The denominator counts included positions only; padded panels are
    included (all-false bubble rows).  With everything masked the loss is
    defined as 0 and a warning is emitted.
    """
    if eps.shape != eps_hat.shape:
        raise ValueError(
            f"prediction shape {tuple(eps_hat.shape)} != target {tuple(eps.shape)}"
        )
    b, k, c, h, w = eps.shape
    excluded = expand_intra_mask(masks.intra, (h, w), patch)
    weights = (~excluded).to(eps.dtype).expand(b, k, c, h, w)
    count = int(weights.sum().item())
    if count == 0:
        warnings.warn("all latent positions masked; loss defined as 0", stacklevel=2)
        return torch.zeros((), dtype=eps.dtype)
    return ((eps - eps_hat) ** 2 * weights).sum() / count


# --- training ----------------------------------------------------------------


@dataclass
class TrainState:
    """Everything a resumable run needs: parameters, moments, step, seed."""

    model: PanelDenoiser
    optimizer: torch.optim.AdamW
    codec: ImageCodec
    embedder: TextEmbedder
    step: int
    seed: int


def init_train_state(
    config: ModelConfig,
    seed: int,
    lr: float = 1e-4,
    weight_decay: float = 0.01,
    betas: tuple[float, float] = (0.9, 0.999),
) -> TrainState:
    model = build_model(config, seed)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=lr, weight_decay=weight_decay, betas=betas
    )
    return TrainState(
        model=model,
        optimizer=optimizer,
        codec=build_codec(config.codec),
        embedder=build_embedder(config.embedder, config.d_text),
        step=0,
        seed=seed,
    )


def _collate(
    records: Sequence[TrainingRecord], state: TrainState
) -> tuple[Tensor, CaptionEmbedding, MaskSet]:
    cfg = state.model.config
    for r in records:
        if r.k_max != cfg.k_max:
            raise ValueError(f"record {r.page_id!r} has k_max={r.k_max}, config {cfg.k_max}")
    images = torch.from_numpy(np.stack([r.panel_images for r in records]))
    z0 = state.codec.encode(images)
    captions = state.embedder.embed(
        [list(r.captions) for r in records], cfg.max_text_tokens
    )
    intra = torch.from_numpy(np.stack([r.intra_mask for r in records]))
    inter = torch.from_numpy(np.stack([r.inter_mask for r in records]))
    return z0, captions, MaskSet.from_token_grids(intra, inter)


def train_step(
    state: TrainState, records: Sequence[TrainingRecord], sched: NoiseSchedule
) -> tuple[TrainState, float]:
    """One optimizer update on a batch of records; returns (state, loss).

    The timestep is drawn once per page and shared by that page's panels,
    which are denoised jointly. No augmentations are applied (in particular
    no horizontal flips, which would destroy reading order).
    """
    z0, captions, masks = _collate(records, state)
    gen = torch.Generator().manual_seed(derive_seed(state.seed, "train-step", state.step))
    t = torch.randint(0, sched.timesteps, (z0.shape[0],), generator=gen)
    eps = torch.randn(z0.shape, generator=gen)
    z_t = q_sample(z0, t, eps, sched)

    eps_hat = state.model(z_t, t, captions, masks)
    loss = masked_denoising_loss(eps, eps_hat, masks, state.model.config.patch)
    if not torch.isfinite(loss):
        raise RuntimeError(
            f"non-finite loss {loss.item()} at step {state.step}; aborting"
        )
    state.optimizer.zero_grad()
    loss.backward()
    state.optimizer.step()
    state.step += 1
    return state, float(loss.item())


def run_training(
    state: TrainState,
    records: Sequence[TrainingRecord],
    sched: NoiseSchedule,
    steps: int,
    batch_size: int,
    log_every: int = 0,
) -> list[float]:
    """Run ``steps`` updates over deterministically shuffled epochs.

    Each epoch's order comes from the "data-order" seed stream; batches that
    would be smaller than ``batch_size`` are dropped at the epoch tail.
    Returns the per-step loss history.
    """
    if batch_size < 1 or batch_size > len(records):
        raise ConfigError(f"batch_size {batch_size} not in 1..{len(records)}")
    batches_per_epoch = len(records) // batch_size
    losses: list[float] = []
    # Derive the epoch and in-epoch position from the step counter so a
    # restored run continues exactly where the original one would have.
    epoch, skip = divmod(state.step, batches_per_epoch)
    while len(losses) < steps:
        rng = np.random.default_rng(derive_seed(state.seed, "data-order", epoch))
        order = rng.permutation(len(records))
        for b in range(skip, batches_per_epoch):
            lo = b * batch_size
            batch = [records[i] for i in order[lo : lo + batch_size]]
            state, loss = train_step(state, batch, sched)
            losses.append(loss)
            if log_every and len(losses) % log_every == 0:
                print(f"step {state.step}: loss {loss:.6f}", flush=True)
            if len(losses) >= steps:
                break
        skip = 0
        epoch += 1
    return losses


def smoothed_losses(losses: Sequence[float], window: int = 50) -> list[float]:
    """Trailing-window means, same length as the input."""
    out = []
    for i in range(len(losses)):
        lo = max(0, i + 1 - window)
        out.append(float(np.mean(losses[lo : i + 1])))
    return out


# --- sampling ----------------------------------------------------------------

DenoiseFn = Callable[[Tensor, Tensor, CaptionEmbedding, MaskSet], Tensor]


def ancestral_sample(
    denoise_fn: DenoiseFn,
    shape: tuple[int, ...],
    captions: CaptionEmbedding,
    masks: MaskSet,
    sched: NoiseSchedule,
    seed: int,
) -> Tensor:
    """Plain ancestral sampling from pure noise down to z0.

    Posterior variance beta_t * (1 - a_bar_{t-1}) / (1 - a_bar_t); no noise is
    added at the final step and no x0 clamping is applied.
    """
    gen = torch.Generator().manual_seed(derive_seed(seed, "sample"))
    z = torch.randn(shape, generator=gen)
    for t in reversed(range(sched.timesteps)):
        beta_t = float(sched.beta[t])
        alpha_t = float(sched.alpha[t])
        ab_t = float(sched.alpha_bar[t])
        ab_prev = float(sched.alpha_bar[t - 1]) if t > 0 else 1.0

        t_batch = torch.full((shape[0],), t, dtype=torch.long)
        eps_hat = denoise_fn(z, t_batch, captions, masks)
        mean = (z - beta_t / (1.0 - ab_t) ** 0.5 * eps_hat) / alpha_t**0.5
        if t > 0:
            var = beta_t * (1.0 - ab_prev) / (1.0 - ab_t)
            noise = torch.randn(shape, generator=gen)
            z = mean + var**0.5 * noise
        else:
            z = mean
    return z


@torch.no_grad()
def sample(
    model: PanelDenoiser,
    codec: ImageCodec,
    embedder: TextEmbedder,
    scripts: ScriptSet,
    sched: NoiseSchedule,
    seed: int,
    page_size: tuple[int, int],
) -> PanelImageStack:
    """Generate the full panel stack for a padded script set.

    All k_max panels are denoised jointly; "EMPTY" slots are flagged padded so
    they are excluded from layout attention and come out white.  The decoded
    stack is returned as-is; composition is the caller's job.
    """
    cfg = model.config
    if len(scripts.scripts) != cfg.k_max:
        raise ValueError(
            f"{len(scripts.scripts)} scripts for k_max={cfg.k_max}; pad them first"
        )
    width, height = page_size
    down = codec.downsample
    if width % (down * cfg.patch) or height % (down * cfg.patch):
        raise ValueError(
            f"page {width}x{height} must be divisible by {down * cfg.patch}"
        )
    h, w = height // down, width // down
    n = (h // cfg.patch) * (w // cfg.patch)

    captions = embedder.embed([list(scripts.scripts)], cfg.max_text_tokens)
    masks = MaskSet.inference(torch.tensor(scripts.pad_flags), n)
    shape = (1, cfg.k_max, cfg.latent_channels, h, w)
    model.eval()
    z0 = ancestral_sample(model, shape, captions, masks, sched, seed)
    images = codec.decode(z0)
    return PanelImageStack(images=images[0].numpy(), boxes=None)


# --- train-state checkpoints -------------------------------------------------

_OPTIM_FILE = "optim.bin"


def save_train_state(
    state: TrainState, out_dir, sched_config: dict | None = None
):
    """Model checkpoint plus optimizer moments, step counter and seed."""
    group = state.optimizer.param_groups[0]
    extra = {
        "train": {
            "step": state.step,
            "seed": state.seed,
            "optimizer": {
                "lr": group["lr"],
                "betas": list(group["betas"]),
                "eps": group["eps"],
                "weight_decay": group["weight_decay"],
            },
        }
    }
    if sched_config:
        extra["schedule"] = sched_config
    out = save_checkpoint(state.model, out_dir, extra=extra)

    with open(out / _OPTIM_FILE, "wb") as fh:
        for param in state.model.parameters():
            opt_state = state.optimizer.state.get(param)
            if opt_state is None:
                zeros = torch.zeros_like(param)
                moments = (zeros, zeros)
            else:
                moments = (opt_state["exp_avg"], opt_state["exp_avg_sq"])
            for m in moments:
                fh.write(m.detach().cpu().numpy().astype("<f4").tobytes())
    return out


def load_train_state(ckpt_dir) -> tuple[TrainState, dict]:
    """Rebuild a TrainState (with optimizer moments) from a checkpoint."""
    model, manifest = load_checkpoint(ckpt_dir)
    train = manifest["train"]
    opt_cfg = train["optimizer"]
    optimizer = torch.optim.AdamW(
        model.parameters(),
        lr=opt_cfg["lr"],
        betas=tuple(opt_cfg["betas"]),
        eps=opt_cfg["eps"],
        weight_decay=opt_cfg["weight_decay"],
    )
    step = int(train["step"])
    raw = (Path(ckpt_dir) / _OPTIM_FILE).read_bytes()
    offset = 0
    if step > 0:
        for param in model.parameters():
            count = param.numel()
            moments = []
            for _ in range(2):
                values = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
                offset += count * 4
                moments.append(torch.from_numpy(values.copy()).reshape(param.shape))
            optimizer.state[param] = {
                "step": torch.tensor(float(step)),
                "exp_avg": moments[0],
                "exp_avg_sq": moments[1],
            }
    cfg = model.config
    state = TrainState(
        model=model,
        optimizer=optimizer,
        codec=build_codec(cfg.codec),
        embedder=build_embedder(cfg.embedder, cfg.d_text),
        step=step,
        seed=int(train["seed"]),
    )
    return state, manifest
