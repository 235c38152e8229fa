"""The panel-stack denoiser.

Noisy per-panel latents are patchified into tokens; the network alternates
two factorized attention stages: an intra-panel stage (self-attention among
one panel's tokens, with speech-bubble tokens excluded, plus cross-attention
to that panel's caption) and an inter-panel stage (self-attention among the
K tokens sharing a spatial position, with padded panels excluded), capturing
both per-panel content and the cross-panel layout.  The timestep enters via a
single shared modulation head whose output every block offsets with its own
learnable table, split into shift/scale/gate per sublayer.  All gates start
at zero, so an untrained network is the final projection of its token
embedding.

Caption k conditions panel k only, and only inside the intra-panel stage, so
panels stay independently controllable.  Attention here is plain reference
softmax attention (no fused kernels): excluded keys receive exactly zero
weight, which makes real-panel outputs bit-identical under any change to
padded panels' latents or captions.

Image and text encoders are pluggable.  The shipped stubs (average-pool codec,
hashed token embedder) keep the package free of pretrained weights; real
codecs plug in behind the same two protocols.

`forward` is a pure function of (parameters, inputs); concurrent read-only
inference is safe, parameter mutation is single-writer.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigError
from .seeding import derive_seed

__all__ = [
    "ModelConfig",
    "ImageCodec",
    "TextEmbedder",
    "AveragePoolCodec",
    "HashTextEmbedder",
    "build_codec",
    "build_embedder",
    "CaptionEmbedding",
    "MaskSet",
    "TokenGrid",
    "patchify",
    "unpatchify",
    "position_embedding_2d",
    "timestep_embedding",
    "masked_attention",
    "MaskedSelfAttention",
    "MaskedCrossAttention",
    "IntraPanelBlock",
    "InterPanelBlock",
    "PanelDenoiser",
    "build_model",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class ModelConfig:
    """Denoiser hyperparameters. Defaults are the desk-scale profile."""

    d_model: int = 64
    depth: int = 2  # number of intra+inter block pairs
    heads: int = 4
    patch: int = 2
    latent_channels: int = 4
    k_max: int = 4
    d_text: int = 32
    max_text_tokens: int = 300
    num_timesteps: int = 1000
    codec: str = "avgpool-stub"
    embedder: str = "hash-stub"

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.d_model % 4:
            raise ConfigError("d_model must be divisible by 4 for 2D position embeddings")
        for name in ("depth", "patch", "latent_channels", "k_max", "d_text",
                     "max_text_tokens", "num_timesteps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.latent_channels

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


# --- pluggable encoders ------------------------------------------------------


class ImageCodec(Protocol):
    """Maps page-resolution images to 1/8-resolution latents and back."""

    codec_id: str
    latent_channels: int
    downsample: int

    def encode(self, images: Tensor) -> Tensor:
        """(B, K, H, W, 3) in [0,1] -> (B, K, C, H/8, W/8)."""

    def decode(self, latents: Tensor) -> Tensor:
        """(B, K, C, h, w) -> (B, K, 8h, 8w, 3), clamped to [0,1]."""


class TextEmbedder(Protocol):
    """Maps a B x K grid of caption strings to token embeddings."""

    embedder_id: str
    dim: int

    def embed(self, captions: Sequence[Sequence[str]], max_tokens: int) -> "CaptionEmbedding": ...


class AveragePoolCodec:
    """Weight-free codec stub.

    Encode: channel-mean grayscale, 8x average pool, mapped affinely from
    [0,1] to [-1,1] (diffusion works on roughly zero-centered latents; white
    pages sit at +1), replicated onto all latent channels.  Decode inverts:
    channel mean, nearest-neighbor 8x upsample, back to [0,1] and clamped (so
    decoder output can never break the white-identity of pixel-min
    composition), replicated to RGB.
    """

    codec_id = "avgpool-stub"
    latent_channels = 4
    downsample = 8

    def encode(self, images: Tensor) -> Tensor:
        x = torch.as_tensor(images, dtype=torch.float32)
        if x.dim() != 5 or x.shape[-1] != 3:
            raise ValueError(f"expected (B, K, H, W, 3), got {tuple(x.shape)}")
        b, k, h, w, _ = x.shape
        gray = x.mean(dim=-1).reshape(b * k, 1, h, w)
        pooled = F.avg_pool2d(gray, self.downsample) * 2.0 - 1.0
        lat = pooled.repeat(1, self.latent_channels, 1, 1)
        return lat.reshape(b, k, self.latent_channels, h // self.downsample, w // self.downsample)

    def decode(self, latents: Tensor) -> Tensor:
        x = torch.as_tensor(latents, dtype=torch.float32)
        if x.dim() != 5:
            raise ValueError(f"expected (B, K, C, h, w), got {tuple(x.shape)}")
        mean = (x.mean(dim=2) + 1.0) / 2.0
        up = mean.repeat_interleave(self.downsample, dim=-2)
        up = up.repeat_interleave(self.downsample, dim=-1)
        return up.clamp(0.0, 1.0).unsqueeze(-1).expand(*up.shape, 3).contiguous()


class HashTextEmbedder:
    """Deterministic text embedder stub.

    Whitespace tokenization; each distinct token maps to a fixed pseudo-random
    vector seeded from its SHA-256 digest, so embeddings are stable across
    processes and platforms. The padding sentinel "EMPTY" is an ordinary word.
    """

    embedder_id = "hash-stub"

    def __init__(self, dim: int = 32):
        self.dim = dim
        self._cache: dict[str, np.ndarray] = {}

    def _vector(self, token: str) -> np.ndarray:
        vec = self._cache.get(token)
        if vec is None:
            seed = int.from_bytes(hashlib.sha256(token.encode()).digest()[:8], "little")
            vec = np.random.default_rng(seed).standard_normal(self.dim).astype(np.float32)
            self._cache[token] = vec
        return vec

    def embed(self, captions: Sequence[Sequence[str]], max_tokens: int) -> "CaptionEmbedding":
        tokenized = [[c.split()[:max_tokens] for c in row] for row in captions]
        longest = max((len(t) for row in tokenized for t in row), default=0)
        length = max(1, longest)
        b, k = len(tokenized), len(tokenized[0]) if tokenized else 0
        vectors = np.zeros((b, k, length, self.dim), dtype=np.float32)
        valid = np.zeros((b, k, length), dtype=bool)
        for i, row in enumerate(tokenized):
            for j, tokens in enumerate(row):
                for p, token in enumerate(tokens):
                    vectors[i, j, p] = self._vector(token)
                    valid[i, j, p] = True
        return CaptionEmbedding(torch.from_numpy(vectors), torch.from_numpy(valid))


_CODECS = {"avgpool-stub": AveragePoolCodec}


def build_codec(name: str) -> ImageCodec:
    try:
        return _CODECS[name]()
    except KeyError:
        raise ConfigError(f"unknown codec {name!r}; available: {sorted(_CODECS)}") from None


def build_embedder(name: str, dim: int) -> TextEmbedder:
    if name == "hash-stub":
        return HashTextEmbedder(dim)
    raise ConfigError(f"unknown embedder {name!r}; available: ['hash-stub']")


# --- tensor-side data types --------------------------------------------------


@dataclass(frozen=True)
class CaptionEmbedding:
    """Per-panel caption tokens: (B, K, l, d_text) vectors + validity flags."""

    vectors: Tensor
    valid: Tensor

    def __post_init__(self):
        if self.vectors.dim() != 4:
            raise ValueError(f"caption vectors must be 4D, got {tuple(self.vectors.shape)}")
        if self.valid.shape != self.vectors.shape[:3]:
            raise ValueError("caption validity flags do not match the vectors")
        if self.valid.dtype != torch.bool:
            raise ValueError("caption validity flags must be boolean")


@dataclass(frozen=True)
class MaskSet:
    """intra: (B, K, n) True = bubble-masked token; inter: (B, K) True = padded."""

    intra: Tensor
    inter: Tensor

    def __post_init__(self):
        if self.intra.dtype != torch.bool or self.inter.dtype != torch.bool:
            raise ValueError("masks must be boolean tensors")
        if self.intra.dim() != 3 or self.inter.shape != self.intra.shape[:2]:
            raise ValueError(
                f"mask shapes disagree: intra {tuple(self.intra.shape)}, "
                f"inter {tuple(self.inter.shape)}"
            )
        if self.intra[self.inter].any():
            raise ValueError("padded panels must have all-false intra rows")
        if not (~self.inter).any(dim=1).all():
            raise ValueError("every sample needs at least one real panel")

    @classmethod
    def from_token_grids(cls, intra_grids: Tensor, inter: Tensor) -> "MaskSet":
        """Flatten (B, K, h_tok, w_tok) bubble grids into token-sequence masks."""
        b, k = intra_grids.shape[:2]
        return cls(intra_grids.reshape(b, k, -1).bool(), inter.bool())

    @classmethod
    def inference(cls, pad_flags: Tensor, n_tokens: int) -> "MaskSet":
        """No bubbles are prescribed at inference; only padding is masked."""
        inter = pad_flags.bool()
        if inter.dim() == 1:
            inter = inter.unsqueeze(0)
        b, k = inter.shape
        return cls(torch.zeros(b, k, n_tokens, dtype=torch.bool), inter)


@dataclass(frozen=True)
class TokenGrid:
    """Token state, viewable panel-major (K, n, d) or position-major (n, K, d)."""

    data: Tensor
    layout: str  # "panel" | "position"

    def __post_init__(self):
        if self.layout not in ("panel", "position"):
            raise ValueError(f"unknown layout {self.layout!r}")
        if self.data.dim() != 4:
            raise ValueError(f"token grid must be 4D, got {tuple(self.data.shape)}")

    def panel_major(self) -> "TokenGrid":
        if self.layout == "panel":
            return self
        return TokenGrid(self.data.transpose(1, 2), "panel")

    def position_major(self) -> "TokenGrid":
        if self.layout == "position":
            return self
        return TokenGrid(self.data.transpose(1, 2), "position")


def patchify(latents: Tensor, patch: int) -> Tensor:
    """(B, K, C, h, w) -> (B, K, n, p*p*C) by pure reshape; exact inverse of
    unpatchify. Raises if the spatial dims are not divisible by the patch."""
    b, k, c, h, w = latents.shape
    if h % patch or w % patch:
        raise ValueError(f"latent {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = latents.reshape(b, k, c, gh, patch, gw, patch)
    x = x.permute(0, 1, 3, 5, 2, 4, 6)  # (B, K, gh, gw, C, p, p)
    return x.reshape(b, k, gh * gw, c * patch * patch)


def unpatchify(tokens: Tensor, patch: int, h: int, w: int) -> Tensor:
    """(B, K, n, p*p*C) -> (B, K, C, h, w); inverse of patchify."""
    b, k, n, dim = tokens.shape
    gh, gw = h // patch, w // patch
    if n != gh * gw:
        raise ValueError(f"{n} tokens cannot tile a {gh}x{gw} grid")
    c = dim // (patch * patch)
    x = tokens.reshape(b, k, gh, gw, c, patch, patch)
    x = x.permute(0, 1, 4, 2, 5, 3, 6)
    return x.reshape(b, k, c, h, w)


def _sincos_1d(dim: int, positions: Tensor) -> Tensor:
    omega = torch.arange(dim // 2, dtype=torch.float64) / (dim // 2)
    omega = 1.0 / 10000**omega
    angles = positions.double()[:, None] * omega[None, :]
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1).float()


def position_embedding_2d(dim: int, grid_h: int, grid_w: int) -> Tensor:
    """Fixed 2D sinusoidal embedding, (grid_h * grid_w, dim), row-major."""
    ys, xs = torch.meshgrid(
        torch.arange(grid_h), torch.arange(grid_w), indexing="ij"
    )
    return torch.cat(
        [_sincos_1d(dim // 2, ys.flatten()), _sincos_1d(dim // 2, xs.flatten())], dim=1
    )


def timestep_embedding(t: Tensor, dim: int) -> Tensor:
    """Sinusoidal timestep features, (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    angles = t.double()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1).float()


# --- attention ---------------------------------------------------------------


def masked_attention(q: Tensor, k: Tensor, v: Tensor, key_valid: Tensor) -> Tensor:
    """Reference scaled-dot-product attention over the valid keys only.

    ``key_valid`` is boolean with shape broadcastable to the key positions
    (..., Lk); invalid keys receive exactly zero weight.  A query whose scope
    holds no valid key passes through: its output is its own input (which
    requires matching query/value dims).
    """
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    if key_valid.shape[-1] != k.shape[-2]:
        raise ValueError(
            f"key_valid covers {key_valid.shape[-1]} keys, expected {k.shape[-2]}"
        )
    if key_valid.dtype != torch.bool:
        raise ValueError("key_valid must be boolean")

    scores = (q @ k.transpose(-2, -1)) * q.shape[-1] ** -0.5
    scores = scores.masked_fill(~key_valid.unsqueeze(-2), float("-inf"))
    peak = scores.amax(dim=-1, keepdim=True)
    peak = torch.where(torch.isfinite(peak), peak, torch.zeros_like(peak))
    weights = torch.exp(scores - peak)  # exact zeros at invalid keys
    denom = weights.sum(dim=-1, keepdim=True)
    out = (weights / denom.clamp(min=torch.finfo(weights.dtype).tiny)) @ v
    if bool((denom == 0).any()):
        if q.shape[-1] != v.shape[-1]:
            raise ValueError("pass-through needs matching query/value dims")
        out = torch.where(denom > 0, out, q)
    return out


class MaskedSelfAttention(nn.Module):
    """Multi-head self-attention where invalid tokens are excluded as keys."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor, key_valid: Tensor) -> Tensor:
        b, length, dim = x.shape
        qkv = self.qkv(x).reshape(b, length, 3, self.heads, dim // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)  # each (B, H, L, dh)
        out = masked_attention(q, k, v, key_valid[:, None, :])
        return self.proj(out.transpose(1, 2).reshape(b, length, dim))


class MaskedCrossAttention(nn.Module):
    """Multi-head cross-attention onto a context with per-token validity."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor, context: Tensor, context_valid: Tensor) -> Tensor:
        b, lq, dim = x.shape
        lk = context.shape[1]
        dh = dim // self.heads
        q = self.q(x).reshape(b, lq, self.heads, dh).transpose(1, 2)
        kv = self.kv(context).reshape(b, lk, 2, self.heads, dh)
        k, v = kv.permute(2, 0, 3, 1, 4)
        out = masked_attention(q, k, v, context_valid[:, None, :])
        return self.proj(out.transpose(1, 2).reshape(b, lq, dim))


class FeedForward(nn.Module):
    def __init__(self, dim: int, expansion: int = 4):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, expansion * dim), nn.GELU(), nn.Linear(expansion * dim, dim)
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


# --- timestep modulation -----------------------------------------------------

# Modulation slots in the shared vector: (shift, scale, gate) for the
# self-attention, cross-attention and feed-forward sublayers respectively.
N_MOD_SLOTS = 9
_SA, _CA, _FF = (0, 1, 2), (3, 4, 5), (6, 7, 8)
_TIME_FREQ_DIM = 256


class TimestepModulation(nn.Module):
    """One shared head: timestep -> global modulation vector (B, 9, d).

    The head's final linear is zero-initialized, and every block adds its own
    zero-initialized offset table, so all shifts/scales/gates start at zero
    and every block starts as the identity map.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.embed = nn.Sequential(
            nn.Linear(_TIME_FREQ_DIM, dim), nn.SiLU(), nn.Linear(dim, dim)
        )
        self.head = nn.Sequential(nn.SiLU(), nn.Linear(dim, N_MOD_SLOTS * dim))
        nn.init.zeros_(self.head[-1].weight)
        nn.init.zeros_(self.head[-1].bias)

    def forward(self, t: Tensor) -> Tensor:
        freqs = timestep_embedding(t, _TIME_FREQ_DIM)
        base = self.embed(freqs.to(self.head[-1].weight.dtype))
        return self.head(base).reshape(t.shape[0], N_MOD_SLOTS, -1)


def _modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    # shift/scale: (B, d) broadcast over the middle dims of x
    extra = (1,) * (x.dim() - 2)
    shape = (x.shape[0],) + extra + (x.shape[-1],)
    return x * (1.0 + scale.reshape(shape)) + shift.reshape(shape)


def _gate(x: Tensor, gate: Tensor) -> Tensor:
    extra = (1,) * (x.dim() - 2)
    return x * gate.reshape((x.shape[0],) + extra + (x.shape[-1],))


# --- transformer blocks ------------------------------------------------------


class IntraPanelBlock(nn.Module):
    """Content stage: per-panel token mixing plus per-panel caption control.

    Each panel attends within itself only; bubble-masked tokens are excluded
    as keys and receive no self-attention update (pass-through).  Caption k
    cross-conditions panel k alone, so no cross-panel path exists here.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm_sa = nn.LayerNorm(dim, elementwise_affine=False)
        self.norm_ca = nn.LayerNorm(dim, elementwise_affine=False)
        self.norm_ff = nn.LayerNorm(dim, elementwise_affine=False)
        self.self_attn = MaskedSelfAttention(dim, heads)
        self.cross_attn = MaskedCrossAttention(dim, heads)
        self.ff = FeedForward(dim)
        self.mod_table = nn.Parameter(torch.zeros(N_MOD_SLOTS, dim))

    def forward(
        self,
        grid: TokenGrid,
        captions: Tensor,
        caption_valid: Tensor,
        t_mod: Tensor,
        token_valid: Tensor,
    ) -> TokenGrid:
        if grid.layout != "panel":
            raise ValueError("intra-panel block expects the panel-major view")
        x = grid.data
        b, k, n, d = x.shape
        if captions.shape[:2] != (b, k):
            raise ValueError(
                f"captions for {tuple(captions.shape[:2])} panels, tokens for {(b, k)}"
            )
        mods = self.mod_table[None] + t_mod  # (B, 9, d)

        h = _modulate(self.norm_sa(x), mods[:, _SA[0]], mods[:, _SA[1]])
        attn = self.self_attn(
            h.reshape(b * k, n, d), token_valid.reshape(b * k, n)
        ).reshape(b, k, n, d)
        attn = attn * token_valid[..., None]  # excluded tokens pass through
        x = x + _gate(attn, mods[:, _SA[2]])

        lk = captions.shape[2]
        h = _modulate(self.norm_ca(x), mods[:, _CA[0]], mods[:, _CA[1]])
        cross = self.cross_attn(
            h.reshape(b * k, n, d),
            captions.reshape(b * k, lk, d),
            caption_valid.reshape(b * k, lk),
        ).reshape(b, k, n, d)
        x = x + _gate(cross, mods[:, _CA[2]])

        h = _modulate(self.norm_ff(x), mods[:, _FF[0]], mods[:, _FF[1]])
        x = x + _gate(self.ff(h), mods[:, _FF[2]])
        return TokenGrid(x, "panel")


class InterPanelBlock(nn.Module):
    """Layout stage: mixing among the K panel tokens at each spatial position.

    Padded panels are excluded as keys and receive no update as queries, so
    they neither influence nor join the layout.  Expects panel-index
    embeddings to have been added to the K axis upstream.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm_sa = nn.LayerNorm(dim, elementwise_affine=False)
        self.norm_ff = nn.LayerNorm(dim, elementwise_affine=False)
        self.self_attn = MaskedSelfAttention(dim, heads)
        self.ff = FeedForward(dim)
        self.mod_table = nn.Parameter(torch.zeros(6, dim))

    def forward(self, grid: TokenGrid, t_mod: Tensor, panel_valid: Tensor) -> TokenGrid:
        if grid.layout != "position":
            raise ValueError("inter-panel block expects the position-major view")
        x = grid.data
        b, n, k, d = x.shape
        mods = self.mod_table[None] + t_mod[:, list(_SA) + list(_FF)]  # (B, 6, d)

        h = _modulate(self.norm_sa(x), mods[:, 0], mods[:, 1])
        key_valid = panel_valid[:, None, :].expand(b, n, k).reshape(b * n, k)
        attn = self.self_attn(h.reshape(b * n, k, d), key_valid).reshape(b, n, k, d)
        attn = attn * panel_valid[:, None, :, None]  # padded panels pass through
        x = x + _gate(attn, mods[:, 2])

        h = _modulate(self.norm_ff(x), mods[:, 3], mods[:, 4])
        x = x + _gate(self.ff(h), mods[:, 5])
        return TokenGrid(x, "position")


class PanelBlockPair(nn.Module):
    """Container for one intra+inter stage pair."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.intra = IntraPanelBlock(dim, heads)
        self.inter = InterPanelBlock(dim, heads)


class PanelDenoiser(nn.Module):
    """Noise prediction over a stack of K panel latents.

    forward: patchify -> depth x (intra stage -> inter stage) -> modulated
    final projection -> unpatchify. Output shape equals input shape.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        self.token_embed = nn.Linear(config.patch_dim, d)
        self.caption_proj = nn.Linear(config.d_text, d)
        self.panel_embed = nn.Parameter(torch.zeros(config.k_max, d))
        self.time_mod = TimestepModulation(d)
        self.blocks = nn.ModuleList(
            PanelBlockPair(d, config.heads) for _ in range(config.depth)
        )
        self.final_norm = nn.LayerNorm(d, elementwise_affine=False)
        self.final_table = nn.Parameter(torch.zeros(2, d))
        self.final_proj = nn.Linear(d, config.patch_dim)
        self._pos_cache: dict[tuple[int, int], Tensor] = {}
        self._init_weights()

    def _init_weights(self):
        for module in self.modules():
            if isinstance(module, nn.Linear):
                nn.init.trunc_normal_(module.weight, std=0.02)
                if module.bias is not None:
                    nn.init.zeros_(module.bias)
        nn.init.trunc_normal_(self.panel_embed, std=0.02)
        # Re-zero the shared modulation head after the blanket init: with all
        # gates at zero the untrained network is its final projection.
        nn.init.zeros_(self.time_mod.head[-1].weight)
        nn.init.zeros_(self.time_mod.head[-1].bias)

    def _position_embedding(self, gh: int, gw: int) -> Tensor:
        key = (gh, gw)
        if key not in self._pos_cache:
            self._pos_cache[key] = position_embedding_2d(self.config.d_model, gh, gw)
        return self._pos_cache[key]

    def forward(
        self, z_t: Tensor, t: Tensor | int, captions: CaptionEmbedding, masks: MaskSet
    ) -> Tensor:
        cfg = self.config
        if z_t.dim() != 5:
            raise ValueError(f"latents must be (B, K, C, h, w), got {tuple(z_t.shape)}")
        b, k, c, h, w = z_t.shape
        if k != cfg.k_max:
            raise ValueError(f"stack has {k} panels, config.k_max={cfg.k_max}")
        if c != cfg.latent_channels:
            raise ValueError(f"{c} latent channels, config says {cfg.latent_channels}")

        if isinstance(t, int):
            t = torch.full((b,), t, dtype=torch.long)
        if t.shape != (b,):
            raise ValueError(f"t must be scalar or shape ({b},), got {tuple(t.shape)}")
        if bool((t < 0).any()) or bool((t >= cfg.num_timesteps).any()):
            raise ValueError(f"timestep out of range [0, {cfg.num_timesteps})")

        n = (h // cfg.patch) * (w // cfg.patch)
        if masks.intra.shape != (b, k, n):
            raise ValueError(
                f"intra mask {tuple(masks.intra.shape)} does not match (B={b}, K={k}, n={n})"
            )
        if captions.vectors.shape[1] != k:
            raise ValueError("caption embedding K differs from the latent stack")
        dtype = z_t.dtype

        tokens = self.token_embed(patchify(z_t, cfg.patch))
        pos = self._position_embedding(h // cfg.patch, w // cfg.patch).to(dtype)
        tokens = tokens + pos[None, None] + self.panel_embed[None, :, None, :].to(dtype)

        t_mod = self.time_mod(t).to(dtype)
        ctx = self.caption_proj(captions.vectors.to(dtype))
        token_valid = ~masks.intra
        panel_valid = ~masks.inter

        grid = TokenGrid(tokens, "panel")
        for pair in self.blocks:
            grid = pair.intra(grid, ctx, captions.valid, t_mod, token_valid)
            grid = pair.inter(grid.position_major(), t_mod, panel_valid).panel_major()

        x = grid.data
        shift = self.final_table[0][None] + t_mod[:, 0]
        scale = self.final_table[1][None] + t_mod[:, 1]
        out = self.final_proj(_modulate(self.final_norm(x), shift, scale))
        return unpatchify(out, cfg.patch, h, w)


def build_model(config: ModelConfig, seed: int = 0) -> PanelDenoiser:
    """Construct a denoiser with reproducible initialization."""
    torch.manual_seed(derive_seed(seed, "model-init"))
    return PanelDenoiser(config)


# --- checkpoints -------------------------------------------------------------

_CHECKPOINT_MANIFEST = "manifest.json"
_CHECKPOINT_PARAMS = "params.bin"


def _flat_bytes(tensor: Tensor) -> bytes:
    return tensor.detach().cpu().numpy().astype("<f4").tobytes()


def save_checkpoint(model: PanelDenoiser, out_dir: str | Path, extra: dict | None = None) -> Path:
    """Write manifest.json (config + parameter names/shapes, plus any extra
    sections) and params.bin (little-endian float32, manifest order)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = [
        {"name": name, "shape": list(param.shape)}
        for name, param in model.named_parameters()
    ]
    manifest = {"config": model.config.to_dict(), "params": entries}
    if extra:
        manifest.update(extra)
    (out / _CHECKPOINT_MANIFEST).write_text(
        json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8"
    )
    with open(out / _CHECKPOINT_PARAMS, "wb") as fh:
        for name, param in model.named_parameters():
            fh.write(_flat_bytes(param))
    return out


def load_checkpoint(ckpt_dir: str | Path) -> tuple[PanelDenoiser, dict]:
    """Rebuild the model from a checkpoint directory; returns (model, manifest)."""
    ckpt = Path(ckpt_dir)
    manifest = json.loads((ckpt / _CHECKPOINT_MANIFEST).read_text("utf-8"))
    config = ModelConfig.from_dict(manifest["config"])
    model = PanelDenoiser(config)

    named = dict(model.named_parameters())
    raw = (ckpt / _CHECKPOINT_PARAMS).read_bytes()
    offset = 0
    with torch.no_grad():
        for entry in manifest["params"]:
            param = named.get(entry["name"])
            if param is None or list(param.shape) != entry["shape"]:
                raise ConfigError(
                    f"checkpoint parameter {entry['name']!r} {entry['shape']} does not "
                    "match the model"
                )
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            values = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
            offset += count * 4
            param.copy_(torch.from_numpy(values.copy()).reshape(param.shape))
    if offset != len(raw):
        raise ConfigError(
            f"checkpoint has {len(raw)} bytes of weights, manifest expects {offset}"
        )
    return model, manifest
