"""Pixel-space diffusion transformer prior.

The backbone predicts the rectified-flow velocity for a noisy image given
the interpolation time and a short token caption. Architecture:

* images are split into ``patch_size`` square patches and linearly
  embedded; caption tokens come from a learned embedding table that is
  zero-initialized, so at initialization every caption (including the
  empty one) produces the same output,
* joint attention over the concatenated [text, image] token streams with
  axial rotary position encoding on the image tokens; when a grid side
  exceeds the reference side, the rotary frequency base is rescaled
  NTK-style by ``k ** (d / (d - 2))``,
* per-block adaptive layer-scale modulation (shift/scale/gate) driven by
  a sinusoidal embedding of the timestep, zero-initialized so each block
  starts as the identity,
* a pixel head that re-expands patch tokens into narrow per-pixel tokens,
  runs two small transformer blocks with attention inside each patch, and
  projects to per-pixel velocities.

Optional per-block additive injection hooks are the seam used by the
latent-conditioning adapter; with no hooks installed the module is an
unconditional text-to-image prior.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DomainError, ShapeError

Tensor = torch.Tensor

ROPE_BASE = 10000.0


@dataclass
class BackboneConfig:
    patch_size: int = 4
    hidden_dim: int = 128
    num_blocks: int = 8
    num_heads: int = 4
    pixel_head_blocks: int = 2
    pixel_token_dim: int = 16
    pixel_head_heads: int = 2
    mlp_ratio: float = 4.0
    rope_reference_side: int = 32
    rope_ntk_enabled: bool = True
    vocab_size: int = 24
    max_text_len: int = 8
    time_shift: float = 6.0
    in_channels: int = 3

    def __post_init__(self) -> None:
        if self.hidden_dim % self.num_heads != 0:
            raise ConfigError("hidden_dim must be divisible by num_heads")
        head_dim = self.hidden_dim // self.num_heads
        if head_dim % 2 != 0:
            raise ConfigError("head dimension must be even for rotary pairs")
        if self.num_blocks % 2 != 0:
            raise ConfigError("num_blocks must be even")
        if self.pixel_token_dim % self.pixel_head_heads != 0:
            raise ConfigError("pixel_token_dim must be divisible by pixel_head_heads")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)


def paper_scale_config() -> BackboneConfig:
    """Published-scale preset, for documentation parity only."""
    return BackboneConfig(
        patch_size=16,
        hidden_dim=1536,
        num_blocks=14,
        num_heads=24,
        pixel_head_blocks=2,
        pixel_token_dim=16,
        rope_reference_side=1024,
        vocab_size=256000,
        max_text_len=300,
        time_shift=6.0,
    )


# ---------------------------------------------------------------------------
# patch rearrangement


def patchify_pixels(img: Tensor, patch_size: int) -> tuple[Tensor, int, int]:
    """Rearrange (B, C, H, W) into flat patch vectors (B, N, C*p*p)."""
    if img.ndim != 4:
        raise ShapeError(f"expected (B, C, H, W), got {tuple(img.shape)}")
    b, c, h, w = img.shape
    p = patch_size
    if h % p != 0 or w % p != 0:
        raise ShapeError(f"image sides {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = img.reshape(b, c, gh, p, gw, p)
    x = x.permute(0, 2, 4, 1, 3, 5).reshape(b, gh * gw, c * p * p)
    return x, gh, gw


def unpatchify_pixels(tokens: Tensor, grid_h: int, grid_w: int, patch_size: int, channels: int) -> Tensor:
    """Inverse of :func:`patchify_pixels`."""
    b, n, d = tokens.shape
    p = patch_size
    if n != grid_h * grid_w or d != channels * p * p:
        raise ShapeError("token grid does not match the requested image shape")
    x = tokens.reshape(b, grid_h, grid_w, channels, p, p)
    x = x.permute(0, 3, 1, 4, 2, 5).reshape(b, channels, grid_h * p, grid_w * p)
    return x


# ---------------------------------------------------------------------------
# rotary position encoding


def ntk_base_multiplier(k: float, d: int) -> float:
    """Frequency-base rescaling ``k ** (d / (d - 2))`` for extrapolation factor k."""
    if d <= 2:
        raise ConfigError(f"per-axis rotary dimension must exceed 2, got {d}")
    if k <= 1.0:
        return 1.0
    return float(k ** (d / (d - 2)))


def rope_frequencies(
    grid_h: int,
    grid_w: int,
    head_dim: int,
    reference_side: int,
    ntk_enabled: bool,
    base: float = ROPE_BASE,
    dtype: torch.dtype = torch.float64,
) -> Tensor:
    """Axial rotary angles for every grid position.

    Returns ``(grid_h * grid_w, head_dim // 2)`` angles: the first half of
    the channel pairs encode the row coordinate, the second half the
    column coordinate. ``reference_side`` is in grid units; a grid side
    beyond it triggers the NTK base rescale for that axis.
    """
    if head_dim % 4 != 0:
        raise ConfigError(f"head_dim must be divisible by 4 for axial rotary, got {head_dim}")
    d_axis = head_dim // 2
    n_freq = d_axis // 2

    def axis_angles(size: int) -> Tensor:
        b = base
        if ntk_enabled and size > reference_side:
            b = base * ntk_base_multiplier(size / reference_side, d_axis)
        freqs = b ** (-torch.arange(n_freq, dtype=dtype) * 2.0 / d_axis)
        pos = torch.arange(size, dtype=dtype)
        return pos[:, None] * freqs[None, :]

    rows = axis_angles(grid_h)  # (gh, n_freq)
    cols = axis_angles(grid_w)  # (gw, n_freq)
    row_part = rows[:, None, :].expand(grid_h, grid_w, n_freq)
    col_part = cols[None, :, :].expand(grid_h, grid_w, n_freq)
    return torch.cat([row_part, col_part], dim=-1).reshape(grid_h * grid_w, d_axis)


def apply_rotary(x: Tensor, cos: Tensor, sin: Tensor) -> Tensor:
    """Rotate channel pairs of ``x`` (..., T, D) by per-position angles."""
    x1 = x[..., 0::2]
    x2 = x[..., 1::2]
    out = torch.empty_like(x)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos
    return out


# ---------------------------------------------------------------------------
# building blocks


def timestep_embedding(t: Tensor, dim: int, max_period: float = 10000.0) -> Tensor:
    """Sinusoidal embedding of a [0, 1] scalar, scaled by 1000 internally."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=t.dtype, device=t.device) / half
    )
    args = 1000.0 * t[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2 == 1:
        emb = F.pad(emb, (0, 1))
    return emb


class TimeEmbed(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)
        self.dim = dim

    def forward(self, t: Tensor) -> Tensor:
        return self.fc2(F.silu(self.fc1(timestep_embedding(t, self.dim))))


class DiTBlock(nn.Module):
    """Pre-norm transformer block with adaptive layer-scale modulation.

    The modulation projection is zero-initialized, so shift = scale =
    gate = 0 and the block is the identity map at initialization.
    """

    def __init__(self, dim: int, heads: int, temb_dim: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        hidden = int(dim * mlp_ratio)
        self.mlp_fc1 = nn.Linear(dim, hidden)
        self.mlp_fc2 = nn.Linear(hidden, dim)
        self.modulation = nn.Linear(temb_dim, 6 * dim)
        nn.init.zeros_(self.modulation.weight)
        nn.init.zeros_(self.modulation.bias)

    def forward(self, x: Tensor, temb: Tensor, rope: tuple[Tensor, Tensor] | None = None) -> Tensor:
        b, t, d = x.shape
        shift1, scale1, gate1, shift2, scale2, gate2 = (
            self.modulation(F.silu(temb))[:, None, :].chunk(6, dim=-1)
        )
        h = self.norm1(x) * (1 + scale1) + shift1
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        hd = d // self.heads
        q = q.view(b, t, self.heads, hd).transpose(1, 2)
        k = k.view(b, t, self.heads, hd).transpose(1, 2)
        v = v.view(b, t, self.heads, hd).transpose(1, 2)
        if rope is not None:
            cos, sin = rope  # (T, hd//2) broadcast over batch and heads
            q = apply_rotary(q, cos, sin)
            k = apply_rotary(k, cos, sin)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)
        h = (attn @ v).transpose(1, 2).reshape(b, t, d)
        x = x + gate1 * self.proj(h)
        h = self.norm2(x) * (1 + scale2) + shift2
        x = x + gate2 * self.mlp_fc2(F.silu(self.mlp_fc1(h)))
        return x


def pad_captions(captions: list[list[int]], max_len: int, device=None) -> Tensor:
    """Pad token id lists to a fixed (B, max_len) LongTensor with PAD=0."""
    out = torch.zeros(len(captions), max_len, dtype=torch.long, device=device)
    for i, toks in enumerate(captions):
        if len(toks) > max_len:
            raise DomainError(f"caption length {len(toks)} exceeds max_text_len={max_len}")
        if toks:
            out[i, : len(toks)] = torch.as_tensor(toks, dtype=torch.long, device=device)
    return out


class PixelBackbone(nn.Module):
    """Velocity-field transformer over pixels; see module docstring."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        c = config
        p = c.patch_size
        self.patch_in = nn.Linear(c.in_channels * p * p, c.hidden_dim)
        self.text_embed = nn.Embedding(c.vocab_size, c.hidden_dim)
        nn.init.zeros_(self.text_embed.weight)  # captions are invisible at init
        self.time_embed = TimeEmbed(c.hidden_dim)
        self.blocks = nn.ModuleList(
            DiTBlock(c.hidden_dim, c.num_heads, c.hidden_dim, c.mlp_ratio)
            for _ in range(c.num_blocks)
        )
        self.pixel_proj = nn.Linear(c.hidden_dim, p * p * c.pixel_token_dim)
        self.pixel_blocks = nn.ModuleList(
            DiTBlock(c.pixel_token_dim, c.pixel_head_heads, c.hidden_dim, c.mlp_ratio)
            for _ in range(c.pixel_head_blocks)
        )
        self.out_norm = nn.LayerNorm(c.pixel_token_dim, elementwise_affine=False)
        self.out = nn.Linear(c.pixel_token_dim, c.in_channels)
        nn.init.normal_(self.out.weight, std=0.02)
        nn.init.zeros_(self.out.bias)
        self._rope_cache: dict = {}

    # -- helpers ---------------------------------------------------------

    def rope_for_grid(self, grid_h: int, grid_w: int, dtype: torch.dtype) -> tuple[Tensor, Tensor]:
        c = self.config
        ref = c.rope_reference_side // c.patch_size
        key = (grid_h, grid_w, dtype)
        if key not in self._rope_cache:
            angles = rope_frequencies(
                grid_h, grid_w, c.head_dim, ref, c.rope_ntk_enabled
            ).to(dtype)
            text_angles = torch.zeros(c.max_text_len, c.head_dim // 2, dtype=dtype)
            all_angles = torch.cat([text_angles, angles], dim=0)
            self._rope_cache[key] = (torch.cos(all_angles), torch.sin(all_angles))
        return self._rope_cache[key]

    def count_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _as_batch_time(self, t, batch: int, like: Tensor) -> Tensor:
        if not torch.is_tensor(t):
            t = torch.tensor(float(t), dtype=like.dtype, device=like.device)
        t = t.to(like.dtype)
        if t.ndim == 0:
            t = t.expand(batch)
        if torch.any(t < 0) or torch.any(t > 1):
            raise DomainError("t must lie in [0, 1]")
        return t

    # -- forward ---------------------------------------------------------

    def forward(
        self,
        x_t: Tensor,
        t,
        text: Tensor | list[list[int]] | None = None,
        injections=None,
        feature_tap: int | None = None,
    ):
        """Predict the velocity field for a batch of noisy images.

        ``injections`` is an optional callable ``(point_index, image_tokens)
        -> image_tokens`` applied before every ``injection_every``-th block
        by the conditioned decoder; ``feature_tap`` returns the hidden
        image tokens after that block index alongside the output.
        """
        c = self.config
        if not torch.isfinite(x_t).all():
            raise DomainError("x_t contains non-finite values")
        b = x_t.shape[0]
        t_vec = self._as_batch_time(t, b, x_t)
        if text is None:
            text = [[] for _ in range(b)]
        if not torch.is_tensor(text):
            text = pad_captions(text, c.max_text_len, device=x_t.device)
        if text.shape[1] != c.max_text_len:
            raise DomainError(f"text must be padded to {c.max_text_len} tokens")
        if int(text.max()) >= c.vocab_size:
            raise DomainError("token id out of vocabulary range")

        tokens, gh, gw = patchify_pixels(x_t, c.patch_size)
        img = self.patch_in(tokens)
        txt = self.text_embed(text).to(img.dtype)
        temb = self.time_embed(t_vec)
        x = torch.cat([txt, img], dim=1)
        rope = self.rope_for_grid(gh, gw, x.dtype)

        n_text = c.max_text_len
        features = None
        for i, block in enumerate(self.blocks):
            if injections is not None:
                img_part = injections(i, x[:, n_text:])
                x = torch.cat([x[:, :n_text], img_part], dim=1)
            x = block(x, temb, rope=rope)
            if feature_tap is not None and i == feature_tap:
                features = x[:, n_text:]

        img_tokens = x[:, n_text:]
        p = c.patch_size
        px = self.pixel_proj(img_tokens)  # (B, N, p*p*pixel_dim)
        n_patches = gh * gw
        px = px.view(b * n_patches, p * p, c.pixel_token_dim)
        temb_px = temb.repeat_interleave(n_patches, dim=0)
        for block in self.pixel_blocks:
            px = block(px, temb_px, rope=None)
        px = self.out(self.out_norm(px))  # (B*N, p*p, C)
        px = px.transpose(1, 2).reshape(b, n_patches, c.in_channels * p * p)
        velocity = unpatchify_pixels(px, gh, gw, p, c.in_channels)
        if feature_tap is not None:
            return velocity, features
        return velocity
