"""Toy rectified-flow diffusion model over codec latents.

Exists to produce fully and partially denoised latents: sampling can be
stopped after M of N Euler steps, returning the intermediate latent
together with its residual noise fraction ``1 - t_M``. Because the
corruption convention matches the decoder's latent-noise axis, such a
partial latent can be handed to the conditioned pixel decoder directly.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import torch
import torch.nn as nn

from .backbone import DiTBlock, TimeEmbed, pad_captions, rope_frequencies
from .errors import ConfigError, DomainError
from .flowmath import cfg_combine, sampling_times

Tensor = torch.Tensor


@dataclass
class BaseLdmConfig:
    latent_channels: int = 8
    hidden_dim: int = 96
    num_blocks: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    vocab_size: int = 24
    max_text_len: int = 8
    time_shift: float = 3.0

    def __post_init__(self) -> None:
        if self.hidden_dim % self.num_heads != 0:
            raise ConfigError("hidden_dim must be divisible by num_heads")
        if (self.hidden_dim // self.num_heads) % 4 != 0:
            raise ConfigError("head dimension must be divisible by 4 for axial rotary")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PartialLatent:
    """A latent stopped after ``steps_taken`` of ``steps_total`` steps."""

    latent: Tensor
    steps_taken: int
    steps_total: int
    residual_sigma: float

    def __post_init__(self) -> None:
        if not 1 <= self.steps_taken <= self.steps_total:
            raise DomainError(
                f"need 1 <= M <= N, got M={self.steps_taken}, N={self.steps_total}"
            )


class LatentFlowModel(nn.Module):
    """Plain DiT over per-cell latent tokens (patch size one)."""

    def __init__(self, config: BaseLdmConfig):
        super().__init__()
        self.config = config
        c = config
        self.token_in = nn.Linear(c.latent_channels, c.hidden_dim)
        self.text_embed = nn.Embedding(c.vocab_size, c.hidden_dim)
        nn.init.zeros_(self.text_embed.weight)
        self.time_embed = TimeEmbed(c.hidden_dim)
        self.blocks = nn.ModuleList(
            DiTBlock(c.hidden_dim, c.num_heads, c.hidden_dim, c.mlp_ratio)
            for _ in range(c.num_blocks)
        )
        self.out_norm = nn.LayerNorm(c.hidden_dim, elementwise_affine=False)
        self.out = nn.Linear(c.hidden_dim, c.latent_channels)
        nn.init.normal_(self.out.weight, std=0.02)
        nn.init.zeros_(self.out.bias)
        self._rope_cache: dict = {}

    def count_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _rope(self, gh: int, gw: int, dtype: torch.dtype):
        key = (gh, gw, dtype)
        if key not in self._rope_cache:
            c = self.config
            head_dim = c.hidden_dim // c.num_heads
            angles = rope_frequencies(gh, gw, head_dim, max(gh, gw), False).to(dtype)
            text = torch.zeros(c.max_text_len, head_dim // 2, dtype=dtype)
            alla = torch.cat([text, angles], dim=0)
            self._rope_cache[key] = (torch.cos(alla), torch.sin(alla))
        return self._rope_cache[key]

    def forward(self, z_t: Tensor, t, text=None) -> Tensor:
        c = self.config
        b, ch, h, w = z_t.shape
        if not torch.is_tensor(t):
            t = torch.tensor(float(t), dtype=z_t.dtype)
        t = t.to(z_t.dtype)
        if t.ndim == 0:
            t = t.expand(b)
        if text is None:
            text = [[] for _ in range(b)]
        if not torch.is_tensor(text):
            text = pad_captions(text, c.max_text_len)
        tokens = z_t.flatten(2).transpose(1, 2)  # (B, h*w, C)
        x = torch.cat([self.text_embed(text).to(z_t.dtype), self.token_in(tokens)], dim=1)
        temb = self.time_embed(t)
        rope = self._rope(h, w, x.dtype)
        for block in self.blocks:
            x = block(x, temb, rope=rope)
        out = self.out(self.out_norm(x[:, c.max_text_len :]))
        return out.transpose(1, 2).reshape(b, ch, h, w)


@torch.no_grad()
def sample_latent(
    model: LatentFlowModel,
    text,
    n_steps: int,
    stop_at: int,
    rng: torch.Generator,
    latent_shape: tuple[int, int, int],
    guidance: float = 1.0,
) -> PartialLatent:
    """Euler-integrate the latent flow through the first M of N steps.

    ``stop_at == n_steps`` yields a fully denoised latent with residual
    sigma exactly 0; smaller M returns the intermediate state and its
    residual noise fraction ``1 - t_M`` under the shifted schedule.
    """
    if not 1 <= stop_at <= n_steps:
        raise DomainError(f"need 1 <= M <= N, got M={stop_at}, N={n_steps}")
    times = sampling_times(n_steps, model.config.time_shift)
    ch, h, w = latent_shape
    texts = text if isinstance(text, list) and text and isinstance(text[0], list) else [text or []]
    b = len(texts)
    x = torch.randn(b, ch, h, w, generator=rng)
    empty = [[] for _ in range(b)]
    for k in range(stop_at):
        t_cur, t_next = times[k], times[k + 1]
        v = model(x, t_cur, texts)
        if guidance != 1.0:
            v = cfg_combine(v, model(x, t_cur, empty), guidance)
        x = x + (t_next - t_cur) * v
    return PartialLatent(
        latent=x,
        steps_taken=stop_at,
        steps_total=n_steps,
        residual_sigma=1.0 - times[stop_at],
    )
