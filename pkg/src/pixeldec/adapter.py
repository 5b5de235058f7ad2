"""Latent-conditioning pathway for the pixel backbone.

A noisy latent is nearest-neighbor resized to the backbone's patch grid,
passed through a small convolutional feature extractor (conv stem plus
pre-activation residual blocks with group norm), and projected by one
independent zero-initialized affine head per injection point. Injection
adds the projected tokens to the hidden image tokens, scaled elementwise
by a sigma-aware gate

    g = sigmoid(Affine([h, l]) - alpha * sigma),    alpha > 0,

whose affine is zero-initialized with bias 2.0 and whose alpha starts at
5, so a fresh adapter gates at sigmoid(2 - 5*sigma) while contributing
exactly zero to the backbone (the heads output zero). Positivity of alpha
is maintained by parameterizing it through a softplus.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import timestep_embedding
from .errors import ConfigError, DomainError, ShapeError

Tensor = torch.Tensor


@dataclass
class AdapterConfig:
    latent_channels: int = 8
    adapter_width: int = 64
    num_resblocks: int = 4
    injection_every: int = 2
    gate_alpha_init: float = 5.0
    gate_bias_init: float = 2.0
    groups: int = 4

    def __post_init__(self) -> None:
        if self.injection_every < 1:
            raise ConfigError("injection_every must be >= 1")
        if self.adapter_width % self.groups != 0:
            raise ConfigError("adapter_width must be divisible by the group count")
        if self.gate_alpha_init <= 0:
            raise ConfigError("alpha must start positive")

    def to_dict(self) -> dict:
        return asdict(self)


class PreActResBlock(nn.Module):
    def __init__(self, width: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, width)
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.norm2 = nn.GroupNorm(groups, width)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class ConvStem(nn.Module):
    def __init__(self, in_channels: int, width: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv2(F.silu(self.conv1(x)))


class LatentAdapter(nn.Module):
    """Projection stem, per-point heads and sigma-aware gates."""

    def __init__(self, config: AdapterConfig, hidden_dim: int, num_blocks: int):
        super().__init__()
        if num_blocks % config.injection_every != 0:
            raise ConfigError("num_blocks must be a multiple of injection_every")
        self.config = config
        self.hidden_dim = hidden_dim
        self.num_points = num_blocks // config.injection_every
        w = config.adapter_width

        self.stem = ConvStem(config.latent_channels, w)
        self.res_blocks: list[PreActResBlock] = []
        for k in range(config.num_resblocks):
            block = PreActResBlock(w, config.groups)
            self.add_module(f"res{k}", block)
            self.res_blocks.append(block)

        # sigma conditioning: sinusoidal embedding -> affine, added after the stem
        self.sigma_fc1 = nn.Linear(w, w)
        self.sigma_fc2 = nn.Linear(w, w)
        self.null_sigma_embed = nn.Parameter(torch.zeros(w))

        self.heads: list[nn.Linear] = []
        self.gates: list[nn.Linear] = []
        for i in range(self.num_points):
            head = nn.Linear(w, hidden_dim)
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)
            self.add_module(f"head{i}", head)
            self.heads.append(head)
            gate = nn.Linear(2 * hidden_dim, hidden_dim)
            nn.init.zeros_(gate.weight)
            nn.init.constant_(gate.bias, config.gate_bias_init)
            self.add_module(f"gate{i}", gate)
            self.gates.append(gate)

        # softplus(alpha) == gate_alpha_init at initialization
        self.alpha = nn.Parameter(
            torch.tensor(math.log(math.expm1(config.gate_alpha_init)))
        )

    # -- pieces ---------------------------------------------------------

    def alpha_value(self) -> Tensor:
        """The positive gate slope, softplus of the raw parameter."""
        return F.softplus(self.alpha)

    def _sigma_features(self, sigma: Tensor, null_mask: Tensor | None) -> Tensor:
        emb = timestep_embedding(sigma, self.config.adapter_width)
        emb = self.sigma_fc2(F.silu(self.sigma_fc1(emb)))
        if null_mask is not None and null_mask.any():
            null = self.null_sigma_embed.to(emb.dtype)[None, :].expand_as(emb)
            emb = torch.where(null_mask[:, None], null, emb)
        return emb

    def project_latent(
        self,
        z_values: Tensor,
        sigma: Tensor,
        target_grid: tuple[int, int],
        drop_mask: Tensor | None = None,
    ) -> list[Tensor]:
        """Per-injection-point tokens for a batch of noisy latents.

        ``z_values`` is (B, C, h, w); the latent is replicated up to
        ``target_grid`` with nearest-neighbor resizing, so the grid must be
        at least as large as the latent. All heads are zero-initialized:
        a fresh adapter returns exact zeros for any input.
        """
        gh, gw = target_grid
        b, _, h, w = z_values.shape
        if h > gh or w > gw:
            raise DomainError(f"latent {h}x{w} larger than token grid {gh}x{gw}")
        if not torch.isfinite(z_values).all():
            raise DomainError("latent contains non-finite values")
        x = F.interpolate(z_values, size=(gh, gw), mode="nearest")
        x = self.stem(x)
        x = x + self._sigma_features(sigma, drop_mask)[:, :, None, None]
        for block in self.res_blocks:
            x = block(x)
        flat = x.flatten(2).transpose(1, 2)  # (B, gh*gw, width)
        tokens = []
        for head in self.heads:
            l_i = head(flat)
            if drop_mask is not None and drop_mask.any():
                l_i = l_i * (~drop_mask)[:, None, None].to(l_i.dtype)
            tokens.append(l_i)
        return tokens

    def gate(self, h: Tensor, l: Tensor, sigma: Tensor, point: int) -> Tensor:
        """Sigma-aware gate, elementwise in (0, 1) and decreasing in sigma."""
        if h.shape != l.shape:
            raise ShapeError(f"gate: token shapes differ, {tuple(h.shape)} vs {tuple(l.shape)}")
        logits = self.gates[point](torch.cat([h, l], dim=-1))
        alpha = self.alpha_value().to(h.dtype)
        return torch.sigmoid(logits - alpha * sigma[:, None, None])

    def inject(self, h: Tensor, l: Tensor, sigma: Tensor, point: int) -> Tensor:
        """Gated additive injection ``h + g(h, l, sigma) * l``."""
        return h + self.gate(h, l, sigma, point) * l

    def make_hook(self, tokens: list[Tensor], sigma: Tensor):
        """Per-block hook for the backbone: injects every ``injection_every`` blocks."""
        every = self.config.injection_every

        def hook(block_index: int, h: Tensor) -> Tensor:
            if block_index % every != 0:
                return h
            point = block_index // every
            return self.inject(h, tokens[point], sigma, point)

        return hook


def as_sigma_tensor(sigma, batch: int, like: Tensor) -> Tensor:
    """Normalize scalar or per-sample sigma into a (B,) tensor in [0, 1]."""
    if not torch.is_tensor(sigma):
        sigma = torch.tensor(float(sigma), dtype=like.dtype, device=like.device)
    sigma = sigma.to(like.dtype)
    if sigma.ndim == 0:
        sigma = sigma.expand(batch)
    if torch.any(sigma < 0) or torch.any(sigma > 1):
        raise DomainError("sigma must lie in [0, 1]")
    return sigma
