"""Latent producers and the decode-then-upsample cascade baseline.

Two encoder families share the :class:`EncoderSpec` interface:

* a small trainable convolutional VAE (mean latent for conditioning, a
  sampling branch for training),
* a frozen randomly initialized convolutional pyramid standing in for a
  semantic vision encoder: deterministic, never trained, and carrying an
  identity hash derived from its weights.

The cascade baseline decodes a latent at base resolution and enlarges it
with bicubic interpolation; it is the reference pipeline the conditioned
pixel decoder is measured against.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DomainError, ShapeError

Tensor = torch.Tensor


@dataclass
class EncoderSpec:
    kind: str  # "vae" | "semantic"
    downsample_factor: int
    latent_channels: int
    id_hash: str

    def __post_init__(self) -> None:
        if self.kind not in ("vae", "semantic"):
            raise ConfigError(f"unknown encoder kind {self.kind!r}")
        if self.downsample_factor & (self.downsample_factor - 1) != 0:
            raise ConfigError("downsample_factor must be a power of two")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "downsample_factor": self.downsample_factor,
            "latent_channels": self.latent_channels,
            "id_hash": self.id_hash,
        }


@dataclass
class CascadeResult:
    x_dec: Tensor  # base-resolution decode
    x_up: Tensor  # bicubic s-times enlargement


def weights_digest(module: nn.Module) -> str:
    """sha256 over the module's parameters, stable across loads."""
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _check_divisible(img: Tensor, factor: int) -> None:
    if img.ndim != 4:
        raise ShapeError(f"expected (B, C, H, W), got {tuple(img.shape)}")
    if img.shape[-2] % factor or img.shape[-1] % factor:
        raise ShapeError(
            f"image sides {img.shape[-2]}x{img.shape[-1]} not divisible by {factor}"
        )


class ImageVae(nn.Module):
    """Small convolutional VAE with one stride-2 stage per factor of two."""

    def __init__(
        self,
        downsample_factor: int = 8,
        latent_channels: int = 8,
        base_width: int = 32,
        in_channels: int = 3,
    ):
        super().__init__()
        if downsample_factor < 2 or downsample_factor & (downsample_factor - 1):
            raise ConfigError("downsample_factor must be a power of two >= 2")
        self.downsample_factor = downsample_factor
        self.latent_channels = latent_channels
        levels = int(math.log2(downsample_factor))
        widths = [min(base_width * 2**i, 128) for i in range(levels + 1)]

        enc: list[nn.Module] = [nn.Conv2d(in_channels, widths[0], 3, padding=1)]
        for i in range(levels):
            enc += [
                nn.SiLU(),
                nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1),
                nn.SiLU(),
                nn.Conv2d(widths[i + 1], widths[i + 1], 3, padding=1),
            ]
        enc += [nn.SiLU(), nn.Conv2d(widths[-1], 2 * latent_channels, 1)]
        self.encoder = nn.Sequential(*enc)

        dec: list[nn.Module] = [nn.Conv2d(latent_channels, widths[-1], 1)]
        for i in reversed(range(levels)):
            dec += [
                nn.SiLU(),
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(widths[i + 1], widths[i], 3, padding=1),
                nn.SiLU(),
                nn.Conv2d(widths[i], widths[i], 3, padding=1),
            ]
        dec += [nn.SiLU(), nn.Conv2d(widths[0], in_channels, 3, padding=1)]
        self.decoder = nn.Sequential(*dec)

    def encode_posterior(self, img: Tensor) -> tuple[Tensor, Tensor]:
        _check_divisible(img, self.downsample_factor)
        mean, logvar = self.encoder(img).chunk(2, dim=1)
        return mean, logvar.clamp(-12.0, 6.0)

    def encode(self, img: Tensor) -> Tensor:
        """Deterministic mean latent, the conditioning path."""
        return self.encode_posterior(img)[0]

    def sample_posterior(self, mean: Tensor, logvar: Tensor, rng: torch.Generator) -> Tensor:
        noise = torch.randn(mean.shape, generator=rng, dtype=mean.dtype)
        return mean + torch.exp(0.5 * logvar) * noise

    def decode(self, z: Tensor) -> Tensor:
        if z.ndim != 4:
            raise ShapeError(f"expected (B, C, h, w) latent, got {tuple(z.shape)}")
        return torch.tanh(self.decoder(z))

    def spec(self) -> EncoderSpec:
        return EncoderSpec(
            kind="vae",
            downsample_factor=self.downsample_factor,
            latent_channels=self.latent_channels,
            id_hash=weights_digest(self),
        )


def kl_divergence(mean: Tensor, logvar: Tensor) -> Tensor:
    """Mean KL(N(mean, exp(logvar)) || N(0, 1)) per latent element."""
    return 0.5 * torch.mean(mean**2 + torch.exp(logvar) - 1.0 - logvar)


class SemanticEncoder(nn.Module):
    """Frozen random convolutional pyramid with patch pooling.

    Weights are drawn once from the seed and never trained; two calls on
    the same image give bit-identical latents and the identity hash
    changes exactly when the seed does.
    """

    def __init__(
        self,
        downsample_factor: int = 8,
        latent_channels: int = 8,
        in_channels: int = 3,
        seed: int = 0,
    ):
        super().__init__()
        if downsample_factor < 2 or downsample_factor & (downsample_factor - 1):
            raise ConfigError("downsample_factor must be a power of two >= 2")
        self.downsample_factor = downsample_factor
        self.latent_channels = latent_channels
        self.seed = seed
        levels = int(math.log2(downsample_factor))
        widths = [in_channels] + [min(16 * 2**i, 64) for i in range(levels)]
        layers: list[nn.Module] = []
        for i in range(levels):
            layers += [nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1), nn.SiLU()]
        layers.append(nn.Conv2d(widths[-1], latent_channels, 1))
        self.pyramid = nn.Sequential(*layers)

        gen = torch.Generator().manual_seed(seed)
        for p in self.parameters():
            with torch.no_grad():
                p.copy_(torch.randn(p.shape, generator=gen) * (1.2 / math.sqrt(max(1, p[0].numel()))))
            p.requires_grad_(False)
        self.eval()

    @torch.no_grad()
    def encode(self, img: Tensor) -> Tensor:
        _check_divisible(img, self.downsample_factor)
        return self.pyramid(img)

    forward = encode

    def spec(self) -> EncoderSpec:
        return EncoderSpec(
            kind="semantic",
            downsample_factor=self.downsample_factor,
            latent_channels=self.latent_channels,
            id_hash=weights_digest(self),
        )


def cascade_upsample(z: Tensor, s: int, vae: ImageVae) -> CascadeResult:
    """Decode at base resolution, then bicubic-enlarge by ``s``."""
    if s not in (1, 2, 4, 8):
        raise DomainError(f"upsampling factor must be in {{1, 2, 4, 8}}, got {s}")
    x_dec = vae.decode(z)
    if s == 1:
        return CascadeResult(x_dec=x_dec, x_up=x_dec)
    x_up = F.interpolate(x_dec, scale_factor=s, mode="bicubic", align_corners=False)
    return CascadeResult(x_dec=x_dec, x_up=x_up.clamp(-1.0, 1.0))
