"""Latent-conditioned decoder: pixel backbone plus injection adapter.

With a freshly initialized adapter the conditioned forward equals the
unconditional backbone forward exactly (the adapter heads output zero and
the gated addition contributes nothing), which is what lets decoder
training start from a pretrained pixel prior.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .adapter import AdapterConfig, LatentAdapter, as_sigma_tensor
from .backbone import BackboneConfig, PixelBackbone

Tensor = torch.Tensor


class LatentConditionedDecoder(nn.Module):
    def __init__(self, backbone_config: BackboneConfig, adapter_config: AdapterConfig):
        super().__init__()
        self.backbone = PixelBackbone(backbone_config)
        self.adapter = LatentAdapter(
            adapter_config, backbone_config.hidden_dim, backbone_config.num_blocks
        )

    @property
    def config(self) -> BackboneConfig:
        return self.backbone.config

    def count_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def load_prior(self, prior: PixelBackbone) -> None:
        """Adopt a trained pixel prior's weights as the starting point."""
        self.backbone.load_state_dict(prior.state_dict())

    def forward(
        self,
        x_t: Tensor,
        t,
        text,
        z_values: Tensor | None = None,
        sigma=0.0,
        drop_mask: Tensor | None = None,
        feature_tap: int | None = None,
    ):
        """Velocity prediction conditioned on a (possibly noisy) latent.

        ``z_values=None`` disables injection entirely and reduces to the
        unconditional prior, which is also how latent-condition dropout
        and latent-side guidance are realized.
        """
        if z_values is None:
            return self.backbone(x_t, t, text, injections=None, feature_tap=feature_tap)
        b = x_t.shape[0]
        p = self.backbone.config.patch_size
        grid = (x_t.shape[-2] // p, x_t.shape[-1] // p)
        sigma_vec = as_sigma_tensor(sigma, b, x_t)
        tokens = self.adapter.project_latent(z_values, sigma_vec, grid, drop_mask)
        hook = self.adapter.make_hook(tokens, sigma_vec)
        return self.backbone(x_t, t, text, injections=hook, feature_tap=feature_tap)
