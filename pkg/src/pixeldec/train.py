"""Training loops for the codec, the pixel prior, the conditioned decoder
and the base latent model.

All randomness flows through named per-purpose generator streams derived
from the run seed, so runs are bit-reproducible on CPU and ablations that
skip a stream (for example disabling latent dropout) leave every other
draw unchanged. Losses are logged as (step, loss, lr, ema_decay) rows;
a non-finite loss aborts with :class:`TrainingDiverged` rather than
continuing silently.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, asdict

import torch
import torch.nn.functional as F

from .adapter import AdapterConfig
from .backbone import BackboneConfig, PixelBackbone
from .base_ldm import BaseLdmConfig, LatentFlowModel
from .codecs import ImageVae, kl_divergence
from .data import Corpus
from .decoder import LatentConditionedDecoder
from .errors import CheckpointError, ConfigError, TrainingDiverged
from .flowmath import shift_time

Tensor = torch.Tensor


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr: float = 5e-5
    steps: int = 2000
    time_shift: float = 6.0
    sigma_max: float = 0.8
    caption_dropout: float = 0.1
    latent_dropout: float = 0.1
    ema_decay: float = 0.999
    freeze_backbone: bool = False
    seed: int = 0
    weight_decay: float = 0.0
    scale: int = 4
    precision: str = "float32"
    log_every: int = 1

    def __post_init__(self) -> None:
        if not 0.0 <= self.caption_dropout < 1.0 or not 0.0 <= self.latent_dropout <= 1.0:
            raise ConfigError("dropout rates must lie in [0, 1)")
        if not 0.0 < self.ema_decay < 1.0:
            raise ConfigError("ema_decay must lie in (0, 1)")
        if self.batch_size < 1 or self.steps < 0 or self.lr <= 0:
            raise ConfigError("batch_size, steps and lr must be positive")
        if not 0.0 < self.sigma_max <= 1.0:
            raise ConfigError("sigma_max must lie in (0, 1]")
        if self.time_shift < 1.0:
            raise ConfigError("time_shift must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("precision must be float32 or float64")

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == "float64" else torch.float32


class SeedStreams:
    """Named, independent torch generators derived from one seed."""

    def __init__(self, seed: int):
        self.seed = seed
        self._streams: dict[str, torch.Generator] = {}

    def stream(self, name: str) -> torch.Generator:
        if name not in self._streams:
            digest = hashlib.sha256(f"{self.seed}:{name}".encode()).digest()
            sub_seed = int.from_bytes(digest[:8], "little") % (2**63)
            gen = torch.Generator()
            gen.manual_seed(sub_seed)
            self._streams[name] = gen
        return self._streams[name]


@dataclass
class LossRow:
    step: int
    loss: float
    lr: float
    ema_decay: float


@dataclass
class TrainResult:
    model: torch.nn.Module
    ema_state: dict[str, Tensor]
    loss_log: list[LossRow]
    config: TrainConfig
    eval_loss_start: float = float("nan")
    eval_loss_end: float = float("nan")
    extras: dict = field(default_factory=dict)


def write_loss_csv(rows: list[LossRow], path) -> None:
    with open(path, "w") as fh:
        fh.write("step,loss,lr,ema_decay\n")
        for r in rows:
            fh.write(f"{r.step},{r.loss:.10g},{r.lr:.10g},{r.ema_decay:.10g}\n")


# ---------------------------------------------------------------------------
# EMA


def ema_update(
    ema_params: dict[str, Tensor], raw_params: dict[str, Tensor], decay: float
) -> dict[str, Tensor]:
    """One step ``ema <- decay * ema + (1 - decay) * raw`` per tensor."""
    if set(ema_params) != set(raw_params):
        missing = set(ema_params) ^ set(raw_params)
        raise CheckpointError(f"EMA/raw tensor name sets differ: {sorted(missing)[:4]}")
    out = {}
    for name, ema in ema_params.items():
        raw = raw_params[name]
        if ema.is_floating_point():
            out[name] = decay * ema + (1.0 - decay) * raw
        else:
            out[name] = raw.clone()
    return out


class EmaTracker:
    def __init__(self, module: torch.nn.Module, decay: float):
        self.decay = decay
        self.state = {k: v.detach().clone() for k, v in module.state_dict().items()}

    def update(self, module: torch.nn.Module) -> None:
        raw = {k: v.detach() for k, v in module.state_dict().items()}
        self.state = ema_update(self.state, raw, self.decay)


# ---------------------------------------------------------------------------
# batch plumbing


def downsample_by(img: Tensor, s: int) -> Tensor:
    """Area downsampling by an integer factor, used to build source images."""
    if s == 1:
        return img
    return F.avg_pool2d(img, kernel_size=s)


def dropout_masks(
    streams: SeedStreams, batch: int, caption_p: float, latent_p: float
) -> tuple[Tensor, Tensor]:
    """Independent Bernoulli dropout masks from dedicated streams."""
    cap = torch.rand(batch, generator=streams.stream("caption_drop")) < caption_p
    lat = torch.rand(batch, generator=streams.stream("latent_drop")) < latent_p
    return cap, lat


class CorpusBatcher:
    """Bucket-aware uniform sampler over a corpus, deterministic per stream."""

    def __init__(self, corpus: Corpus, dtype: torch.dtype = torch.float32):
        self.by_shape: dict[tuple[int, int], list[int]] = {}
        for i, s in enumerate(corpus.samples):
            self.by_shape.setdefault(tuple(s.image.shape[-2:]), []).append(i)
        self.shapes = sorted(self.by_shape)
        self.corpus = corpus
        self.dtype = dtype

    def draw(self, batch: int, gen: torch.Generator) -> tuple[Tensor, list[list[int]], list[int]]:
        shape = self.shapes[int(torch.randint(len(self.shapes), (1,), generator=gen))]
        pool = self.by_shape[shape]
        picks = torch.randint(len(pool), (batch,), generator=gen)
        idx = [pool[int(i)] for i in picks]
        images = torch.stack([self.corpus.samples[i].image for i in idx]).to(self.dtype)
        captions = [list(self.corpus.samples[i].caption_tokens) for i in idx]
        return images, captions, idx


def flow_matching_batch(
    images: Tensor, streams: SeedStreams, time_shift: float
) -> tuple[Tensor, Tensor, Tensor]:
    """Draw (x_t, t, target) for one rectified-flow step."""
    b = images.shape[0]
    u = torch.rand(b, generator=streams.stream("time"), dtype=images.dtype)
    t = shift_time(u, time_shift)
    eps = torch.randn(images.shape, generator=streams.stream("noise"), dtype=images.dtype)
    t_b = t.view(-1, *([1] * (images.ndim - 1)))
    x_t = t_b * images + (1.0 - t_b) * eps
    return x_t, t, images - eps


def _apply_caption_dropout(captions: list[list[int]], mask: Tensor) -> list[list[int]]:
    return [[] if bool(m) else c for c, m in zip(captions, mask)]


def _check_finite(loss: Tensor, step: int) -> None:
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {loss.item()!r} at step {step}")


# ---------------------------------------------------------------------------
# stage trainers


def train_vae(corpus_images: Tensor, vae: ImageVae, config: TrainConfig) -> TrainResult:
    """Reconstruction (L2) + small KL on a stack of same-size images."""
    streams = SeedStreams(config.seed)
    opt = torch.optim.Adam(vae.parameters(), lr=config.lr)
    kl_weight = 1e-4
    rows: list[LossRow] = []
    n = corpus_images.shape[0]
    for step in range(config.steps):
        idx = torch.randint(n, (config.batch_size,), generator=streams.stream("data"))
        x = corpus_images[idx]
        mean, logvar = vae.encode_posterior(x)
        z = vae.sample_posterior(mean, logvar, streams.stream("posterior"))
        recon = vae.decode(z)
        loss = F.mse_loss(recon, x) + kl_weight * kl_divergence(mean, logvar)
        _check_finite(loss, step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        rows.append(LossRow(step, loss.item(), config.lr, config.ema_decay))
    return TrainResult(model=vae, ema_state={}, loss_log=rows, config=config)


def _eval_fm_loss(model, batcher: CorpusBatcher, config: TrainConfig, *, decoder_inputs=None) -> float:
    """FM loss on a fixed evaluation batch (its own streams, so the
    training draw sequence is untouched)."""
    streams = SeedStreams(config.seed + 104729)
    images, captions, _ = batcher.draw(config.batch_size, streams.stream("data"))
    x_t, t, target = flow_matching_batch(images, streams, config.time_shift)
    with torch.no_grad():
        if decoder_inputs is None:
            v = model(x_t, t, captions)
        else:
            codec, scale, sigma_max = decoder_inputs
            source = downsample_by(images, scale)
            z = codec.encode(source)
            sigma = sigma_max * torch.rand(
                images.shape[0], generator=streams.stream("sigma"), dtype=images.dtype
            )
            xi = torch.randn(z.shape, generator=streams.stream("latent_noise"), dtype=z.dtype)
            z_noisy = (1.0 - sigma.view(-1, 1, 1, 1)) * z + sigma.view(-1, 1, 1, 1) * xi
            v = model(x_t, t, captions, z_noisy, sigma)
        return F.mse_loss(v, target).item()


def train_prior(
    corpus: Corpus, config: TrainConfig, backbone_config: BackboneConfig
) -> TrainResult:
    """Stage one: the unconditional (text-only) pixel prior."""
    torch.manual_seed(config.seed)
    model = PixelBackbone(backbone_config).to(config.dtype)
    return _train_velocity_model(model, corpus, config, codec=None)


def train_decoder(
    prior_state: dict[str, Tensor] | None,
    codec: ImageVae,
    corpus: Corpus,
    config: TrainConfig,
    backbone_config: BackboneConfig,
    adapter_config: AdapterConfig,
) -> TrainResult:
    """Stage two: latent-conditioned fine-tuning from the prior."""
    torch.manual_seed(config.seed)
    model = LatentConditionedDecoder(backbone_config, adapter_config).to(config.dtype)
    if prior_state is not None:
        model.backbone.load_state_dict(prior_state)
    codec = codec.to(config.dtype)
    for p in codec.parameters():
        p.requires_grad_(False)
    return _train_velocity_model(model, corpus, config, codec=codec)


def _train_velocity_model(model, corpus: Corpus, config: TrainConfig, codec) -> TrainResult:
    is_decoder = codec is not None
    streams = SeedStreams(config.seed)
    batcher = CorpusBatcher(corpus, dtype=config.dtype)

    if is_decoder and config.freeze_backbone:
        for p in model.backbone.parameters():
            p.requires_grad_(False)
        trainable = list(model.adapter.parameters())
    else:
        trainable = list(model.parameters())
    opt = torch.optim.AdamW(trainable, lr=config.lr, weight_decay=config.weight_decay)
    ema = EmaTracker(model, config.ema_decay)

    decoder_inputs = (codec, config.scale, config.sigma_max) if is_decoder else None
    eval_start = _eval_fm_loss(model, batcher, config, decoder_inputs=decoder_inputs)

    rows: list[LossRow] = []
    for step in range(config.steps):
        images, captions, _ = batcher.draw(config.batch_size, streams.stream("data"))
        cap_mask, lat_mask = dropout_masks(
            streams, images.shape[0], config.caption_dropout, config.latent_dropout
        )
        captions = _apply_caption_dropout(captions, cap_mask)
        x_t, t, target = flow_matching_batch(images, streams, config.time_shift)

        if is_decoder:
            with torch.no_grad():
                source = downsample_by(images, config.scale)
                z = codec.encode(source)
                sigma = config.sigma_max * torch.rand(
                    images.shape[0], generator=streams.stream("sigma"), dtype=images.dtype
                )
                xi = torch.randn(
                    z.shape, generator=streams.stream("latent_noise"), dtype=z.dtype
                )
                s_b = sigma.view(-1, 1, 1, 1)
                z_noisy = (1.0 - s_b) * z + s_b * xi
                sigma_eff = torch.where(lat_mask, torch.ones_like(sigma), sigma)
            v = model(x_t, t, captions, z_noisy, sigma_eff, drop_mask=lat_mask)
        else:
            v = model(x_t, t, captions)

        loss = F.mse_loss(v, target)
        _check_finite(loss, step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        ema.update(model)
        if step % config.log_every == 0 or step == config.steps - 1:
            rows.append(LossRow(step, loss.item(), config.lr, config.ema_decay))

    eval_end = _eval_fm_loss(model, batcher, config, decoder_inputs=decoder_inputs)
    return TrainResult(
        model=model,
        ema_state=ema.state,
        loss_log=rows,
        config=config,
        eval_loss_start=eval_start,
        eval_loss_end=eval_end,
    )


def train_base_ldm(
    corpus: Corpus,
    codec: ImageVae,
    config: TrainConfig,
    ldm_config: BaseLdmConfig,
) -> TrainResult:
    """Flow matching over codec latents of the downsampled sources."""
    torch.manual_seed(config.seed)
    model = LatentFlowModel(ldm_config).to(config.dtype)
    codec = codec.to(config.dtype)
    streams = SeedStreams(config.seed)
    batcher = CorpusBatcher(corpus, dtype=config.dtype)
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    ema = EmaTracker(model, config.ema_decay)

    def eval_loss() -> float:
        ev = SeedStreams(config.seed + 104729)
        images, captions, _ = batcher.draw(config.batch_size, ev.stream("data"))
        with torch.no_grad():
            z = codec.encode(downsample_by(images, config.scale))
            z_t, t, target = flow_matching_batch(z, ev, ldm_config.time_shift)
            return F.mse_loss(model(z_t, t, captions), target).item()

    eval_start = eval_loss()
    rows: list[LossRow] = []
    for step in range(config.steps):
        images, captions, _ = batcher.draw(config.batch_size, streams.stream("data"))
        cap_mask, _ = dropout_masks(streams, images.shape[0], config.caption_dropout, 0.0)
        captions = _apply_caption_dropout(captions, cap_mask)
        with torch.no_grad():
            z = codec.encode(downsample_by(images, config.scale))
        z_t, t, target = flow_matching_batch(z, streams, ldm_config.time_shift)
        loss = F.mse_loss(model(z_t, t, captions), target)
        _check_finite(loss, step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        ema.update(model)
        if step % config.log_every == 0 or step == config.steps - 1:
            rows.append(LossRow(step, loss.item(), config.lr, config.ema_decay))
    return TrainResult(
        model=model,
        ema_state=ema.state,
        loss_log=rows,
        config=config,
        eval_loss_start=eval_start,
        eval_loss_end=eval_loss(),
    )
