"""Few-step distillation with distribution matching.

Three parameter sets take part:

* the frozen multi-step **teacher**,
* the **student**, initialized from the teacher, sampled with a short
  fixed sigma schedule (four steps by default) and a single forward per
  step (guidance is distilled in, so there is no separate unconditional
  pass),
* the **fake score**, also initialized from the teacher, fit to the
  student's own output distribution by denoising score matching.

The student's distribution-matching gradient is the fake-minus-teacher
score discrepancy evaluated at a re-noised probe point, converted to
sample space and normalized per sample by the mean absolute gap between
the generated sample and the teacher's denoised estimate. An optional
adversarial head on mid-depth fake-score features adds a non-saturating
GAN term with R1 gradient penalty on the real branch; the whole pathway
is removable by setting its weight to zero without perturbing any other
draw or update (every loss has its own generator streams).

Updates alternate: the fake side trains on every step, the student every
``fake_update_ratio``-th step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import timestep_embedding
from .errors import ConfigError, TrainingDiverged
from .flowmath import SigmaSchedule, sampling_times, shift_time
from .train import SeedStreams

Tensor = torch.Tensor


@dataclass
class DistillConfig:
    student_sigmas: SigmaSchedule = field(default_factory=SigmaSchedule)
    dmd_weight: float = 1.0
    dsm_weight: float = 1.0
    gan_weight: float = 0.05
    r1_weight: float = 200.0
    lr: float = 1e-5
    weight_decay: float = 1e-3
    guidance_weight_teacher: float = 3.0
    fake_update_ratio: int = 5
    batch_size: int = 16
    steps: int = 1000
    seed: int = 0
    time_shift: float = 1.0  # probe/DSM time distribution
    dmd_enabled: bool = True
    dsm_enabled: bool = True
    gan_enabled: bool = True
    r1_enabled: bool = True

    def __post_init__(self) -> None:
        for name in ("dmd_weight", "dsm_weight", "gan_weight", "r1_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.fake_update_ratio < 1:
            raise ConfigError("fake_update_ratio must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["student_sigmas"] = list(self.student_sigmas.sigmas)
        return d


class CallCounter:
    """Wraps a velocity function and counts invocations."""

    def __init__(self, fn: Callable):
        self.fn = fn
        self.count = 0

    def __call__(self, *args, **kwargs):
        self.count += 1
        return self.fn(*args, **kwargs)


def sample_with_schedule(
    velocity_fn: Callable[[Tensor, Tensor], Tensor],
    x_init: Tensor,
    schedule: SigmaSchedule,
) -> Tensor:
    """Euler-integrate along the schedule's time grid to t = 1."""
    times = schedule.to_times()
    x = x_init
    b = x.shape[0]
    for t_cur, t_next in zip(times, times[1:]):
        t_vec = torch.full((b,), t_cur, dtype=x.dtype)
        x = x + (t_next - t_cur) * velocity_fn(x, t_vec)
    return x


def student_generate(
    decoder,
    z_sigma,
    text,
    target_hw: tuple[int, int],
    rng: torch.Generator,
    schedule: SigmaSchedule | None = None,
    counter: CallCounter | None = None,
    channels: int = 3,
) -> Tensor:
    """Few-step decode: draw pixel noise, integrate the student's velocity
    through the schedule with one conditional forward per step."""
    schedule = schedule or SigmaSchedule()
    b = z_sigma.values.shape[0]
    x = torch.randn(
        (b, channels, target_hw[0], target_hw[1]),
        generator=rng,
        dtype=z_sigma.values.dtype,
    )
    texts = text if text and isinstance(text[0], list) else [text or []] * b

    def velocity(x_t: Tensor, t_vec: Tensor) -> Tensor:
        return decoder(x_t, t_vec, texts, z_sigma.values, z_sigma.sigma)

    fn = counter if counter is not None else velocity
    if counter is not None:
        counter.fn = velocity
    with torch.no_grad():
        out = sample_with_schedule(fn, x, schedule)
    return out.clamp(-1.0, 1.0)


# ---------------------------------------------------------------------------
# losses


def dmd_generator_loss(
    x_gen: Tensor,
    t_probe: Tensor,
    noise: Tensor,
    teacher_velocity: Callable[[Tensor, Tensor], Tensor],
    fake_velocity: Callable[[Tensor, Tensor], Tensor],
    eps: float = 1e-6,
) -> Tensor:
    """Distribution-matching surrogate whose gradient on ``x_gen`` is the
    normalized (fake - teacher) score discrepancy; exactly zero if the two
    scores agree everywhere."""
    t_b = t_probe.view(-1, *([1] * (x_gen.ndim - 1)))
    with torch.no_grad():
        x_probe = t_b * x_gen + (1.0 - t_b) * noise
        v_real = teacher_velocity(x_probe, t_probe)
        v_fake = fake_velocity(x_probe, t_probe)
        # convert the velocity gap to sample space and normalize per sample
        grad = (1.0 - t_b) * (v_fake - v_real)
        x0_teacher = x_probe + (1.0 - t_b) * v_real
        dims = tuple(range(1, x_gen.ndim))
        normalizer = (x_gen - x0_teacher).abs().mean(dim=dims, keepdim=True)
        grad = grad / (normalizer + eps)
        grad = torch.nan_to_num(grad)
    return 0.5 * F.mse_loss(x_gen, (x_gen - grad).detach())


def dsm_fake_score_step(
    student_samples: Tensor,
    fake_velocity: Callable[[Tensor, Tensor], Tensor],
    rng_t: torch.Generator,
    rng_noise: torch.Generator,
    time_shift: float = 1.0,
) -> Tensor:
    """Flow-matching loss fitting the fake score to the student's samples."""
    x0 = student_samples.detach()
    b = x0.shape[0]
    u = torch.rand(b, generator=rng_t, dtype=x0.dtype)
    t = shift_time(u, time_shift)
    eps_n = torch.randn(x0.shape, generator=rng_noise, dtype=x0.dtype)
    t_b = t.view(-1, *([1] * (x0.ndim - 1)))
    x_t = t_b * x0 + (1.0 - t_b) * eps_n
    return F.mse_loss(fake_velocity(x_t, t), x0 - eps_n)


def gan_regularizer(
    features_real: Tensor,
    features_fake: Tensor,
    discriminator: nn.Module,
    real_inputs: Tensor | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """Non-saturating adversarial losses plus R1 penalty.

    ``d_loss`` trains the discriminator, ``g_loss`` is the generator-side
    term, ``r1`` is the squared gradient norm of the real logits with
    respect to ``real_inputs`` (falling back to the real features when no
    upstream input is supplied).
    """
    logits_real = discriminator(features_real)
    logits_fake_d = discriminator(features_fake.detach())
    d_loss = F.softplus(-logits_real).mean() + F.softplus(logits_fake_d).mean()
    logits_fake_g = discriminator(features_fake)
    g_loss = F.softplus(-logits_fake_g).mean()

    r1_target = real_inputs if real_inputs is not None else features_real
    if r1_target.requires_grad:
        (grads,) = torch.autograd.grad(
            logits_real.sum(), r1_target, create_graph=True, allow_unused=False
        )
        r1 = grads.pow(2).flatten(1).sum(dim=1).mean()
    else:
        r1 = torch.zeros((), dtype=features_real.dtype)
    return d_loss, g_loss, r1


# ---------------------------------------------------------------------------
# toy velocity models (support for the low-dimensional distillation tests)


class MlpVelocity(nn.Module):
    """Small MLP velocity field v(x, t) for vector-valued toys."""

    def __init__(self, dim: int = 2, hidden: int = 128, temb_dim: int = 32):
        super().__init__()
        self.temb_dim = temb_dim
        self.net1 = nn.Linear(dim + temb_dim, hidden)
        self.net2 = nn.Linear(hidden, hidden)
        self.net3 = nn.Linear(hidden, dim)

    def forward(self, x: Tensor, t: Tensor, return_features: bool = False):
        temb = timestep_embedding(t, self.temb_dim)
        h = F.silu(self.net1(torch.cat([x, temb], dim=-1)))
        feats = F.silu(self.net2(h))
        out = self.net3(feats)
        if return_features:
            return out, feats
        return out


class MlpDiscriminator(nn.Module):
    def __init__(self, feature_dim: int, hidden: int = 64):
        super().__init__()
        self.fc1 = nn.Linear(feature_dim, hidden)
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, features: Tensor) -> Tensor:
        if features.ndim == 3:  # token features: mean-pool
            features = features.mean(dim=1)
        return self.fc2(F.silu(self.fc1(features)))


def fit_velocity_mlp(
    data_sampler: Callable[[int, torch.Generator], Tensor],
    model: MlpVelocity,
    steps: int,
    lr: float,
    batch: int,
    seed: int = 0,
    time_shift: float = 1.0,
) -> list[float]:
    """Plain rectified-flow training of a toy velocity MLP."""
    streams = SeedStreams(seed)
    opt = torch.optim.AdamW(model.parameters(), lr=lr)
    losses = []
    for step in range(steps):
        x0 = data_sampler(batch, streams.stream("data"))
        u = torch.rand(batch, generator=streams.stream("time"))
        t = shift_time(u, time_shift)
        eps_n = torch.randn(x0.shape, generator=streams.stream("noise"))
        t_b = t[:, None]
        x_t = t_b * x0 + (1 - t_b) * eps_n
        loss = F.mse_loss(model(x_t, t), x0 - eps_n)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"toy training diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return losses


@torch.no_grad()
def euler_sample_velocity(
    model: Callable[[Tensor, Tensor], Tensor],
    n: int,
    dim: int,
    steps: int,
    gen: torch.Generator,
    time_shift: float = 1.0,
) -> Tensor:
    """Uniform (shifted) Euler sampling from a toy velocity field."""
    times = sampling_times(steps, time_shift)
    x = torch.randn(n, dim, generator=gen)
    for t_cur, t_next in zip(times, times[1:]):
        t_vec = torch.full((n,), t_cur)
        x = x + (t_next - t_cur) * model(x, t_vec)
    return x


# ---------------------------------------------------------------------------
# the distillation loop


@dataclass
class DistillLogRow:
    step: int
    dmd: float
    dsm: float
    gan_g: float
    gan_d: float
    r1: float
    student_updated: bool


class Distiller:
    """Coordinates the student, fake score and optional discriminator.

    ``generate_fn(student_module, batch, streams) -> samples`` produces
    differentiable student samples; ``teacher_fn`` / ``fake_fn`` map
    (module, x, t) to velocities (the teacher closure should already fold
    in any guidance combination); ``feature_fn(fake_module, x, t)``
    returns the mid-depth features the adversarial head consumes, and
    ``real_sampler(batch, gen)`` supplies real samples for its real
    branch.
    """

    def __init__(
        self,
        config: DistillConfig,
        student: nn.Module,
        fake_score: nn.Module,
        teacher_velocity: Callable,
        fake_velocity_of: Callable,
        generate_fn: Callable,
        feature_fn: Callable | None = None,
        discriminator: nn.Module | None = None,
        real_sampler: Callable | None = None,
    ):
        self.config = config
        self.student = student
        self.fake_score = fake_score
        self.teacher_velocity = teacher_velocity
        self.fake_velocity_of = fake_velocity_of
        self.generate_fn = generate_fn
        self.feature_fn = feature_fn
        self.discriminator = discriminator
        self.real_sampler = real_sampler
        self.streams = SeedStreams(config.seed)
        self.opt_student = torch.optim.AdamW(
            student.parameters(), lr=config.lr, weight_decay=config.weight_decay
        )
        fake_params = list(fake_score.parameters())
        self.opt_fake = torch.optim.AdamW(
            fake_params, lr=config.lr, weight_decay=config.weight_decay
        )
        self.opt_disc = (
            torch.optim.AdamW(discriminator.parameters(), lr=config.lr)
            if discriminator is not None
            else None
        )
        self.log: list[DistillLogRow] = []

    # -- helpers --------------------------------------------------------

    def _gan_active(self) -> bool:
        return self.config.gan_enabled and self.discriminator is not None

    def _probe_times(self, batch: int, name: str, dtype) -> Tensor:
        u = torch.rand(batch, generator=self.streams.stream(name), dtype=dtype)
        return shift_time(u, self.config.time_shift)

    def _fake_vel(self, x: Tensor, t: Tensor) -> Tensor:
        return self.fake_velocity_of(self.fake_score, x, t)

    # -- one alternation step -------------------------------------------

    def step(self, index: int) -> DistillLogRow:
        cfg = self.config
        update_student = index % cfg.fake_update_ratio == 0

        # ---- fake-score side (every step)
        with torch.no_grad():
            x_gen = self.generate_fn(self.student, cfg.batch_size, self.streams)
        dsm_val = gan_d_val = r1_val = 0.0
        if cfg.dsm_enabled:
            dsm_loss = dsm_fake_score_step(
                x_gen,
                self._fake_vel,
                self.streams.stream("dsm_t"),
                self.streams.stream("dsm_noise"),
                cfg.time_shift,
            )
            self.opt_fake.zero_grad()
            (cfg.dsm_weight * dsm_loss).backward()
            self.opt_fake.step()
            dsm_val = dsm_loss.item()
        if self._gan_active():
            real = self.real_sampler(cfg.batch_size, self.streams.stream("gan_data"))
            t_gan = self._probe_times(real.shape[0], "gan_t", real.dtype)
            noise = torch.randn(
                real.shape, generator=self.streams.stream("gan_noise"), dtype=real.dtype
            )
            t_b = t_gan.view(-1, *([1] * (real.ndim - 1)))
            real_noised = (t_b * real + (1 - t_b) * noise).requires_grad_(True)
            fake_noised = t_b * x_gen + (1 - t_b) * noise
            f_real = self.feature_fn(self.fake_score, real_noised, t_gan)
            f_fake = self.feature_fn(self.fake_score, fake_noised, t_gan)
            d_loss, _, r1 = gan_regularizer(
                f_real, f_fake.detach(), self.discriminator, real_inputs=real_noised
            )
            d_total = d_loss + (cfg.r1_weight * r1 if cfg.r1_enabled else 0.0)
            self.opt_fake.zero_grad()  # r1 graph reaches fake params; keep them clean
            self.opt_disc.zero_grad()
            d_total.backward()
            self.opt_disc.step()
            gan_d_val, r1_val = d_loss.item(), float(r1)

        # ---- student side (every fake_update_ratio-th step)
        dmd_val = gan_g_val = 0.0
        if update_student:
            x_gen = self.generate_fn(self.student, cfg.batch_size, self.streams)
            total = torch.zeros((), dtype=x_gen.dtype)
            if cfg.dmd_enabled:
                t_probe = self._probe_times(x_gen.shape[0], "probe_t", x_gen.dtype)
                noise = torch.randn(
                    x_gen.shape,
                    generator=self.streams.stream("probe_noise"),
                    dtype=x_gen.dtype,
                )
                dmd_loss = dmd_generator_loss(
                    x_gen, t_probe, noise, self.teacher_velocity, self._fake_vel
                )
                total = total + cfg.dmd_weight * dmd_loss
                dmd_val = dmd_loss.item()
            if self._gan_active():
                t_g = self._probe_times(x_gen.shape[0], "gan_g_t", x_gen.dtype)
                noise_g = torch.randn(
                    x_gen.shape,
                    generator=self.streams.stream("gan_g_noise"),
                    dtype=x_gen.dtype,
                )
                t_b = t_g.view(-1, *([1] * (x_gen.ndim - 1)))
                f_fake = self.feature_fn(self.fake_score, t_b * x_gen + (1 - t_b) * noise_g, t_g)
                logits = self.discriminator(f_fake)
                g_loss = F.softplus(-logits).mean()
                total = total + cfg.gan_weight * g_loss
                gan_g_val = g_loss.item()
            if not torch.isfinite(total):
                raise TrainingDiverged(f"distillation diverged at step {index}")
            self.opt_student.zero_grad()
            total.backward()
            self.opt_student.step()

        row = DistillLogRow(index, dmd_val, dsm_val, gan_g_val, gan_d_val, r1_val, update_student)
        self.log.append(row)
        return row

    def run(self, steps: int | None = None) -> list[DistillLogRow]:
        for i in range(steps if steps is not None else self.config.steps):
            self.step(i)
        return self.log


def write_distill_csv(rows: list[DistillLogRow], path) -> None:
    with open(path, "w") as fh:
        fh.write("step,dmd,dsm,gan_g,gan_d,r1,student_updated\n")
        for r in rows:
            fh.write(
                f"{r.step},{r.dmd:.10g},{r.dsm:.10g},{r.gan_g:.10g},"
                f"{r.gan_d:.10g},{r.r1:.10g},{int(r.student_updated)}\n"
            )
