"""Schedule and interpolation math for rectified flow.

Conventions used throughout the package:

* ``t`` runs from 0 (pure noise) to 1 (clean sample) and the forward
  corruption is the straight-line interpolation ``x_t = t*x0 + (1-t)*eps``.
* The velocity target is the constant slope of that line, ``v = x0 - eps``.
* Latent corruption uses a separate noise axis ``sigma`` with
  ``z_sigma = (1-sigma)*z + sigma*xi``; the two axes are tied by the
  convention ``sigma = 1 - t`` so that a latent stopped at integration
  time ``t`` carries residual noise ``1 - t``.

Everything here is a pure function of its inputs plus an explicit
``torch.Generator`` where randomness is involved, so the module is safe to
call concurrently as long as each caller owns its generator.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch

from .errors import DomainError, ShapeError

Tensor = torch.Tensor

DEFAULT_SIGMA_MAX = 0.8
DEFAULT_TIME_SHIFT = 6.0
#: Four-step student schedule, listed as the sigma at which each step starts.
DEFAULT_STUDENT_SIGMAS = (0.999, 0.866, 0.634, 0.342)


def _check_same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes differ, {tuple(a.shape)} vs {tuple(b.shape)}")


@dataclass
class FlowState:
    """A noisy sample ``x_t`` together with its interpolation time ``t``."""

    x_t: Tensor
    t: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.t <= 1.0:
            raise DomainError(f"t must lie in [0, 1], got {self.t}")
        if not torch.isfinite(self.x_t).all():
            raise DomainError("x_t contains non-finite values")


@dataclass
class SigmaNoisedLatent:
    """A latent grid paired with the corruption level it was noised at."""

    values: Tensor
    sigma: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.sigma <= 1.0:
            raise DomainError(f"sigma must lie in [0, 1], got {self.sigma}")
        if not torch.isfinite(self.values).all():
            raise DomainError("latent contains non-finite values")


@dataclass
class SigmaSchedule:
    """Strictly decreasing list of sigmas in (0, 1], one per sampling step.

    Each sigma is the corruption level at which a step *starts*; under the
    ``sigma = 1 - t`` convention the corresponding integration times are
    ``1 - sigma`` with a final step running to ``t = 1``.
    """

    sigmas: tuple[float, ...] = field(default_factory=lambda: DEFAULT_STUDENT_SIGMAS)

    def __post_init__(self) -> None:
        self.sigmas = tuple(float(s) for s in self.sigmas)
        if len(self.sigmas) == 0:
            raise DomainError("schedule must contain at least one sigma")
        if self.sigmas[0] >= 1.0 + 1e-6:
            raise DomainError(f"first sigma must be < 1, got {self.sigmas[0]}")
        if self.sigmas[-1] <= 0.0:
            raise DomainError(f"last sigma must be > 0, got {self.sigmas[-1]}")
        for a, b in zip(self.sigmas, self.sigmas[1:]):
            if b >= a:
                raise DomainError(f"sigmas must be strictly decreasing, got {a} -> {b}")

    def __len__(self) -> int:
        return len(self.sigmas)

    def to_times(self) -> list[float]:
        """Integration grid for the sampler: step starts plus the endpoint 1."""
        return [min(1.0, max(0.0, 1.0 - s)) for s in self.sigmas] + [1.0]


def interpolate(x0: Tensor, eps: Tensor, t: float) -> FlowState:
    """Return the flow state ``x_t = t*x0 + (1-t)*eps``.

    Exactly linear in ``x0``, ``eps`` and ``t``; ``t=1`` returns ``x0`` and
    ``t=0`` returns ``eps``.
    """
    _check_same_shape(x0, eps, "interpolate")
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"t must lie in [0, 1], got {t}")
    return FlowState(x_t=t * x0 + (1.0 - t) * eps, t=t)


def velocity_target(x0: Tensor, eps: Tensor) -> Tensor:
    """Rectified-flow regression target ``x0 - eps``."""
    _check_same_shape(x0, eps, "velocity_target")
    return x0 - eps


def shift_time(t: float | Tensor, shift: float) -> float | Tensor:
    """Resolution-shift map ``t -> shift*t / (1 + (shift-1)*t)``.

    A monotone bijection of [0, 1] onto itself with fixed points 0 and 1;
    larger ``shift`` pushes mass toward t=1. Inverted by :func:`unshift_time`.
    """
    if shift < 1.0:
        raise DomainError(f"shift must be >= 1, got {shift}")
    return shift * t / (1.0 + (shift - 1.0) * t)


def unshift_time(t_shifted: float | Tensor, shift: float) -> float | Tensor:
    """Inverse of :func:`shift_time`."""
    if shift < 1.0:
        raise DomainError(f"shift must be >= 1, got {shift}")
    return t_shifted / (shift - (shift - 1.0) * t_shifted)


def corrupt_latent(z: Tensor, sigma: float, noise: Tensor) -> SigmaNoisedLatent:
    """Mix a latent with unit Gaussian noise: ``(1-sigma)*z + sigma*noise``.

    ``sigma=0`` is a bit-exact identity on ``z``.
    """
    _check_same_shape(z, noise, "corrupt_latent")
    if not 0.0 <= sigma <= 1.0:
        raise DomainError(f"sigma must lie in [0, 1], got {sigma}")
    return SigmaNoisedLatent(values=(1.0 - sigma) * z + sigma * noise, sigma=sigma)


def sample_training_sigma(
    rng: torch.Generator,
    sigma_max: float = DEFAULT_SIGMA_MAX,
    n: int = 1,
) -> Tensor:
    """Draw latent-corruption levels uniformly from [0, sigma_max]."""
    if sigma_max < 0.0 or sigma_max > 1.0:
        raise DomainError(f"sigma_max must lie in [0, 1], got {sigma_max}")
    return sigma_max * torch.rand(n, generator=rng)


def cfg_combine(v_cond: Tensor, v_uncond: Tensor, w: float) -> Tensor:
    """Classifier-free guidance: ``v_uncond + w * (v_cond - v_uncond)``."""
    _check_same_shape(v_cond, v_uncond, "cfg_combine")
    return v_uncond + w * (v_cond - v_uncond)


def euler_integrate(
    state: FlowState,
    velocity_fn: Callable[[Tensor, float], Tensor],
    times: Sequence[float],
) -> Tensor:
    """Explicit Euler integration of the velocity field up to ``t = 1``.

    ``times`` must be strictly increasing, start at ``state.t`` and end at 1.
    Each step applies ``x <- x + (t_next - t_cur) * velocity_fn(x, t_cur)``.
    Exact for velocity fields independent of ``x`` and ``t``.
    """
    times = [float(t) for t in times]
    if len(times) < 2:
        raise DomainError("need at least two time points")
    if abs(times[0] - state.t) > 1e-9:
        raise DomainError(f"times must start at state.t={state.t}, got {times[0]}")
    if abs(times[-1] - 1.0) > 1e-9:
        raise DomainError(f"times must end at 1, got {times[-1]}")
    for a, b in zip(times, times[1:]):
        if b <= a:
            raise DomainError(f"times must be strictly increasing, got {a} -> {b}")
    x = state.x_t
    for t_cur, t_next in zip(times, times[1:]):
        x = x + (t_next - t_cur) * velocity_fn(x, t_cur)
    return x


def sampling_times(n_steps: int, shift: float = 1.0, t_start: float = 0.0) -> list[float]:
    """Shifted Euler grid: ``shift_time(linspace(t_start', 1, n+1))``.

    The grid is uniform in unshifted time and mapped through
    :func:`shift_time`, matching how training times are drawn. ``t_start``
    is the (already shifted) time of the initial state; integration always
    ends at exactly 1.
    """
    if n_steps < 1:
        raise DomainError(f"need at least one step, got {n_steps}")
    u_start = unshift_time(t_start, shift)
    us = torch.linspace(float(u_start), 1.0, n_steps + 1)
    ts = [float(shift_time(float(u), shift)) for u in us]
    ts[0] = float(t_start)
    ts[-1] = 1.0
    return ts
