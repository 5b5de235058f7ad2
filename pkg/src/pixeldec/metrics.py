"""Reference metrics: PSNR, SSIM, energy distance, analytic Gaussian flow.

Images are channels-first tensors in [-1, 1], so the dynamic range for
PSNR/SSIM is 2.0. All functions are pure and operate on ``torch.Tensor``
or anything ``torch.as_tensor`` accepts.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .errors import DomainError, ShapeError

Tensor = torch.Tensor

PSNR_CAP_DB = 99.0
IMAGE_RANGE = 2.0

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 7


def psnr(a: Tensor, b: Tensor, data_range: float = IMAGE_RANGE) -> float:
    """Peak signal-to-noise ratio in dB, capped at 99 for identical inputs."""
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shapes differ, {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = torch.mean((a - b) ** 2).item()
    if mse == 0.0:
        return PSNR_CAP_DB
    value = 10.0 * torch.log10(torch.tensor(data_range**2 / mse)).item()
    return min(value, PSNR_CAP_DB)


def ssim(a: Tensor, b: Tensor, data_range: float = IMAGE_RANGE) -> float:
    """Structural similarity with a uniform 7x7 window, channel-averaged.

    Uses k1=0.01, k2=0.03 and evaluates only fully valid windows, which
    matches the common reference implementation with uniform weights.
    Symmetric in its arguments and exactly 1.0 for identical inputs.
    """
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shapes differ, {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.ndim == 2:
        a = a[None]
        b = b[None]
    if a.ndim != 3:
        raise ShapeError(f"ssim expects (C,H,W) or (H,W), got {tuple(a.shape)}")
    h, w = a.shape[-2:]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise DomainError(f"image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")

    win = SSIM_WINDOW
    kernel = torch.full((1, 1, win, win), 1.0 / (win * win), dtype=torch.float64)

    def filt(x: Tensor) -> Tensor:
        return F.conv2d(x[:, None], kernel)[:, 0]

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a = filt(a)
    mu_b = filt(b)
    # Unbiased moments over each window, matching the standard formulation.
    n = win * win
    cov_norm = n / (n - 1)
    var_a = cov_norm * (filt(a * a) - mu_a * mu_a)
    var_b = cov_norm * (filt(b * b) - mu_b * mu_b)
    cov = cov_norm * (filt(a * b) - mu_a * mu_b)
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return (num / den).mean().item()


def energy_distance(samples_a: Tensor, samples_b: Tensor) -> float:
    """Energy distance 2E|A-B| - E|A-A'| - E|B-B'| via U-statistics.

    Within-set means exclude the diagonal (unbiased), so the estimate is
    zero in expectation for equal distributions and may be slightly
    negative in finite samples.
    """
    a = torch.as_tensor(samples_a, dtype=torch.float64)
    b = torch.as_tensor(samples_b, dtype=torch.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.numel() == 0 or b.numel() == 0:
        raise DomainError("energy_distance requires non-empty sample sets")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"sample dims differ: {a.shape[1]} vs {b.shape[1]}")
    n, m = a.shape[0], b.shape[0]
    d_ab = torch.cdist(a, b).mean()
    d_aa = torch.cdist(a, a).sum() / (n * (n - 1)) if n > 1 else torch.tensor(0.0)
    d_bb = torch.cdist(b, b).sum() / (m * (m - 1)) if m > 1 else torch.tensor(0.0)
    return (2.0 * d_ab - d_aa - d_bb).item()


def gaussian_flow_velocity(
    x_t: Tensor | float, t: float, mu: float = 0.0, var: float = 1.0
) -> Tensor:
    """Closed-form E[x0 - eps | x_t] for data ~ N(mu, var) under the
    straight-line interpolation x_t = t*x0 + (1-t)*eps.

    The joint (x0, eps, x_t) is Gaussian, so the conditional mean is linear:

        v(x, t) = mu + (t*var - (1-t)) * (x - t*mu) / (t^2*var + (1-t)^2)

    At t=1 this reduces to v = x (eps is unpredictable from a clean sample);
    at t=0 it is mu - x. The var->0 limit is (mu - x) / (1-t) for t<1.
    """
    if var <= 0.0:
        raise DomainError(f"var must be > 0, got {var}")
    x = x_t if torch.is_tensor(x_t) else torch.tensor(float(x_t), dtype=torch.float64)
    denom = t * t * var + (1.0 - t) ** 2
    return mu + (t * var - (1.0 - t)) * (x - t * mu) / denom


def gaussian_flow_oracle(mu: float, var: float, t: float):
    """Return the analytic velocity field ``x -> v(x, t)`` for N(mu, var)."""
    if var <= 0.0:
        raise DomainError(f"var must be > 0, got {var}")
    return lambda x: gaussian_flow_velocity(x, t, mu=mu, var=var)
