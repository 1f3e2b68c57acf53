"""DDPM core: noise schedule, forward corruption, reverse sampling, training.

The sampler state is a 4-channel tensor (RGB + depth) in [-1, 1].  Schedule
tables are kept in float64 numpy; tensor math runs in the dtype of the state
tensor.  All sampling draws come from an explicit ``torch.Generator`` so runs
are reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor

from .errors import ConfigError, ContractError

__all__ = [
    "NoiseSchedule",
    "RGBDImage",
    "TrainBatchLoss",
    "make_schedule",
    "q_sample",
    "predict_x0",
    "posterior_mean",
    "ancestral_step_from_prediction",
    "ddpm_step",
    "train_step",
    "sample_chain",
    "sample_unconditional",
    "rgbd_to_tensor",
    "tensor_to_rgbd",
    "collate",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(eq=False)
class NoiseSchedule:
    """Tables beta_t, alpha_t = 1 - beta_t and alpha_bar_t = prod alpha_s."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self) -> None:
        # alpha_bar of the previous step, with alpha_bar_{-1} defined as 1.
        self.alpha_bar_prev = np.concatenate(([1.0], self.alpha_bar[:-1]))
        with np.errstate(divide="ignore", invalid="ignore"):
            self.posterior_variance = (
                self.beta * (1.0 - self.alpha_bar_prev) / (1.0 - self.alpha_bar)
            )
            # log of the posterior variance with the t=0 entry (which is zero)
            # replaced by the t=1 value, so learned-variance interpolation stays finite.
            clipped = self.posterior_variance.copy()
            if self.T > 1:
                clipped[0] = clipped[1]
            self.posterior_log_variance_clipped = np.log(clipped)
            self.log_beta = np.log(self.beta)


def make_schedule(T: int, beta_0: float, beta_1: float) -> NoiseSchedule:
    """Linear beta schedule from beta_0 to beta_1 over T steps."""
    if T < 2:
        raise ConfigError(f"schedule needs at least 2 steps, got {T}")
    if not (0.0 < beta_0 <= beta_1 < 1.0):
        raise ConfigError(f"need 0 < beta_0 <= beta_1 < 1, got ({beta_0}, {beta_1})")
    beta = np.linspace(beta_0, beta_1, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def _check_t(t: int, sched: NoiseSchedule) -> None:
    if not 0 <= t < sched.T:
        raise IndexError(f"step {t} outside [0, {sched.T})")


def _per_item(values: np.ndarray, t: Tensor, like: Tensor) -> Tensor:
    """Gather schedule values for a batch of step indices, shaped for broadcast."""
    out = torch.as_tensor(values, dtype=like.dtype)[t.long()]
    return out.view(-1, *([1] * (like.ndim - 1)))


def q_sample(x0: Tensor, t: int | Tensor, eps: Tensor, sched: NoiseSchedule) -> Tensor:
    """Closed-form marginal sample x_t = sqrt(ab_t) x_0 + sqrt(1 - ab_t) eps."""
    if eps.shape != x0.shape:
        raise ContractError(f"noise shape {tuple(eps.shape)} != state shape {tuple(x0.shape)}")
    if isinstance(t, Tensor):
        a = _per_item(np.sqrt(sched.alpha_bar), t, x0)
        b = _per_item(np.sqrt(1.0 - sched.alpha_bar), t, x0)
    else:
        _check_t(t, sched)
        a = math.sqrt(sched.alpha_bar[t])
        b = math.sqrt(1.0 - sched.alpha_bar[t])
    return a * x0 + b * eps


def predict_x0(x_t: Tensor, t: int | Tensor, eps_pred: Tensor, sched: NoiseSchedule) -> Tensor:
    """Clean-state estimate x0_hat = (x_t - sqrt(1 - ab_t) eps_pred) / sqrt(ab_t)."""
    if eps_pred.shape != x_t.shape:
        raise ContractError("eps_pred shape does not match state shape")
    if isinstance(t, Tensor):
        a = _per_item(np.sqrt(sched.alpha_bar), t, x_t)
        b = _per_item(np.sqrt(1.0 - sched.alpha_bar), t, x_t)
    else:
        _check_t(t, sched)
        a = math.sqrt(sched.alpha_bar[t])
        b = math.sqrt(1.0 - sched.alpha_bar[t])
    return (x_t - b * eps_pred) / a


def posterior_mean(x_t: Tensor, t: int | Tensor, eps_pred: Tensor, sched: NoiseSchedule) -> Tensor:
    """Reverse-step mean mu = (x_t - beta_t / sqrt(1 - ab_t) * eps_pred) / sqrt(alpha_t)."""
    if eps_pred.shape != x_t.shape:
        raise ContractError("eps_pred shape does not match state shape")
    if isinstance(t, Tensor):
        c = _per_item((1.0 - sched.alpha) / np.sqrt(1.0 - sched.alpha_bar), t, x_t)
        a = _per_item(np.sqrt(sched.alpha), t, x_t)
    else:
        _check_t(t, sched)
        c = (1.0 - sched.alpha[t]) / math.sqrt(1.0 - sched.alpha_bar[t])
        a = math.sqrt(sched.alpha[t])
    return (x_t - c * eps_pred) / a


def _model_log_variance(var_pred: Tensor, t: int, sched: NoiseSchedule) -> Tensor:
    """Interpolate log-variance between the posterior floor and beta_t ceiling.

    ``var_pred`` is the raw network output in roughly [-1, 1]; -1 selects the
    posterior variance, +1 selects beta_t.
    """
    min_log = sched.posterior_log_variance_clipped[t]
    max_log = sched.log_beta[t]
    frac = (var_pred + 1.0) / 2.0
    return frac * max_log + (1.0 - frac) * min_log


def ancestral_step_from_prediction(
    x_t: Tensor,
    t: int,
    eps_pred: Tensor,
    var_pred: Tensor | None,
    sched: NoiseSchedule,
    rng: torch.Generator | None,
    force_fixed_variance: bool = False,
    clip_denoised: bool = True,
) -> Tensor:
    """One reverse step given a noise prediction; deterministic at t = 0.

    With ``clip_denoised`` (the standard sampler behavior) the mean comes
    from the forward-posterior formula with the implied clean estimate
    clamped to [-1, 1]; at large t the 1/sqrt(alpha_bar) amplification
    otherwise turns small prediction errors into excursions the chain never
    recovers from.  The two mean formulas agree exactly while the estimate
    stays in range.  The variance is the denoiser's learned diagonal when
    ``var_pred`` is given (and not forced off), otherwise the fixed beta_t.
    """
    if clip_denoised:
        x0_hat = torch.clamp(predict_x0(x_t, t, eps_pred, sched), -1.0, 1.0)
        c0 = (
            math.sqrt(sched.alpha_bar_prev[t])
            * sched.beta[t]
            / (1.0 - sched.alpha_bar[t])
        )
        ct = (
            math.sqrt(sched.alpha[t])
            * (1.0 - sched.alpha_bar_prev[t])
            / (1.0 - sched.alpha_bar[t])
        )
        mean = c0 * x0_hat + ct * x_t
    else:
        mean = posterior_mean(x_t, t, eps_pred, sched)
    if t == 0:
        return mean
    if var_pred is not None and not force_fixed_variance:
        sigma = torch.exp(0.5 * _model_log_variance(var_pred, t, sched))
    else:
        sigma = math.sqrt(sched.beta[t])
    z = torch.randn(x_t.shape, generator=rng, dtype=x_t.dtype, device=x_t.device)
    return mean + sigma * z


def _checked_prediction(denoiser, x_t: Tensor, t) -> tuple[Tensor, Tensor | None]:
    eps_pred, var_pred = denoiser.predict(x_t, t)
    if eps_pred.shape != x_t.shape:
        raise ContractError(
            f"denoiser returned eps of shape {tuple(eps_pred.shape)} for state {tuple(x_t.shape)}"
        )
    if var_pred is not None and var_pred.shape != x_t.shape:
        raise ContractError("denoiser variance output shape does not match state")
    return eps_pred, var_pred


def ddpm_step(
    x_t: Tensor,
    t: int,
    denoiser,
    sched: NoiseSchedule,
    rng: torch.Generator | None,
    force_fixed_variance: bool = False,
    clip_denoised: bool = True,
) -> Tensor:
    """Unguided ancestral step x_t -> x_{t-1}."""
    _check_t(t, sched)
    with torch.no_grad():
        eps_pred, var_pred = _checked_prediction(denoiser, x_t, t)
        return ancestral_step_from_prediction(
            x_t, t, eps_pred, var_pred, sched, rng, force_fixed_variance, clip_denoised
        )


def sample_chain(
    denoiser,
    sched: NoiseSchedule,
    shape: Sequence[int],
    rng: torch.Generator | None,
    force_fixed_variance: bool = False,
    dtype: torch.dtype = torch.float32,
) -> Tensor:
    """Run the full reverse chain from Gaussian noise; returns raw values."""
    x = torch.randn(tuple(shape), generator=rng, dtype=dtype)
    for t in reversed(range(sched.T)):
        x = ddpm_step(x, t, denoiser, sched, rng, force_fixed_variance)
    return x


# ---------------------------------------------------------------------------
# RGBD images and batching


@dataclass
class RGBDImage:
    """Joint color+depth raster with a depth-validity mask.

    ``rgb`` is [H, W, 3] and ``depth`` [H, W], both nominally in [-1, 1];
    ``mask`` is True where the depth value is trustworthy supervision.
    Sampler outputs may exceed the nominal range, so the range check is
    opt-in (training data should pass it, raw samples need not).
    """

    rgb: np.ndarray
    depth: np.ndarray
    mask: np.ndarray

    def __post_init__(self) -> None:
        self.rgb = np.asarray(self.rgb, dtype=np.float32)
        self.depth = np.asarray(self.depth, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=bool)

    def validate(self, check_range: bool = False, require_valid_depth: bool = False) -> None:
        h, w = self.depth.shape
        if self.rgb.shape != (h, w, 3):
            raise ConfigError(f"rgb shape {self.rgb.shape} inconsistent with depth {self.depth.shape}")
        if self.mask.shape != (h, w):
            raise ConfigError("mask shape inconsistent with depth")
        if not (np.all(np.isfinite(self.rgb)) and np.all(np.isfinite(self.depth))):
            raise ConfigError("rgb/depth contain non-finite values")
        if check_range and (np.abs(self.rgb).max() > 1 + 1e-6 or np.abs(self.depth).max() > 1 + 1e-6):
            raise ConfigError("rgb/depth outside [-1, 1]")
        if require_valid_depth and not self.mask.any():
            raise ConfigError("training item needs at least one valid depth pixel")

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


def rgbd_to_tensor(img: RGBDImage) -> Tensor:
    """Stack an RGBD image into the sampler's [4, H, W] channel layout."""
    chans = np.concatenate([np.moveaxis(img.rgb, -1, 0), img.depth[None]], axis=0)
    return torch.from_numpy(np.ascontiguousarray(chans, dtype=np.float32))


def tensor_to_rgbd(x: Tensor, mask: np.ndarray | None = None) -> RGBDImage:
    """Inverse of :func:`rgbd_to_tensor`; values are taken as-is (no clamping)."""
    arr = x.detach().cpu().numpy()
    if arr.ndim != 3 or arr.shape[0] != 4:
        raise ConfigError(f"expected a [4, H, W] tensor, got {tuple(x.shape)}")
    rgb = np.moveaxis(arr[:3], 0, -1)
    depth = arr[3]
    if mask is None:
        mask = np.ones(depth.shape, dtype=bool)
    return RGBDImage(rgb=rgb, depth=depth, mask=mask)


def collate(images: Sequence[RGBDImage]) -> tuple[Tensor, Tensor]:
    """Stack images into (x0 [B,4,H,W], depth-valid mask [B,1,H,W])."""
    if len(images) == 0:
        raise ConfigError("empty batch")
    x0 = torch.stack([rgbd_to_tensor(im) for im in images])
    mask = torch.stack(
        [torch.from_numpy(im.mask.astype(np.float32))[None] for im in images]
    )
    return x0, mask


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class TrainBatchLoss:
    l_simple: float
    l_vlb: float
    total: float


def _approx_standard_normal_cdf(x: Tensor) -> Tensor:
    return 0.5 * (1.0 + torch.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def _discretized_gaussian_log_likelihood(x: Tensor, mean: Tensor, log_scale: Tensor) -> Tensor:
    """Log-likelihood of 8-bit-discretized values under N(mean, exp(2 log_scale))."""
    centered = x - mean
    inv_std = torch.exp(-log_scale)
    cdf_plus = _approx_standard_normal_cdf(inv_std * (centered + 1.0 / 255.0))
    cdf_min = _approx_standard_normal_cdf(inv_std * (centered - 1.0 / 255.0))
    log_cdf_plus = torch.log(cdf_plus.clamp(min=1e-12))
    log_one_minus_cdf_min = torch.log((1.0 - cdf_min).clamp(min=1e-12))
    cdf_delta = cdf_plus - cdf_min
    return torch.where(
        x < -0.999,
        log_cdf_plus,
        torch.where(x > 0.999, log_one_minus_cdf_min, torch.log(cdf_delta.clamp(min=1e-12))),
    )


def _vlb_term(
    x0: Tensor, x_t: Tensor, t: Tensor, eps_pred: Tensor, var_pred: Tensor, sched: NoiseSchedule
) -> Tensor:
    """Per-element variational-bound term in bits (KL for t > 0, decoder NLL at t = 0).

    The reverse mean is frozen (detached) so this term only trains the
    variance head, following the hybrid-objective recipe.
    """
    c0 = _per_item(
        np.sqrt(sched.alpha_bar_prev) * sched.beta / (1.0 - sched.alpha_bar), t, x0
    )
    ct = _per_item(
        np.sqrt(sched.alpha) * (1.0 - sched.alpha_bar_prev) / (1.0 - sched.alpha_bar), t, x0
    )
    true_mean = c0 * x0 + ct * x_t
    true_logvar = _per_item(sched.posterior_log_variance_clipped, t, x0)

    model_mean = posterior_mean(x_t, t, eps_pred.detach(), sched)
    min_log = _per_item(sched.posterior_log_variance_clipped, t, x0)
    max_log = _per_item(sched.log_beta, t, x0)
    frac = (var_pred + 1.0) / 2.0
    model_logvar = frac * max_log + (1.0 - frac) * min_log

    kl = 0.5 * (
        -1.0
        + model_logvar
        - true_logvar
        + torch.exp(true_logvar - model_logvar)
        + (true_mean - model_mean) ** 2 * torch.exp(-model_logvar)
    ) / math.log(2.0)

    decoder_nll = -_discretized_gaussian_log_likelihood(x0, model_mean, 0.5 * model_logvar)
    decoder_nll = decoder_nll / math.log(2.0)

    t_is_zero = (t == 0).view(-1, *([1] * (x0.ndim - 1)))
    return torch.where(t_is_zero, decoder_nll, kl)


def train_step(
    batch: Sequence[RGBDImage] | tuple[Tensor, Tensor],
    model,
    sched: NoiseSchedule,
    rng: torch.Generator,
    optimizer: torch.optim.Optimizer | None = None,
    vlb_weight: float = 1e-3,
) -> TrainBatchLoss:
    """One noise-prediction training step with masked losses.

    Pixels with an invalid depth contribute nothing through the depth
    channel; their RGB channels still train.  When ``optimizer`` is given,
    a single update is applied to the model parameters.
    """
    if isinstance(batch, tuple):
        x0, mask = batch
    else:
        x0, mask = collate(batch)
    if x0.shape[0] == 0:
        raise ConfigError("empty batch")

    t = torch.randint(0, sched.T, (x0.shape[0],), generator=rng)
    eps = torch.randn(x0.shape, generator=rng, dtype=x0.dtype)
    x_t = q_sample(x0, t, eps, sched)
    eps_pred, var_pred = _checked_prediction(model, x_t, t)

    weight = torch.ones_like(x0)
    weight[:, 3:4] = mask
    denom = weight.sum()
    l_simple = (weight * (eps_pred - eps) ** 2).sum() / denom

    if var_pred is not None:
        vlb = (weight * _vlb_term(x0, x_t, t, eps_pred, var_pred, sched)).sum() / denom
    else:
        vlb = torch.zeros((), dtype=x0.dtype)

    total = l_simple + vlb_weight * vlb
    if optimizer is not None:
        optimizer.zero_grad(set_to_none=True)
        total.backward()
        optimizer.step()

    return TrainBatchLoss(
        l_simple=float(l_simple.detach()),
        l_vlb=float(vlb.detach()),
        total=float(total.detach()),
    )


def sample_unconditional(
    denoiser,
    sched: NoiseSchedule,
    size: tuple[int, int],
    rng: torch.Generator | None,
    force_fixed_variance: bool = False,
) -> RGBDImage:
    """Draw one prior sample; raw (unclamped) values are preserved."""
    h, w = size
    x = sample_chain(denoiser, sched, (1, 4, h, w), rng, force_fixed_variance)
    return tensor_to_rgbd(x[0])


# ---------------------------------------------------------------------------
# Checkpoints

CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, model, sched: NoiseSchedule, meta: dict | None = None) -> Path:
    """Write a versioned checkpoint holding schedule, weights, and metadata."""
    from .denoiser import ToyUNet

    if not isinstance(model, ToyUNet):
        raise ConfigError("checkpoints are defined for ToyUNet denoisers")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "schedule": {
            "T": sched.T,
            "beta_0": float(sched.beta[0]),
            "beta_1": float(sched.beta[-1]),
        },
        "model_config": model.config.as_dict(),
        "state_dict": model.state_dict(),
        "meta": dict(meta or {}),
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path):
    """Load (model, schedule, meta) from :func:`save_checkpoint` output."""
    from .denoiser import ToyUNet, ToyUNetConfig
    from .errors import DataError

    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    sched = make_schedule(**payload["schedule"])
    model = ToyUNet(ToyUNetConfig(**payload["model_config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, sched, payload["meta"]
