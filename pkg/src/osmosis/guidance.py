"""Physics-guided posterior sampling for underwater restoration.

Each reverse step forms the clean-state estimate x0_hat, pushes its color
and depth channels through the water formation model, and nudges the
ancestral sample down the gradient of a reconstruction objective, while the
unknown water parameters are fitted by gradient descent in parallel.

Conventions: the sampler state lives in [-1, 1]; observations y and the
forward-model output live in [0, 1].  The color channels of x0_hat are
mapped via (v + 1) / 2 and the depth channel through the configured affine
depth scaling before the formation model is applied.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch
from torch import Tensor

from .diffusion import (
    NoiseSchedule,
    _checked_prediction,
    ancestral_step_from_prediction,
    predict_x0,
)
from .errors import ConfigError, NumericalError
from .formation import DepthScaling, WaterParams, apply_formation, formation_jacobian

__all__ = [
    "GuidanceConfig",
    "LossBreakdown",
    "GuidedStepResult",
    "RestorationResult",
    "real_world_config",
    "simulation_config",
    "ablation_preset",
    "forward_model",
    "compute_losses",
    "guided_step",
    "optimize_phi",
    "restore",
]


def default_phi_init() -> WaterParams:
    """Real-world starting point for the water-parameter fit."""
    return WaterParams(
        phi_a=(1.1, 0.95, 0.95),
        phi_b=(0.95, 0.8, 0.8),
        phi_inf=(0.14, 0.29, 0.49),
    )


def simulation_phi_init() -> WaterParams:
    """Tied starting point used with simulated benchmarks."""
    return WaterParams(
        phi_a=(1.1, 0.95, 0.95),
        phi_b=(1.1, 0.95, 0.95),
        phi_inf=(0.2, 0.4, 0.7),
        tied=True,
    )


@dataclass
class GuidanceConfig:
    """Every knob of the guided sampler.

    ``scale_rgb``/``scale_depth`` weight the clipped guidance gradient per
    channel.  ``optim_start``/``optim_end`` bound the water-parameter
    optimization window as fractions of total sampling time (it runs while
    optim_end <= t/T <= optim_start), with ``n_phi_iters`` descent steps of
    size ``phi_lr`` per sampler step.  ``weight_scaling`` is the depth map
    used for reconstruction-loss weighting; None reuses ``depth_scaling``.
    """

    scale_rgb: tuple[float, float, float] = (7.0, 7.0, 7.0)
    scale_depth: float = 0.9
    lambda_v: float = 20.0
    lambda_a: float = 0.5
    t_v: float = 0.7
    t_a: float = 0.5
    clip_value: float = 0.005
    optim_start: float = 0.7
    optim_end: float = 0.0
    n_phi_iters: int = 20
    phi_lr: float = 5e-3
    phi_init: WaterParams = field(default_factory=default_phi_init)
    depth_scaling: DepthScaling = field(default_factory=DepthScaling)
    weight_scaling: DepthScaling | None = None
    use_depth_weighting: bool = True
    use_l_val: bool = True
    use_l_avrg: bool = True
    tie_phi: bool = False
    haze: bool = False
    y_in_unit_range: bool = True
    force_fixed_variance: bool = False
    jacobian_free: bool = False
    snapshot_every: int = 50

    def validate(self) -> None:
        if any(s < 0 for s in self.scale_rgb) or self.scale_depth < 0:
            raise ConfigError("guidance scales must be nonnegative")
        if self.clip_value <= 0:
            raise ConfigError("clip_value must be positive")
        if not 0.0 <= self.optim_end <= self.optim_start <= 1.0:
            raise ConfigError(
                f"need 0 <= optim_end <= optim_start <= 1, got "
                f"({self.optim_start}, {self.optim_end})"
            )
        if self.n_phi_iters < 0:
            raise ConfigError("n_phi_iters must be >= 0")
        if self.lambda_v < 0 or self.lambda_a < 0:
            raise ConfigError("loss weights must be nonnegative")
        self.phi_init.validate()

    @property
    def rec_weight_scaling(self) -> DepthScaling:
        return self.weight_scaling if self.weight_scaling is not None else self.depth_scaling

    def init_phi(self) -> WaterParams:
        phi = self.phi_init.copy()
        phi.tied = phi.tied or self.tie_phi or self.haze
        phi.haze = phi.haze or self.haze
        return phi.projected()


def real_world_config() -> GuidanceConfig:
    return GuidanceConfig()


def simulation_config() -> GuidanceConfig:
    """Profile for simulated underwater benchmarks (tied coefficients).

    The reconstruction-loss weight keeps the real-world depth map even
    though the forward model maps depth onto [0, 1] here.
    """
    return GuidanceConfig(
        scale_rgb=(4.0, 4.0, 4.0),
        scale_depth=1.0,
        lambda_v=40.0,
        lambda_a=0.0,
        clip_value=0.001,
        phi_init=simulation_phi_init(),
        depth_scaling=DepthScaling(0.5, 1.0),
        weight_scaling=DepthScaling(1.4, 1.4),
        tie_phi=True,
    )


def ablation_preset(variant: int, base: GuidanceConfig | None = None) -> GuidanceConfig:
    """Named ablation variants; all other fields come from ``base``."""
    cfg = replace(base) if base is not None else simulation_config()
    if variant == 1:
        return replace(cfg, lambda_v=0.0, lambda_a=0.0)
    if variant == 2:
        return replace(cfg, use_depth_weighting=False)
    if variant == 3:
        return replace(cfg, scale_depth=float(cfg.scale_rgb[0]))
    if variant == 4:
        return replace(cfg, tie_phi=True)
    if variant == 5:
        return replace(cfg, lambda_a=0.0)
    if variant == 6:
        return replace(cfg, lambda_v=0.0)
    raise ConfigError(f"unknown ablation variant {variant} (expected 1..6)")


@dataclass(frozen=True)
class LossBreakdown:
    l_rec: float
    l_val: float
    l_avrg: float
    total: float


@dataclass
class GuidedStepResult:
    x_prev: Tensor
    x0_hat: Tensor
    losses: LossBreakdown


@dataclass
class RestorationResult:
    """Everything produced by one restoration run.

    ``J`` is the restored image in [0, 1], ``D`` the depth after the
    configured scaling, ``D_hat_raw`` the raw sampler-range depth, ``phi``
    the fitted water parameters.  ``loss_trace`` has one entry per sampling
    step (ordered t = T-1 .. 0) and ``snapshots`` holds sparse
    (t, x0_hat [4, H, W]) pairs.
    """

    J: np.ndarray
    D: np.ndarray
    D_hat_raw: np.ndarray
    phi: WaterParams
    loss_trace: list[LossBreakdown]
    snapshots: list[tuple[int, np.ndarray]]


def _phi_tensors(phi: WaterParams, dtype: torch.dtype) -> tuple[Tensor, Tensor, Tensor]:
    view = lambda arr: torch.as_tensor(arr, dtype=dtype).view(3, 1, 1)  # noqa: E731
    return view(phi.phi_a), view(phi.phi_b), view(phi.phi_inf)


def forward_model(x0_hat: Tensor, phi: WaterParams, cfg: GuidanceConfig) -> Tensor:
    """Predicted underwater observation for a clean-state estimate.

    Splits x0_hat into color and depth, maps color to [0, 1] and depth
    through the configured scaling, then applies the formation model.
    """
    j01 = (x0_hat[..., :3, :, :] + 1.0) / 2.0
    g = cfg.depth_scaling.apply(x0_hat[..., 3:4, :, :])
    a, b, inf = _phi_tensors(phi, x0_hat.dtype)
    return j01 * torch.exp(-a * g) + inf * (1.0 - torch.exp(-b * g))


def _loss_terms(
    x0_hat: Tensor, y01: Tensor, phi: WaterParams, cfg: GuidanceConfig
) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    j_hat = x0_hat[..., :3, :, :]
    resid = y01 - forward_model(x0_hat, phi, cfg)
    if cfg.use_depth_weighting:
        # The weight carries the current depth estimate's value but no gradient.
        w = cfg.rec_weight_scaling.apply(x0_hat[..., 3:4, :, :]).detach()
        resid = w * resid
    l_rec = (resid**2).sum()
    zero = torch.zeros((), dtype=x0_hat.dtype)
    l_val = zero
    l_avrg = zero
    if cfg.use_l_val:
        over = torch.clamp(j_hat.abs() - cfg.t_v, min=0.0)
        l_val = cfg.lambda_v * (over**2).sum()
    if cfg.use_l_avrg:
        channel_means = j_hat.mean(dim=(-2, -1))
        l_avrg = cfg.lambda_a * (channel_means - cfg.t_a).abs().sum()
    return l_rec, l_val, l_avrg, l_rec + l_val + l_avrg


def _observation01(y, cfg: GuidanceConfig, dtype: torch.dtype = torch.float32) -> Tensor:
    """Normalize an observation to a [0, 1]-range [3, H, W] tensor."""
    if isinstance(y, Tensor):
        t = y.to(dtype)
    else:
        arr = np.asarray(y, dtype=np.float32)
        if arr.ndim == 3 and arr.shape[-1] == 3:
            arr = np.moveaxis(arr, -1, 0)
        t = torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)
    if t.shape[-3] != 3:
        raise ConfigError(f"observation must have 3 channels, got shape {tuple(t.shape)}")
    if not cfg.y_in_unit_range:
        t = (t + 1.0) / 2.0
    return t


def compute_losses(x0_hat, y, phi: WaterParams, cfg: GuidanceConfig) -> LossBreakdown:
    """Loss values for a clean-state estimate against an observation."""
    if not isinstance(x0_hat, Tensor):
        x0_hat = torch.as_tensor(np.asarray(x0_hat), dtype=torch.float32)
    y01 = _observation01(y, cfg, x0_hat.dtype)
    with torch.no_grad():
        l_rec, l_val, l_avrg, total = _loss_terms(x0_hat, y01, phi, cfg)
    return LossBreakdown(float(l_rec), float(l_val), float(l_avrg), float(total))


def _scale_vector(cfg: GuidanceConfig, dtype: torch.dtype) -> Tensor:
    return torch.tensor([*cfg.scale_rgb, cfg.scale_depth], dtype=dtype).view(4, 1, 1)


def guided_step(
    x_t: Tensor,
    t: int,
    y,
    phi: WaterParams,
    denoiser,
    sched: NoiseSchedule,
    cfg: GuidanceConfig,
    rng: torch.Generator | None,
) -> GuidedStepResult:
    """One reverse step with likelihood guidance.

    The guidance gradient is taken through the denoiser (exact chain) unless
    ``cfg.jacobian_free`` is set, clipped elementwise to +-clip_value, then
    subtracted from the ancestral sample with per-channel scales.
    """
    y01 = _observation01(y, cfg, torch.float64)
    x_in = x_t.detach().requires_grad_(True)
    eps_pred, var_pred = _checked_prediction(denoiser, x_in, t)
    if cfg.jacobian_free:
        x0_hat = predict_x0(x_in, t, eps_pred.detach(), sched)
    else:
        x0_hat = predict_x0(x_in, t, eps_pred, sched)
    # The loss chain runs in float64: far-from-converged states can push the
    # formation exponentials past float32 range early in the chain.  The
    # hook bounds the backward pass at the precision boundary; anything that
    # large saturates the elementwise clip below either way.
    x0_64 = x0_hat.to(torch.float64)
    if x0_64.requires_grad:
        x0_64.register_hook(lambda g: torch.clamp(g, -1e30, 1e30))
    l_rec, l_val, l_avrg, total = _loss_terms(x0_64, y01, phi, cfg)
    (grad,) = torch.autograd.grad(total, x_in)
    if not torch.isfinite(grad).all():
        raise NumericalError(f"non-finite guidance gradient at step t={t}")
    grad = torch.clamp(grad, -cfg.clip_value, cfg.clip_value)
    with torch.no_grad():
        base = ancestral_step_from_prediction(
            x_in.detach(),
            t,
            eps_pred.detach(),
            None if var_pred is None else var_pred.detach(),
            sched,
            rng,
            cfg.force_fixed_variance,
        )
        x_prev = base - _scale_vector(cfg, x_t.dtype) * grad
    return GuidedStepResult(
        x_prev=x_prev,
        x0_hat=x0_hat.detach(),
        losses=LossBreakdown(
            float(l_rec.detach()), float(l_val.detach()), float(l_avrg.detach()), float(total.detach())
        ),
    )


def optimize_phi(x0_hat, y, phi: WaterParams, cfg: GuidanceConfig) -> WaterParams:
    """Fit the water parameters to the observation, the estimate held fixed.

    Runs ``n_phi_iters`` descent steps on the (depth weighted)
    reconstruction loss.  The gradient is assembled from the closed-form
    formation partials and normalized per pixel so the step size is
    resolution independent; steps use Adam-style adaptive moments (plain
    fixed-step descent stalls in the backscatter/veiling-color valley and
    cannot fit the coefficients within the sampling schedule).  Parameters
    are projected onto their invariant set after every iteration.
    """
    if cfg.n_phi_iters == 0:
        return phi.copy()
    if isinstance(x0_hat, Tensor):
        arr = x0_hat.detach().cpu().numpy().astype(np.float64)
    else:
        arr = np.asarray(x0_hat, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 4:
        raise ConfigError(f"expected a [4, H, W] state, got {arr.shape}")
    j01 = np.moveaxis((arr[:3] + 1.0) / 2.0, 0, -1)
    g_depth = cfg.depth_scaling.apply(arr[3])
    y01 = _observation01(y, cfg).cpu().numpy().astype(np.float64)
    y01 = np.moveaxis(y01, 0, -1)

    if cfg.use_depth_weighting:
        w2 = (cfg.rec_weight_scaling.apply(arr[3]) ** 2)[..., None]
    else:
        w2 = 1.0
    n_pixels = float(g_depth.size)

    beta1, beta2, eps = 0.9, 0.999, 1e-8
    m = np.zeros(9)
    v = np.zeros(9)
    cur = phi.copy()
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(1, cfg.n_phi_iters + 1):
            jac = formation_jacobian(j01, g_depth, cur, check=False)
            pred = apply_formation(j01, g_depth, cur, check=False)
            coeff = 2.0 * w2 * (y01 - pred) / n_pixels
            grad_a = -(coeff * jac.d_I_d_phi_a).sum(axis=(0, 1))
            grad_b = -(coeff * jac.d_I_d_phi_b).sum(axis=(0, 1))
            grad_inf = -(coeff * jac.d_I_d_phi_inf).sum(axis=(0, 1))
            if cur.tied:
                grad_a = grad_b = grad_a + grad_b
            if cur.haze:
                grad_a = grad_b = np.full(3, grad_a.mean())
            grad = np.concatenate([grad_a, grad_b, grad_inf])
            # A junk clean-state estimate (possible early in the chain) gives
            # meaningless, possibly unbounded gradients; leave phi alone then.
            # A vanishing gradient means the fit is at (or below float noise
            # of) a stationary point: stop rather than let the adaptive
            # moments random-walk on rounding noise.
            if not np.all(np.isfinite(grad)) or np.abs(grad).max() > 1e6 or np.abs(grad).max() < 1e-6:
                break
            m = beta1 * m + (1.0 - beta1) * grad
            v = beta2 * v + (1.0 - beta2) * grad * grad
            step = cfg.phi_lr * (m / (1.0 - beta1**k)) / (np.sqrt(v / (1.0 - beta2**k)) + eps)
            cur = WaterParams(
                cur.phi_a - step[:3],
                cur.phi_b - step[3:6],
                cur.phi_inf - step[6:],
                tied=cur.tied,
                haze=cur.haze,
            ).projected()
    return cur


def restore(
    y,
    denoiser,
    sched: NoiseSchedule,
    cfg: GuidanceConfig,
    rng: torch.Generator | None,
) -> RestorationResult:
    """Full guided reverse chain from noise; returns the restored scene.

    ``y`` is the observed image, [H, W, 3] numpy or [3, H, W] tensor, in
    [0, 1] (or [-1, 1] when cfg.y_in_unit_range is off).
    """
    cfg.validate()
    y01 = _observation01(y, cfg)
    h, w = int(y01.shape[-2]), int(y01.shape[-1])
    x = torch.randn((4, h, w), generator=rng)
    phi = cfg.init_phi()
    trace: list[LossBreakdown] = []
    snapshots: list[tuple[int, np.ndarray]] = []
    for t in reversed(range(sched.T)):
        try:
            step = guided_step(x, t, y01, phi, denoiser, sched, cfg, rng)
        except NumericalError:
            raise
        except Exception as exc:  # attach the failing step index
            raise type(exc)(f"step t={t}: {exc}") from exc
        x = step.x_prev
        trace.append(step.losses)
        if cfg.snapshot_every and t % cfg.snapshot_every == 0:
            snapshots.append((t, step.x0_hat.cpu().numpy().copy()))
        if cfg.n_phi_iters > 0 and cfg.optim_end <= t / sched.T <= cfg.optim_start:
            phi = optimize_phi(step.x0_hat, y01, phi, cfg)
    final = x.detach().cpu().numpy()
    j = np.clip(np.moveaxis((final[:3] + 1.0) / 2.0, 0, -1), 0.0, 1.0)
    d_hat_raw = final[3].copy()
    d_metric = cfg.depth_scaling.apply(d_hat_raw)
    return RestorationResult(
        J=j,
        D=d_metric,
        D_hat_raw=d_hat_raw,
        phi=phi,
        loss_trace=trace,
        snapshots=snapshots,
    )
