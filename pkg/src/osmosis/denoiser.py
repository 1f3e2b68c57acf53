"""Pluggable denoisers: the interface, a small trainable U-Net, and an
analytic Gaussian-prior oracle used for exact tests.

A denoiser maps a noisy 4-channel state and a step index to a noise
prediction (plus an optional raw variance output) and must let gradients
flow from the prediction back to the input state.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import TYPE_CHECKING, Protocol, runtime_checkable

import torch
from torch import Tensor, nn

from .errors import ConfigError, ContractError

if TYPE_CHECKING:
    from .diffusion import NoiseSchedule

__all__ = [
    "Denoiser",
    "ToyUNetConfig",
    "ToyUNet",
    "GaussianOracleDenoiser",
    "gaussian_oracle_predict",
    "check_denoiser_contract",
]


@runtime_checkable
class Denoiser(Protocol):
    """Contract for denoising function approximators.

    ``predict`` takes x_t of shape [B, 4, H, W] (or [4, H, W]) and the step
    index (int, or per-item LongTensor for batched training) and returns
    ``(eps_pred, var_pred)`` with shapes equal to x_t.  ``var_pred`` is the
    raw variance-interpolation output in roughly [-1, 1], or None when the
    denoiser has no variance head.  Gradients must propagate from any
    scalar loss on eps_pred back to x_t.
    """

    def predict(self, x_t: Tensor, t) -> tuple[Tensor, Tensor | None]: ...


def sinusoidal_embedding(t: Tensor, dim: int) -> Tensor:
    """Standard sin/cos position features for step indices, shape [B, dim]."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1)
    ).to(t.device)
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.nn.functional.pad(emb, (0, 1))
    return emb


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


class _ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, t_dim: int):
        super().__init__()
        self.norm1 = _norm(c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.t_proj = nn.Linear(t_dim, c_out)
        self.norm2 = _norm(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: Tensor, t_emb: Tensor) -> Tensor:
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h + self.t_proj(t_emb)[:, :, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return h + self.skip(x)


@dataclass(frozen=True)
class ToyUNetConfig:
    """Shape of the small 4-channel encoder/decoder.

    ``depth_levels`` is the number of 2x downsamplings, so inputs must have
    spatial sizes divisible by 2**depth_levels.  Channel width doubles per
    level.  With a variance head the final convolution emits 8 channels,
    interpreted as (eps, raw variance).
    """

    channels: int = 32
    depth_levels: int = 2
    learn_variance: bool = True

    def __post_init__(self) -> None:
        if self.channels < 8 or self.channels % 8:
            raise ConfigError("base width must be a positive multiple of 8")
        if self.depth_levels < 1:
            raise ConfigError("need at least one down/up level")

    def as_dict(self) -> dict:
        return asdict(self)


class ToyUNet(nn.Module):
    """Small U-Net over 4-channel states with sinusoidal time conditioning.

    One residual block per resolution on each path, skip connections across
    the bottleneck, and a zero-initialized bias-free output convolution so a
    freshly built (or zeroed) model predicts eps = 0.
    """

    def __init__(self, config: ToyUNetConfig | None = None):
        super().__init__()
        self.config = config or ToyUNetConfig()
        c = self.config.channels
        levels = self.config.depth_levels
        t_dim = c * 4

        self.t_mlp = nn.Sequential(nn.Linear(c, t_dim), nn.SiLU(), nn.Linear(t_dim, t_dim))
        self.conv_in = nn.Conv2d(4, c, 3, padding=1)

        widths = [c * (2**i) for i in range(levels + 1)]
        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        for i in range(levels):
            self.down_blocks.append(_ResBlock(widths[i], widths[i], t_dim))
            self.downsamples.append(nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1))
        self.middle = _ResBlock(widths[-1], widths[-1], t_dim)
        self.up_blocks = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i in reversed(range(levels)):
            self.upsamples.append(nn.ConvTranspose2d(widths[i + 1], widths[i], 2, stride=2))
            self.up_blocks.append(_ResBlock(widths[i] * 2, widths[i], t_dim))

        out_ch = 8 if self.config.learn_variance else 4
        self.norm_out = _norm(c)
        self.conv_out = nn.Conv2d(c, out_ch, 3, padding=1, bias=False)
        nn.init.zeros_(self.conv_out.weight)

    def _check_input(self, x: Tensor) -> None:
        div = 2**self.config.depth_levels
        if x.shape[-1] % div or x.shape[-2] % div:
            raise ConfigError(
                f"spatial size {tuple(x.shape[-2:])} not divisible by {div}"
            )
        if x.shape[-3] != 4:
            raise ConfigError(f"expected 4 channels, got {x.shape[-3]}")

    def forward(self, x: Tensor, t: Tensor) -> Tensor:
        self._check_input(x)
        t_emb = self.t_mlp(sinusoidal_embedding(t, self.config.channels).to(x.dtype))
        h = self.conv_in(x)
        skips = []
        for block, down in zip(self.down_blocks, self.downsamples):
            h = block(h, t_emb)
            skips.append(h)
            h = down(h)
        h = self.middle(h, t_emb)
        for up, block in zip(self.upsamples, self.up_blocks):
            h = up(h)
            h = block(torch.cat([h, skips.pop()], dim=1), t_emb)
        return self.conv_out(torch.nn.functional.silu(self.norm_out(h)))

    def predict(self, x_t: Tensor, t) -> tuple[Tensor, Tensor | None]:
        squeeze = x_t.ndim == 3
        if squeeze:
            x_t = x_t[None]
        if not isinstance(t, Tensor):
            t = torch.full((x_t.shape[0],), int(t), dtype=torch.long, device=x_t.device)
        out = self.forward(x_t, t)
        if self.config.learn_variance:
            eps, var = out[:, :4], out[:, 4:]
        else:
            eps, var = out, None
        if squeeze:
            eps = eps[0]
            var = None if var is None else var[0]
        return eps, var


class GaussianOracleDenoiser:
    """Exact noise prediction for the prior N(mu, sigma2 * I).

    Lets sampling and guidance be tested against closed-form posterior
    statistics instead of a trained network.
    """

    def __init__(self, mu: Tensor | float, sigma2: float, sched: "NoiseSchedule"):
        if sigma2 <= 0:
            raise ConfigError("oracle variance must be positive")
        self.mu = mu if isinstance(mu, Tensor) else torch.tensor(float(mu))
        self.sigma2 = float(sigma2)
        self.sched = sched

    def predict(self, x_t: Tensor, t) -> tuple[Tensor, Tensor | None]:
        return gaussian_oracle_predict(x_t, t, self.mu, self.sigma2, self.sched), None


def gaussian_oracle_predict(
    x_t: Tensor, t, mu: Tensor | float, sigma2: float, sched: "NoiseSchedule"
) -> Tensor:
    """eps implied by the exact score of a Gaussian prior at step t."""
    mu_t = mu if isinstance(mu, Tensor) else torch.tensor(float(mu), dtype=x_t.dtype)
    if isinstance(t, Tensor) and t.ndim:
        ab = torch.as_tensor(sched.alpha_bar, dtype=x_t.dtype)[t.long()]
        ab = ab.view(-1, *([1] * (x_t.ndim - 1)))
        return torch.sqrt(1.0 - ab) * (x_t - torch.sqrt(ab) * mu_t) / (ab * sigma2 + 1.0 - ab)
    ab = float(sched.alpha_bar[int(t)])
    return math.sqrt(1.0 - ab) * (x_t - math.sqrt(ab) * mu_t) / (ab * sigma2 + 1.0 - ab)


def check_denoiser_contract(denoiser: Denoiser, shape=(1, 4, 8, 8), t: int = 1) -> None:
    """Assert shape preservation, finiteness, and gradient flow to x_t.

    Raises ContractError on violation.  Constant denoisers legitimately
    produce zero input-gradients; anything else must not.
    """
    x = torch.randn(shape, requires_grad=True)
    eps, var = denoiser.predict(x, t)
    if eps.shape != x.shape:
        raise ContractError(f"eps shape {tuple(eps.shape)} != input {tuple(x.shape)}")
    if var is not None and var.shape != x.shape:
        raise ContractError("variance output shape mismatch")
    if not torch.isfinite(eps).all():
        raise ContractError("non-finite eps prediction")
    if var is not None and not torch.isfinite(var).all():
        raise ContractError("non-finite variance prediction")
    loss = (eps * torch.randn(eps.shape, generator=torch.Generator().manual_seed(0))).sum()
    try:
        grad = torch.autograd.grad(loss, x, allow_unused=True)[0]
    except RuntimeError as exc:
        raise ContractError(f"no gradient path from eps prediction to x_t: {exc}") from exc
    if grad is None:
        raise ContractError("no gradient path from eps prediction to x_t")
    if not torch.isfinite(grad).all():
        raise ContractError("non-finite input gradient")
