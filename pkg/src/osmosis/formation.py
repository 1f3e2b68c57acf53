"""Underwater image formation model and its analytic derivatives.

The model maps a clean scene ``J`` (physical intensities in [0, 1]), a
per-pixel distance map ``D`` (positive, in depth units) and a set of water
parameters ``phi`` onto the observed image

    I = J * exp(-phi_a * D) + phi_inf * (1 - exp(-phi_b * D))

per pixel and per color channel, with the single depth channel broadcast
across RGB.  ``phi_a`` attenuates the direct signal, ``phi_b`` controls how
fast the additive backscatter saturates, and ``phi_inf`` is the water color
observed at infinite distance.

Everything here is a pure numpy function, safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, FormationDomainError

__all__ = [
    "WaterParams",
    "DepthScaling",
    "FormationJacobian",
    "apply_formation",
    "formation_jacobian",
    "scale_depth",
]


def _as_channel_array(value, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape == ():
        arr = np.full(3, float(arr))
    if arr.shape != (3,):
        raise ConfigError(f"{name} must be a scalar or a 3-vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{name} contains non-finite values: {arr}")
    return arr


@dataclass
class WaterParams:
    """The nine unknowns of the formation model, one triple per RGB channel.

    ``tied`` forces phi_a == phi_b elementwise after every update (the
    simplified model used for simulated data).  ``haze`` additionally
    collapses phi_a/phi_b to a single scalar shared by all channels, which
    implies ``tied``.  ``phi_inf`` stays per-channel in both modes.
    """

    phi_a: np.ndarray
    phi_b: np.ndarray
    phi_inf: np.ndarray
    tied: bool = False
    haze: bool = False

    def __post_init__(self) -> None:
        self.phi_a = _as_channel_array(self.phi_a, "phi_a")
        self.phi_b = _as_channel_array(self.phi_b, "phi_b")
        self.phi_inf = _as_channel_array(self.phi_inf, "phi_inf")
        if self.haze:
            self.tied = True

    def validate(self) -> None:
        if np.any(self.phi_a < 0) or np.any(self.phi_b < 0):
            raise ConfigError("phi_a and phi_b must be nonnegative")
        if np.any(self.phi_inf < 0) or np.any(self.phi_inf > 1):
            raise ConfigError("phi_inf must lie in [0, 1]")
        if self.tied and not np.array_equal(self.phi_a, self.phi_b):
            raise ConfigError("tied WaterParams require phi_a == phi_b")
        if self.haze and (np.ptp(self.phi_a) != 0 or np.ptp(self.phi_b) != 0):
            raise ConfigError("haze WaterParams require a single scalar phi_a == phi_b")

    def projected(self) -> "WaterParams":
        """Nearest parameter set satisfying all invariants.

        Tied parameters project onto the phi_a == phi_b subspace via their
        mean; haze additionally averages across channels.  Coefficients are
        then clipped to their physical ranges.
        """
        a = self.phi_a.copy()
        b = self.phi_b.copy()
        if self.tied:
            a = b = (a + b) / 2.0
        if self.haze:
            a = b = np.full(3, float(np.mean(a)))
        a = np.clip(a, 0.0, None)
        b = a.copy() if self.tied else np.clip(b, 0.0, None)
        inf = np.clip(self.phi_inf, 0.0, 1.0)
        return WaterParams(a, b, inf, tied=self.tied, haze=self.haze)

    def copy(self) -> "WaterParams":
        return replace(
            self,
            phi_a=self.phi_a.copy(),
            phi_b=self.phi_b.copy(),
            phi_inf=self.phi_inf.copy(),
        )


@dataclass(frozen=True)
class DepthScaling:
    """Affine map g(d) = scale * (d + offset) from the sampler's depth range.

    The sampler works with depth in [-1, 1]; the formation model needs a
    distance in depth units.  The map must not send any of [-1, 1] below
    zero, i.e. scale * (offset - 1) >= 0.  The real-world default (1.4, 1.4)
    covers [0.56, 3.36]; the simulation default (0.5, 1.0) covers [0, 1].
    """

    scale: float = 1.4
    offset: float = 1.4

    def __post_init__(self) -> None:
        if not (np.isfinite(self.scale) and np.isfinite(self.offset)):
            raise ConfigError("depth scaling parameters must be finite")
        if self.scale <= 0:
            raise ConfigError(f"depth scale must be positive, got {self.scale}")
        if self.scale * (self.offset - 1.0) < 0:
            raise ConfigError(
                f"depth scaling ({self.scale}, {self.offset}) maps -1 to a negative depth"
            )

    def apply(self, d_hat):
        return self.scale * (d_hat + self.offset)


@dataclass(frozen=True)
class FormationJacobian:
    """Per-pixel, per-channel partials of the formation output I.

    All fields have the broadcast shape of I.  The phi partials are the
    diagonal per-channel derivatives: channel c of I only depends on
    channel c of each phi coefficient.
    """

    d_I_d_J: np.ndarray
    d_I_d_D: np.ndarray
    d_I_d_phi_a: np.ndarray
    d_I_d_phi_b: np.ndarray
    d_I_d_phi_inf: np.ndarray


def _broadcast_inputs(J, D) -> tuple[np.ndarray, np.ndarray]:
    J = np.asarray(J, dtype=np.float64)
    D = np.asarray(D, dtype=np.float64)
    if J.ndim == 0:
        J = J[None]
    if D.ndim == J.ndim - 1:
        D = D[..., None]
    elif D.ndim == 0:
        D = np.broadcast_to(D, J.shape[:-1] + (1,)) if J.ndim > 1 else D[None]
    return J, D


def _check_domain(J: np.ndarray, D: np.ndarray) -> None:
    bad = int(np.count_nonzero(~(np.isfinite(D) & (D > 0))))
    if bad:
        raise FormationDomainError(f"{bad} depth pixels are non-positive or non-finite")
    if not np.all(np.isfinite(J)):
        raise FormationDomainError("clean image contains non-finite values")


def apply_formation(J, D, phi: WaterParams, check: bool = True) -> np.ndarray:
    """Evaluate the formation model, broadcasting depth across channels.

    ``J`` is [..., 3] (or a bare 3-vector), ``D`` is [...] positive depth.
    With ``check`` the domain is validated; pass ``check=False`` for limit
    evaluations such as D == 0.
    """
    J, D = _broadcast_inputs(J, D)
    if check:
        _check_domain(J, D)
    direct = J * np.exp(-phi.phi_a * D)
    backscatter = phi.phi_inf * (1.0 - np.exp(-phi.phi_b * D))
    return direct + backscatter


def formation_jacobian(J, D, phi: WaterParams, check: bool = True) -> FormationJacobian:
    """Closed-form partials of the formation output with respect to each input."""
    J, D = _broadcast_inputs(J, D)
    if check:
        _check_domain(J, D)
    att = np.exp(-phi.phi_a * D)
    bsc = np.exp(-phi.phi_b * D)
    shape = np.broadcast_shapes(J.shape, att.shape)
    expand = lambda arr: np.broadcast_to(arr, shape).copy()  # noqa: E731
    return FormationJacobian(
        d_I_d_J=expand(att),
        d_I_d_D=expand(-phi.phi_a * J * att + phi.phi_inf * phi.phi_b * bsc),
        d_I_d_phi_a=expand(-D * J * att),
        d_I_d_phi_b=expand(phi.phi_inf * D * bsc),
        d_I_d_phi_inf=expand(1.0 - bsc),
    )


def scale_depth(d_hat, scaling: DepthScaling, check_range: float | None = None):
    """Map sampler-range depth onto positive metric depth via ``scaling``.

    ``check_range``, when given, rejects inputs outside [-1 - tol, 1 + tol];
    leave it None along the sampling path, where mild overshoot is expected.
    """
    d_hat = np.asarray(d_hat, dtype=np.float64)
    if check_range is not None:
        lo, hi = -1.0 - check_range, 1.0 + check_range
        if np.any(d_hat < lo) or np.any(d_hat > hi):
            raise FormationDomainError(
                f"depth values outside [{lo}, {hi}]: min={d_hat.min()}, max={d_hat.max()}"
            )
    return scaling.apply(d_hat)
