"""Run configuration: a flat key-path = value file with typed validation.

The effective configuration starts from a profile's defaults (the
``real_world`` restoration profile, or ``simulation`` for synthetic
benchmarks), then applies the config file's keys, then any ``--set``
overrides.  Unknown keys are rejected so misspellings never fall back to
silent defaults.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .denoiser import ToyUNetConfig
from .diffusion import NoiseSchedule, make_schedule
from .errors import ConfigError
from .formation import DepthScaling, WaterParams
from .guidance import GuidanceConfig
from .data.simulate import SimulationSpec
from .data.synth import SynthSceneSpec

__all__ = ["RunConfig", "parse_config_file", "parse_config_text", "serialize_config"]


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_float3(s: str) -> tuple[float, float, float]:
    parts = [p.strip() for p in s.split(",")]
    if len(parts) != 3:
        raise ValueError(f"expected three comma-separated values: {s!r}")
    return tuple(float(p) for p in parts)  # type: ignore[return-value]


def _parse_int_range(s: str) -> tuple[int, int]:
    lo, _, hi = s.partition(":")
    if not _:
        raise ValueError(f"expected lo:hi range: {s!r}")
    return int(lo), int(hi)


def _parse_float_range(s: str) -> tuple[float, float]:
    lo, _, hi = s.partition(":")
    if not _:
        raise ValueError(f"expected lo:hi range: {s!r}")
    return float(lo), float(hi)


def _parse_opt_float(s: str) -> float | None:
    return None if s.strip().lower() == "none" else float(s)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, tuple):
        if len(value) == 2:
            return f"{value[0]!r}:{value[1]!r}".replace("'", "")
        return ",".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class _Field:
    parse: Callable[[str], object]
    default: object


_F = _Field

_SCHEMA: dict[str, _Field] = {
    "profile": _F(str, "real_world"),
    "seed": _F(int, 0),
    # diffusion schedule
    "schedule.steps": _F(int, 1000),
    "schedule.beta_start": _F(float, 1e-4),
    "schedule.beta_end": _F(float, 2e-2),
    # denoiser
    "model.channels": _F(int, 32),
    "model.depth_levels": _F(int, 2),
    "model.learn_variance": _F(_parse_bool, True),
    # prior training
    "train.data": _F(str, "synth"),
    "train.rule": _F(str, "generic"),
    "train.scenes": _F(int, 2000),
    "train.size": _F(int, 48),
    "train.batch_size": _F(int, 16),
    "train.steps": _F(int, 4000),
    "train.lr": _F(float, 2e-4),
    "train.vlb_weight": _F(float, 1e-3),
    "train.log_every": _F(int, 50),
    "train.augment": _F(_parse_bool, True),
    "train.ema": _F(float, 0.995),
    # synthetic scene family
    "synth.n_objects": _F(_parse_int_range, (2, 6)),
    "synth.depth_layers": _F(_parse_int_range, (2, 5)),
    "synth.background": _F(_parse_float_range, (0.15, 1.0)),
    # simulation benchmark
    "simulate.count": _F(int, 50),
    "simulate.tie": _F(_parse_bool, True),
    "simulate.phi_a.red": _F(_parse_float_range, (0.44, 1.76)),
    "simulate.phi_a.green": _F(_parse_float_range, (0.38, 1.52)),
    "simulate.phi_a.blue": _F(_parse_float_range, (0.38, 1.52)),
    "simulate.phi_inf.red": _F(_parse_float_range, (0.1, 0.8)),
    "simulate.phi_inf.green": _F(_parse_float_range, (0.1, 0.8)),
    "simulate.phi_inf.blue": _F(_parse_float_range, (0.1, 0.8)),
    # guided sampling
    "guidance.scale_rgb": _F(_parse_float3, (7.0, 7.0, 7.0)),
    "guidance.scale_depth": _F(float, 0.9),
    "guidance.lambda_v": _F(float, 20.0),
    "guidance.lambda_a": _F(float, 0.5),
    "guidance.t_v": _F(float, 0.7),
    "guidance.t_a": _F(float, 0.5),
    "guidance.clip_value": _F(float, 0.005),
    "guidance.optim_start": _F(float, 0.7),
    "guidance.optim_end": _F(float, 0.0),
    "guidance.n_phi_iters": _F(int, 20),
    "guidance.phi_lr": _F(float, 5e-3),
    "guidance.depth_scale": _F(float, 1.4),
    "guidance.depth_offset": _F(float, 1.4),
    "guidance.weight_scale": _F(_parse_opt_float, None),
    "guidance.weight_offset": _F(_parse_opt_float, None),
    "guidance.phi_init_a": _F(_parse_float3, (1.1, 0.95, 0.95)),
    "guidance.phi_init_b": _F(_parse_float3, (0.95, 0.8, 0.8)),
    "guidance.phi_init_inf": _F(_parse_float3, (0.14, 0.29, 0.49)),
    "guidance.use_depth_weighting": _F(_parse_bool, True),
    "guidance.use_l_val": _F(_parse_bool, True),
    "guidance.use_l_avrg": _F(_parse_bool, True),
    "guidance.tie_phi": _F(_parse_bool, False),
    "guidance.haze": _F(_parse_bool, False),
    "guidance.force_fixed_variance": _F(_parse_bool, False),
    "guidance.jacobian_free": _F(_parse_bool, False),
    "guidance.snapshot_every": _F(int, 50),
    # commands
    "sample.count": _F(int, 8),
    "restore.white_balance": _F(_parse_bool, False),
    "restore.degamma": _F(float, 1.0),
    "restore.gamma": _F(float, 1.0),
    "ablate.variants": _F(str, "1,2,3,4,5,6"),
    # paths
    "paths.checkpoint": _F(str, ""),
    "paths.benchmark": _F(str, ""),
    "paths.input": _F(str, ""),
    "paths.results": _F(str, ""),
}

# Profile overlays: the simulation profile swaps in the benchmark-tuned
# guidance values (tied coefficients, [0, 1] depth mapping, no gray-world
# loss) while the reconstruction weight keeps the real-world depth map.
_PROFILES: dict[str, dict[str, object]] = {
    "real_world": {},
    "simulation": {
        "guidance.scale_rgb": (4.0, 4.0, 4.0),
        "guidance.scale_depth": 1.0,
        "guidance.lambda_v": 40.0,
        "guidance.lambda_a": 0.0,
        "guidance.clip_value": 0.001,
        "guidance.depth_scale": 0.5,
        "guidance.depth_offset": 1.0,
        "guidance.weight_scale": 1.4,
        "guidance.weight_offset": 1.4,
        "guidance.tie_phi": True,
        "guidance.phi_init_b": (1.1, 0.95, 0.95),
        "guidance.phi_init_inf": (0.2, 0.4, 0.7),
    },
}


class RunConfig:
    """Effective configuration: profile defaults + file keys + overrides."""

    def __init__(self, values: dict[str, object]):
        self.values = values

    def __getitem__(self, key: str):
        try:
            return self.values[key]
        except KeyError:
            raise ConfigError(f"unknown config key {key!r}") from None

    def __eq__(self, other) -> bool:
        return isinstance(other, RunConfig) and self.values == other.values

    # Module-level config builders -------------------------------------

    def schedule(self) -> NoiseSchedule:
        return make_schedule(
            self["schedule.steps"], self["schedule.beta_start"], self["schedule.beta_end"]
        )

    def model_config(self) -> ToyUNetConfig:
        return ToyUNetConfig(
            channels=self["model.channels"],
            depth_levels=self["model.depth_levels"],
            learn_variance=self["model.learn_variance"],
        )

    def synth_spec(self, seed: int | None = None) -> SynthSceneSpec:
        return SynthSceneSpec(
            size=self["train.size"],
            n_objects=self["synth.n_objects"],
            depth_layers=self["synth.depth_layers"],
            background=self["synth.background"],
            seed=self["seed"] if seed is None else seed,
        )

    def simulation_spec(self, seed: int | None = None) -> SimulationSpec:
        return SimulationSpec(
            phi_a_ranges=(
                self["simulate.phi_a.red"],
                self["simulate.phi_a.green"],
                self["simulate.phi_a.blue"],
            ),
            phi_inf_ranges=(
                self["simulate.phi_inf.red"],
                self["simulate.phi_inf.green"],
                self["simulate.phi_inf.blue"],
            ),
            tie=self["simulate.tie"],
            count=self["simulate.count"],
            seed=self["seed"] if seed is None else seed,
        )

    def guidance_config(self) -> GuidanceConfig:
        weight_scale = self["guidance.weight_scale"]
        weight_offset = self["guidance.weight_offset"]
        if (weight_scale is None) != (weight_offset is None):
            raise ConfigError("guidance.weight_scale and weight_offset must be set together")
        cfg = GuidanceConfig(
            scale_rgb=self["guidance.scale_rgb"],
            scale_depth=self["guidance.scale_depth"],
            lambda_v=self["guidance.lambda_v"],
            lambda_a=self["guidance.lambda_a"],
            t_v=self["guidance.t_v"],
            t_a=self["guidance.t_a"],
            clip_value=self["guidance.clip_value"],
            optim_start=self["guidance.optim_start"],
            optim_end=self["guidance.optim_end"],
            n_phi_iters=self["guidance.n_phi_iters"],
            phi_lr=self["guidance.phi_lr"],
            phi_init=WaterParams(
                self["guidance.phi_init_a"],
                self["guidance.phi_init_b"],
                self["guidance.phi_init_inf"],
                tied=self["guidance.tie_phi"],
                haze=self["guidance.haze"],
            ).projected(),
            depth_scaling=DepthScaling(
                self["guidance.depth_scale"], self["guidance.depth_offset"]
            ),
            weight_scaling=(
                None if weight_scale is None else DepthScaling(weight_scale, weight_offset)
            ),
            use_depth_weighting=self["guidance.use_depth_weighting"],
            use_l_val=self["guidance.use_l_val"],
            use_l_avrg=self["guidance.use_l_avrg"],
            tie_phi=self["guidance.tie_phi"],
            haze=self["guidance.haze"],
            force_fixed_variance=self["guidance.force_fixed_variance"],
            jacobian_free=self["guidance.jacobian_free"],
            snapshot_every=self["guidance.snapshot_every"],
        )
        cfg.validate()
        return cfg


def parse_config_text(text: str) -> dict[str, str]:
    """Raw key -> value-string pairs; '#' starts a comment, blanks skipped."""
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        pairs[key.strip()] = value.strip()
    return pairs


def build_config(pairs: dict[str, str], overrides: dict[str, str] | None = None) -> RunConfig:
    """Typed effective configuration from raw pairs plus --set overrides."""
    merged = dict(pairs)
    merged.update(overrides or {})
    for key in merged:
        if key not in _SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")

    profile = merged.get("profile", _SCHEMA["profile"].default)
    if profile not in _PROFILES:
        raise ConfigError(f"unknown profile {profile!r} (known: {sorted(_PROFILES)})")

    values: dict[str, object] = {k: f.default for k, f in _SCHEMA.items()}
    values.update(_PROFILES[profile])
    values["profile"] = profile
    for key, raw in merged.items():
        field = _SCHEMA[key]
        try:
            values[key] = field.parse(raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from exc
    return RunConfig(values)


def parse_config_file(
    path: str | Path | None, overrides: dict[str, str] | None = None
) -> RunConfig:
    pairs: dict[str, str] = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        pairs = parse_config_text(p.read_text())
    return build_config(pairs, overrides)


def serialize_config(cfg: RunConfig) -> str:
    """Canonical text form; parsing it back reproduces the configuration."""
    lines = [f"profile = {cfg.values['profile']}"]
    for key in sorted(_SCHEMA):
        if key == "profile":
            continue
        lines.append(f"{key} = {_fmt(cfg.values[key])}")
    return "\n".join(lines) + "\n"
