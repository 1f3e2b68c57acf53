"""Simulated underwater benchmark: degrade clean RGBD scenes with randomly
drawn water parameters and keep the full ground-truth tuple.

The on-disk benchmark is the ground truth: clean color and the degraded
observation are committed to the 16-bit PNG grid before the observation is
computed, so regenerating y from the stored (J, D, phi) reproduces the
stored file bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from ..diffusion import RGBDImage
from ..errors import ConfigError, DataError
from ..formation import DepthScaling, WaterParams, apply_formation
from .io import read_image, read_pfm, to_uint16, write_pfm, write_png16

__all__ = [
    "SimulationSpec",
    "SimulationItem",
    "SimulationBenchmark",
    "sample_phi",
    "build_simulation",
    "save_benchmark",
    "load_benchmark",
]

ChannelRanges = tuple[tuple[float, float], tuple[float, float], tuple[float, float]]

# Attenuation sampling ranges follow the red-highest channel profile of the
# default initialization, scaled by a uniform draw in [0.4, 1.6].
DEFAULT_PHI_A_RANGES: ChannelRanges = ((0.44, 1.76), (0.38, 1.52), (0.38, 1.52))
DEFAULT_PHI_INF_RANGES: ChannelRanges = ((0.1, 0.8), (0.1, 0.8), (0.1, 0.8))


@dataclass(frozen=True)
class SimulationSpec:
    """Sampling ranges for the degradation draw, one (lo, hi) per channel.

    ``tie`` collapses the backscatter coefficient onto the attenuation one
    (the simplified model).  Veiling-color draws are sorted so blue >= green
    >= red, matching the bluish cast of real water.
    """

    phi_a_ranges: ChannelRanges = DEFAULT_PHI_A_RANGES
    phi_inf_ranges: ChannelRanges = DEFAULT_PHI_INF_RANGES
    tie: bool = True
    count: int = 50
    seed: int = 0
    depth_scaling: DepthScaling = field(default_factory=lambda: DepthScaling(0.5, 1.0))

    def validate(self) -> None:
        if self.count < 1:
            raise ConfigError("simulation count must be >= 1")
        for name, ranges, hi_cap in (
            ("phi_a", self.phi_a_ranges, None),
            ("phi_inf", self.phi_inf_ranges, 1.0),
        ):
            for lo, hi in ranges:
                if lo < 0 or hi < lo:
                    raise ConfigError(f"bad {name} range ({lo}, {hi})")
                if hi_cap is not None and hi > hi_cap:
                    raise ConfigError(f"{name} range exceeds {hi_cap}")

    def as_dict(self) -> dict:
        return {
            "phi_a_ranges": [list(r) for r in self.phi_a_ranges],
            "phi_inf_ranges": [list(r) for r in self.phi_inf_ranges],
            "tie": self.tie,
            "count": self.count,
            "seed": self.seed,
            "depth_scaling": [self.depth_scaling.scale, self.depth_scaling.offset],
        }

    def content_hash(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True).encode("ascii")
        return hashlib.sha256(blob).hexdigest()[:16]


def sample_phi(spec: SimulationSpec, rng: np.random.Generator) -> WaterParams:
    """Draw one parameter set; tied specs reuse phi_a for phi_b."""
    a = np.array([rng.uniform(lo, hi) for lo, hi in spec.phi_a_ranges])
    b = a.copy() if spec.tie else np.array([rng.uniform(lo, hi) for lo, hi in spec.phi_a_ranges])
    inf = np.sort(np.array([rng.uniform(lo, hi) for lo, hi in spec.phi_inf_ranges]))
    inf = np.array([np.clip(inf[i], *spec.phi_inf_ranges[i]) for i in range(3)])
    return WaterParams(a, b, inf, tied=spec.tie)


@dataclass
class SimulationItem:
    """One benchmark entry; arrays are committed to their storage grids."""

    index: int
    clean: np.ndarray  # [H, W, 3] float32 in [0, 1], on the 16-bit grid
    depth: np.ndarray  # [H, W] float32 positive depth in formation units
    observed: np.ndarray  # [H, W, 3] float32 in [0, 1], on the 16-bit grid
    phi: WaterParams


@dataclass
class SimulationBenchmark:
    spec: SimulationSpec
    items: list[SimulationItem]


def _commit16(img01: np.ndarray) -> np.ndarray:
    # Matches the 16-bit PNG read path bit-for-bit (single float32 rounding).
    return to_uint16(img01).astype(np.float32) / 65535.0


def degrade(clean01: np.ndarray, depth: np.ndarray, phi: WaterParams) -> np.ndarray:
    """Observation for a committed clean image: formed in float64, committed to 16 bits."""
    y = apply_formation(clean01.astype(np.float64), depth.astype(np.float64), phi)
    return _commit16(y)


def build_simulation(scenes: Iterable[RGBDImage], spec: SimulationSpec) -> SimulationBenchmark:
    """Degrade ``spec.count`` scenes; a pure function of (scenes, spec)."""
    spec.validate()
    children = np.random.SeedSequence(spec.seed).spawn(spec.count)
    items: list[SimulationItem] = []
    for i, scene in enumerate(scenes):
        if i >= spec.count:
            break
        scene.validate()
        phi = sample_phi(spec, np.random.default_rng(children[i]))
        clean = _commit16((scene.rgb.astype(np.float64) + 1.0) / 2.0)
        depth = spec.depth_scaling.apply(scene.depth.astype(np.float64)).astype(np.float32)
        items.append(
            SimulationItem(
                index=i,
                clean=clean,
                depth=depth,
                observed=degrade(clean, depth, phi),
                phi=phi,
            )
        )
    if len(items) < spec.count:
        raise DataError(f"needed {spec.count} scenes, got {len(items)}")
    return SimulationBenchmark(spec=spec, items=items)


def save_benchmark(bench: SimulationBenchmark, outdir: str | Path) -> Path:
    """Write per-item files plus a manifest naming paths, phi draws, and the spec."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    entries = []
    for item in bench.items:
        stem = f"{item.index:04d}"
        write_png16(outdir / f"{stem}_clean.png", item.clean)
        write_pfm(outdir / f"{stem}_depth.pfm", item.depth)
        write_png16(outdir / f"{stem}_input.png", item.observed)
        entries.append(
            {
                "index": item.index,
                "clean": f"{stem}_clean.png",
                "depth": f"{stem}_depth.pfm",
                "input": f"{stem}_input.png",
                "phi_a": item.phi.phi_a.tolist(),
                "phi_b": item.phi.phi_b.tolist(),
                "phi_inf": item.phi.phi_inf.tolist(),
                "tied": item.phi.tied,
            }
        )
    manifest = {
        "kind": "simulation-benchmark",
        "spec": bench.spec.as_dict(),
        "spec_hash": bench.spec.content_hash(),
        "seed": bench.spec.seed,
        "items": entries,
    }
    with open(outdir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return outdir


def load_benchmark(path: str | Path) -> SimulationBenchmark:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no manifest.json under {path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    spec_dict = manifest["spec"]
    spec = SimulationSpec(
        phi_a_ranges=tuple(tuple(r) for r in spec_dict["phi_a_ranges"]),
        phi_inf_ranges=tuple(tuple(r) for r in spec_dict["phi_inf_ranges"]),
        tie=spec_dict["tie"],
        count=spec_dict["count"],
        seed=spec_dict["seed"],
        depth_scaling=DepthScaling(*spec_dict["depth_scaling"]),
    )
    if manifest.get("spec_hash") != spec.content_hash():
        raise DataError("benchmark manifest hash mismatch")
    items = []
    for entry in manifest["items"]:
        phi = WaterParams(
            entry["phi_a"], entry["phi_b"], entry["phi_inf"], tied=entry["tied"]
        )
        items.append(
            SimulationItem(
                index=entry["index"],
                clean=read_image(path / entry["clean"]),
                depth=read_pfm(path / entry["depth"]),
                observed=read_image(path / entry["input"]),
                phi=phi,
            )
        )
    return SimulationBenchmark(spec=spec, items=items)
