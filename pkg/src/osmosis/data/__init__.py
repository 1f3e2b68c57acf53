"""Dataset ingestion, synthetic scenes, simulation benchmarks, and metrics."""

from .ingest import DatasetRule, PRESET_RULES, augment, gray_world_white_balance, ingest
from .io import read_image, read_pfm, write_pfm, write_png8, write_png16
from .metrics import depth_abs_rel, psnr, ssim
from .simulate import (
    SimulationBenchmark,
    SimulationItem,
    SimulationSpec,
    build_simulation,
    load_benchmark,
    sample_phi,
    save_benchmark,
)
from .synth import SynthSceneSpec, luminance_depth_correlation, synth_scenes

__all__ = [
    "DatasetRule",
    "PRESET_RULES",
    "augment",
    "gray_world_white_balance",
    "ingest",
    "read_image",
    "read_pfm",
    "write_pfm",
    "write_png8",
    "write_png16",
    "depth_abs_rel",
    "psnr",
    "ssim",
    "SimulationBenchmark",
    "SimulationItem",
    "SimulationSpec",
    "build_simulation",
    "load_benchmark",
    "sample_phi",
    "save_benchmark",
    "SynthSceneSpec",
    "luminance_depth_correlation",
    "synth_scenes",
]
