"""RGBD dataset ingestion with per-dataset depth conventions.

Expected directory layout: ``<root>/rgb/*.png`` (or .jpg) with matching
stems under ``<root>/depth/`` (PFM, or 8/16-bit PNG holding normalized
values) and optionally ``<root>/mask/``.  Depth handling differs per
source dataset, captured by a :class:`DatasetRule`:

* ``normalize_by_max``: metric depth divided by a sensor maximum,
* ``one_minus_disparity``: relative disparity in [0, 1] turned into depth,
* ``already_normalized``: values already in [0, 1].

Lidar-style sources mark holes (depth <= 0 or non-finite) invalid and use
a sky-crop plus random horizontal crop instead of the center crop.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import cv2
import numpy as np

from ..diffusion import RGBDImage
from ..errors import ConfigError, DataError
from .io import read_image, read_mask, read_pfm

__all__ = [
    "DatasetRule",
    "PRESET_RULES",
    "ingest",
    "augment",
    "gray_world_white_balance",
]

log = logging.getLogger(__name__)

_DEPTH_MODES = ("normalize_by_max", "one_minus_disparity", "already_normalized")
_MASK_SOURCES = ("provided", "holes_as_invalid", "none")


@dataclass(frozen=True)
class DatasetRule:
    name: str
    depth_mode: str
    max_value: float | None = None
    mask_source: str = "none"
    kitti_crop: bool = False

    def validate(self) -> None:
        if self.depth_mode not in _DEPTH_MODES:
            raise ConfigError(f"unknown depth mode {self.depth_mode!r}")
        if self.mask_source not in _MASK_SOURCES:
            raise ConfigError(f"unknown mask source {self.mask_source!r}")
        if self.depth_mode == "normalize_by_max":
            if self.max_value is None or self.max_value <= 0:
                raise ConfigError("normalize_by_max needs a positive max_value")


PRESET_RULES = {
    "kitti": DatasetRule("kitti", "normalize_by_max", 80.0, "holes_as_invalid", kitti_crop=True),
    "diode": DatasetRule("diode", "normalize_by_max", 350.0, "provided"),
    "hrwsi": DatasetRule("hrwsi", "one_minus_disparity", None, "provided"),
    "redweb_s": DatasetRule("redweb_s", "already_normalized", None, "none"),
    "generic": DatasetRule("generic", "already_normalized", None, "none"),
}


def _read_depth(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".pfm":
        return read_pfm(path)
    arr = read_image(path)
    if arr.ndim == 3:
        arr = arr.mean(axis=-1)
    return arr


def _normalize_depth(raw: np.ndarray, rule: DatasetRule) -> tuple[np.ndarray, np.ndarray]:
    """Returns (normalized depth in [0, 1], validity mask for this rule)."""
    holes = ~np.isfinite(raw) | (raw <= 0)
    raw = np.where(holes, 0.0, raw)
    if rule.depth_mode == "normalize_by_max":
        depth = raw / rule.max_value
    elif rule.depth_mode == "one_minus_disparity":
        depth = 1.0 - raw
    else:
        depth = raw
    depth = np.clip(depth, 0.0, 1.0)
    if rule.mask_source == "holes_as_invalid":
        depth = np.where(holes, 0.0, depth)
        return depth, ~holes
    return depth, np.ones(depth.shape, dtype=bool)


def _resize_shorter(rgb: np.ndarray, depth: np.ndarray, mask: np.ndarray, target: int):
    h, w = depth.shape
    scale = target / min(h, w)
    nh, nw = max(target, int(round(h * scale))), max(target, int(round(w * scale)))
    rgb = cv2.resize(rgb, (nw, nh), interpolation=cv2.INTER_AREA)
    depth = cv2.resize(depth, (nw, nh), interpolation=cv2.INTER_NEAREST)
    mask = cv2.resize(mask.astype(np.uint8), (nw, nh), interpolation=cv2.INTER_NEAREST) > 0
    return rgb, depth, mask


def _crop(rgb, depth, mask, target: int, kitti: bool, rng: np.random.Generator):
    h, w = depth.shape
    if kitti:
        # Native-resolution crop: drop the sky band at the top, then take a
        # random horizontal window (no resizing for lidar-style sources).
        top = h - target
        left = int(rng.integers(0, w - target + 1))
    else:
        top = (h - target) // 2
        left = (w - target) // 2
    sl = (slice(top, top + target), slice(left, left + target))
    return rgb[sl], depth[sl], mask[sl]


def ingest(
    path: str | Path,
    rule: DatasetRule,
    target_size: int,
    rng: np.random.Generator | None = None,
) -> Iterator[RGBDImage]:
    """Stream dataset items as RGBD images in the sampler's value ranges.

    Unreadable or malformed items are skipped (with a logged count); an
    entirely empty stream raises.
    """
    rule.validate()
    root = Path(path)
    rgb_dir, depth_dir, mask_dir = root / "rgb", root / "depth", root / "mask"
    if not rgb_dir.is_dir() or not depth_dir.is_dir():
        raise DataError(f"expected rgb/ and depth/ under {root}")
    rng = rng or np.random.default_rng(0)

    depth_files = {p.stem: p for p in sorted(depth_dir.iterdir())}
    mask_files = {p.stem: p for p in sorted(mask_dir.iterdir())} if mask_dir.is_dir() else {}
    skipped = 0
    yielded = 0
    for rgb_path in sorted(rgb_dir.iterdir()):
        stem = rgb_path.stem
        try:
            if stem not in depth_files:
                raise DataError(f"no depth file for {stem}")
            rgb01 = read_image(rgb_path)
            if rgb01.ndim != 3:
                raise DataError(f"{stem}: rgb is not a color image")
            raw_depth = _read_depth(depth_files[stem])
            if raw_depth.shape != rgb01.shape[:2]:
                raise DataError(f"{stem}: depth shape {raw_depth.shape} != rgb {rgb01.shape[:2]}")
            depth01, valid = _normalize_depth(raw_depth.astype(np.float64), rule)
            if rule.mask_source == "provided":
                if stem not in mask_files:
                    raise DataError(f"no mask file for {stem}")
                valid = read_mask(mask_files[stem])
            if rule.kitti_crop:
                if min(depth01.shape) < target_size:
                    raise DataError(f"{stem}: smaller than crop size {target_size}")
            else:
                rgb01, depth01, valid = _resize_shorter(rgb01, depth01, valid, target_size)
            rgb01, depth01, valid = _crop(rgb01, depth01, valid, target_size, rule.kitti_crop, rng)
            img = RGBDImage(
                rgb=2.0 * rgb01 - 1.0,
                depth=2.0 * depth01 - 1.0,
                mask=valid,
            )
            img.validate(check_range=True)
        except (DataError, ConfigError, ValueError) as exc:
            skipped += 1
            log.warning("skipping %s: %s", stem, exc)
            continue
        yielded += 1
        yield img
    if skipped:
        log.info("ingest skipped %d malformed items under %s", skipped, root)
    if yielded == 0:
        raise DataError(f"no usable items under {root} ({skipped} skipped)")


def augment(img: RGBDImage, rng: np.random.Generator) -> RGBDImage:
    """Random horizontal/vertical flips applied jointly to all planes."""
    rgb, depth, mask = img.rgb, img.depth, img.mask
    if rng.random() < 0.5:
        rgb, depth, mask = rgb[:, ::-1], depth[:, ::-1], mask[:, ::-1]
    if rng.random() < 0.5:
        rgb, depth, mask = rgb[::-1], depth[::-1], mask[::-1]
    return RGBDImage(rgb=rgb.copy(), depth=depth.copy(), mask=mask.copy())


def gray_world_white_balance(img01: np.ndarray) -> np.ndarray:
    """Equalize channel means while preserving the global mean; clips to [0, 1]."""
    img01 = np.asarray(img01, dtype=np.float64)
    if img01.ndim != 3 or img01.shape[-1] != 3:
        raise DataError(f"expected [H, W, 3], got {img01.shape}")
    means = img01.mean(axis=(0, 1))
    for c, name in enumerate("RGB"):
        if means[c] == 0.0:
            raise DataError(f"channel {name} has zero mean; cannot white-balance")
    target = means.mean()
    return np.clip(img01 * (target / means), 0.0, 1.0)
