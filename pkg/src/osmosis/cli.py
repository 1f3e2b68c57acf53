"""Command-line pipeline: train the prior, sample it, build simulation
benchmarks, restore images, evaluate, and run ablation sweeps.

Every command writes a run manifest holding the full effective
configuration, seed, and output paths; re-running a command from its
manifest in deterministic mode reproduces the numerical outputs byte for
byte.  Per-image randomness is always derived as seed + image index, so a
worker pool never changes results.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import cv2
import numpy as np
import torch

from . import __version__
from .config import RunConfig, build_config, parse_config_file, serialize_config
from .data.ingest import PRESET_RULES, gray_world_white_balance, ingest
from .data.io import read_image, read_pfm, write_pfm, write_png8
from .data.metrics import depth_abs_rel, psnr, ssim
from .data.simulate import SimulationBenchmark, build_simulation, load_benchmark, save_benchmark
from .data.synth import synth_scenes
from .denoiser import ToyUNet
from .diffusion import collate, load_checkpoint, sample_chain, save_checkpoint, train_step
from .errors import ConfigError, DataError, NumericalError, OsmosisError
from .guidance import GuidanceConfig, RestorationResult, ablation_preset, restore

__all__ = ["main", "run_from_manifest", "cache_dir"]


def cache_dir() -> Path:
    root = os.environ.get("OSMOSIS_CACHE")
    return Path(root) if root else Path.home() / ".cache" / "osmosis"


# ---------------------------------------------------------------------------
# Run context and manifests


class RunContext:
    def __init__(self, cfg: RunConfig, seed: int, jobs: int, deterministic: bool, out: Path):
        self.cfg = cfg
        self.seed = seed
        self.jobs = max(1, jobs)
        self.deterministic = deterministic
        self.out = out
        self.out.mkdir(parents=True, exist_ok=True)

    def write_manifest(self, command: str, outputs: dict, extra: dict | None = None) -> Path:
        manifest = {
            "command": command,
            "config": serialize_config(self.cfg),
            "seed": self.seed,
            "jobs": self.jobs,
            "deterministic": self.deterministic,
            "version": __version__,
            "created": 0.0 if self.deterministic else time.time(),
            "outputs": outputs,
        }
        if extra:
            manifest.update(extra)
        path = self.out / "manifest.json"
        with open(path, "w") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
        return path


def run_from_manifest(manifest_path: str | Path, out: str | Path) -> int:
    """Re-execute the command recorded in a run manifest (deterministically)."""
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    config_path = out / "rerun_config.txt"
    config_path.write_text(manifest["config"])
    argv = [
        manifest["command"],
        "--config",
        str(config_path),
        "--seed",
        str(manifest["seed"]),
        "--jobs",
        str(manifest["jobs"]),
        "--out",
        str(out),
        "--deterministic",
    ]
    return main(argv)


# ---------------------------------------------------------------------------
# Helpers


def _load_model(cfg: RunConfig):
    path = cfg["paths.checkpoint"]
    if not path:
        raise ConfigError("paths.checkpoint is required for this command")
    model, sched, meta = load_checkpoint(path)
    return model, sched, meta


def _augment_batch(x: torch.Tensor, m: torch.Tensor, rng: torch.Generator):
    flips = torch.rand((x.shape[0], 2), generator=rng) < 0.5
    for i in range(x.shape[0]):
        dims = []
        if flips[i, 0]:
            dims.append(-1)
        if flips[i, 1]:
            dims.append(-2)
        if dims:
            x[i] = torch.flip(x[i], dims)
            m[i] = torch.flip(m[i], dims)
    return x, m


def _training_images(ctx: RunContext):
    cfg = ctx.cfg
    count = cfg["train.scenes"]
    if cfg["train.data"] == "synth":
        return list(synth_scenes(cfg.synth_spec(seed=ctx.seed), count))
    rule_name = cfg["train.rule"]
    if rule_name not in PRESET_RULES:
        raise ConfigError(f"unknown ingest rule {rule_name!r} (known: {sorted(PRESET_RULES)})")
    stream = ingest(
        cfg["train.data"], PRESET_RULES[rule_name], cfg["train.size"],
        np.random.default_rng(ctx.seed),
    )
    images = []
    for img in stream:
        images.append(img)
        if len(images) >= count:
            break
    return images


def cmd_train(ctx: RunContext) -> Path:
    cfg = ctx.cfg
    sched = cfg.schedule()
    model = ToyUNet(cfg.model_config())
    div = 2 ** cfg["model.depth_levels"]
    if cfg["train.size"] % div:
        raise ConfigError(f"train.size {cfg['train.size']} not divisible by {div}")

    images = _training_images(ctx)
    x_all, m_all = collate(images)
    n = x_all.shape[0]
    batch = min(cfg["train.batch_size"], n)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg["train.lr"])
    rng = torch.Generator().manual_seed(ctx.seed)

    # Exponential moving average of the weights; the checkpoint ships the
    # averaged model, which samples markedly cleaner than the raw final step.
    ema_decay = cfg["train.ema"]
    ema = {k: v.detach().clone() for k, v in model.state_dict().items()} if ema_decay > 0 else None

    metrics_path = ctx.out / "train_metrics.txt"
    t0 = time.monotonic()
    with open(metrics_path, "w") as metrics:
        metrics.write("# step l_simple l_vlb total\n")
        for step in range(1, cfg["train.steps"] + 1):
            idx = torch.randint(0, n, (batch,), generator=rng)
            xb, mb = x_all[idx].clone(), m_all[idx].clone()
            if cfg["train.augment"]:
                xb, mb = _augment_batch(xb, mb, rng)
            loss = train_step((xb, mb), model, sched, rng, optimizer, cfg["train.vlb_weight"])
            if ema is not None:
                with torch.no_grad():
                    for k, v in model.state_dict().items():
                        if v.dtype.is_floating_point:
                            ema[k].mul_(ema_decay).add_(v, alpha=1.0 - ema_decay)
                        else:
                            ema[k].copy_(v)
            if step % cfg["train.log_every"] == 0 or step == 1:
                metrics.write(f"{step} {loss.l_simple:.6f} {loss.l_vlb:.6f} {loss.total:.6f}\n")
                print(
                    f"step {step}/{cfg['train.steps']} l_simple={loss.l_simple:.4f}",
                    file=sys.stderr,
                )
    wall = time.monotonic() - t0
    if ema is not None:
        model.load_state_dict(ema)

    ckpt = save_checkpoint(
        ctx.out / "checkpoint.pt",
        model,
        sched,
        meta={
            "seed": ctx.seed,
            "train_steps": cfg["train.steps"],
            "train_scenes": len(images),
            "image_size": cfg["train.size"],
            "wall_seconds": 0.0 if ctx.deterministic else wall,
        },
    )
    ctx.write_manifest(
        "train", {"checkpoint": str(ckpt), "metrics": str(metrics_path)}
    )
    return ckpt


def _depth_to_png(depth: np.ndarray) -> np.ndarray:
    lo, hi = float(depth.min()), float(depth.max())
    flat = (depth - lo) / (hi - lo) if hi > lo else np.zeros_like(depth)
    colored = cv2.applyColorMap((flat * 255).astype(np.uint8), cv2.COLORMAP_VIRIDIS)
    return cv2.cvtColor(colored, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0


def cmd_sample(ctx: RunContext) -> Path:
    cfg = ctx.cfg
    model, sched, _ = _load_model(cfg)
    count = cfg["sample.count"]
    size = cfg["train.size"]
    rng = torch.Generator().manual_seed(ctx.seed)
    tiles = []
    for i in range(count):
        x = sample_chain(model, sched, (4, size, size), rng)
        rgb = np.clip(np.moveaxis((x[:3].numpy() + 1.0) / 2.0, 0, -1), 0, 1)
        depth_vis = _depth_to_png(x[3].numpy())
        tiles.append(np.concatenate([rgb, depth_vis], axis=1))
        print(f"sampled {i + 1}/{count}", file=sys.stderr)
    cols = min(4, count)
    rows = math.ceil(count / cols)
    blank = np.zeros_like(tiles[0])
    grid = np.concatenate(
        [
            np.concatenate([tiles[r * cols + c] if r * cols + c < count else blank for c in range(cols)], axis=1)
            for r in range(rows)
        ],
        axis=0,
    )
    out_path = ctx.out / "samples.png"
    write_png8(out_path, grid)
    ctx.write_manifest("sample", {"grid": str(out_path)})
    return out_path


def cmd_simulate(ctx: RunContext) -> Path:
    cfg = ctx.cfg
    spec = cfg.simulation_spec(seed=ctx.seed)
    scenes = synth_scenes(cfg.synth_spec(seed=ctx.seed + 1), spec.count)
    bench = build_simulation(scenes, spec)
    bench_dir = ctx.out / "benchmark"
    save_benchmark(bench, bench_dir)
    ctx.write_manifest("simulate", {"benchmark": str(bench_dir)})
    return bench_dir


def _restore_inputs(cfg: RunConfig) -> list[tuple[str, np.ndarray]]:
    """(stem, observation in [0, 1]) pairs from a benchmark dir, an image
    directory, or a single image file."""
    src = cfg["paths.input"]
    if not src:
        raise ConfigError("paths.input is required for this command")
    src_path = Path(src)
    if (src_path / "manifest.json").exists():
        bench = load_benchmark(src_path)
        return [(f"{item.index:04d}", item.observed) for item in bench.items]
    if src_path.is_dir():
        files = sorted(
            p for p in src_path.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg")
        )
        if not files:
            raise DataError(f"no images under {src_path}")
        return [(p.stem, read_image(p)) for p in files]
    if src_path.is_file():
        return [(src_path.stem, read_image(src_path))]
    raise DataError(f"input path does not exist: {src_path}")


def _preprocess(y01: np.ndarray, cfg: RunConfig) -> np.ndarray:
    degamma = cfg["restore.degamma"]
    if degamma != 1.0:
        y01 = np.clip(y01, 0.0, 1.0) ** degamma
    if cfg["restore.white_balance"]:
        y01 = gray_world_white_balance(y01)
    return y01


def _save_restoration(
    out_dir: Path, stem: str, result: RestorationResult, gcfg: GuidanceConfig, gamma: float
) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    display = result.J if gamma == 1.0 else np.clip(result.J, 0.0, 1.0) ** (1.0 / gamma)
    restored_png = out_dir / f"{stem}_restored.png"
    write_png8(restored_png, display)
    depth_pfm = out_dir / f"{stem}_depth.pfm"
    write_pfm(depth_pfm, result.D)
    depth_png = out_dir / f"{stem}_depth.png"
    write_png8(depth_png, _depth_to_png(result.D))
    unguided = all(s == 0 for s in gcfg.scale_rgb) and gcfg.scale_depth == 0
    info = {
        "mode": "unconditional" if unguided else "guided",
        "phi_a": result.phi.phi_a.tolist(),
        "phi_b": result.phi.phi_b.tolist(),
        "phi_inf": result.phi.phi_inf.tolist(),
        "loss_trace": [
            [lb.l_rec, lb.l_val, lb.l_avrg, lb.total] for lb in result.loss_trace
        ],
        "files": {
            "restored": restored_png.name,
            "depth_pfm": depth_pfm.name,
            "depth_png": depth_png.name,
        },
    }
    with open(out_dir / f"{stem}_info.json", "w") as fh:
        json.dump(info, fh, indent=1, sort_keys=True)
    return info


def _run_restorations(
    ctx: RunContext,
    inputs: list[tuple[str, np.ndarray]],
    model,
    sched,
    gcfg: GuidanceConfig,
    out_dir: Path,
) -> list[dict]:
    cfg = ctx.cfg

    def one(job: tuple[int, str, np.ndarray]) -> dict:
        idx, stem, y01 = job
        y01 = _preprocess(y01, cfg)
        rng = torch.Generator().manual_seed(ctx.seed + idx)
        result = restore(y01, model, sched, gcfg, rng)
        info = _save_restoration(out_dir, stem, result, gcfg, cfg["restore.gamma"])
        print(f"restored {stem}", file=sys.stderr)
        return {"stem": stem, **{k: info[k] for k in ("mode", "phi_a", "phi_b", "phi_inf")}}

    jobs = [(i, stem, y01) for i, (stem, y01) in enumerate(inputs)]
    if ctx.jobs == 1:
        return [one(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=ctx.jobs) as pool:
        return list(pool.map(one, jobs))


def cmd_restore(ctx: RunContext) -> Path:
    cfg = ctx.cfg
    model, sched, _ = _load_model(cfg)
    gcfg = cfg.guidance_config()
    inputs = _restore_inputs(cfg)
    results_dir = ctx.out / "results"
    entries = _run_restorations(ctx, inputs, model, sched, gcfg, results_dir)
    ctx.write_manifest("restore", {"results": str(results_dir)}, {"images": entries})
    return results_dir


# ---------------------------------------------------------------------------
# Evaluation


def _format_cell(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.4f}"


def evaluate_results(bench: SimulationBenchmark, results_dir: Path) -> tuple[list[dict], dict]:
    """Per-image and mean metrics of restoration outputs against ground truth.

    The depth baseline predicts one constant everywhere: the benchmark-wide
    mean of the ground-truth depth.
    """
    gt_depths = [item.depth for item in bench.items]
    const_depth = float(np.mean([d.mean() for d in gt_depths]))
    rows = []
    for item in bench.items:
        stem = f"{item.index:04d}"
        restored_path = results_dir / f"{stem}_restored.png"
        depth_path = results_dir / f"{stem}_depth.pfm"
        if not restored_path.exists():
            raise DataError(f"missing restoration output {restored_path}")
        restored = read_image(restored_path)
        d_pred = read_pfm(depth_path)
        rows.append(
            {
                "index": item.index,
                "psnr_input": psnr(item.observed, item.clean),
                "psnr": psnr(restored, item.clean),
                "ssim": ssim(restored, item.clean),
                "depth_abs_rel": depth_abs_rel(d_pred, item.depth),
                "depth_abs_rel_const": depth_abs_rel(
                    np.full_like(item.depth, const_depth), item.depth
                ),
            }
        )
    means = {
        key: float(np.mean([r[key] for r in rows]))
        for key in ("psnr_input", "psnr", "ssim", "depth_abs_rel", "depth_abs_rel_const")
    }
    return rows, means


def _write_evaluation(out_dir: Path, rows: list[dict], means: dict, name: str = "evaluation"):
    fields = ["index", "psnr_input", "psnr", "ssim", "depth_abs_rel", "depth_abs_rel_const"]
    csv_path = out_dir / f"{name}.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for row in rows:
            writer.writerow([row["index"]] + [repr(row[k]) for k in fields[1:]])
        writer.writerow(["mean"] + [repr(means[k]) for k in fields[1:]])
    txt_path = out_dir / f"{name}.txt"
    with open(txt_path, "w") as fh:
        header = f"{'image':>8} " + " ".join(f"{k:>18}" for k in fields[1:])
        fh.write(header + "\n")
        for row in rows:
            cells = " ".join(f"{_format_cell(row[k]):>18}" for k in fields[1:])
            fh.write(f"{row['index']:>8} {cells}\n")
        cells = " ".join(f"{_format_cell(means[k]):>18}" for k in fields[1:])
        fh.write(f"{'mean':>8} {cells}\n")
    return csv_path, txt_path


def cmd_evaluate(ctx: RunContext) -> Path:
    cfg = ctx.cfg
    bench_path = cfg["paths.benchmark"]
    results_path = cfg["paths.results"]
    if not bench_path or not results_path:
        raise ConfigError("paths.benchmark and paths.results are required")
    bench = load_benchmark(bench_path)
    rows, means = evaluate_results(bench, Path(results_path))
    csv_path, txt_path = _write_evaluation(ctx.out, rows, means)
    ctx.write_manifest(
        "evaluate",
        {"csv": str(csv_path), "table": str(txt_path)},
        {"means": {k: repr(v) for k, v in means.items()}},
    )
    return csv_path


def cmd_ablate(ctx: RunContext) -> Path:
    cfg = ctx.cfg
    bench_path = cfg["paths.benchmark"]
    if not bench_path:
        raise ConfigError("paths.benchmark is required")
    bench = load_benchmark(bench_path)
    model, sched, _ = _load_model(cfg)
    base = cfg.guidance_config()
    try:
        variants = [int(v) for v in str(cfg["ablate.variants"]).split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad ablate.variants: {exc}") from exc

    inputs = [(f"{item.index:04d}", item.observed) for item in bench.items]
    table: dict[str, dict] = {}
    for label, gcfg in [("full", base)] + [
        (f"variant_{v}", ablation_preset(v, base)) for v in variants
    ]:
        sub = ctx.out / label
        _run_restorations(ctx, inputs, model, sched, gcfg, sub / "results")
        rows, means = evaluate_results(bench, sub / "results")
        _write_evaluation(sub, rows, means)
        table[label] = means
        print(f"{label}: mean psnr {means['psnr']:.3f}", file=sys.stderr)

    csv_path = ctx.out / "ablation.csv"
    fields = ["psnr_input", "psnr", "ssim", "depth_abs_rel", "depth_abs_rel_const"]
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["config"] + fields)
        for label, means in table.items():
            writer.writerow([label] + [repr(means[k]) for k in fields])
    txt_path = ctx.out / "ablation.txt"
    with open(txt_path, "w") as fh:
        fh.write(f"{'config':>12} " + " ".join(f"{k:>18}" for k in fields) + "\n")
        for label, means in table.items():
            fh.write(
                f"{label:>12} " + " ".join(f"{_format_cell(means[k]):>18}" for k in fields) + "\n"
            )
    ctx.write_manifest("ablate", {"csv": str(csv_path), "table": str(txt_path)})
    return csv_path


# ---------------------------------------------------------------------------
# Entry point

_COMMANDS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "simulate": cmd_simulate,
    "restore": cmd_restore,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="osmosis",
        description="Underwater RGBD restoration pipeline",
    )
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", type=str, default=None, help="key-path = value config file")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config key (repeatable)",
    )
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--jobs", type=int, default=1, help="worker pool size per command")
    parser.add_argument("--out", type=str, default="runs/latest", help="output directory")
    parser.add_argument(
        "--deterministic",
        action="store_true",
        help="zero manifest timestamps; per-image seeds are always deterministic",
    )
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        overrides = {}
        for item in args.overrides:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            overrides[key.strip()] = value.strip()
        cfg = parse_config_file(args.config, overrides)
        seed = args.seed if args.seed is not None else cfg["seed"]
        ctx = RunContext(cfg, seed, args.jobs, args.deterministic, Path(args.out))
        _COMMANDS[args.command](ctx)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    except OsmosisError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
