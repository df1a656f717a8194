"""Benchmarking and report emission.

FPS is measured on reconstruction only (the mask module is deleted at
inference time, so mask generation is excluded): a fixed synthetic input,
no I/O inside the timed region, median wall-clock per reconstruction
inverted to frames per second. The environment's thread cap is recorded in
every report. Reports are written both as JSON and as an aligned text
table with recomputed averages.
"""

from __future__ import annotations

import json
import os
import time
from pathlib import Path

import numpy as np

from .data import default_response, generate_scene
from .errors import ContractError
from .masks import template_init
from .metrics import evaluate_pair
from .network import (ModelConfig, flop_count, init_model_weights,
                      model_forward, param_count, reconstruct)
from .optics import DispersionSpec, NoiseSpec, SensingOperator, simulate_pair
from . import tensor as T
from .training import TrainConfig, train

METRIC_COLUMNS = ("mrae", "rmse", "psnr", "ssim")
THREADS_ENV = "AMDC_THREADS"


def thread_count() -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def fps_bench(weights, cfg: ModelConfig, spatial_shape, warmup: int = 3,
              iters: int = 20, seed: int = 0, mask: np.ndarray | None = None) -> dict:
    """Median-based reconstruction throughput for one model configuration."""
    if iters < 10:
        raise ContractError(f"fps_bench needs iters >= 10, got {iters}")
    if warmup < 2:
        raise ContractError(f"fps_bench needs warmup >= 2, got {warmup}")
    h, w = spatial_shape
    scene = generate_scene(h, w, cfg.channels, seed)
    if mask is None:
        mask = template_init("random", (h, w), seed).data
    op = SensingOperator(mask, DispersionSpec(cfg.d),
                         default_response(scene.wavelengths_nm))
    pair = simulate_pair(scene, op, NoiseSpec(0.0, 0), NoiseSpec(0.0, 0))

    times = []
    with T.no_tape():
        for _ in range(warmup):
            model_forward(pair.y_c, pair.y_r, op, weights, cfg)
        for _ in range(iters):
            t0 = time.perf_counter()
            model_forward(pair.y_c, pair.y_r, op, weights, cfg)
            times.append(time.perf_counter() - t0)
    median = float(np.median(times))
    return {
        "fps": 1.0 / median,
        "median_seconds": median,
        "iters": iters,
        "warmup": warmup,
        "n_stages": cfg.n_stages,
        "params": param_count(weights),
        "flops": flop_count(cfg, spatial_shape),
        "threads": thread_count(),
        "input_hw": [h, w],
        "channels": cfg.channels,
    }


def stage_scaling_bench(stage_counts, base_cfg: ModelConfig, spatial_shape,
                        warmup: int = 3, iters: int = 20, seed: int = 0) -> list[dict]:
    """FPS / params / flops rows across stage counts (one model family)."""
    rows = []
    for n in stage_counts:
        cfg = ModelConfig(n_stages=n, channels=base_cfg.channels,
                          window=base_cfg.window, mlp_ratio=base_cfg.mlp_ratio,
                          epsilon=base_cfg.epsilon, d=base_cfg.d,
                          rgb_lift_dim=base_cfg.rgb_lift_dim)
        weights = init_model_weights(cfg, seed)
        row = fps_bench(weights, cfg, spatial_shape, warmup, iters, seed)
        row["label"] = f"{n}stg"
        rows.append(row)
    return rows


# ======================================================================
# Report emission
# ======================================================================

def _recompute_row(row: dict) -> dict:
    out = dict(row)
    per_scene = row.get("per_scene")
    if per_scene:
        recomputed = {k: float(np.mean(v)) for k, v in per_scene.items()}
        claimed = row.get("avg")
        if claimed:
            drift = max(abs(recomputed[k] - claimed.get(k, recomputed[k]))
                        for k in recomputed)
            if drift > 1e-9:
                out["avg_mismatch"] = True
        out["avg"] = recomputed
    return out


def format_table(rows: list[dict]) -> str:
    """Aligned text table; metric columns first, then cost columns."""
    headers = ["label"] + [c.upper() for c in METRIC_COLUMNS] + \
              ["Params(M)", "GFLOPS", "FPS"]
    lines = []
    body = []
    for row in rows:
        avg = row.get("avg", {})
        cells = [str(row.get("label", "?"))]
        for c in METRIC_COLUMNS:
            v = avg.get(c, row.get(c))
            cells.append("-" if v is None else f"{v:.4f}")
        p = row.get("params")
        cells.append("-" if p is None else f"{p / 1e6:.3f}")
        f = row.get("flops")
        cells.append("-" if f is None else f"{f / 1e9:.4f}")
        fps = row.get("fps")
        cells.append("-" if fps is None else f"{fps:.2f}")
        body.append(cells)
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h)
              for i, h in enumerate(headers)]
    lines.append("  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)))
    lines.append("  ".join("-" * widths[i] for i in range(len(headers))))
    for cells in body:
        lines.append("  ".join(cells[i].ljust(widths[i]) for i in range(len(cells))))
    return "\n".join(lines) + "\n"


def emit_report(rows: list[dict], out_json=None, out_txt=None) -> dict:
    """Recompute averages, write JSON and aligned-text artifacts, return report."""
    if not rows:
        raise ContractError("emit_report needs at least one result row")
    checked = [_recompute_row(r) for r in rows]
    report = {"threads": thread_count(), "rows": checked}
    if out_json:
        Path(out_json).write_text(json.dumps(report, indent=2) + "\n")
    table = format_table(checked)
    report["table"] = table
    if out_txt:
        Path(out_txt).write_text(table)
    return report


# ======================================================================
# Mask-type ablation
# ======================================================================

def run_mask_ablation(train_scenes, val_scenes, tcfg: TrainConfig,
                      mcfg: ModelConfig,
                      kinds=("manual", "random", "normal", "adaptive"),
                      out_json=None, out_txt=None) -> dict:
    """Train every mask kind under one identical budget and report one table.

    Per kind: same seed, same epochs, same data; the final row carries the
    last-epoch validation metrics plus the parameter and flop counts.
    """
    rows = []
    for kind in kinds:
        result = train(train_scenes, val_scenes, tcfg, mcfg, mask_kind=kind)
        last = result.log[-1]
        rows.append({
            "label": f"{kind}-mask",
            "mask_kind": kind,
            **{k: last[k] for k in METRIC_COLUMNS},
            "params": param_count(result.final.model_params),
            "flops": flop_count(mcfg, train_scenes[0].shape[:2]),
            "epochs": tcfg.epochs,
            "seed": tcfg.seed,
        })
    return emit_report(rows, out_json, out_txt)


def evaluate_scenes(estimates, truths) -> list[dict]:
    """Per-scene metric rows for externally produced reconstructions."""
    if len(estimates) != len(truths):
        raise ContractError("estimate/truth counts disagree")
    return [evaluate_pair(e, t) for e, t in zip(estimates, truths)]
