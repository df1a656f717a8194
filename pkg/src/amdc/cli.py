"""Command-line entry point.

Subcommands cover the full workflow: ``synth`` (generate a dataset),
``simulate`` (cubes to measurement pairs), ``train``, ``reconstruct``,
``evaluate``, ``bench`` (FPS / stage scaling / mask sweep) and ``mask``
(export or inspect coded masks). Every command is reproducible from its
flags alone; ``--seed`` controls all randomness. Exit codes: 0 success,
1 runtime failure, 2 usage error, 3 invalid input; failures print one
machine-parsable JSON line to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import bench as B
from . import data as D
from . import masks as Mk
from . import metrics as M
from .errors import AmdcError
from .network import ModelConfig, reconstruct
from .optics import (DispersionSpec, NoiseSpec, SensingOperator,
                     shift_back_init, simulate_pair)
from .serialization import (load_tensor, save_sidecar, save_tensor,
                            sidecar_path)
from .tensor import Tensor
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_INVALID = 3


def _fail(code: int, message: str) -> int:
    sys.stderr.write(json.dumps({"error": message, "exit": code}) + "\n")
    return code


# ======================================================================
# Shared helpers
# ======================================================================

def _parse_split(text: str) -> tuple[float, ...]:
    try:
        fracs = tuple(float(v) for v in text.split(","))
    except ValueError as e:
        raise AmdcError(f"bad split fractions {text!r}: {e}") from e
    return fracs


def _load_manifest(path) -> D.DatasetManifest:
    return D.DatasetManifest.load(path)


def _resolve_mask(args, shape) -> np.ndarray:
    if getattr(args, "mask_file", None):
        return Mk.load_mask(args.mask_file)
    kind = args.mask_kind
    if kind == "adaptive":
        raise AmdcError("an adaptive mask must be supplied via --mask-file "
                        "(export it from a trained checkpoint first)")
    return Mk.template_init(kind, shape, seed=args.seed).data


# ======================================================================
# Subcommand handlers
# ======================================================================

def _cmd_synth(args) -> int:
    spec = D.SynthSpec(n_scenes=args.scenes, height=args.height,
                       width=args.width, channels=args.channels,
                       seed=args.seed)
    manifest = D.synth_scenes(spec, args.out)
    fracs = _parse_split(args.split)
    manifest = D.split(manifest, fracs, seed=args.seed)
    manifest.save(Path(args.out) / "manifest.json")
    counts = {tag: len(manifest.by_split(tag)) for tag in ("train", "val", "test")}
    print(json.dumps({"manifest": str(Path(args.out) / "manifest.json"),
                      "scenes": len(manifest.scenes), "splits": counts}))
    return EXIT_OK


def _cmd_simulate(args) -> int:
    manifest = _load_manifest(args.manifest)
    entries = manifest.scenes if args.split == "all" else manifest.by_split(args.split)
    if not entries:
        raise AmdcError(f"no scenes in split {args.split!r}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    first = D.load_cube(entries[0].path)
    mask = _resolve_mask(args, first.shape[:2])
    Mk.save_mask(out / "mask.tnsr", mask)
    response = D.default_response(first.wavelengths_nm)
    op = SensingOperator(mask, DispersionSpec(args.d), response)
    records = []
    rng = np.random.default_rng(args.seed)
    for entry in entries:
        cube = D.load_cube(entry.path)
        pair = simulate_pair(
            cube, op,
            NoiseSpec(args.sigma, int(rng.integers(2**31))),
            NoiseSpec(args.sigma, int(rng.integers(2**31))))
        meta = {"wavelengths_nm": [float(v) for v in cube.wavelengths_nm],
                "dispersion_step_px": args.d, "noise_sigma": args.sigma}
        yc_path = out / f"{entry.scene_id}_yc.tnsr"
        yr_path = out / f"{entry.scene_id}_yr.tnsr"
        save_tensor(yc_path, pair.y_c)
        save_sidecar(sidecar_path(yc_path), meta)
        save_tensor(yr_path, pair.y_r)
        save_sidecar(sidecar_path(yr_path), meta)
        records.append({"id": entry.scene_id, "y_c": str(yc_path),
                        "y_r": str(yr_path), "truth": entry.path})
    doc = {"d": args.d, "sigma": args.sigma, "mask": str(out / "mask.tnsr"),
           "wavelengths_nm": [float(v) for v in first.wavelengths_nm],
           "scenes": records}
    (out / "measurements.json").write_text(json.dumps(doc, indent=2) + "\n")
    print(json.dumps({"measurements": str(out / "measurements.json"),
                      "scenes": len(records)}))
    return EXIT_OK


def _train_configs(args) -> tuple[TrainConfig, dict]:
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise AmdcError(f"cannot read config {args.config}: {e}") from e
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.xi is not None:
        doc["xi"] = args.xi
    if args.epochs is not None:
        doc["epochs"] = args.epochs
    known = set(TrainConfig().to_dict())
    unknown = set(doc) - known
    if unknown:
        raise AmdcError(f"unknown config fields: {sorted(unknown)}")
    base = TrainConfig().to_dict()
    base.update(doc)
    return TrainConfig.from_dict(base), doc


def _cmd_train(args) -> int:
    tcfg, _ = _train_configs(args)
    manifest = _load_manifest(args.manifest)
    channels = len(manifest.wavelengths_nm)
    mcfg = ModelConfig(n_stages=args.stages, channels=channels,
                       window=args.window, d=args.d)
    if args.dry_run:
        print(json.dumps({"train_cfg": tcfg.to_dict(),
                          "model_cfg": mcfg.to_dict(),
                          "mask_kind": args.mask_kind}, indent=2))
        return EXIT_OK
    train_scenes = D.load_split(manifest, "train")
    val_scenes = D.load_split(manifest, "val")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resume = load_checkpoint(args.resume) if args.resume else None
    result = train(train_scenes, val_scenes, tcfg, mcfg,
                   mask_kind=args.mask_kind, log_path=out / "log.jsonl",
                   resume=resume)
    save_checkpoint(out / "checkpoint.amdc", result.final)
    save_checkpoint(out / "best.amdc", result.best)
    if result.final.static_mask is not None:
        Mk.save_mask(out / "mask.tnsr", result.final.static_mask)
    print(json.dumps({"checkpoint": str(out / "checkpoint.amdc"),
                      "best": str(out / "best.amdc"),
                      "log": str(out / "log.jsonl"),
                      "final_val": result.log[-1]}))
    return EXIT_OK


def _load_measurements(path) -> dict:
    p = Path(path)
    if p.is_dir():
        p = p / "measurements.json"
    try:
        return json.loads(p.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise AmdcError(f"cannot read measurements {p}: {e}") from e


def _cmd_reconstruct(args) -> int:
    doc = _load_measurements(args.measurements)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    wavelengths = np.asarray(doc["wavelengths_nm"])
    channels = len(wavelengths)
    d = DispersionSpec(doc["d"])
    if args.init_only:
        ckpt = None
    else:
        if not args.checkpoint:
            raise AmdcError("provide --checkpoint or --init-only")
        ckpt = load_checkpoint(args.checkpoint)
        if ckpt.static_mask is None:
            raise AmdcError("checkpoint has no frozen mask; finish phase-1 "
                            "training before reconstructing")
    records = []
    for rec in doc["scenes"]:
        y_c = load_tensor(rec["y_c"])
        if ckpt is None:
            est = np.clip(shift_back_init(y_c, d, channels), 0.0, 1.0)
        else:
            y_r = load_tensor(rec["y_r"])
            op = SensingOperator(ckpt.static_mask, DispersionSpec(ckpt.model_cfg.d),
                                 D.default_response(wavelengths))
            est = reconstruct(y_c, y_r, op, ckpt.model_params, ckpt.model_cfg)
        path = out / f"{rec['id']}_recon.tnsr"
        D.save_cube(path, D.HsiCube(est, wavelengths))
        records.append({"id": rec["id"], "recon": str(path),
                        "truth": rec.get("truth")})
    (out / "reconstructions.json").write_text(
        json.dumps({"scenes": records}, indent=2) + "\n")
    print(json.dumps({"reconstructions": str(out / "reconstructions.json"),
                      "scenes": len(records)}))
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    try:
        doc = json.loads(Path(args.pred).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise AmdcError(f"cannot read reconstructions {args.pred}: {e}") from e
    per_scene: dict[str, list] = {k: [] for k in B.METRIC_COLUMNS}
    ids = []
    for rec in doc["scenes"]:
        truth_path = rec.get("truth")
        if truth_path is None:
            raise AmdcError(f"scene {rec['id']} lists no truth cube")
        est = D.load_cube(rec["recon"])
        truth = D.load_cube(truth_path)
        stats = M.evaluate_pair(est.data, truth.data)
        ids.append(rec["id"])
        for k in per_scene:
            per_scene[k].append(stats[k])
    row = {"label": args.label, "ids": ids, "per_scene": per_scene}
    out_json = args.out and str(Path(args.out).with_suffix(".json"))
    out_txt = args.out and str(Path(args.out).with_suffix(".txt"))
    report = B.emit_report([row], out_json, out_txt)
    print(report["table"], end="")
    return EXIT_OK


def _cmd_bench(args) -> int:
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    out_json = str(out / "report.json") if out else None
    out_txt = str(out / "report.txt") if out else None

    if args.mask_sweep:
        if not args.manifest:
            raise AmdcError("--mask-sweep needs --manifest")
        tcfg, _ = _train_configs(args)
        manifest = _load_manifest(args.manifest)
        channels = len(manifest.wavelengths_nm)
        mcfg = ModelConfig(n_stages=args.stages, channels=channels,
                           window=args.window, d=args.d)
        report = B.run_mask_ablation(D.load_split(manifest, "train"),
                                     D.load_split(manifest, "val"),
                                     tcfg, mcfg, out_json=out_json,
                                     out_txt=out_txt)
        print(report["table"], end="")
        return EXIT_OK

    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        weights = {k: Tensor(v) for k, v in ckpt.model_params.items()}
        row = B.fps_bench(weights, ckpt.model_cfg,
                          (args.height, args.width), args.warmup, args.iters,
                          args.seed, mask=ckpt.static_mask)
        row["label"] = f"{ckpt.model_cfg.n_stages}stg-checkpoint"
        report = B.emit_report([row], out_json, out_txt)
        print(report["table"], end="")
        return EXIT_OK

    stages = [int(s) for s in args.stages_list.split(",")]
    mcfg = ModelConfig(n_stages=stages[0], channels=args.channels,
                       window=args.window, d=args.d)
    rows = B.stage_scaling_bench(stages, mcfg, (args.height, args.width),
                                 args.warmup, args.iters, args.seed)
    report = B.emit_report(rows, out_json, out_txt)
    print(report["table"], end="")
    return EXIT_OK


def _cmd_mask(args) -> int:
    if args.action == "export":
        if args.kind == "adaptive":
            if not args.checkpoint:
                raise AmdcError("adaptive mask export needs --checkpoint")
            ckpt = load_checkpoint(args.checkpoint)
            if ckpt.static_mask is None:
                raise AmdcError("checkpoint has no frozen mask yet")
            mask = ckpt.static_mask
        else:
            h, w = (int(v) for v in args.shape.split("x"))
            mask = Mk.template_init(args.kind, (h, w), seed=args.seed).data
        if args.threshold:
            mask = Mk.threshold_mask(mask)
        Mk.save_mask(args.out, mask)
        print(json.dumps({"mask": str(args.out), "kind": args.kind,
                          "shape": list(mask.shape),
                          "mean": float(mask.mean())}))
        return EXIT_OK
    if args.action == "inspect":
        mask = Mk.load_mask(args.path)
        print(json.dumps({
            "shape": list(mask.shape),
            "min": float(mask.min()), "max": float(mask.max()),
            "mean": float(mask.mean()),
            "open_fraction": float((mask >= 0.5).mean()),
        }))
        return EXIT_OK
    raise AmdcError(f"unknown mask action {args.action!r}")


# ======================================================================
# Parser
# ======================================================================

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(
        prog="amdc",
        description="Adaptive-mask dual-camera CASSI workflows")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset",
                       formatter_class=fmt)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--scenes", type=int, default=20)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="0.8,0.1,0.1",
                   help="train,val,test fractions (must sum to 1)")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("simulate", help="simulate measurement pairs",
                       formatter_class=fmt)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="all",
                   choices=["all", "train", "val", "test"])
    p.add_argument("--mask-kind", default="random",
                   choices=list(Mk.MASK_KINDS))
    p.add_argument("--mask-file", default=None,
                   help="mask tensor file (required for --mask-kind adaptive)")
    p.add_argument("--d", type=int, default=1, help="dispersion step in px")
    p.add_argument("--sigma", type=float, default=0.0, help="detector noise stddev")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("train", help="train the reconstruction system",
                       formatter_class=fmt)
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", default=None, help="JSON file of training fields")
    p.add_argument("--out", default="train_out")
    p.add_argument("--mask-kind", default="adaptive",
                   choices=list(Mk.MASK_KINDS))
    p.add_argument("--stages", type=int, default=3)
    p.add_argument("--window", type=int, default=8)
    p.add_argument("--d", type=int, default=1)
    p.add_argument("--xi", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--dry-run", action="store_true",
                   help="validate and print the resolved config, then exit")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("reconstruct", help="reconstruct cubes from measurements",
                       formatter_class=fmt)
    p.add_argument("--measurements", required=True,
                   help="measurements.json or its directory")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--init-only", action="store_true",
                   help="emit the shift-back zeroth estimate (no model)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_reconstruct)

    p = sub.add_parser("evaluate", help="score reconstructions against truth",
                       formatter_class=fmt)
    p.add_argument("--pred", required=True, help="reconstructions.json")
    p.add_argument("--label", default="run")
    p.add_argument("--out", default=None, help="report path stem")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("bench", help="FPS, stage-scaling and mask ablation",
                       formatter_class=fmt)
    p.add_argument("--stages-list", default="3,9",
                   help="comma-separated stage counts for scaling runs")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--mask-sweep", action="store_true",
                   help="train all four mask kinds under one budget")
    p.add_argument("--manifest", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--stages", type=int, default=3)
    p.add_argument("--window", type=int, default=8)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--d", type=int, default=1)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--xi", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("mask", help="export or inspect coded masks",
                       formatter_class=fmt)
    mask_sub = p.add_subparsers(dest="action", required=True)
    pe = mask_sub.add_parser("export", formatter_class=fmt)
    pe.add_argument("--kind", required=True, choices=list(Mk.MASK_KINDS))
    pe.add_argument("--out", required=True)
    pe.add_argument("--shape", default="32x32", help="HxW for template kinds")
    pe.add_argument("--seed", type=int, default=0)
    pe.add_argument("--checkpoint", default=None)
    pe.add_argument("--threshold", action="store_true",
                    help="binarize at 0.5 for binary-mask hardware")
    pe.set_defaults(func=_cmd_mask)
    pi = mask_sub.add_parser("inspect", formatter_class=fmt)
    pi.add_argument("--path", required=True)
    pi.set_defaults(func=_cmd_mask)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (AmdcError, FileNotFoundError) as e:
        return _fail(EXIT_INVALID, str(e))
    except Exception as e:  # noqa: BLE001 - boundary of the process
        return _fail(EXIT_RUNTIME, f"{type(e).__name__}: {e}")


if __name__ == "__main__":
    sys.exit(main())
