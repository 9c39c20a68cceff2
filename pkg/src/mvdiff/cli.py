"""Command-line entry point.

Subcommands: dataset, train, sample, eval, verify.  Exit codes: 0 success,
1 invariant/verification failure, 2 invalid input.  MVDIFF_THREADS limits
torch's CPU thread count.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import synthdata
from .config import load_config
from .denoiser import load_checkpoint
from .diffusion import make_schedule
from .evaluation import evaluate_reconstruction
from .generation import (
    generate_conditional,
    generate_trajectory,
    generate_unconditional,
    save_images,
)
from .geometry import CameraView
from .synthdata import read_dataset, tokenize, view_from_record, write_dataset
from .trainer import train
from .verify import SUITES, run_suites

EXIT_OK = 0
EXIT_INVARIANT = 1
EXIT_INVALID = 2


def _file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


def _load_poses(path: Path) -> list[CameraView]:
    blob = json.loads(path.read_text())
    records = blob["frames"] if isinstance(blob, dict) else blob
    return [view_from_record(r) for r in records]


def _caption_tokens(caption: str) -> torch.Tensor:
    words = caption.split()
    if not words:
        return torch.zeros(0, dtype=torch.long)
    return tokenize(words)


def _load_images(paths: list[str]) -> torch.Tensor:
    images = []
    for p in paths:
        arr = np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) / 255.0
        images.append(torch.from_numpy(arr).permute(2, 0, 1))
    return torch.stack(images)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_dataset(args) -> int:
    if args.scenes == 0:
        print("warning: writing an empty dataset (0 scenes)", file=sys.stderr)
        Path(args.out).mkdir(parents=True, exist_ok=True)
        return EXIT_OK
    paths = write_dataset(
        args.out,
        n_scenes=args.scenes,
        seed=args.seed,
        image_size=args.image_size,
        n_poses=args.poses_per_scene,
        brightness_jitter=args.brightness_jitter,
        force=args.force,
    )
    print(f"wrote {len(paths)} scenes ({len(paths) * args.poses_per_scene} frames) to {args.out}")
    return EXIT_OK


def _prepare_prior(args, cfg) -> list:
    if cfg.prior_count == 0:
        return []
    cache = Path(args.prior_dir) if args.prior_dir else Path(args.out) / "prior_set"
    if cache.exists() and any(cache.glob("prior_*.png")):
        return _read_prior(cache)
    items = synthdata.make_prior_set(
        args.init, count=cfg.prior_count, seed=cfg.seed, steps=args.prior_steps
    )
    _write_prior(cache, items)
    return items


def _write_prior(cache: Path, items) -> None:
    cache.mkdir(parents=True, exist_ok=True)
    records = []
    for i, item in enumerate(items):
        arr = (item.image.permute(1, 2, 0).numpy() * 255.0).round().astype(np.uint8)
        Image.fromarray(arr).save(cache / f"prior_{i:04d}.png")
        from .generation import view_record

        records.append(
            {"caption": synthdata.detokenize(item.caption_tokens), "view": view_record(item.view)}
        )
    (cache / "prior.json").write_text(json.dumps(records, indent=1))


def _read_prior(cache: Path) -> list:
    records = json.loads((cache / "prior.json").read_text())
    items = []
    for i, rec in enumerate(records):
        arr = np.asarray(Image.open(cache / f"prior_{i:04d}.png"), dtype=np.float32) / 255.0
        items.append(
            synthdata.PriorItem(
                image=torch.from_numpy(arr).permute(2, 0, 1),
                caption_tokens=synthdata.tokenize(rec["caption"]),
                view=view_from_record(rec["view"]),
            )
        )
    return items


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    scenes = read_dataset(args.data)
    init_model = None
    if args.stage == "mv":
        if not args.init:
            raise ValueError("--stage mv requires --init with a stage-2d checkpoint")
        init_model, _, _ = load_checkpoint(args.init)
    elif args.init:
        init_model, _, _ = load_checkpoint(args.init)
    prior_items = _prepare_prior(args, cfg) if args.stage == "mv" else []
    start = time.time()
    train(
        scenes,
        cfg,
        args.out,
        stage=args.stage,
        init_model=init_model,
        prior_items=prior_items,
        resume=args.resume,
        progress=not args.quiet,
    )
    manifest_path = Path(args.out) / "manifest.json"
    manifest = json.loads(manifest_path.read_text())
    manifest["config_file_hash"] = _file_hash(Path(args.config))
    manifest["train_runtime_s"] = round(time.time() - start, 1)
    manifest_path.write_text(json.dumps(manifest, indent=2))
    print(f"stage {args.stage} finished: checkpoint at {args.out}")
    return EXIT_OK


def cmd_sample(args) -> int:
    model, schedule, manifest = load_checkpoint(args.ckpt)
    model.eval()
    ablation = manifest.get("ablation", "")
    fwd = {
        "use_projection": ablation != "no_proj",
        "use_cross_frame": ablation != "no_cfa",
    }
    views = _load_poses(Path(args.poses))
    tokens = _caption_tokens(args.caption)
    run_manifest = {
        "mode": args.mode,
        "seed": args.seed,
        "steps": args.steps,
        "checkpoint": str(args.ckpt),
        "checkpoint_hash": _file_hash(Path(args.ckpt) / "weights.pt"),
        "caption": args.caption,
        "ablation": ablation,
    }
    start = time.time()
    if args.mode == "uncond":
        if len(views) > model.config.max_frames:
            raise ValueError("pose file has more frames than the model supports")
        images = generate_unconditional(
            model, schedule, views, tokens,
            steps=args.steps, lambda_cfg=args.lambda_cfg, gen=args.seed,
        )
        run_manifest["lambda_cfg"] = args.lambda_cfg
        out_views = views
    elif args.mode == "cond":
        if not args.cond_images:
            raise ValueError("cond mode requires --cond-images")
        cond = _load_images(args.cond_images)
        n_c = cond.shape[0]
        if len(views) <= n_c:
            raise ValueError("pose file must contain conditioning poses plus targets")
        if len(views) > model.config.max_frames:
            raise ValueError("pose file has more frames than the model supports")
        images = generate_conditional(
            model, schedule, cond, views[:n_c], views[n_c:], tokens,
            steps=args.steps, lambda_cfg=args.lambda_cfg, gen=args.seed,
            forward_kwargs=fwd,
        )
        run_manifest["lambda_cfg"] = args.lambda_cfg
        run_manifest["n_cond"] = n_c
        out_views = views[n_c:]
    else:  # trajectory
        result = generate_trajectory(
            model, schedule, views, tokens,
            batch_n_g=args.batch_n_g, first_batch=args.first_batch,
            steps=args.steps, lambda_first=args.lambda_cfg, gen=args.seed,
        )
        images = result.images
        out_views = result.views
        run_manifest["lambda_per_batch"] = result.batch_lambdas
        run_manifest["batch_sizes"] = result.batch_sizes
    run_manifest["runtime_s"] = round(time.time() - start, 1)
    save_images(args.out, images, out_views, run_manifest)
    print(f"wrote {images.shape[0]} images to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, schedule, manifest = load_checkpoint(args.ckpt)
    model.eval()
    ablation = manifest.get("ablation", "")
    fwd = {
        "use_projection": ablation != "no_proj",
        "use_cross_frame": ablation != "no_cfa",
    }
    scenes = read_dataset(args.data)
    if args.scenes:
        wanted = [int(s) for s in args.scenes.split(",")]
        scenes = [scenes[i] for i in wanted]
    report = evaluate_reconstruction(
        model, schedule, scenes,
        n_gen=args.n_gen, steps=args.steps, seed=args.seed, forward_kwargs=fwd,
    )
    report["run_id"] = args.run_id or f"eval-{int(time.time())}"
    report["checkpoint"] = str(args.ckpt)
    report["checkpoint_hash"] = _file_hash(Path(args.ckpt) / "weights.pt")
    report["seed"] = args.seed
    report["ablation"] = ablation
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=1))
    print(
        f"masked PSNR {report['masked_psnr']:.2f} dB, SSIM {report['masked_ssim']:.3f}, "
        f"reprojection {report['reprojection_error']:.4f} -> {out}"
    )
    return EXIT_OK


def cmd_verify(args) -> int:
    names = list(SUITES) if args.suite == "all" else [args.suite]
    results = run_suites(names)
    report = [r.to_dict() for r in results]
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(json.dumps(report, indent=1))
    failed = 0
    for r in results:
        status = "pass" if r.passed else "FAIL"
        print(
            f"[{status}] {r.suite}/{r.name}: max_error={r.max_error:.3e} "
            f"tolerance={r.tolerance:.3e} ({r.runtime_s:.2f}s)"
        )
        failed += not r.passed
    if failed:
        print(f"{failed} checks failed", file=sys.stderr)
        return EXIT_INVARIANT
    print(f"all {len(results)} checks passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvdiff",
        description="Multi-view consistent image diffusion at desk scale",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset", help="generate the synthetic multi-view dataset")
    p.add_argument("--scenes", type=int, default=64)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--poses-per-scene", type=int, default=synthdata.RING_POSES)
    p.add_argument("--brightness-jitter", type=float, default=0.0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_dataset)

    p = sub.add_parser("train", help="run a training stage")
    p.add_argument("--stage", choices=("2d", "mv"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init", help="checkpoint to start from (required for --stage mv)")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--prior-dir", help="cache directory for the prior-preservation set")
    p.add_argument("--prior-steps", type=int, default=20)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="generate images from a checkpoint")
    p.add_argument("--mode", choices=("uncond", "cond", "trajectory"), required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--poses", required=True, help="JSON pose file")
    p.add_argument("--caption", default="")
    p.add_argument("--out", required=True)
    p.add_argument("--cond-images", nargs="*", help="PNG images matching the first poses")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lambda-cfg", type=float, default=7.5)
    p.add_argument("--batch-n-g", type=int, default=10)
    p.add_argument("--first-batch", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("eval", help="single-image reconstruction metrics on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="JSON report path")
    p.add_argument("--scenes", help="comma-separated scene indices (default: all)")
    p.add_argument("--n-gen", type=int, default=4)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--run-id")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("verify", help="run invariant suites")
    p.add_argument("--suite", choices=("geometry", "render", "gradcheck", "diffusion", "all"), default="all")
    p.add_argument("--report", help="write the JSON report here")
    p.set_defaults(fn=cmd_verify)

    return parser


def main(argv: list[str] | None = None) -> int:
    threads = os.environ.get("MVDIFF_THREADS")
    if threads:
        torch.set_num_threads(int(threads))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, FileExistsError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
