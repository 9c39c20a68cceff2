#!/usr/bin/env python3
"""Learning experiment behind acceptance criteria 7 and 8.

Protocol: 64 training scenes at 32x32, single-frame pretraining, then three
multi-view fine-tunes (full, no-cfa, no-proj) with prior preservation, then
single-image-conditional evaluation (n_c=1, n_g=4) on 8 held-out scenes,
comparing against a fresh untrained checkpoint.

The "full" preset is the documented protocol (toy model, 5k + 20k steps,
300 prior images), sized for a consumer GPU or a long multi-core CPU run.
The "reduced" preset shrinks the model and step counts so the whole study
fits a small CPU budget; every threshold stays identical.

Writes runs/learning_experiment/report.json, which tests/test_acceptance.py
asserts against.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import torch

REPO = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO / "src"))

from mvdiff.config import TrainConfig
from mvdiff.denoiser import Denoiser, load_checkpoint
from mvdiff.diffusion import make_schedule
from mvdiff.evaluation import evaluate_reconstruction
from mvdiff.generation import save_images
from mvdiff.synthdata import caption_of, make_prior_set, read_dataset, write_dataset
from mvdiff.trainer import train

PRESETS = {
    "full": dict(
        model=dict(),
        stage0_steps=5000,
        mv_steps=20000,
        prior_count=300,
        prior_steps=20,
        lr_other=5e-5,
    ),
    "reduced": dict(
        model=dict(
            base_channels=16,
            c_prime=8,
            t_dim=16,
            n_render_samples=8,
            refine_blocks=2,
        ),
        stage0_steps=2000,
        mv_steps=3000,
        prior_count=150,
        prior_steps=10,
        lr_other=2e-4,
    ),
}

N_TRAIN_SCENES = 64
N_HELDOUT_SCENES = 8
EVAL_STEPS = 50
EVAL_N_GEN = 4


def build_config(preset: dict, steps: int, ablation: str = "", seed: int = 0) -> TrainConfig:
    return TrainConfig(
        steps=steps,
        seed=seed,
        prior_count=preset["prior_count"],
        lr_other=preset["lr_other"],
        ablation=ablation,
        log_every=100,
        checkpoint_every=500,
        **preset["model"],
    )


def stage_losses(run_dir: Path) -> tuple[float, float]:
    records = [
        json.loads(line)
        for line in (run_dir / "train_log.jsonl").read_text().splitlines()
        if "loss_total" in line
    ]
    return records[0]["loss_total"], sum(r["loss_total"] for r in records[-5:]) / min(5, len(records))


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--preset", choices=tuple(PRESETS), default="reduced")
    parser.add_argument("--out", default=str(REPO / "runs" / "learning_experiment"))
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--stage0-steps", type=int, help="override the preset")
    parser.add_argument("--mv-steps", type=int, help="override the preset")
    parser.add_argument("--resume", action="store_true", help="extend existing runs to the step counts")
    parser.add_argument("--eval-only", action="store_true", help="reuse checkpoints, redo evaluation")
    parser.add_argument("--train-scenes", type=int, default=N_TRAIN_SCENES, help="protocol: 64 (smaller only for smoke tests)")
    parser.add_argument("--heldout-scenes", type=int, default=N_HELDOUT_SCENES)
    parser.add_argument("--prior-count", type=int, help="override the preset")
    parser.add_argument("--eval-steps", type=int, default=EVAL_STEPS)
    args = parser.parse_args()

    preset = dict(PRESETS[args.preset])
    if args.stage0_steps:
        preset["stage0_steps"] = args.stage0_steps
    if args.mv_steps:
        preset["mv_steps"] = args.mv_steps
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t_start = time.time()

    if args.prior_count is not None:
        preset["prior_count"] = args.prior_count

    # 1. Dataset: train + held-out scenes (protocol: 64 + 8).
    data_dir = out / "data"
    if not data_dir.exists():
        print(f"rendering {args.train_scenes + args.heldout_scenes} scenes ...", flush=True)
        write_dataset(
            data_dir,
            n_scenes=args.train_scenes + args.heldout_scenes,
            seed=args.seed,
            image_size=32,
        )
    scenes = read_dataset(data_dir)
    train_scenes = scenes[: args.train_scenes]
    heldout = scenes[args.train_scenes :]
    print(f"dataset ready: {len(train_scenes)} train / {len(heldout)} held-out scenes", flush=True)

    # 2. Stage 0: single-frame pretraining.
    cfg0 = build_config(preset, preset["stage0_steps"], seed=args.seed)
    stage0_dir = out / "stage0"
    if not args.eval_only and (args.resume or not (stage0_dir / "weights.pt").exists()):
        resume0 = (stage0_dir / "trainer_state.pt").exists()
        init0 = load_checkpoint(stage0_dir)[0] if resume0 else None
        print(f"stage 0: {cfg0.steps} steps ...", flush=True)
        train(train_scenes, cfg0, stage0_dir, stage="2d", init_model=init0, resume=resume0, progress=True)

    # 3. Prior-preservation set sampled from the stage-0 checkpoint.
    prior_dir = out / "prior_set"
    prior_items = []
    if preset["prior_count"] > 0:
        if not (prior_dir / "prior.json").exists():
            print(f"sampling {preset['prior_count']} prior images ...", flush=True)
            prior_items = make_prior_set(
                stage0_dir, count=preset["prior_count"], seed=args.seed, steps=preset["prior_steps"]
            )
            from mvdiff.cli import _write_prior

            _write_prior(prior_dir, prior_items)
        else:
            from mvdiff.cli import _read_prior

            prior_items = _read_prior(prior_dir)
    print(f"prior set: {len(prior_items)} images", flush=True)

    # 4. Three stage-1 fine-tunes.
    variants = ("full", "no_cfa", "no_proj")
    for variant in variants:
        ablation = "" if variant == "full" else variant
        cfg1 = build_config(preset, preset["mv_steps"], ablation=ablation, seed=args.seed)
        run_dir = out / f"mv_{variant}"
        if args.eval_only:
            continue
        resume1 = (run_dir / "trainer_state.pt").exists()
        if (run_dir / "weights.pt").exists() and not args.resume and not resume1:
            continue
        init = load_checkpoint(run_dir if resume1 else stage0_dir)[0]
        print(f"stage 1 [{variant}]: {cfg1.steps} steps ...", flush=True)
        train(
            train_scenes, cfg1, run_dir, stage="mv",
            init_model=init, prior_items=prior_items, resume=resume1, progress=True,
        )

    # 5. Evaluate all models plus the untrained baseline on held-out scenes.
    models = {}
    for variant in variants:
        model, schedule, manifest = load_checkpoint(out / f"mv_{variant}")
        model.eval()
        ablation = manifest.get("ablation", "")
        fwd = {
            "use_projection": ablation != "no_proj",
            "use_cross_frame": ablation != "no_cfa",
        }
        print(f"evaluating {variant} ...", flush=True)
        models[variant] = evaluate_reconstruction(
            model, schedule, heldout, n_gen=EVAL_N_GEN, steps=args.eval_steps,
            seed=args.seed, forward_kwargs=fwd,
        )
        models[variant]["trained_steps"] = manifest.get("step")
        if variant == "full":
            _save_example(out, model, schedule, heldout[0], args.seed)

    torch.manual_seed(args.seed)
    untrained = Denoiser(build_config(preset, 1, seed=args.seed).denoiser_config())
    untrained.eval()
    print("evaluating untrained baseline ...", flush=True)
    models["untrained"] = evaluate_reconstruction(
        untrained, make_schedule(cfg0.t_max, cfg0.beta_start, cfg0.beta_end),
        heldout, n_gen=EVAL_N_GEN, steps=args.eval_steps, seed=args.seed,
    )

    smoke = overfit_smoke(out, scenes[:4], preset, args.seed)

    first0, last0 = stage_losses(stage0_dir)
    report = {
        "preset": args.preset,
        "seed": args.seed,
        "protocol": {
            "train_scenes": args.train_scenes,
            "heldout_scenes": args.heldout_scenes,
            "image_size": 32,
            "stage0_steps": preset["stage0_steps"],
            "mv_steps": preset["mv_steps"],
            "prior_count": preset["prior_count"],
            "eval_steps": args.eval_steps,
            "eval_n_gen": EVAL_N_GEN,
        },
        "model_config": build_config(preset, 1).denoiser_config().to_dict(),
        "stage0": {"first_loss": first0, "last_loss": last0},
        "overfit_smoke": smoke,
        "models": models,
        "runtime_s": round(time.time() - t_start, 1),
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    (out / "report.json").write_text(json.dumps(report, indent=1))
    print(json.dumps({k: {m: round(v[m], 3) for m in ("masked_psnr", "masked_ssim", "reprojection_error")} for k, v in models.items()}, indent=1))
    print(f"report written to {out / 'report.json'} ({report['runtime_s']}s total)")
    return 0


def overfit_smoke(out: Path, scenes, preset: dict, seed: int, max_steps: int = 5000) -> dict:
    """4-scene single-frame overfit: loss must fall below 10% of its start.

    Runs in 500-step chunks (resuming in place) and stops early once the
    criterion is met.
    """
    run_dir = out / "overfit_smoke"
    if (run_dir / "result.json").exists():
        return json.loads((run_dir / "result.json").read_text())
    print("overfit smoke: 4 scenes, single-frame, target 10% of initial loss", flush=True)
    model = None
    steps_done = 0
    first = last = None
    while steps_done < max_steps:
        steps_done += 500
        cfg = build_config(preset, steps_done, seed=seed)
        cfg = dataclasses.replace(cfg, log_every=50, checkpoint_every=500)
        resume = (run_dir / "trainer_state.pt").exists()
        model = train(
            scenes, cfg, run_dir, stage="2d",
            init_model=model if resume else None, resume=resume, progress=False,
        )
        first, last = stage_losses(run_dir)
        print(f"  overfit smoke step {steps_done}: loss {first:.3f} -> {last:.3f}", flush=True)
        if last < 0.1 * first:
            break
    result = {
        "scenes": len(scenes),
        "steps": steps_done,
        "first_loss": first,
        "last_loss": last,
        "reached_tenth": last < 0.1 * first,
    }
    (run_dir / "result.json").write_text(json.dumps(result))
    return result


def _save_example(out: Path, model, schedule, scene, seed: int) -> None:
    """A small conditional sample grid from the full model, for inspection."""
    from mvdiff.generation import generate_conditional

    targets = [scene.views[i] for i in (4, 9, 14, 19)]
    generated = generate_conditional(
        model, schedule,
        cond_images=scene.images[:1], cond_views=[scene.views[0]],
        target_views=targets, caption_tokens=caption_of(scene.spec),
        steps=EVAL_STEPS, gen=seed,
    )
    save_images(out / "samples_full", generated, targets, {"scene": "heldout-0"})


if __name__ == "__main__":
    sys.exit(main())
