"""Two-stage training.

Stage "2d" pretrains the model on single captioned frames: cross-frame
attention degenerates to self-attention, projection layers unproject and
render from one view, and the condition-vector adapters stay frozen at zero,
so the result behaves like a text-to-image prior that knows nothing about
poses.  Stage "mv" fine-tunes on N-frame sets with conditioning-frame
sampling, the voxel-skip trick, and a prior-preservation term:

    L = L_d + 0.1 * L_p

Both stages share one optimizer recipe: decoupled weight decay with the
volume-renderer group (render MLP + ScaleNet) at its own, much larger
learning rate.
"""

from __future__ import annotations

import dataclasses
import json
import time
from pathlib import Path

import torch
from torch import Tensor

from . import rng
from .conditioning import condition_vector
from .config import TrainConfig, dump_config
from .denoiser import Denoiser, save_checkpoint
from .diffusion import FrameSetState, NoiseSchedule, eps_loss, make_schedule, q_sample
from .rng import make_generator
from .synthdata import (
    FrameBatch,
    PriorItem,
    Scene,
    draw_caption,
    sample_training_frames,
)


# ---------------------------------------------------------------------------
# Optimizer


def split_param_groups(model: Denoiser) -> tuple[list, list]:
    """(volume-renderer params, everything else).

    The renderer group is every projection layer's render MLP and ScaleNet;
    those sit behind the compositing bottleneck and train with a much larger
    learning rate.
    """
    renderer, other = [], []
    for name, param in model.named_parameters():
        if ".render_mlp." in name or ".scale." in name:
            renderer.append(param)
        else:
            other.append(param)
    return renderer, other


def lora_parameters(model: Denoiser) -> list:
    """The condition-adapter (low-rank delta) parameters of all attention layers."""
    return [p for name, p in model.named_parameters() if ".up." in name or ".down." in name]


def make_optimizer(model: Denoiser, cfg: TrainConfig, include_lora: bool = True) -> torch.optim.AdamW:
    renderer, other = split_param_groups(model)
    if not include_lora:
        lora = {id(p) for p in lora_parameters(model)}
        renderer = [p for p in renderer if id(p) not in lora]
        other = [p for p in other if id(p) not in lora]
    return torch.optim.AdamW(
        [
            {"params": renderer, "lr": cfg.lr_renderer},
            {"params": other, "lr": cfg.lr_other},
        ],
        weight_decay=cfg.weight_decay,
    )


def optimizer_step(optimizer: torch.optim.Optimizer, model: Denoiser) -> bool:
    """Apply one update; refuse (and zero grads) when any gradient is non-finite."""
    for group in optimizer.param_groups:
        for p in group["params"]:
            if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
                optimizer.zero_grad(set_to_none=True)
                return False
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    return True


# ---------------------------------------------------------------------------
# Loss of one frame set


@dataclasses.dataclass
class StepLosses:
    total: Tensor
    denoising: Tensor
    prior: Tensor
    conditioned: tuple[bool, bool]


def _forward_kwargs(cfg: TrainConfig) -> dict:
    return {
        "use_projection": cfg.ablation != "no_proj",
        "use_cross_frame": cfg.ablation != "no_cfa",
    }


def draw_frame_timesteps(
    n: int, t_max: int, cfg: TrainConfig, gen: torch.Generator
) -> tuple[Tensor, bool, bool]:
    """One shared timestep for the set, plus independent conditioning draws.

    With probability p_cond_first the first frame's timestep drops to 0
    (un-noised conditioning input), and independently with p_cond_second the
    second frame's does.
    """
    t_shared = int(torch.randint(1, t_max + 1, (), generator=gen))
    t = torch.full((n,), t_shared, dtype=torch.long)
    # Conditioning draws only make sense for true multi-view sets.
    cond_first = n >= 2 and float(torch.rand((), generator=gen)) < cfg.p_cond_first
    cond_second = n >= 2 and float(torch.rand((), generator=gen)) < cfg.p_cond_second
    if cond_first:
        t[0] = 0
    if cond_second:
        t[1] = 0
    return t, cond_first, cond_second


def frame_set_loss(
    model: Denoiser,
    batch: FrameBatch,
    schedule: NoiseSchedule,
    cfg: TrainConfig,
    gen: torch.Generator,
    sample_gen: torch.Generator | None = None,
) -> tuple[Tensor, Tensor, tuple[bool, bool]]:
    """Denoising loss of one multi-view frame set.

    Conditioning frames enter bit-un-noised and are masked from the loss.
    The last frame never contributes to the voxel grids, which forces the 3D
    representation to be renderable from genuinely novel views.
    """
    n = batch.images.shape[0]
    t, cond_first, cond_second = draw_frame_timesteps(n, schedule.t_max, cfg, gen)
    eps = torch.randn(batch.images.shape, generator=gen)
    x_t = q_sample(batch.images, t, eps, schedule)
    state = FrameSetState(
        x=x_t,
        t=t,
        views=batch.views,
        conditions=batch.conditions,
        caption_tokens=batch.caption_tokens,
        voxel_skip=(n - 1) if (cfg.voxel_skip_last and n > 1) else None,
    )
    eps_pred = model(state, schedule, sample_gen=sample_gen, **_forward_kwargs(cfg))
    loss, all_masked = eps_loss(eps, eps_pred, state.active_mask)
    if all_masked:
        # Degenerate draw (every frame conditioned): contribute nothing but
        # keep the loss attached to the graph so backward stays valid.
        loss = eps_pred.sum() * 0.0
    return loss, eps_pred, (cond_first, cond_second)


def prior_loss(
    model: Denoiser,
    item: PriorItem,
    schedule: NoiseSchedule,
    cfg: TrainConfig,
    gen: torch.Generator,
    sample_gen: torch.Generator | None = None,
) -> Tensor:
    """Single-image denoising loss on a prior-preservation sample.

    Runs the same network with N = 1 (self-attention fallback, single-view
    unprojection) and its own timestep draw.
    """
    t = int(torch.randint(1, schedule.t_max + 1, (), generator=gen))
    eps = torch.randn(item.image.shape, generator=gen).unsqueeze(0)
    x0 = item.image.unsqueeze(0)
    x_t = q_sample(x0, torch.tensor([t]), eps, schedule)
    state = FrameSetState(
        x=x_t,
        t=torch.tensor([t]),
        views=[item.view],
        conditions=[condition_vector(item.view, item.image.permute(1, 2, 0), mode="train")],
        caption_tokens=item.caption_tokens,
        voxel_skip=None,
    )
    eps_pred = model(state, schedule, sample_gen=sample_gen, **_forward_kwargs(cfg))
    loss, _ = eps_loss(eps, eps_pred, torch.tensor([True]))
    return loss


def train_step(
    model: Denoiser,
    batches: list[FrameBatch],
    prior_item: PriorItem | None,
    schedule: NoiseSchedule,
    cfg: TrainConfig,
    gen: torch.Generator,
) -> StepLosses:
    """Loss for one optimizer step: the mean over frame sets plus the prior term.

    Ray marching uses stratified sampling during training; the jitter stream
    is derived from the step generator, so checkpoints restore it exactly.
    """
    sample_gen = rng.spawn(gen, 1)[0]
    d_losses = []
    conditioned = (False, False)
    for batch in batches:
        loss, _, conditioned = frame_set_loss(model, batch, schedule, cfg, gen, sample_gen)
        d_losses.append(loss)
    loss_d = torch.stack(d_losses).mean()
    if prior_item is not None:
        loss_p = prior_loss(model, prior_item, schedule, cfg, gen, sample_gen)
    else:
        loss_p = loss_d.new_zeros(())
    total = loss_d + cfg.prior_weight * loss_p
    return StepLosses(total, loss_d, loss_p, conditioned)


# ---------------------------------------------------------------------------
# Training loops


def _single_frame_batch(scene: Scene, cfg: TrainConfig, gen: torch.Generator) -> FrameBatch:
    idx = int(torch.randint(scene.num_frames, (), generator=gen))
    image = scene.images[idx]
    view = scene.views[idx]
    return FrameBatch(
        images=image.unsqueeze(0),
        views=[view],
        conditions=[condition_vector(view, image.permute(1, 2, 0), mode="train")],
        caption_tokens=draw_caption(scene.spec, gen, cfg.empty_caption_prob),
        indices=[idx],
        mode="single",
    )


@dataclasses.dataclass
class TrainState:
    step: int = 0
    incidents: int = 0


def _log_line(log_file, step: int, losses: StepLosses, cfg: TrainConfig) -> None:
    record = {
        "step": step,
        "loss_total": float(losses.total.detach()),
        "loss_d": float(losses.denoising.detach()),
        "loss_p": float(losses.prior.detach()),
        "lr_renderer": cfg.lr_renderer,
        "lr_other": cfg.lr_other,
        "timestamp": time.time(),
    }
    log_file.write(json.dumps(record) + "\n")
    log_file.flush()


def _save_trainer_state(
    out_dir: Path, model, optimizer, gen, state: TrainState
) -> None:
    torch.save(
        {
            "optimizer": optimizer.state_dict(),
            "rng_state": gen.get_state(),
            "step": state.step,
            "incidents": state.incidents,
        },
        out_dir / "trainer_state.pt",
    )


def _resume_trainer_state(out_dir: Path, optimizer, gen) -> TrainState:
    blob = torch.load(out_dir / "trainer_state.pt", weights_only=True)
    optimizer.load_state_dict(blob["optimizer"])
    gen.set_state(blob["rng_state"])
    return TrainState(step=blob["step"], incidents=blob["incidents"])


def train(
    scenes: list[Scene],
    cfg: TrainConfig,
    out_dir: str | Path,
    stage: str,
    init_model: Denoiser | None = None,
    prior_items: list[PriorItem] | None = None,
    resume: bool = False,
    progress: bool = False,
) -> Denoiser:
    """Run one training stage and leave a checkpoint + JSON-lines log in out_dir.

    stage="2d": single-frame pretraining with frozen condition adapters.
    stage="mv": N-frame fine-tuning (requires init_model; uses prior_items
    when given).  resume=True continues bit-exactly from trainer_state.pt.
    """
    if stage not in ("2d", "mv"):
        raise ValueError(f"unknown stage {stage!r}")
    if stage == "mv" and init_model is None:
        raise ValueError("stage mv requires a stage-2d checkpoint to start from")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "train_config.txt").write_text(dump_config(cfg))

    schedule = make_schedule(cfg.t_max, cfg.beta_start, cfg.beta_end)
    if init_model is not None:
        model = init_model
        if stage == "mv" and not resume:
            # Fine-tuning starts from the 2D prior with fresh adapters; they
            # were frozen at zero during stage 2d, so this is a no-op unless
            # someone hands in a partially trained model.
            with torch.no_grad():
                for name, p in model.named_parameters():
                    if ".up." in name:
                        p.zero_()
    else:
        torch.manual_seed(cfg.seed)  # fresh-model init must not depend on ambient RNG
        model = Denoiser(cfg.denoiser_config())
    model.train()

    optimizer = make_optimizer(model, cfg, include_lora=(stage == "mv"))
    gen = make_generator(cfg.seed)
    state = TrainState()
    if resume:
        state = _resume_trainer_state(out_dir, optimizer, gen)

    n_frames = cfg.frames_per_set if stage == "mv" else 1
    mode = "a" if resume else "w"
    with open(out_dir / "train_log.jsonl", mode) as log_file:
        while state.step < cfg.steps:
            batches = []
            for _ in range(cfg.batch_size):
                scene = scenes[int(torch.randint(len(scenes), (), generator=gen))]
                if stage == "mv":
                    batches.append(
                        sample_training_frames(scene, n_frames, gen, cfg.empty_caption_prob)
                    )
                else:
                    batches.append(_single_frame_batch(scene, cfg, gen))
            prior_item = None
            if stage == "mv" and prior_items:
                prior_item = prior_items[int(torch.randint(len(prior_items), (), generator=gen))]
            losses = train_step(model, batches, prior_item, schedule, cfg, gen)
            (losses.total / cfg.grad_accum).backward()
            if (state.step + 1) % cfg.grad_accum == 0:
                if not optimizer_step(optimizer, model):
                    state.incidents += 1
                    log_file.write(
                        json.dumps({"step": state.step, "incident": "non-finite gradient, step skipped"})
                        + "\n"
                    )
            state.step += 1
            if state.step % cfg.log_every == 0 or state.step == cfg.steps:
                _log_line(log_file, state.step, losses, cfg)
                if progress:
                    print(
                        f"step {state.step}/{cfg.steps} "
                        f"loss {float(losses.total.detach()):.4f} "
                        f"(d {float(losses.denoising.detach()):.4f})",
                        flush=True,
                    )
            if state.step % cfg.checkpoint_every == 0 or state.step == cfg.steps:
                save_checkpoint(
                    out_dir, model, schedule, cfg.seed,
                    extra={"stage": stage, "step": state.step, "ablation": cfg.ablation},
                )
                _save_trainer_state(out_dir, model, optimizer, gen, state)
    save_checkpoint(
        out_dir, model, schedule, cfg.seed,
        extra={"stage": stage, "step": state.step, "ablation": cfg.ablation},
    )
    _save_trainer_state(out_dir, model, optimizer, gen, state)
    return model
