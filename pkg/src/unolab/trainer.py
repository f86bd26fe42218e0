"""Training loop: stages, freezing, Adam, EMA, schedules, metrics, gates.

Three stages share one loop and differ only in data mix, loss weights, and
freeze spec:

  pretrain  everything trainable; batches mix captioning samples (clean
            image -> caption CE) with text-to-image flow matching
  uno       post-training with understanding supervision: flow MSE plus
            weighted caption CE and metaquery feature regression, both
            computed over the noised generative stream; the understanding
            expert, embeddings, encoder, and LM head stay frozen so the
            extra losses reshape only the generative pathway
  sft       the identical pipeline and layouts with both weights at zero;
            the supervised-fine-tuning baseline for comparisons

uno and sft refuse to start unless the base model passes the stage-0
sufficiency gate: caption cross-entropy on held-out canonical captions at or
under the configured threshold. Gating on a measured quantity (not a flag in
the checkpoint) keeps the check honest under checkpoint edits.

Determinism contract: with deterministic_timing on (default), two runs with
equal config and seed produce byte-identical metrics CSV and checkpoint
blobs. Wall-clock timing then goes to stdout only and the wall_ms column is
written as 0.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import model as md
from . import objectives as ob
from . import packing as pk
from . import worldgen as wg

STAGES = ("pretrain", "uno", "sft")

# scene seeds: training draws below the eval base, held-out gate scenes from
# a dedicated band above it
EVAL_SEED_BASE = 1_000_000_000
GATE_SEED_BASE = 1_500_000_000

METRICS_HEADER = "step,l_total,l_mse,l_lang,l_vis,lr,grad_norm,wall_ms"


class GateError(RuntimeError):
    pass


class TrainAbort(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "uno"
    steps: int = 200
    batch_size: int = 16
    lr: float = 1e-4
    schedule: str = "cosine"  # cosine | constant
    warmup: int = 100
    min_lr_frac: float = 0.1
    weight_decay: float = 0.0
    clip: float = 1.0
    ema_ratio: float = 0.9999
    shift: float = 4.0
    seed: int = 0
    lambda1: float = 0.1
    lambda2: float = 0.2
    enable_language: bool = True
    enable_vision: bool = True
    aug: bool = True
    unfreeze_und: bool = False
    freeze_lm_head: bool = True
    mask_condition_prompt: bool = True
    metaquery_order: str = "causal"
    sup_blocks_see_source: bool = False
    edit_fraction: float = 0.5  # uno/sft batches: fraction of edit samples
    caption_fraction: float = 0.5  # pretrain batches: fraction of captioning
    max_objects: int = 3
    deterministic_timing: bool = True
    ckpt_every: int = 0  # 0: final checkpoint only
    log_every: int = 50
    gate_threshold: float = 0.2
    gate_samples: int = 64
    fixed_scene_seed: int | None = None  # overfit runs: every sample this scene

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if not (0 <= self.edit_fraction <= 1 and 0 <= self.caption_fraction <= 1):
            raise ValueError("fractions must lie in [0, 1]")
        if not (0 <= self.ema_ratio < 1):
            raise ValueError("ema_ratio must lie in [0, 1)")

    def loss_config(self) -> ob.UnoLossConfig:
        if self.stage == "sft":
            return ob.UnoLossConfig(0.0, 0.0, False, False)
        if self.stage == "pretrain":
            # unit-weight captioning, no metaquery term
            return ob.UnoLossConfig(1.0, 0.0, True, False)
        return ob.UnoLossConfig(
            self.lambda1, self.lambda2, self.enable_language, self.enable_vision
        )

    def toggles(self) -> pk.MaskToggles:
        return pk.MaskToggles(
            self.mask_condition_prompt, self.metaquery_order, self.sup_blocks_see_source
        )


# ---------------------------------------------------------------------------
# schedule, optimizer, ema, freezing

def lr_at(step: int, cfg: TrainConfig) -> float:
    if step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    if cfg.schedule == "constant":
        return cfg.lr
    span = max(1, cfg.steps - cfg.warmup)
    progress = min(1.0, (step - cfg.warmup) / span)
    floor = cfg.min_lr_frac * cfg.lr
    return floor + 0.5 * (cfg.lr - floor) * (1.0 + math.cos(math.pi * progress))


ADAM_BETAS = (0.9, 0.95)
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]
    t: int = 0


def adam_init(params: dict[str, torch.Tensor]) -> AdamState:
    return AdamState(
        m={n: torch.zeros_like(p) for n, p in params.items()},
        v={n: torch.zeros_like(p) for n, p in params.items()},
    )


def adam_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    opt: AdamState,
    lr: float,
    names: list[str],
    weight_decay: float = 0.0,
) -> None:
    """Decoupled-weight-decay Adam with bias correction, applied in place to
    the named (trainable) parameters only."""
    opt.t += 1
    b1, b2 = ADAM_BETAS
    bc1 = 1.0 - b1**opt.t
    bc2 = 1.0 - b2**opt.t
    with torch.no_grad():
        for n in names:
            g = grads[n]
            opt.m[n].mul_(b1).add_(g, alpha=1.0 - b1)
            opt.v[n].mul_(b2).addcmul_(g, g, value=1.0 - b2)
            if weight_decay:
                params[n].mul_(1.0 - lr * weight_decay)
            denom = (opt.v[n] / bc2).sqrt_().add_(ADAM_EPS)
            params[n].addcdiv_(opt.m[n] / bc1, denom, value=-lr)


def apply_freeze(grads: dict[str, torch.Tensor], frozen: frozenset[str]) -> None:
    for n, g in grads.items():
        if md.group_of(n) in frozen:
            g.zero_()


def clip_grads(grads: dict[str, torch.Tensor], clip: float) -> float:
    """Global L2 clipping in place; returns the pre-clip norm."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if clip > 0 and total > clip:
        scale = clip / total
        with torch.no_grad():
            for g in grads.values():
                g.mul_(scale)
    return total


def ema_update(state: md.ModelState, decay: float) -> None:
    """EMA over trainable groups; frozen shadows are left untouched (they
    were synced to the frozen values at stage start, so they stay bitwise
    equal to their parameters)."""
    with torch.no_grad():
        for n in state.trainable_names():
            state.ema[n].mul_(decay).add_(state.params[n].detach(), alpha=1.0 - decay)


def freeze_spec(cfg: TrainConfig, mcfg: md.ModelConfig) -> frozenset[str]:
    if cfg.stage == "pretrain":
        return frozenset()
    trainable = {"adapt.gen_in", "time.mlp", "head.vel", "mq.table"}
    for i in range(mcfg.n_layers):
        for role in md.ROLES:
            trainable.add(f"layer{i}.gen.{role}")
            if cfg.unfreeze_und:
                trainable.add(f"layer{i}.und.{role}")
    if not cfg.freeze_lm_head:
        trainable.add("head.lm")
    return frozenset(g for g in md.group_map(mcfg) if g not in trainable)


# ---------------------------------------------------------------------------
# data streams

def _train_scene_seed(run_seed: int, step: int, index: int) -> int:
    return wg.mix64(run_seed, step, index, 0x5CE) % EVAL_SEED_BASE


def make_batch(
    cfg: TrainConfig, mcfg: md.ModelConfig, step: int
) -> list[pk.PackedSample]:
    pcfg = pk.PackConfig(
        num_metaqueries=mcfg.num_metaqueries, aug=cfg.aug, shift=cfg.shift
    )
    toggles = cfg.toggles()
    batch = []
    for i in range(cfg.batch_size):
        seed = wg.mix64(cfg.seed, step, i)
        if cfg.fixed_scene_seed is not None:
            scene = wg.sample_scene(cfg.fixed_scene_seed, cfg.max_objects)
        else:
            scene_seed = _train_scene_seed(cfg.seed, step, i)
            scene = wg.sample_scene(scene_seed, cfg.max_objects)
        rng = np.random.default_rng(wg.mix64(seed, 0x717))
        if cfg.stage == "pretrain":
            if rng.random() < cfg.caption_fraction:
                batch.append(pk.pack_pretrain_caption(scene, seed, pcfg))
            else:
                template = int(rng.integers(2))
                prompt = wg.caption_scene(scene, template)
                batch.append(pk.pack_pretrain_t2i(prompt, scene, seed, pcfg))
        else:
            if rng.random() < cfg.edit_fraction:
                pair = wg.sample_edit(scene, seed)
                batch.append(pk.pack_edit_uno(pair, seed, pcfg, toggles))
            else:
                template = int(rng.integers(2))
                prompt = wg.caption_scene(scene, template)
                batch.append(pk.pack_t2i_uno(prompt, scene, seed, pcfg, toggles))
    return batch


def gate_batch(mcfg: md.ModelConfig, n: int, seed: int = 0) -> list[pk.PackedSample]:
    pcfg = pk.PackConfig(num_metaqueries=mcfg.num_metaqueries)
    return [
        pk.pack_pretrain_caption(
            wg.sample_scene(GATE_SEED_BASE + wg.mix64(seed, i) % 1_000_000), i, pcfg,
            template=0,
        )
        for i in range(n)
    ]


def evaluate_caption_ce(
    state: md.ModelState, n: int = 64, seed: int = 0, batch_size: int = 16
) -> float:
    """Mean caption cross-entropy on held-out canonical captions; the stage-0
    sufficiency gate quantity."""
    samples = gate_batch(state.cfg, n, seed)
    losses, weights = [], []
    with torch.no_grad():
        for lo in range(0, len(samples), batch_size):
            out = md.forward_batch(state, samples[lo : lo + batch_size])
            losses.append(float(ob.loss_language(out)) * out.cap_targets.shape[0])
            weights.append(out.cap_targets.shape[0])
    return sum(losses) / sum(weights)


# ---------------------------------------------------------------------------
# the loop

@dataclass
class TrainReport:
    stage: str
    steps: int
    final: ob.LossBreakdown
    gate_ce: float | None
    metrics_path: str | None
    ckpt_path: str | None
    wall_seconds: float


def _format_metric(x: float | None) -> str:
    return "nan" if x is None else f"{x:.8e}"


def train(
    state: md.ModelState,
    cfg: TrainConfig,
    out_dir: str | None = None,
    check_gate: bool = True,
    log=None,
) -> TrainReport:
    mcfg = state.cfg
    gate_ce = None
    if cfg.stage in ("uno", "sft") and check_gate:
        gate_ce = evaluate_caption_ce(state, cfg.gate_samples)
        if gate_ce > cfg.gate_threshold:
            raise GateError(
                f"stage-0 sufficiency gate failed: held-out caption ce {gate_ce:.4f} "
                f"> {cfg.gate_threshold}; pretrain longer before running {cfg.stage}"
            )

    state.frozen = freeze_spec(cfg, mcfg)
    # sync EMA to the stage's starting point; frozen shadows stay equal to
    # their parameters for the whole stage
    with torch.no_grad():
        for n, p in state.params.items():
            state.ema[n] = p.detach().clone()

    loss_cfg = cfg.loss_config()
    trainable = state.trainable_names()
    opt = adam_init({n: state.params[n] for n in trainable})

    metrics_path = None
    metrics_f = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        metrics_path = os.path.join(out_dir, "metrics.csv")
        metrics_f = open(metrics_path, "w")
        metrics_f.write(METRICS_HEADER + "\n")

    t_start = time.perf_counter()
    bd = None
    try:
        for step in range(cfg.steps):
            step_t0 = time.perf_counter()
            lr = lr_at(step, cfg)
            batch = make_batch(cfg, mcfg, step)
            out = md.forward_batch(state, batch)
            try:
                total, bd = ob.loss_total(out, loss_cfg)
            except FloatingPointError as e:
                seeds = [s.meta.get("seed") for s in batch]
                raise TrainAbort(
                    f"non-finite loss at step {step}; batch sample seeds: {seeds}"
                ) from e
            total.backward()
            grads = {}
            for n, p in state.params.items():
                grads[n] = (
                    p.grad if p.grad is not None else torch.zeros_like(p)
                )
            apply_freeze(grads, state.frozen)
            gnorm = clip_grads(grads, cfg.clip)
            if not math.isfinite(gnorm):
                seeds = [s.meta.get("seed") for s in batch]
                raise TrainAbort(
                    f"non-finite gradient at step {step}; batch sample seeds: {seeds}"
                )
            adam_step(state.params, grads, opt, lr, trainable, cfg.weight_decay)
            ema_update(state, cfg.ema_ratio)
            for p in state.params.values():
                p.grad = None
            state.step += 1

            wall_ms = 0 if cfg.deterministic_timing else int(
                round(1000 * (time.perf_counter() - step_t0))
            )
            if metrics_f:
                metrics_f.write(
                    f"{step},{_format_metric(bd.total)},{_format_metric(bd.mse)},"
                    f"{_format_metric(bd.lang)},{_format_metric(bd.vis)},"
                    f"{lr:.8e},{gnorm:.8e},{wall_ms}\n"
                )
            if log and cfg.log_every and (step % cfg.log_every == 0 or step == cfg.steps - 1):
                log(
                    f"[{cfg.stage}] step {step}/{cfg.steps} total {bd.total:.4f} "
                    f"mse {bd.mse if bd.mse is not None else float('nan'):.4f} "
                    f"lr {lr:.2e} gnorm {gnorm:.3f} "
                    f"({1000 * (time.perf_counter() - step_t0):.0f} ms)"
                )
            if out_dir and cfg.ckpt_every and (step + 1) % cfg.ckpt_every == 0:
                md.save_checkpoint(state, os.path.join(out_dir, f"ckpt-{step + 1:06d}"))
    finally:
        if metrics_f:
            metrics_f.close()

    ckpt_path = None
    if out_dir:
        ckpt_path = os.path.join(out_dir, "ckpt-final")
        md.save_checkpoint(state, ckpt_path)
    return TrainReport(
        stage=cfg.stage,
        steps=cfg.steps,
        final=bd,
        gate_ce=gate_ce,
        metrics_path=metrics_path,
        ckpt_path=ckpt_path,
        wall_seconds=time.perf_counter() - t_start,
    )
