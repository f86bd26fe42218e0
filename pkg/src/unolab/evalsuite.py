"""Sampling and evaluation: Euler integration of the learned velocity field,
compositional scoring via the exact latent probe, edit scoring with
background-change accounting, and the ablation grid runner.

Evaluation scenes draw from a seed band disjoint from training seeds
(training scene seeds are < EVAL_SEED_BASE by construction in the trainer).
Generators and editors are injectable so the scoring half can be checked
against oracles (feeding the true latent must score 1.0 everywhere; feeding
an unrelated latent must score at chance).
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from concurrent import futures
from dataclasses import dataclass, asdict

import numpy as np
import torch

from . import model as md
from . import objectives as ob
from . import packing as pk
from . import trainer as tr
from . import worldgen as wg

EVAL_SEED_BASE = tr.EVAL_SEED_BASE
_EVAL_BAND = 400_000_000  # stays clear of the gate band at 1.5e9

ABLATION_SCHEMA = "unolab-ablation-v1"


def eval_scene_seed(seed: int, index: int) -> int:
    s = EVAL_SEED_BASE + wg.mix64(seed, index, 0xE7A1) % _EVAL_BAND
    assert s >= EVAL_SEED_BASE
    return s


# ---------------------------------------------------------------------------
# sampling

def integrate(velocity_fn, x_init: np.ndarray, steps: int) -> np.ndarray:
    """Euler from t=1 (pure noise) to t=0: x <- x - dt * u(x, t), with t
    evaluated at the left endpoint of each interval."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = np.array(x_init, dtype=np.float64, copy=True)
    dt = 1.0 / steps
    for k in range(steps):
        t = 1.0 - k * dt
        x = x - dt * np.asarray(velocity_fn(x, t), dtype=np.float64)
    return x


def generate_batch(
    state: md.ModelState,
    prompts: list[list[int]],
    seeds: list[int],
    steps: int = 32,
    use_ema: bool = True,
    und_list: list[np.ndarray | None] | None = None,
) -> list[np.ndarray]:
    """Sample one latent per prompt; returns (4, 8, 8) arrays."""
    if und_list is None:
        und_list = [None] * len(prompts)
    params = state.ema if use_ema else state.params
    xs = [
        np.random.default_rng(wg.mix64(s, 0xE05)).standard_normal((16, wg.D_LATENT_TOKEN))
        for s in seeds
    ]
    dt = 1.0 / steps
    with torch.no_grad():
        for k in range(steps):
            t = 1.0 - k * dt
            samples = [
                pk.pack_infer(p, x, t, und) for p, x, und in zip(prompts, xs, und_list)
            ]
            out = md.forward_batch(state, samples, params=params)
            vel = out.vel_pred.numpy()
            for i in range(len(xs)):
                xs[i] = xs[i] - dt * vel[i * 16 : (i + 1) * 16]
    return [wg.tokens_to_latent(x) for x in xs]


def generate(
    state: md.ModelState,
    prompt: list[int],
    seed: int = 0,
    steps: int = 32,
    use_ema: bool = True,
    und_patches: np.ndarray | None = None,
) -> np.ndarray:
    return generate_batch(state, [prompt], [seed], steps, use_ema, [und_patches])[0]


# ---------------------------------------------------------------------------
# reports

@dataclass
class EvalReport:
    task: str
    n: int
    seed: int
    sampler_steps: int
    use_ema: bool
    metrics: dict[str, float]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    def csv_header_row(self) -> tuple[str, str]:
        keys = sorted(self.metrics)
        header = "task,n,seed,sampler_steps,use_ema," + ",".join(keys)
        row = f"{self.task},{self.n},{self.seed},{self.sampler_steps},{self.use_ema}," + ",".join(
            f"{self.metrics[k]:.6f}" for k in keys
        )
        return header, row


def write_report(report: EvalReport, json_path, csv_path=None) -> None:
    with open(json_path, "w") as f:
        f.write(report.to_json() + "\n")
    if csv_path:
        header, row = report.csv_header_row()
        with open(csv_path, "w") as f:
            f.write(header + "\n" + row + "\n")


# ---------------------------------------------------------------------------
# compositional evaluation

def score_compositional(truth: wg.Scene, decoded: wg.ProbeResult) -> dict[str, float]:
    by_cell = {o.cell: o for o in decoded.objects}
    occupied = set(by_cell) | set(decoded.unknown_cells)
    pos_hits = col_hits = shp_hits = cond = 0
    for o in truth.objects:
        if o.cell in occupied:
            pos_hits += 1
        if o.cell in by_cell:
            cond += 1
            col_hits += by_cell[o.cell].color == o.color
            shp_hits += by_cell[o.cell].shape == o.shape
    n = len(truth.objects)
    return {
        "position": pos_hits / n,
        "color": col_hits / cond if cond else 0.0,
        "shape": shp_hits / cond if cond else 0.0,
        "count": float(len(occupied) == n),
        "exact": float(decoded.matches(truth)),
    }


def eval_compositional(
    state: md.ModelState,
    n: int = 100,
    seed: int = 0,
    steps: int = 32,
    use_ema: bool = True,
    generator=None,
    batch_size: int = 50,
) -> EvalReport:
    """Generate from held-out prompts and score against the prompt scene with
    the exact probe. generator(prompts, seeds) -> latents overrides the
    model sampler (used by scoring-oracle tests)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    scenes = [wg.sample_scene(eval_scene_seed(seed, i)) for i in range(n)]
    prompts = [wg.caption_scene(s, template=0) for s in scenes]
    noise_seeds = [wg.mix64(seed, i, 0x9) for i in range(n)]
    if generator is None:
        latents = []
        for lo in range(0, n, batch_size):
            latents += generate_batch(
                state, prompts[lo : lo + batch_size], noise_seeds[lo : lo + batch_size],
                steps, use_ema,
            )
    else:
        latents = generator(prompts, noise_seeds)
    sums: dict[str, float] = {}
    for scene, lat in zip(scenes, latents):
        for k, v in score_compositional(scene, wg.decode_probe(lat)).items():
            sums[k] = sums.get(k, 0.0) + v
    metrics = {k: v / n for k, v in sums.items()}
    return EvalReport("t2i", n, seed, steps, use_ema, metrics)


# ---------------------------------------------------------------------------
# edit evaluation

def _cell_content(res: wg.ProbeResult, cell: int):
    if cell in res.unknown_cells:
        return wg.UNKNOWN
    for o in res.objects:
        if o.cell == cell:
            return (o.shape, o.color)
    return None


def score_edit(pair: wg.EditPair, gen_lat: np.ndarray) -> tuple[bool, float]:
    """(edited cells exactly match the target, background latent MSE over
    untouched cells' interior blocks)."""
    decoded = wg.decode_probe(gen_lat)
    tgt_map = pair.target.cell_map()
    ok = True
    for cell in wg.edited_cells(pair):
        want = (
            (tgt_map[cell].shape, tgt_map[cell].color) if cell in tgt_map else None
        )
        if _cell_content(decoded, cell) != want:
            ok = False
    tgt_lat = wg.scene_latent(pair.target)
    touched = set(wg.edited_cells(pair))
    diffs = []
    for cell in range(9):
        if cell in touched:
            continue
        d = wg._cell_block(gen_lat, cell) - wg._cell_block(tgt_lat, cell)
        diffs.append(float((d**2).mean()))
    return ok, float(np.mean(diffs))


def eval_edit(
    state: md.ModelState,
    n: int = 100,
    seed: int = 0,
    steps: int = 32,
    use_ema: bool = True,
    editor=None,
    batch_size: int = 50,
) -> EvalReport:
    """Edit held-out scenes and score edited cells exactly, untouched cells
    by latent MSE. editor(pairs, seeds) -> latents overrides the sampler."""
    if n < 1:
        raise ValueError("n must be >= 1")
    pairs = []
    for i in range(n):
        scene = wg.sample_scene(eval_scene_seed(seed, i))
        pairs.append(wg.sample_edit(scene, eval_scene_seed(seed, i) + 1))
    noise_seeds = [wg.mix64(seed, i, 0xED) for i in range(n)]
    if editor is None:
        prompts = [wg.edit_instruction(p) for p in pairs]
        unds = [wg.image_patches(wg.render_scene(p.source)) for p in pairs]
        latents = []
        for lo in range(0, n, batch_size):
            latents += generate_batch(
                state, prompts[lo : lo + batch_size], noise_seeds[lo : lo + batch_size],
                steps, use_ema, unds[lo : lo + batch_size],
            )
    else:
        latents = editor(pairs, noise_seeds)
    op_hits = {op: [0, 0] for op in wg.EDIT_OPS}
    bg = []
    exact_all = 0
    for pair, lat in zip(pairs, latents):
        ok, bg_mse = score_edit(pair, lat)
        op_hits[pair.op][0] += ok
        op_hits[pair.op][1] += 1
        bg.append(bg_mse)
        exact_all += ok
    metrics = {"edit_exact": exact_all / n, "bg_mse": float(np.mean(bg))}
    for op, (hit, tot) in op_hits.items():
        metrics[f"acc_{op}"] = hit / tot if tot else 0.0
    return EvalReport("edit", n, seed, steps, use_ema, metrics)


# ---------------------------------------------------------------------------
# ablation grid

def _cell_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


ABLATION_COLUMNS = [
    "schema", "cell", "seed", "config_hash", "steps", "lambda1", "lambda2", "aug",
    "mask_condition_prompt", "metaquery_order", "sup_blocks_see_source",
    "unfreeze_und", "num_metaqueries", "exact", "position", "color", "shape",
    "count", "l_total", "l_mse", "l_lang", "l_vis",
]


def _ablation_row(
    ckpt_path: str,
    base_cfg: tr.TrainConfig,
    cell: dict,
    seed: int,
    eval_n: int,
    eval_steps: int,
) -> dict:
    overrides = dict(cell)
    name = overrides.pop("name", _cell_hash(cell)[:8])
    n_mq = overrides.pop("num_metaqueries", None)
    state = md.load_checkpoint(ckpt_path)
    if n_mq is not None and n_mq != state.cfg.num_metaqueries:
        state = md.resize_metaqueries(state, n_mq, seed)
    cfg = tr.replace(base_cfg, seed=seed, **overrides)
    report = tr.train(state, cfg, check_gate=False)
    ev = eval_compositional(
        state, n=eval_n, seed=0, steps=eval_steps, use_ema=False
    )
    return {
        "schema": ABLATION_SCHEMA,
        "cell": name,
        "seed": seed,
        "config_hash": _cell_hash({"cell": cell, "seed": seed}),
        "steps": cfg.steps,
        "lambda1": cfg.lambda1 if cfg.stage == "uno" else 0.0,
        "lambda2": cfg.lambda2 if cfg.stage == "uno" else 0.0,
        "aug": cfg.aug,
        "mask_condition_prompt": cfg.mask_condition_prompt,
        "metaquery_order": cfg.metaquery_order,
        "sup_blocks_see_source": cfg.sup_blocks_see_source,
        "unfreeze_und": cfg.unfreeze_und,
        "num_metaqueries": state.cfg.num_metaqueries,
        "exact": f"{ev.metrics['exact']:.6f}",
        "position": f"{ev.metrics['position']:.6f}",
        "color": f"{ev.metrics['color']:.6f}",
        "shape": f"{ev.metrics['shape']:.6f}",
        "count": f"{ev.metrics['count']:.6f}",
        "l_total": f"{report.final.total:.6e}",
        "l_mse": f"{report.final.mse:.6e}" if report.final.mse is not None else "nan",
        "l_lang": f"{report.final.lang:.6e}" if report.final.lang is not None else "nan",
        "l_vis": f"{report.final.vis:.6e}" if report.final.vis is not None else "nan",
    }


def _ablation_worker_init():
    torch.set_num_threads(1)


def run_ablation(
    ckpt_path: str,
    base_cfg: tr.TrainConfig,
    cells: list[dict],
    seeds: list[int],
    out_csv: str,
    eval_n: int = 60,
    eval_steps: int = 16,
    workers: int = 1,
    log=None,
) -> list[dict]:
    """Train one post-training run per (cell, seed) from the same stage-0
    checkpoint and evaluate compositionally. Cells are dicts of TrainConfig
    overrides, plus the optional model-level key num_metaqueries. Rows are
    written (and flushed) in deterministic (cell, seed) order regardless of
    worker count."""
    jobs = [(cell, seed) for cell in cells for seed in seeds]
    rows = []
    with open(out_csv, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=ABLATION_COLUMNS)
        writer.writeheader()

        def emit(row):
            writer.writerow(row)
            f.flush()
            rows.append(row)
            if log:
                log(f"[ablate] {row['cell']} seed={row['seed']} exact={row['exact']}")

        if workers <= 1:
            for cell, seed in jobs:
                emit(_ablation_row(ckpt_path, base_cfg, cell, seed, eval_n, eval_steps))
        else:
            with futures.ProcessPoolExecutor(
                max_workers=workers, initializer=_ablation_worker_init
            ) as ex:
                pending = [
                    ex.submit(_ablation_row, ckpt_path, base_cfg, cell, seed,
                              eval_n, eval_steps)
                    for cell, seed in jobs
                ]
                for fut in pending:  # submission order == deterministic order
                    emit(fut.result())
    return rows
