"""Command-line front end tying the pipeline together: synthetic data
generation, stage-0 pretraining, post-training (joint supervision or the
mse-only baseline), sampling evaluation, edit evaluation, diagnostics, the
ablation grid, sample visualization, and the self-check battery.

Conventions:
  * every run subcommand writes ``config-snapshot.toml`` into its output
    directory; the snapshot is itself a loadable config file and, together
    with the named checkpoint, reproduces the run bit for bit;
  * usage errors (unknown subcommand/flag) keep argparse's text on stderr and
    exit 2; anything that fails after parsing exits 1, with a readable line
    on stdout and a single-line JSON record on stderr for machines;
  * UNO_LAB_THREADS caps torch threads and ablation workers (default 1).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np
import torch

from . import config as cf
from . import diagnostics as dg
from . import evalsuite as ev
from . import model as md
from . import trainer as tr
from . import verify as vf
from . import worldgen as wg

SNAPSHOT_NAME = "config-snapshot.toml"

# stage presets live here (not in the schema) so one schema serves every
# subcommand; anything below is still overridable via file or --set
PRETRAIN_DEFAULTS = {
    "train": {"steps": 2000, "lr": 3e-3, "batch_size": 24, "ema_ratio": 0.99},
    "data": {"caption_fraction": 0.6},
}
POST_DEFAULTS = {
    "train": {"steps": 1000, "lr": 1e-4, "batch_size": 16, "ema_ratio": 0.99},
}


def _threads() -> int:
    raw = os.environ.get("UNO_LAB_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        n = 1
    return max(1, n)


def _say(msg: str) -> None:
    print(msg, flush=True)


# ---------------------------------------------------------------------------
# config plumbing

def _load_cfg(args, stage_defaults=None) -> cf.Config:
    return cf.load_config(args.config, tuple(args.set), stage_defaults)


def _adopt_ckpt_model(cfg: cf.Config, state: md.ModelState) -> None:
    """Fold the checkpoint's architecture into the config so the snapshot
    records what actually ran. Explicit model settings that contradict the
    checkpoint are errors, not silent reinterpretations."""
    for key in cf.SCHEMA["model"]:
        ck = getattr(state.cfg, key)
        if cfg.origin("model", key) == "default":
            cfg.set("model", key, ck, origin="ckpt")
        elif cfg.get("model", key) != ck:
            raise cf.ConfigError(
                f"model.{key}={cfg.get('model', key)!r} conflicts with the "
                f"checkpoint ({ck!r}); drop the override or use a matching one"
            )


def _prep_out(args, cfg: cf.Config) -> str:
    out = args.out
    os.makedirs(out, exist_ok=True)
    cf.write_snapshot(cfg, os.path.join(out, SNAPSHOT_NAME))
    return out


def _load_state(args, cfg: cf.Config) -> md.ModelState:
    state = md.load_checkpoint(args.ckpt)
    _adopt_ckpt_model(cfg, state)
    return state


def _train_report_json(rep: tr.TrainReport, deterministic: bool) -> dict:
    fin = rep.final
    return {
        "stage": rep.stage,
        "steps": rep.steps,
        "gate_ce": rep.gate_ce,
        "l_total": fin.total,
        "l_mse": fin.mse,
        "l_lang": fin.lang,
        "l_vis": fin.vis,
        "metrics_csv": rep.metrics_path,
        "ckpt": rep.ckpt_path,
        "wall_seconds": 0.0 if deterministic else rep.wall_seconds,
    }


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    out = _prep_out(args, cfg)
    data = cfg.section("data")
    seed = cfg.get("train", "seed")
    n_scenes = data["n_scenes"]
    n_edits = int(round(n_scenes * data["edit_fraction"]))

    entries = []
    for i in range(n_scenes):
        s = wg.mix64(seed, i, 0xDA7A) % 1_000_000_000
        entries.append(wg.manifest_entry("scene", s, wg.sample_scene(s, data["max_objects"])))
    for j in range(n_edits):
        s = wg.mix64(seed, j, 0xED17) % 1_000_000_000
        scene = wg.sample_scene(s, data["max_objects"])
        entries.append(wg.manifest_entry("edit", s, wg.sample_edit(scene, s)))

    manifest = os.path.join(out, "manifest.jsonl")
    wg.write_manifest(manifest, entries)
    vocab = os.path.join(out, "vocab.txt")
    with open(vocab, "w") as f:
        f.write("\n".join(wg.VOCAB) + "\n")

    # round-trip as a self-check; latents are regenerated on load by design
    n_back = sum(1 for _ in wg.read_manifest(manifest))
    if n_back != len(entries):
        raise RuntimeError(f"manifest round-trip lost entries: {n_back} != {len(entries)}")
    _say(f"wrote {n_scenes} scenes + {n_edits} edit pairs to {manifest}")
    _say(f"vocabulary ({wg.VOCAB_SIZE} words) in {vocab}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_cfg(args, PRETRAIN_DEFAULTS)
    out = _prep_out(args, cfg)
    mcfg = cf.to_model_config(cfg)
    tcfg = cf.to_train_config(cfg, "pretrain")
    state = md.init_model(mcfg, tcfg.seed)
    rep = tr.train(state, tcfg, out_dir=out, log=_say)
    _write_json(os.path.join(out, "report.json"),
                _train_report_json(rep, tcfg.deterministic_timing))
    ce = tr.evaluate_caption_ce(state, tcfg.gate_samples)
    _say(f"pretrain done: final total {rep.final.total:.4f}, held-out caption ce {ce:.4f}")
    _say(f"checkpoint: {rep.ckpt_path}")
    return 0


def _cmd_post(args, stage: str) -> int:
    cfg = _load_cfg(args, POST_DEFAULTS)
    state = md.load_checkpoint(args.ckpt)
    _adopt_ckpt_model(cfg, state)
    out = _prep_out(args, cfg)
    tcfg = cf.to_train_config(cfg, stage)
    rep = tr.train(state, tcfg, out_dir=out, check_gate=True, log=_say)
    _write_json(os.path.join(out, "report.json"),
                _train_report_json(rep, tcfg.deterministic_timing))
    _say(f"{stage} done: gate ce {rep.gate_ce:.4f}, final total {rep.final.total:.4f}")
    _say(f"checkpoint: {rep.ckpt_path}")
    return 0


def cmd_uno(args) -> int:
    return _cmd_post(args, "uno")


def cmd_sft(args) -> int:
    return _cmd_post(args, "sft")


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    state = _load_state(args, cfg)
    out = _prep_out(args, cfg)
    es = cfg.section("eval")
    rep = ev.eval_compositional(
        state, n=es["n"], seed=cfg.get("train", "seed"), steps=es["steps"],
        use_ema=es["use_ema"], batch_size=es["batch_size"],
    )
    ev.write_report(rep, os.path.join(out, "eval.json"), os.path.join(out, "eval.csv"))
    _say("compositional eval on %d scenes: %s" % (
        rep.n, " ".join(f"{k} {v:.3f}" for k, v in sorted(rep.metrics.items()))))
    return 0


def cmd_edit_eval(args) -> int:
    cfg = _load_cfg(args)
    state = _load_state(args, cfg)
    out = _prep_out(args, cfg)
    es = cfg.section("eval")
    rep = ev.eval_edit(
        state, n=es["n"], seed=cfg.get("train", "seed"), steps=es["steps"],
        use_ema=es["use_ema"],
    )
    ev.write_report(rep, os.path.join(out, "edit-eval.json"),
                    os.path.join(out, "edit-eval.csv"))
    _say("edit eval on %d pairs: %s" % (
        rep.n, " ".join(f"{k} {v:.3f}" for k, v in sorted(rep.metrics.items()))))
    return 0


def cmd_diagnose(args) -> int:
    cfg = _load_cfg(args)
    state = _load_state(args, cfg)
    out = _prep_out(args, cfg)
    lcfg = cf.to_train_config(cfg, "uno").loss_config()

    batch = vf._uno_batch(8, cfg.get("train", "seed"), state.cfg)
    rep = dg.grad_cosine_report(state, batch, lcfg)
    _write_json(os.path.join(out, "grad-cosine.json"), json.loads(rep.to_json()))
    _say(f"gradient cosine (flow vs auxiliary): overall {rep.overall:+.4f}")
    for layer, c in sorted(rep.per_layer.items()):
        _say(f"  layer {layer}: {c:+.4f}" if c is not None else f"  layer {layer}: n/a")

    scene = wg.sample_scene(args.scene_seed, cfg.get("data", "max_objects"))
    view = dg.latent_pca_view(
        state, scene, seed=args.scene_seed, t=args.t, layer=args.layer,
        out_png=os.path.join(out, "pca.png"),
        out_csv=os.path.join(out, "pca.csv"),
    )
    _say(f"pca view at t={view.t} layer {view.layer}: "
         f"explained {[round(float(v), 3) for v in view.explained]} -> {view.png_path}")

    if args.leakage:
        probe = dg.leakage_probe(args.ckpt, os.path.join(out, "leakage-probe"),
                                 out_json=os.path.join(out, "leakage.json"), log=_say)
        tag = "no leakage detected" if not probe.collapsed else "LEAKAGE: caption loss collapses without paraphrase"
        _say(f"leakage probe: {tag}; ratios {[round(r, 3) for r in probe.ratios]}")
    return 0


def _default_cells() -> list[dict]:
    # 2x2 factorial over the two supervision terms; the both-off corner is
    # exactly the mse-only baseline
    return [
        {"name": "sft", "stage": "sft"},
        {"name": "lang-only", "stage": "uno", "lambda2": 0.0},
        {"name": "vis-only", "stage": "uno", "lambda1": 0.0},
        {"name": "joint", "stage": "uno"},
    ]


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args, POST_DEFAULTS)
    state = md.load_checkpoint(args.ckpt)
    _adopt_ckpt_model(cfg, state)
    out = _prep_out(args, cfg)
    base = cf.to_train_config(cfg, "uno")
    seeds = [int(s) for s in args.seeds.split(",") if s != ""]
    if not seeds:
        raise ValueError("--seeds must name at least one seed")
    workers = max(1, min(args.workers, _threads()))
    out_csv = os.path.join(out, "ablation.csv")
    rows = ev.run_ablation(
        args.ckpt, base, _default_cells(), seeds, out_csv,
        eval_n=args.eval_n, eval_steps=args.eval_steps, workers=workers, log=_say,
    )
    _say(f"{len(rows)} ablation rows ({workers} worker{'s' if workers > 1 else ''}) -> {out_csv}")
    return 0


def _scene_text(objects) -> str:
    return "; ".join(
        f"{wg.COLORS[o.color]} {wg.SHAPES[o.shape]} @{o.cell}" for o in objects
    ) or "(empty)"


def cmd_visualize(args) -> int:
    from PIL import Image

    cfg = _load_cfg(args)
    state = _load_state(args, cfg)
    out = _prep_out(args, cfg)
    es = cfg.section("eval")
    n = args.n
    if n < 1:
        raise ValueError("--n must be positive")

    seeds = [ev.eval_scene_seed(cfg.get("train", "seed"), i) for i in range(n)]
    scenes = [wg.sample_scene(s, cfg.get("data", "max_objects")) for s in seeds]
    prompts = [wg.caption_scene(sc) for sc in scenes]
    lats = ev.generate_batch(state, prompts, seeds, steps=es["steps"],
                             use_ema=es["use_ema"])

    def tile(img01):
        a = np.round(255 * np.clip(img01, 0, 1)).astype(np.uint8).transpose(1, 2, 0)
        return np.kron(a, np.ones((args.scale, args.scale, 1), dtype=np.uint8))

    cols = max(1, args.cols)
    rows_n = (n + cols - 1) // cols
    px = wg.IMG_PX * args.scale
    gap = 2 * args.scale
    pair_w = 2 * px + gap // 2
    canvas = np.full((rows_n * (px + gap) - gap, cols * (pair_w + gap) - gap, 3),
                     32, dtype=np.uint8)
    csv_rows = []
    for i, (sc, lat) in enumerate(zip(scenes, lats)):
        probe = wg.decode_probe(lat)
        truth = tile(wg.render_scene(sc))
        decoded = tile(wg.render_scene(wg.make_scene(probe.objects)))
        r, c = divmod(i, cols)
        y, x = r * (px + gap), c * (pair_w + gap)
        canvas[y:y + px, x:x + px] = truth
        canvas[y:y + px, x + px + gap // 2:x + pair_w] = decoded
        csv_rows.append({
            "index": i, "scene_seed": seeds[i],
            "exact": int(probe.matches(sc)),
            "unknown_cells": len(probe.unknown_cells),
            "truth": _scene_text(sc.objects),
            "decoded": _scene_text(probe.objects),
        })

    png = os.path.join(out, "samples.png")
    Image.fromarray(canvas).save(png)
    import csv as _csv
    with open(os.path.join(out, "samples.csv"), "w", newline="") as f:
        w = _csv.DictWriter(f, fieldnames=list(csv_rows[0]))
        w.writeheader()
        w.writerows(csv_rows)
    hits = sum(r["exact"] for r in csv_rows)
    _say(f"{n} prompt/sample pairs (truth left, decoded sample right) -> {png}")
    _say(f"{hits}/{n} decode exactly")
    return 0


def cmd_verify(args) -> int:
    results = vf.run_all(log=_say, fast=args.fast)
    bad = [r.name for r in results if not r.ok]
    if bad:
        raise RuntimeError(f"self-checks failed: {', '.join(bad)}")
    _say(f"all {len(results)} self-checks passed")
    return 0


# ---------------------------------------------------------------------------
# parser

def _add_config_flags(p):
    p.add_argument("--config", metavar="FILE", default=None,
                   help="config file with [model]/[train]/[uno]/[data]/[eval] sections")
    p.add_argument("--set", action="append", default=[], metavar="SEC.KEY=VAL",
                   help="override one config value (repeatable, beats the file)")


def _add_out_flag(p):
    p.add_argument("--out", required=True, metavar="DIR", help="run output directory")


def _add_ckpt_flag(p):
    p.add_argument("--ckpt", required=True, metavar="DIR",
                   help="checkpoint directory (e.g. the ckpt-final of an earlier run)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unolab",
        description="two-expert flow-matching lab: pretrain, post-train with "
                    "understanding supervision, evaluate, diagnose, ablate",
    )
    sub = parser.add_subparsers(dest="cmd", required=True, metavar="SUBCOMMAND")

    p = sub.add_parser("gen-data", help="write the scene/edit manifest and vocabulary")
    _add_config_flags(p); _add_out_flag(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="stage-0: train both experts from scratch")
    _add_config_flags(p); _add_out_flag(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("uno", help="post-train with joint language+vision supervision "
                                   "(frozen understanding expert)")
    _add_config_flags(p); _add_out_flag(p); _add_ckpt_flag(p)
    p.set_defaults(func=cmd_uno)

    p = sub.add_parser("sft", help="post-train baseline: flow mse only, same freezing")
    _add_config_flags(p); _add_out_flag(p); _add_ckpt_flag(p)
    p.set_defaults(func=cmd_sft)

    p = sub.add_parser("eval", help="compositional text-to-image evaluation")
    _add_config_flags(p); _add_out_flag(p); _add_ckpt_flag(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("edit-eval", help="instruction-edit evaluation")
    _add_config_flags(p); _add_out_flag(p); _add_ckpt_flag(p)
    p.set_defaults(func=cmd_edit_eval)

    p = sub.add_parser("diagnose", help="gradient-cosine report and latent pca view")
    _add_config_flags(p); _add_out_flag(p); _add_ckpt_flag(p)
    p.add_argument("--scene-seed", type=int, default=0, help="scene for the pca view")
    p.add_argument("--t", type=float, default=0.8, help="noise level for the pca view")
    p.add_argument("--layer", type=int, default=None, help="layer tap (default: middle)")
    p.add_argument("--leakage", action="store_true",
                   help="also run the paraphrase-leakage probe (several minutes)")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("ablate", help="2x2 supervision grid from one checkpoint")
    _add_config_flags(p); _add_out_flag(p); _add_ckpt_flag(p)
    p.add_argument("--seeds", default="0", help="comma-separated training seeds")
    p.add_argument("--eval-n", type=int, default=60, help="eval scenes per cell")
    p.add_argument("--eval-steps", type=int, default=16, help="sampler steps for eval")
    p.add_argument("--workers", type=int, default=1,
                   help="parallel cell workers (capped by UNO_LAB_THREADS)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("visualize", help="render truth/sample pairs to a png grid")
    _add_config_flags(p); _add_out_flag(p); _add_ckpt_flag(p)
    p.add_argument("--n", type=int, default=16, help="number of prompts")
    p.add_argument("--cols", type=int, default=4, help="pairs per row")
    p.add_argument("--scale", type=int, default=8, help="pixel upscaling factor")
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("verify", help="run the self-check battery (mask oracle, "
                                      "freezing, routing, finite-diff, determinism, "
                                      "loss algebra, gradient cosine)")
    p.add_argument("--fast", action="store_true", help="trimmed budgets for interactive use")
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv=None) -> int:
    torch.set_num_threads(_threads())
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse exits 2 on usage errors, 0 on --help
        return int(e.code or 0)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        raise
    except Exception as e:  # boundary: every runtime failure becomes exit 1 + JSON
        msg = str(e) or type(e).__name__
        _say(f"error: {msg}")
        print(json.dumps({"error": type(e).__name__, "subcommand": args.cmd,
                          "message": msg}, sort_keys=True),
              file=sys.stderr, flush=True)
        return 1


def entry() -> None:
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    entry()
