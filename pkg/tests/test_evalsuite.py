"""Sampler and scoring checks. The Euler integrator is validated against the
closed-form property that the exact interpolation velocity lands on x0 for
any step count; the scorers are validated by injecting oracle and adversarial
generators so no trained model is needed."""

import csv
import json
import os

import numpy as np
import pytest

import unolab.evalsuite as ev
import unolab.model as md
import unolab.trainer as tr
import unolab.worldgen as wg

CFG = md.ModelConfig()


# ---------------------------------------------------------------------------
# integrator

def test_exact_velocity_recovers_x0_for_any_step_count():
    # u*(x, t) = (x - x0)/t contracts the deviation by t_{k+1}/t_k each Euler
    # step, so the final step (t = dt) lands exactly on x0.
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal((16, 16))
    fn = lambda x, t: (x - x0) / t
    for steps in (1, 2, 7, 32):
        out = ev.integrate(fn, rng.standard_normal((16, 16)), steps)
        assert np.allclose(out, x0, atol=1e-10), steps


def test_integrate_left_endpoint_grid():
    seen = []
    fn = lambda x, t: seen.append(t) or np.zeros_like(x)
    ev.integrate(fn, np.zeros((2, 2)), 4)
    assert np.allclose(seen, [1.0, 0.75, 0.5, 0.25])


def test_integrate_rejects_bad_steps():
    with pytest.raises(ValueError):
        ev.integrate(lambda x, t: x, np.zeros((1, 1)), 0)


def test_generate_deterministic_and_seed_sensitive():
    state = md.init_model(CFG, seed=0)
    prompt = wg.caption_scene(wg.sample_scene(5), template=0)
    a = ev.generate(state, prompt, seed=3, steps=2)
    b = ev.generate(state, prompt, seed=3, steps=2)
    c = ev.generate(state, prompt, seed=4, steps=2)
    assert a.shape == (4, 8, 8)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_generate_batch_matches_singles():
    state = md.init_model(md.ModelConfig(dtype="float64"), seed=1)
    md.perturb_params(state, 0.05, seed=2)
    scenes = [wg.sample_scene(i) for i in (3, 4)]
    prompts = [wg.caption_scene(s, template=0) for s in scenes]
    batched = ev.generate_batch(state, prompts, [7, 8], steps=2, use_ema=False)
    for i, p in enumerate(prompts):
        single = ev.generate(state, p, seed=7 + i, steps=2, use_ema=False)
        assert np.allclose(batched[i], single, atol=1e-9)


def test_eval_seed_band_is_held_out():
    for i in range(300):
        s = ev.eval_scene_seed(i * 31, i)
        assert ev.EVAL_SEED_BASE <= s < tr.GATE_SEED_BASE


# ---------------------------------------------------------------------------
# compositional scoring

def probe_of(scene):
    return wg.decode_probe(wg.scene_latent(scene))


def test_score_compositional_hand_cases():
    # cell, shape (circle/square/triangle), color (red/green/blue/yellow)
    scene = wg.Scene(objects=(wg.Object(0, 0, 0), wg.Object(8, 1, 2)))
    full = ev.score_compositional(scene, probe_of(scene))
    assert full == {"position": 1.0, "color": 1.0, "shape": 1.0,
                    "count": 1.0, "exact": 1.0}
    # right cells, one wrong color
    off = wg.Scene(objects=(wg.Object(0, 0, 1), wg.Object(8, 1, 2)))
    s = ev.score_compositional(scene, probe_of(off))
    assert s["position"] == 1.0 and s["color"] == 0.5 and s["shape"] == 1.0
    assert s["count"] == 1.0 and s["exact"] == 0.0
    # object in the wrong cell entirely
    moved = wg.Scene(objects=(wg.Object(4, 0, 0), wg.Object(8, 1, 2)))
    s = ev.score_compositional(scene, probe_of(moved))
    assert s["position"] == 0.5 and s["count"] == 1.0 and s["exact"] == 0.0
    # extra object breaks the count
    extra = wg.Scene(objects=(wg.Object(0, 0, 0), wg.Object(4, 2, 3),
                              wg.Object(8, 1, 2)))
    s = ev.score_compositional(scene, probe_of(extra))
    assert s["count"] == 0.0 and s["position"] == 1.0


def test_eval_compositional_oracle_generator_scores_one():
    state = md.init_model(CFG, seed=0)

    def oracle(prompts, seeds):
        outs = []
        for i in range(len(prompts)):
            outs.append(wg.scene_latent(wg.sample_scene(ev.eval_scene_seed(9, i))))
        return outs

    rep = ev.eval_compositional(state, n=25, seed=9, generator=oracle)
    assert all(rep.metrics[k] == 1.0 for k in
               ("position", "color", "shape", "count", "exact"))


def test_eval_compositional_adversarial_generator_scores_low():
    state = md.init_model(CFG, seed=0)

    def wrong(prompts, seeds):
        return [wg.scene_latent(wg.sample_scene(777)) for _ in prompts]

    rep = ev.eval_compositional(state, n=30, seed=9, generator=wrong)
    assert rep.metrics["exact"] < 0.1
    assert rep.metrics["position"] < 0.9


def test_eval_compositional_rejects_empty():
    state = md.init_model(CFG, seed=0)
    with pytest.raises(ValueError):
        ev.eval_compositional(state, n=0)


# ---------------------------------------------------------------------------
# edit scoring

def edit_pairs(seed, n):
    pairs = []
    for i in range(n):
        scene = wg.sample_scene(ev.eval_scene_seed(seed, i))
        pairs.append(wg.sample_edit(scene, ev.eval_scene_seed(seed, i) + 1))
    return pairs


def test_eval_edit_oracle_editor_scores_one():
    state = md.init_model(CFG, seed=0)

    def oracle(pairs, seeds):
        return [wg.scene_latent(p.target) for p in pairs]

    rep = ev.eval_edit(state, n=20, seed=4, editor=oracle)
    assert rep.metrics["edit_exact"] == 1.0
    assert rep.metrics["bg_mse"] == 0.0
    for op in wg.EDIT_OPS:
        assert rep.metrics[f"acc_{op}"] in (1.0,)


def test_eval_edit_identity_editor_fails_edits_only():
    state = md.init_model(CFG, seed=0)

    def identity(pairs, seeds):
        return [wg.scene_latent(p.source) for p in pairs]

    rep = ev.eval_edit(state, n=20, seed=4, editor=identity)
    assert rep.metrics["edit_exact"] == 0.0
    # untouched cells are shared between source and target
    assert rep.metrics["bg_mse"] < 1e-20


def test_score_edit_flags_wrong_cell_content():
    pair = edit_pairs(11, 1)[0]
    ok, bg = ev.score_edit(pair, wg.scene_latent(pair.target))
    assert ok and bg == 0.0
    ok, _ = ev.score_edit(pair, wg.scene_latent(pair.source))
    assert not ok


# ---------------------------------------------------------------------------
# reports and ablation

def test_eval_report_json_and_csv(tmp_path):
    rep = ev.EvalReport("t2i", 4, 1, 8, False,
                        {"exact": 0.25, "color": 1.0})
    jp, cp = tmp_path / "r.json", tmp_path / "r.csv"
    ev.write_report(rep, jp, cp)
    blob = json.loads(jp.read_text())
    assert blob["metrics"]["exact"] == 0.25 and blob["task"] == "t2i"
    header, row = cp.read_text().splitlines()
    assert header == "task,n,seed,sampler_steps,use_ema,color,exact"
    assert row == "t2i,4,1,8,False,1.000000,0.250000"


def test_resize_metaqueries_swaps_only_the_table():
    state = md.init_model(CFG, seed=0)
    bigger = md.resize_metaqueries(state, 24, seed=5)
    assert bigger.cfg.num_metaqueries == 24
    assert bigger.params["mq.table.w"].shape[0] == 24
    for n in state.params:
        if n != "mq.table.w":
            assert (state.params[n] == bigger.params[n]).all()


def test_run_ablation_grid(tmp_path):
    state = md.init_model(CFG, seed=0)
    ckpt = str(tmp_path / "ckpt")
    md.save_checkpoint(state, ckpt)
    base = tr.TrainConfig(stage="uno", steps=2, batch_size=2, warmup=1,
                          ema_ratio=0.5)
    cells = [
        {"name": "uno", "lambda1": 0.1},
        {"name": "sft", "stage": "sft"},
        {"name": "mq8", "num_metaqueries": 8},
    ]
    out = str(tmp_path / "grid.csv")
    rows = ev.run_ablation(ckpt, base, cells, seeds=[0, 1], out_csv=out,
                           eval_n=2, eval_steps=2)
    assert len(rows) == 6
    with open(out) as f:
        got = list(csv.DictReader(f))
    assert [r["cell"] for r in got] == ["uno", "uno", "sft", "sft", "mq8", "mq8"]
    assert all(r["schema"] == ev.ABLATION_SCHEMA for r in got)
    assert got[2]["lambda1"] == "0.0"  # sft rows report no understanding terms
    assert got[4]["num_metaqueries"] == "8"
    assert {r["seed"] for r in got} == {"0", "1"}
    for r in got:
        assert 0.0 <= float(r["exact"]) <= 1.0
        assert len(r["config_hash"]) == 12
