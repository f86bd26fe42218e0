"""Diagnostics checks. The cosine machinery is validated on hand-built
vectors and a two-parameter analytic case before it ever touches the model;
the PCA view against the eigendecomposition oracle in tests/oracles.py; the
finite-difference checker against the model's own autograd in float64."""

import csv
import math
import os

import numpy as np
import pytest
import torch

import unolab.diagnostics as dg
import unolab.model as md
import unolab.objectives as ob
import unolab.packing as pk
import unolab.trainer as tr
import unolab.worldgen as wg

from oracles import oracle_pca

CFG = md.ModelConfig()


def uno_batch(n=3, seed=0):
    pcfg = pk.PackConfig()
    batch = []
    for i in range(n):
        scene = wg.sample_scene(seed + i)
        prompt = wg.caption_scene(scene, template=0)
        batch.append(pk.pack_t2i_uno(prompt, scene, seed + 10 * i, pcfg,
                                     pk.MaskToggles()))
    return batch


def perturbed_state(dtype="float32", seed=5):
    state = md.init_model(md.ModelConfig(dtype=dtype), seed=seed)
    md.perturb_params(state, 0.05, seed=seed + 1)
    return state


# ---------------------------------------------------------------------------
# cosine machinery

def test_flat_cos_hand_vectors():
    a = [torch.tensor([1.0, 0.0])]
    b = [torch.tensor([0.0, 1.0])]
    assert dg._flat_cos(a, a)[0] == pytest.approx(1.0, abs=1e-12)
    assert dg._flat_cos(a, b)[0] == pytest.approx(0.0, abs=1e-12)
    assert dg._flat_cos(a, [torch.tensor([-2.0, 0.0])])[0] == pytest.approx(-1.0, abs=1e-12)
    # sub-threshold norms are a null result, not a direction
    z = [torch.tensor([0.0, 0.0])]
    cos, na, nb = dg._flat_cos(a, z)
    assert cos is None and na > 0 and nb == 0.0


def test_two_parameter_analytic_oracle():
    # f = a*b + 2b, g = 3a - b at (a,b) = (2, -1):
    # grad f = (b, a+2) = (-1, 4); grad g = (3, -1)
    a = torch.tensor(2.0, dtype=torch.float64, requires_grad=True)
    b = torch.tensor(-1.0, dtype=torch.float64, requires_grad=True)
    f = a * b + 2 * b
    g = 3 * a - b
    gf = torch.autograd.grad(f, [a, b], retain_graph=True)
    gg = torch.autograd.grad(g, [a, b])
    cos, _, _ = dg._flat_cos(list(gf), list(gg))
    want = (-1 * 3 + 4 * -1) / (math.sqrt(17) * math.sqrt(10))
    assert abs(cos - want) < 1e-10


def test_grad_cosine_report_shape_and_range():
    state = perturbed_state()
    rep = dg.grad_cosine_report(state, uno_batch(), ob.UnoLossConfig())
    assert sorted(rep.per_layer) == [f"layer{i}" for i in range(CFG.n_layers)]
    for cos in rep.per_layer.values():
        assert cos is None or -1.0 - 1e-9 <= cos <= 1.0 + 1e-9
    assert rep.overall is not None
    assert rep.mse_norm > 0 and rep.aux_norm > 0


def test_grad_cosine_self_check_is_one_everywhere():
    state = perturbed_state()
    rep = dg.grad_cosine_report(state, uno_batch(), ob.UnoLossConfig(),
                                self_check=True)
    for layer, cos in rep.per_layer.items():
        assert cos is not None and abs(cos - 1.0) < 1e-9, layer
    assert abs(rep.overall - 1.0) < 1e-9


def test_grad_cosine_lambda_scale_invariance():
    state = perturbed_state()
    batch = uno_batch()
    base = dg.grad_cosine_report(state, batch, ob.UnoLossConfig(0.1, 0.2))
    for c in (0.5, 2.0):
        scaled = dg.grad_cosine_report(
            state, batch, ob.UnoLossConfig(0.1 * c, 0.2 * c))
        for layer in base.per_layer:
            assert base.per_layer[layer] == pytest.approx(
                scaled.per_layer[layer], abs=1e-9)
        assert base.overall == pytest.approx(scaled.overall, abs=1e-9)
        assert scaled.aux_norm == pytest.approx(c * base.aux_norm, rel=1e-6)


def test_grad_cosine_needs_an_aux_term():
    state = perturbed_state()
    with pytest.raises(ValueError):
        dg.grad_cosine_report(state, uno_batch(),
                              ob.UnoLossConfig(0.0, 0.0, False, False))


def test_grad_cosine_report_json():
    state = perturbed_state()
    rep = dg.grad_cosine_report(state, uno_batch(), ob.UnoLossConfig())
    import json
    blob = json.loads(rep.to_json())
    assert set(blob) == {"per_layer", "overall", "mse_norm", "aux_norm"}


# ---------------------------------------------------------------------------
# pca view

def test_pca3_matches_eigh_oracle():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((16, 64)) * np.linspace(3, 0.1, 64)
    coords, evr = dg._pca3(x)
    comps, evals = oracle_pca(x, 3)
    xc = x - x.mean(axis=0, keepdims=True)
    assert np.allclose(coords, xc @ comps.T, atol=1e-8)
    all_evals = np.linalg.eigvalsh(xc.T @ xc / x.shape[0])
    assert np.allclose(evr, evals / all_evals.sum(), atol=1e-10)
    assert evr[0] >= evr[1] >= evr[2] >= 0
    assert evr.sum() <= 1 + 1e-12


def test_pca3_rank_one_and_flat_channels():
    v = np.outer(np.arange(16.0) - 7.5, np.ones(8))
    coords, evr = dg._pca3(v)
    assert evr[0] == pytest.approx(1.0, abs=1e-12)
    assert abs(evr[1]) < 1e-12
    rgb = dg._coords_to_rgb(coords)
    # variance-free components render flat gray
    assert (rgb[:, :, 1] == 128).all() and (rgb[:, :, 2] == 128).all()
    assert rgb[:, :, 0].min() == 0 and rgb[:, :, 0].max() == 255


def test_latent_pca_view_consistency_and_files(tmp_path):
    state = perturbed_state()
    scene = wg.sample_scene(12)
    png = str(tmp_path / "view.png")
    csvp = str(tmp_path / "view.csv")
    view = dg.latent_pca_view(state, scene, seed=4, t=0.8, out_png=png,
                              out_csv=csvp)
    assert view.layer == CFG.n_layers // 2
    # the two reconstructions must re-mix to the same noised point
    x_t = (1 - view.t) * view.x0_hat + view.t * view.eps_hat
    rng = np.random.default_rng(wg.mix64(4, 0xF16))
    x0 = wg.latent_tokens(wg.scene_latent(scene))
    eps = rng.standard_normal(x0.shape)
    want = wg.tokens_to_latent((1 - view.t) * x0 + view.t * eps)
    assert np.allclose(x_t, want, atol=1e-5)
    assert isinstance(view.decoded, wg.ProbeResult)
    with open(csvp) as f:
        rows = list(csv.reader(f))
    assert len(rows) == 17 and rows[0][:2] == ["token", "pc1"]
    from PIL import Image
    img = Image.open(png)
    assert img.size == (70 * 8, 16 * 8)


def test_latent_pca_view_validation():
    state = perturbed_state()
    scene = wg.sample_scene(1)
    with pytest.raises(ValueError):
        dg.latent_pca_view(state, scene, t=0.0)
    with pytest.raises(ValueError):
        dg.latent_pca_view(state, scene, layer=9)


# ---------------------------------------------------------------------------
# leakage bookkeeping

def test_lang_tail_mean_reads_final_tenth(tmp_path):
    p = tmp_path / "metrics.csv"
    lines = [tr.METRICS_HEADER]
    for i in range(20):
        lines.append(f"{i},1.0,0.5,{float(i)},nan,1e-4,0.1,0")
    p.write_text("\n".join(lines) + "\n")
    # 10% of 20 rows = last 2 rows: steps 18 and 19
    assert dg._lang_tail_mean(str(p)) == pytest.approx(18.5)


def test_lang_tail_mean_rejects_missing_language_loss(tmp_path):
    p = tmp_path / "metrics.csv"
    p.write_text(tr.METRICS_HEADER + "\n0,1.0,1.0,nan,nan,1e-4,0.1,0\n")
    with pytest.raises(ValueError):
        dg._lang_tail_mean(str(p))


# ---------------------------------------------------------------------------
# finite differences

def tiny_state():
    cfg = md.ModelConfig(d_model=32, n_layers=2, n_heads=2, ffn_hidden=64,
                         dtype="float64")
    state = md.init_model(cfg, seed=7)
    md.perturb_params(state, 0.05, seed=8)
    return state


def test_finite_diff_demands_float64():
    state = perturbed_state()
    with pytest.raises(ValueError, match="float64"):
        dg.finite_diff_check(state, uno_batch(1), ob.UnoLossConfig(),
                             coords_per_group=1)


def test_finite_diff_small_sample_passes():
    state = tiny_state()
    rep = dg.finite_diff_check(state, uno_batch(2), ob.UnoLossConfig(),
                               coords_per_group=3)
    assert rep.max_rel_err <= 1e-4, rep.per_group
    assert rep.n_checked == 3 * len(rep.per_group)
    # every group except the stop-gradient target encoder
    assert set(rep.per_group) == set(md.group_map(state.cfg)) - {"enc.patch"}


def test_finite_diff_catches_a_broken_gradient(monkeypatch):
    # negative control: scale the loss seen by the difference quotients but
    # not the one backward ran on; the checker must flag the mismatch rather
    # than silently comparing a quantity against itself
    state = tiny_state()
    batch = uno_batch(1)
    orig = ob.loss_total
    calls = {"n": 0}

    def crooked(out, lcfg):
        calls["n"] += 1
        total, bd = orig(out, lcfg)
        return (total if calls["n"] == 1 else 1.5 * total), bd

    monkeypatch.setattr(dg.ob, "loss_total", crooked)
    rep = dg.finite_diff_check(state, batch, ob.UnoLossConfig(),
                               coords_per_group=2)
    assert rep.max_rel_err > 0.2
