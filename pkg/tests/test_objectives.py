"""Objective tests: hand-computed oracles for each term, algebraic identity
of the combination, and exact gradient severance for disabled terms."""

import math

import numpy as np
import pytest
import torch

from unolab import model as md
from unolab import objectives as ob
from unolab import packing as pk
from unolab import worldgen as wg

from oracles import oracle_cosine, oracle_softmax_ce


def fake_out(vel=None, vel_t=None, logits=None, targets=None, mq=None, vt=None):
    z16 = torch.zeros((0, 16), dtype=torch.float64)
    zv = torch.zeros((0, 64), dtype=torch.float64)
    return md.BatchOutputs(
        vel_pred=z16 if vel is None else vel,
        vel_target=z16 if vel_t is None else vel_t,
        gen_sample_id=torch.zeros(0, dtype=torch.long),
        cap_logits=zv if logits is None else logits,
        cap_targets=torch.zeros(0, dtype=torch.long) if targets is None else targets,
        cap_sample_id=torch.zeros(0, dtype=torch.long),
        mq_hidden=torch.zeros((0, 64), dtype=torch.float64) if mq is None else mq,
        vision_targets=torch.zeros((0, 32), dtype=torch.float64) if vt is None else vt,
        mq_sample_id=torch.zeros(0, dtype=torch.long),
        hidden=None,
        layouts=[],
    )


def real_batch(seed=0, dtype="float64"):
    cfg = md.ModelConfig(dtype=dtype, num_metaqueries=4)
    state = md.init_model(cfg, seed)
    md.perturb_params(state, scale=0.05, seed=seed + 1)
    samples = []
    for i in range(3):
        scene = wg.sample_scene(seed * 10 + i)
        samples.append(
            pk.pack_t2i_uno(
                wg.caption_scene(scene), scene, seed * 10 + i, pk.PackConfig(num_metaqueries=4)
            )
        )
    return state, md.forward_batch(state, samples)


# ---------------------------------------------------------------------------
# per-term oracles

def test_loss_flow_hand_oracle():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((7, 16))
    b = rng.standard_normal((7, 16))
    out = fake_out(vel=torch.tensor(a), vel_t=torch.tensor(b))
    expected = ((a - b) ** 2).mean()
    assert abs(float(ob.loss_flow(out)) - expected) < 1e-12


def test_loss_language_uniform_logits_is_log_vocab():
    # the A9 anchor: uniform logits over 64 tokens cost exactly ln 64
    logits = torch.zeros((5, 64), dtype=torch.float64)
    targets = torch.tensor([0, 3, 17, 63, 8])
    out = fake_out(logits=logits, targets=targets)
    assert abs(float(ob.loss_language(out)) - math.log(64)) < 1e-12
    # constant shifts cannot change cross-entropy
    out2 = fake_out(logits=logits + 11.5, targets=targets)
    assert abs(float(ob.loss_language(out2)) - math.log(64)) < 1e-12


def test_loss_language_matches_softmax_oracle():
    rng = np.random.default_rng(4)
    logits = rng.standard_normal((9, 64))
    targets = rng.integers(0, 64, 9)
    out = fake_out(logits=torch.tensor(logits), targets=torch.tensor(targets))
    expected = np.mean([oracle_softmax_ce(l, t) for l, t in zip(logits, targets)])
    assert abs(float(ob.loss_language(out)) - expected) < 1e-12


def test_loss_vision_range_and_oracle():
    v = torch.zeros((3, 32), dtype=torch.float64)
    v[:, 0] = 1.0
    h = torch.zeros((3, 64), dtype=torch.float64)
    h[0, 0] = 2.0  # aligned
    h[1, 0] = -3.0  # opposed
    h[2, 1] = 5.0  # orthogonal
    loss = float(ob.loss_vision(fake_out(mq=h, vt=v)))
    assert abs(loss - (-(1.0 - 1.0 + 0.0) / 3)) < 1e-9
    # truncation: dims beyond the feature width must not matter
    h2 = h.clone()
    h2[:, 32:] = 99.0
    assert abs(float(ob.loss_vision(fake_out(mq=h2, vt=v))) - loss) < 1e-12
    # fuzz against the hand cosine, values always in [-1, 1]
    rng = np.random.default_rng(8)
    for _ in range(200):
        hh = rng.standard_normal((4, 64))
        vv = rng.standard_normal((4, 32))
        got = float(ob.loss_vision(fake_out(mq=torch.tensor(hh), vt=torch.tensor(vv))))
        exp = -np.mean([oracle_cosine(a[:32], b) for a, b in zip(hh, vv)])
        assert abs(got - exp) < 1e-9
        assert -1.0 - 1e-6 <= got <= 1.0 + 1e-6


def test_loss_vision_zero_vectors_stable():
    h = torch.zeros((2, 64), dtype=torch.float64)
    v = torch.zeros((2, 32), dtype=torch.float64)
    v[1, 0] = 1.0
    loss = ob.loss_vision(fake_out(mq=h.requires_grad_(True), vt=v))
    assert math.isfinite(float(loss.detach()))
    loss.backward()
    assert torch.isfinite(h.grad).all()


# ---------------------------------------------------------------------------
# combination

def test_loss_total_linearity():
    _, out = real_batch(seed=1)
    with torch.no_grad():
        l_mse = float(ob.loss_flow(out))
        l_lang = float(ob.loss_language(out))
        l_vis = float(ob.loss_vision(out))
    for l1 in (0.0, 0.1, 0.7):
        for l2 in (0.0, 0.2, 1.3):
            with torch.no_grad():
                total, bd = ob.loss_total(out, ob.UnoLossConfig(lambda1=l1, lambda2=l2))
            expected = l_mse + l1 * l_lang + l2 * l_vis
            assert abs(float(total) - expected) < 1e-10, (l1, l2)
            assert bd.mse == pytest.approx(l_mse, abs=1e-12)
            if l1 > 0:
                assert bd.lang == pytest.approx(l_lang, abs=1e-12)
            else:
                assert bd.lang is None
            if l2 > 0:
                assert bd.vis == pytest.approx(l_vis, abs=1e-12)
            else:
                assert bd.vis is None


def test_disabled_terms_are_severed_from_the_graph():
    state, out = real_batch(seed=2)
    lm_w = state.params["head.lm.w"]
    total, _ = ob.loss_total(out, ob.UnoLossConfig(lambda1=0.0, lambda2=0.2))
    (g,) = torch.autograd.grad(total, lm_w, allow_unused=True)
    assert g is None  # language path absent from the graph entirely

    out2 = md.forward_batch(state, _samples_again(2))
    total2, _ = ob.loss_total(out2, ob.UnoLossConfig(lambda1=0.1, lambda2=0.2))
    (g2,) = torch.autograd.grad(total2, lm_w, allow_unused=True)
    assert g2 is not None and float(g2.abs().sum()) > 0


def _samples_again(seed):
    samples = []
    for i in range(3):
        scene = wg.sample_scene(seed * 10 + i)
        samples.append(
            pk.pack_t2i_uno(
                wg.caption_scene(scene), scene, seed * 10 + i, pk.PackConfig(num_metaqueries=4)
            )
        )
    return samples


def test_enable_flags_match_zero_weights():
    _, out = real_batch(seed=3)
    with torch.no_grad():
        t1, _ = ob.loss_total(out, ob.UnoLossConfig(lambda1=0.0, lambda2=0.0))
        t2, _ = ob.loss_total(
            out, ob.UnoLossConfig(lambda1=0.5, lambda2=0.5, enable_language=False, enable_vision=False)
        )
        assert torch.equal(t1, t2)
        assert abs(float(t1) - float(ob.loss_flow(out))) < 1e-15


def test_loss_errors():
    with pytest.raises(ValueError, match="generative"):
        ob.loss_flow(fake_out())
    with pytest.raises(ValueError, match="caption"):
        ob.loss_language(fake_out())
    with pytest.raises(ValueError, match="metaqueries"):
        ob.loss_vision(fake_out())
    with pytest.raises(ValueError, match="no loss terms"):
        ob.loss_total(fake_out(), ob.UnoLossConfig())
    with pytest.raises(ValueError):
        ob.UnoLossConfig(lambda1=-0.1)
    bad = fake_out(
        vel=torch.tensor([[float("nan")] * 16]), vel_t=torch.zeros((1, 16), dtype=torch.float64)
    )
    with pytest.raises(FloatingPointError):
        ob.loss_total(bad, ob.UnoLossConfig())


def test_caption_loss_sees_noised_stream():
    # language gradient reaches the gen adapter: supervision reads x_t
    state, out = real_batch(seed=4)
    total = ob.loss_language(out)
    (g,) = torch.autograd.grad(total, state.params["adapt.gen_in.w"], allow_unused=True)
    assert g is not None and float(g.abs().sum()) > 0
