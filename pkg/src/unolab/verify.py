"""Repository health gate: self-contained invariant checks shared by the
`verify` subcommand and the acceptance tests. Every check builds its own
state from scratch (no checkpoints needed), returns a CheckResult, and is
budgeted so the full battery finishes in a few minutes on one CPU core.
"""

from __future__ import annotations

import math
import os
import tempfile
import time
from dataclasses import dataclass

import numpy as np
import torch

from . import diagnostics as dg
from . import model as md
from . import objectives as ob
from . import packing as pk
from . import trainer as tr
from . import worldgen as wg


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'} {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _timed(name):
    def deco(fn):
        def wrapped(*a, **kw) -> CheckResult:
            t0 = time.perf_counter()
            ok, detail = fn(*a, **kw)
            return CheckResult(name, ok, detail, time.perf_counter() - t0)
        wrapped.__name__ = fn.__name__
        wrapped.__doc__ = fn.__doc__
        return wrapped
    return deco


def _uno_batch(n: int, seed: int, mcfg: md.ModelConfig) -> list[pk.PackedSample]:
    pcfg = pk.PackConfig(num_metaqueries=mcfg.num_metaqueries)
    out = []
    for i in range(n):
        scene = wg.sample_scene(wg.mix64(seed, i, 0x7E57) % 10**9)
        prompt = wg.caption_scene(scene, template=0)
        out.append(pk.pack_t2i_uno(prompt, scene, wg.mix64(seed, i), pcfg,
                                   pk.MaskToggles()))
    return out


# ---------------------------------------------------------------------------

@_timed("mask-oracle")
def check_mask_oracle(n_layouts: int = 1000, seed: int = 0):
    """Vectorized mask builder == independent per-pair oracle, all toggle
    combinations, fuzzed layouts."""
    checked = 0
    for i in range(n_layouts):
        layout = pk.fuzz_layout(wg.mix64(seed, i))
        for toggles in pk.ALL_TOGGLE_COMBOS:
            a = pk.build_mask(layout, toggles)
            b = pk.mask_oracle(layout, toggles)
            if not np.array_equal(a, b):
                return False, (
                    f"mismatch at layout {i} toggles {toggles}: "
                    f"{int((a != b).sum())} cells differ"
                )
            checked += 1
    return True, f"{checked} layout x toggle combinations identical"


@_timed("freeze-soundness")
def check_freeze(steps: int = 200, seed: int = 0):
    """Frozen groups bitwise unchanged over a post-training run; metaquery
    table and generative-expert groups must move."""
    state = md.init_model(md.ModelConfig(), seed=seed)
    md.perturb_params(state, 0.05, seed=seed + 1)
    cfg = tr.TrainConfig(stage="uno", steps=steps, batch_size=4, lr=1e-3,
                         warmup=max(1, steps // 10), ema_ratio=0.99, seed=seed)
    before = {n: p.detach().clone() for n, p in state.params.items()}
    tr.train(state, cfg, check_gate=False)
    frozen = tr.freeze_spec(cfg, state.cfg)
    for n, p in state.params.items():
        if md.group_of(n) in frozen and not torch.equal(p, before[n]):
            return False, f"frozen parameter {n} changed"
    must_move = {"mq.table"} | {
        f"layer{i}.gen.{r}" for i in range(state.cfg.n_layers) for r in md.ROLES
    }
    still = [g for g in sorted(must_move) if all(
        torch.equal(state.params[n], before[n])
        for n in state.params if md.group_of(n) == g
    )]
    if still:
        return False, f"trainable groups never moved: {still}"
    return True, (f"{len(frozen)} frozen groups bitwise stable over "
                  f"{steps} steps; {len(must_move)} trainable groups moved")


def _lang_grads_on_gen_qkv(state, batch, scale: float):
    out = md.forward_batch(state, batch)
    lang = scale * ob.loss_language(out)
    norms = {}
    for i in range(state.cfg.n_layers):
        names = [n for n in sorted(state.params)
                 if n.startswith(f"layer{i}.gen.qkv")]
        grads = torch.autograd.grad(
            lang, [state.params[n] for n in names],
            retain_graph=True, allow_unused=True,
        )
        tot = 0.0
        for g in grads:
            if g is not None:
                tot += float((g.double() ** 2).sum())
        norms[f"layer{i}"] = math.sqrt(tot)
    return norms


@_timed("gradient-routing")
def check_grad_routing(seed: int = 0):
    """Caption loss must reach the generative expert's QKV through attention
    (nonzero at every layer), vanish exactly when the caption->gen attention
    is severed, and vanish exactly at zero weighting."""
    state = md.init_model(md.ModelConfig(), seed=seed)
    md.perturb_params(state, 0.05, seed=seed + 1)
    batch = _uno_batch(3, seed, state.cfg)

    live = _lang_grads_on_gen_qkv(state, batch, scale=0.1)
    dead_layers = [k for k, v in live.items() if v == 0.0]
    if dead_layers:
        return False, f"language gradient missing at {dead_layers}"

    severed = []
    for s in batch:
        sup = s.layout.find(pk.SEG_SUP)
        gen = s.layout.find(pk.SEG_GEN)
        mask = s.mask.copy()
        mask[sup.start : sup.stop, gen.start : gen.stop] = False
        severed.append(pk.PackedSample(**{**s.__dict__, "mask": mask}))
    cut = _lang_grads_on_gen_qkv(state, severed, scale=0.1)
    leaking = [k for k, v in cut.items() if v != 0.0]
    if leaking:
        return False, f"severed attention still leaks gradient at {leaking}"

    zeroed = _lang_grads_on_gen_qkv(state, batch, scale=0.0)
    nonzero = [k for k, v in zeroed.items() if v != 0.0]
    if nonzero:
        return False, f"zero-weight language loss still flows at {nonzero}"
    mn = min(live.values())
    return True, (f"live min-norm {mn:.3e} across {len(live)} layers; "
                  "severed and zero-weight both exactly 0")


@_timed("finite-diff")
def check_finite_diff(coords_per_group: int = 20, seed: int = 0):
    """Autograd vs central differences on the small 64-bit config."""
    cfg = md.ModelConfig(d_model=32, n_layers=2, n_heads=2, ffn_hidden=64,
                         dtype="float64")
    state = md.init_model(cfg, seed=seed)
    md.perturb_params(state, 0.05, seed=seed + 1)
    batch = _uno_batch(2, seed, cfg)
    rep = dg.finite_diff_check(state, batch, ob.UnoLossConfig(),
                               coords_per_group=coords_per_group, seed=seed)
    ok = rep.max_rel_err <= 1e-4
    return ok, (f"max rel err {rep.max_rel_err:.3e} over {rep.n_checked} "
                f"coordinates in {len(rep.per_group)} groups (bound 1e-4)")


@_timed("determinism")
def check_determinism(steps: int = 25, seed: int = 0):
    """Identical config+seed must reproduce metrics and checkpoints bitwise."""
    blobs = []
    for _ in range(2):
        state = md.init_model(md.ModelConfig(), seed=seed)
        cfg = tr.TrainConfig(stage="uno", steps=steps, batch_size=4, lr=1e-3,
                             warmup=5, ema_ratio=0.99, seed=seed)
        with tempfile.TemporaryDirectory() as d:
            tr.train(state, cfg, out_dir=d, check_gate=False)
            with open(os.path.join(d, "metrics.csv"), "rb") as f:
                metrics = f.read()
            with open(os.path.join(d, "ckpt-final", md.CKPT_BLOB), "rb") as f:
                blob = f.read()
            with open(os.path.join(d, "ckpt-final", md.CKPT_MANIFEST), "rb") as f:
                man = f.read()
        blobs.append((metrics, blob, man))
    names = ("metrics csv", "checkpoint blob", "checkpoint manifest")
    for name, x, y in zip(names, blobs[0], blobs[1]):
        if x != y:
            return False, f"{name} differs between identical runs"
    return True, (f"two {steps}-step runs bitwise identical "
                  f"({len(blobs[0][1])} byte checkpoint)")


@_timed("loss-algebra")
def check_loss_algebra(seed: int = 0):
    """Uniform-logits cross-entropy, vision-loss range, and additivity of the
    combined objective at three weightings."""
    n = 7
    zeros = torch.zeros((n, len(wg.VOCAB)), dtype=torch.float64)
    targets = torch.arange(n)
    fake = md.BatchOutputs(
        vel_pred=torch.zeros((1, 16), dtype=torch.float64),
        vel_target=torch.zeros((1, 16), dtype=torch.float64),
        gen_sample_id=torch.zeros(1, dtype=torch.long),
        cap_logits=zeros, cap_targets=targets,
        cap_sample_id=torch.zeros(n, dtype=torch.long),
        mq_hidden=torch.zeros((0, 64), dtype=torch.float64),
        vision_targets=torch.zeros((0, 32), dtype=torch.float64),
        mq_sample_id=torch.zeros(0, dtype=torch.long),
        hidden=None, layouts=[],
    )
    ce = float(ob.loss_language(fake))
    if abs(ce - math.log(len(wg.VOCAB))) > 1e-6:
        return False, f"uniform-logits ce {ce!r} != ln {len(wg.VOCAB)}"

    rng = np.random.default_rng(seed)
    for i in range(50):
        k = int(rng.integers(1, 24))
        fake.mq_hidden = torch.tensor(rng.standard_normal((k, 64)) * 3)
        fake.vision_targets = torch.tensor(rng.standard_normal((k, 32)))
        v = float(ob.loss_vision(fake))
        if not -1.0 - 1e-9 <= v <= 1.0 + 1e-9:
            return False, f"vision loss {v} outside [-1, 1] at fuzz case {i}"

    cfg64 = md.ModelConfig(dtype="float64")
    state = md.init_model(cfg64, seed=seed)
    md.perturb_params(state, 0.05, seed=seed + 1)
    worst = 0.0
    with torch.no_grad():
        out = md.forward_batch(state, _uno_batch(2, seed, cfg64))
        mse = float(ob.loss_flow(out))
        lang = float(ob.loss_language(out))
        vis = float(ob.loss_vision(out))
        for l1, l2 in ((0.1, 0.2), (0.0, 1.0), (2.0, 0.5)):
            total, _ = ob.loss_total(out, ob.UnoLossConfig(l1, l2))
            want = mse + (l1 * lang if l1 else 0.0) + (l2 * vis if l2 else 0.0)
            worst = max(worst, abs(float(total) - want))
    if worst > 1e-10:
        return False, f"additivity residual {worst:.3e} exceeds 1e-10"
    return True, (f"uniform ce = ln {len(wg.VOCAB)} to 1e-6; vision in range "
                  f"on 50 fuzz cases; additivity residual {worst:.1e}")


@_timed("grad-cosine")
def check_grad_cosine(seed: int = 0):
    """Self-similarity 1 on every layer, two-parameter analytic oracle to
    1e-10, and invariance of cosines under common λ scaling."""
    state = md.init_model(md.ModelConfig(), seed=seed)
    md.perturb_params(state, 0.05, seed=seed + 1)
    batch = _uno_batch(3, seed, state.cfg)

    rep = dg.grad_cosine_report(state, batch, ob.UnoLossConfig(),
                                self_check=True)
    off = {k: v for k, v in rep.per_layer.items()
           if v is None or abs(v - 1.0) > 1e-9}
    if off or rep.overall is None or abs(rep.overall - 1.0) > 1e-9:
        return False, f"self-similarity not 1: {off or rep.overall}"

    a = torch.tensor(2.0, dtype=torch.float64, requires_grad=True)
    b = torch.tensor(-1.0, dtype=torch.float64, requires_grad=True)
    ga = torch.autograd.grad(a * b + 2 * b, [a, b], retain_graph=True)
    gb = torch.autograd.grad(3 * a - b, [a, b])
    cos, _, _ = dg._flat_cos(list(ga), list(gb))
    want = (-3.0 - 4.0) / (math.sqrt(17.0) * math.sqrt(10.0))
    if abs(cos - want) > 1e-10:
        return False, f"two-parameter oracle off by {abs(cos - want):.2e}"

    base = dg.grad_cosine_report(state, batch, ob.UnoLossConfig(0.1, 0.2))
    for c in (0.5, 2.0):
        scaled = dg.grad_cosine_report(state, batch,
                                       ob.UnoLossConfig(0.1 * c, 0.2 * c))
        for layer in base.per_layer:
            x, y = base.per_layer[layer], scaled.per_layer[layer]
            if (x is None) != (y is None) or (x is not None and abs(x - y) > 1e-9):
                return False, f"λ-scale c={c} moved cosine at {layer}"
        if abs(base.overall - scaled.overall) > 1e-9:
            return False, f"λ-scale c={c} moved the overall cosine"
    return True, ("self-similarity exact, analytic oracle to 1e-10, "
                  "cosines invariant at c in {0.5, 2}")


ALL_CHECKS = (
    check_mask_oracle,
    check_freeze,
    check_grad_routing,
    check_finite_diff,
    check_determinism,
    check_loss_algebra,
    check_grad_cosine,
)


def run_all(log=None, fast: bool = False) -> list[CheckResult]:
    """fast trims the two slow budgets for interactive use; the defaults are
    the acceptance budgets."""
    results = []
    for check in ALL_CHECKS:
        kwargs = {}
        if fast and check is check_freeze:
            kwargs["steps"] = 40
        if fast and check is check_mask_oracle:
            kwargs["n_layouts"] = 250
        res = check(**kwargs)
        results.append(res)
        if log:
            log(res.line())
    return results
