"""Diagnostics: where the understanding supervision pushes the generator.

Four independent probes:
  * grad_cosine_report  -- per-layer cosine between the flow-matching
    gradient and the understanding-loss gradient on the generative expert.
  * latent_pca_view     -- denoise a noised latent once, PCA the generative
    hidden states at a chosen depth, render everything side by side.
  * leakage_probe       -- train short caption runs with the prompt visible
    to supervised blocks, with and without semantic augmentation; verbatim
    prompts let the caption head copy instead of read the latent, which
    shows up as a collapsed caption loss.
  * finite_diff_check   -- central-difference validation of the analytic
    gradient of the full objective in float64.
"""

from __future__ import annotations

import csv
import json
import os
import zlib
from dataclasses import dataclass

import numpy as np
import torch

from . import model as md
from . import objectives as ob
from . import packing as pk
from . import trainer as tr
from . import worldgen as wg

COS_NULL_NORM = 1e-12


# ---------------------------------------------------------------------------
# gradient geometry

@dataclass
class GradCosineReport:
    per_layer: dict[str, float | None]  # cos per generative-expert layer
    overall: float | None  # cos over all generative-side trainables
    mse_norm: float
    aux_norm: float

    def to_json(self) -> str:
        return json.dumps(
            {"per_layer": self.per_layer, "overall": self.overall,
             "mse_norm": self.mse_norm, "aux_norm": self.aux_norm},
            sort_keys=True, indent=1,
        )


def _flat_cos(a: list[torch.Tensor], b: list[torch.Tensor]) -> tuple[float | None, float, float]:
    va = torch.cat([t.reshape(-1).double() for t in a])
    vb = torch.cat([t.reshape(-1).double() for t in b])
    na = float(va.norm())
    nb = float(vb.norm())
    if na < COS_NULL_NORM or nb < COS_NULL_NORM:
        return None, na, nb
    return float((va @ vb) / (na * nb)), na, nb


def grad_cosine_report(
    state: md.ModelState,
    batch: list[pk.PackedSample],
    lcfg: ob.UnoLossConfig,
    self_check: bool = False,
) -> GradCosineReport:
    """Cosine between d(L_mse)/dθ and d(λ1 L_lang + λ2 L_vis)/dθ restricted to
    the generative expert. Two grad passes over one forward graph. A layer
    whose either gradient has norm below 1e-12 reports None rather than a
    fabricated direction. Scaling both λ by a common positive factor leaves
    every cosine unchanged. With self_check the second gradient is taken of
    L_mse again, so every defined cosine must come out 1."""
    out = md.forward_batch(state, batch)
    mse = ob.loss_flow(out)
    if self_check:
        aux = mse
    else:
        aux = None
        if lcfg.enable_language and lcfg.lambda1 > 0 and out.cap_logits.shape[0]:
            aux = lcfg.lambda1 * ob.loss_language(out)
        if lcfg.enable_vision and lcfg.lambda2 > 0 and out.mq_hidden.shape[0]:
            vis = lcfg.lambda2 * ob.loss_vision(out)
            aux = vis if aux is None else aux + vis
        if aux is None:
            raise ValueError("no understanding loss terms to compare against")

    groups: dict[str, list[str]] = {}
    for i in range(state.cfg.n_layers):
        groups[f"layer{i}"] = [
            n for n in sorted(state.params) if n.startswith(f"layer{i}.gen.")
        ]
    gen_groups = {"adapt.gen_in", "time.mlp", "head.vel", "mq.table"}
    gen_side = [
        n for n in sorted(state.params)
        if ".gen." in n or md.group_of(n) in gen_groups
    ]

    names = sorted({n for ns in groups.values() for n in ns} | set(gen_side))
    tensors = [state.params[n] for n in names]
    g_mse = torch.autograd.grad(mse, tensors, retain_graph=True, allow_unused=True)
    g_aux = torch.autograd.grad(aux, tensors, allow_unused=True)
    gm = {n: (g if g is not None else torch.zeros_like(state.params[n]))
          for n, g in zip(names, g_mse)}
    ga = {n: (g if g is not None else torch.zeros_like(state.params[n]))
          for n, g in zip(names, g_aux)}

    per_layer = {}
    for layer, ns in groups.items():
        cos, _, _ = _flat_cos([gm[n] for n in ns], [ga[n] for n in ns])
        per_layer[layer] = cos
    overall, na, nb = _flat_cos([gm[n] for n in gen_side], [ga[n] for n in gen_side])
    return GradCosineReport(per_layer, overall, na, nb)


# ---------------------------------------------------------------------------
# latent view

_PANEL_SCALE = 8


@dataclass
class PcaView:
    t: float
    layer: int
    coords: np.ndarray  # (16, 3) token coordinates in the top components
    explained: np.ndarray  # (3,) explained-variance ratios
    x0_hat: np.ndarray  # (4, 8, 8) one-step denoise of the noised latent
    eps_hat: np.ndarray
    decoded: wg.ProbeResult
    png_path: str | None = None
    csv_path: str | None = None


def _pca3(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rows of x -> 3 principal coordinates plus explained-variance ratios.
    Components are sign-fixed so the largest-|loading| entry is positive."""
    xc = x - x.mean(axis=0, keepdims=True)
    u, s, vt = np.linalg.svd(xc, full_matrices=False)
    var = s**2
    evr = var / var.sum() if var.sum() > 0 else np.zeros_like(var)
    comps = vt[:3]
    for k in range(comps.shape[0]):
        j = int(np.argmax(np.abs(comps[k])))
        if comps[k, j] < 0:
            comps[k] = -comps[k]
    coords = xc @ comps.T
    if coords.shape[1] < 3:
        coords = np.pad(coords, ((0, 0), (0, 3 - coords.shape[1])))
        evr = np.pad(evr, (0, max(0, 3 - evr.shape[0])))
    return coords, evr[:3]


def _coords_to_rgb(coords: np.ndarray) -> np.ndarray:
    """(16, 3) -> (8, 8, 3) uint8; each token colors its 2x2 latent block.
    Channels with no variance render flat gray."""
    img = np.zeros((8, 8, 3), dtype=np.uint8)
    for ch in range(3):
        v = coords[:, ch]
        span = v.max() - v.min()
        unit = (v - v.min()) / span if span > 1e-12 else np.full_like(v, 0.5)
        for tok in range(16):
            r, c = divmod(tok, 4)
            img[2 * r : 2 * r + 2, 2 * c : 2 * c + 2, ch] = int(
                round(255 * unit[tok])
            )
    return img


def latent_pca_view(
    state: md.ModelState,
    scene: wg.Scene,
    seed: int = 0,
    t: float = 0.8,
    layer: int | None = None,
    out_png: str | None = None,
    out_csv: str | None = None,
) -> PcaView:
    """Noise the scene latent to time t, denoise once, and PCA the
    generative-token hidden states at the chosen depth (default: middle)."""
    if not 0.0 < t < 1.0:
        raise ValueError("t must lie strictly inside (0, 1)")
    if layer is None:
        layer = state.cfg.n_layers // 2
    if not 0 <= layer <= state.cfg.n_layers:
        raise ValueError(f"layer must lie in [0, {state.cfg.n_layers}]")
    prompt = wg.caption_scene(scene, template=0)
    x0 = wg.latent_tokens(wg.scene_latent(scene))
    rng = np.random.default_rng(wg.mix64(seed, 0xF16))
    eps = rng.standard_normal(x0.shape)
    x_t = (1.0 - t) * x0 + t * eps
    sample = pk.pack_infer(prompt, x_t, t)
    with torch.no_grad():
        out = md.forward(state, sample, want_hidden=True)
    u = out.velocity.numpy()
    x0_hat = wg.tokens_to_latent(x_t - t * u)
    eps_hat = wg.tokens_to_latent(x_t + (1.0 - t) * u)
    gen_seg = sample.layout.find(pk.SEG_GEN)
    h = out.hidden[layer][gen_seg.start : gen_seg.stop].numpy()
    coords, evr = _pca3(h)
    view = PcaView(t, layer, coords, evr, x0_hat, eps_hat,
                   wg.decode_probe(x0_hat))

    if out_csv:
        with open(out_csv, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["token", "pc1", "pc2", "pc3", "evr1", "evr2", "evr3"])
            for i in range(coords.shape[0]):
                w.writerow(
                    [i] + [f"{coords[i, k]:.6e}" for k in range(3)]
                    + [f"{evr[k]:.6f}" for k in range(3)]
                )
        view.csv_path = out_csv
    if out_png:
        from PIL import Image

        render = np.round(255 * wg.render_scene(scene)).astype(np.uint8)
        panels = [
            render.transpose(1, 2, 0),
            _latent_rgb(wg.tokens_to_latent(x_t)),
            _coords_to_rgb(coords),
            _latent_rgb(x0_hat),
        ]
        panels = [_to_rgb16(p) for p in panels]
        gap = np.full((16, 2, 3), 32, dtype=np.uint8)
        strip = panels[0]
        for p in panels[1:]:
            strip = np.concatenate([strip, gap, p], axis=1)
        img = Image.fromarray(strip, "RGB").resize(
            (strip.shape[1] * _PANEL_SCALE, strip.shape[0] * _PANEL_SCALE),
            Image.NEAREST,
        )
        img.save(out_png)
        view.png_path = out_png
    return view


def _latent_rgb(lat: np.ndarray) -> np.ndarray:
    """First three latent channels, robustly scaled to uint8 per channel."""
    img = np.zeros((8, 8, 3), dtype=np.uint8)
    for ch in range(3):
        v = lat[ch]
        lo, hi = v.min(), v.max()
        unit = (v - lo) / (hi - lo) if hi - lo > 1e-12 else np.full_like(v, 0.5)
        img[:, :, ch] = np.round(255 * unit).astype(np.uint8)
    return img


def _to_rgb16(img: np.ndarray) -> np.ndarray:
    if img.shape[:2] == (16, 16):
        return img
    return np.repeat(np.repeat(img, 2, axis=0), 2, axis=1)


# ---------------------------------------------------------------------------
# leakage probe

@dataclass
class LeakageReport:
    seeds: list[int]
    loss_aug_on: list[float]
    loss_aug_off: list[float]
    ratios: list[float]  # aug_off / aug_on per seed
    direction_ok: int  # seeds where copying collapsed the loss (off < on)
    collapsed: int  # seeds where the ratio fell to <= the collapse bound
    collapse_bound: float

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True, indent=1)


def _lang_tail_mean(metrics_csv: str, frac: float = 0.1) -> float:
    with open(metrics_csv) as f:
        rows = list(csv.DictReader(f))
    tail = rows[-max(1, int(len(rows) * frac)):]
    vals = [float(r["l_lang"]) for r in tail if r["l_lang"] != "nan"]
    if not vals:
        raise ValueError(f"no language-loss entries in {metrics_csv}")
    return float(np.mean(vals))


def leakage_probe(
    ckpt_path: str,
    work_dir: str,
    seeds: list[int] = (0, 1, 2),
    steps: int = 800,
    lr: float = 1e-3,
    batch_size: int = 16,
    collapse_bound: float = 0.5,
    out_json: str | None = None,
    log=None,
) -> LeakageReport:
    """Train twice per seed, verbatim captions vs paraphrased ones, and
    compare where the caption loss settles. Direct supervision->prompt reads
    stay masked and the whole understanding side is frozen, so the only
    trainable route from prompt to caption target runs through the
    generation expert's keys/values: token copying along it is possible
    verbatim and blocked by paraphrase. The loss collapsing in the verbatim
    arm only is the leakage signature the augmentation exists to prevent.

    The probe turns the captioning term all the way up (weight 1.0, vision
    term off, text-to-image data only) at an active learning rate; weaker
    budgets leave both arms at their starting loss and show nothing."""
    os.makedirs(work_dir, exist_ok=True)
    on, off, ratios = [], [], []
    for seed in seeds:
        vals = {}
        for aug in (True, False):
            state = md.load_checkpoint(ckpt_path)
            cfg = tr.TrainConfig(
                stage="uno", steps=steps, batch_size=batch_size, lr=lr,
                warmup=max(1, steps // 10), ema_ratio=0.99, seed=seed,
                lambda1=1.0, enable_vision=False, edit_fraction=0.0, aug=aug,
            )
            d = os.path.join(work_dir, f"seed{seed}-aug{'on' if aug else 'off'}")
            tr.train(state, cfg, out_dir=d, check_gate=False, log=log)
            vals[aug] = _lang_tail_mean(os.path.join(d, "metrics.csv"))
        on.append(vals[True])
        off.append(vals[False])
        ratios.append(vals[False] / vals[True])
        if log:
            log(f"[leakage] seed {seed}: aug-on {vals[True]:.4f} "
                f"aug-off {vals[False]:.4f} ratio {ratios[-1]:.3f}")
    report = LeakageReport(
        seeds=list(seeds), loss_aug_on=on, loss_aug_off=off, ratios=ratios,
        direction_ok=sum(o < n for o, n in zip(off, on)),
        collapsed=sum(r <= collapse_bound for r in ratios),
        collapse_bound=collapse_bound,
    )
    if out_json:
        with open(out_json, "w") as f:
            f.write(report.to_json() + "\n")
    return report


# ---------------------------------------------------------------------------
# finite differences

@dataclass
class FiniteDiffReport:
    max_rel_err: float
    per_group: dict[str, float]
    n_checked: int
    eps: float


def finite_diff_check(
    state: md.ModelState,
    batch: list[pk.PackedSample],
    lcfg: ob.UnoLossConfig,
    coords_per_group: int = 20,
    eps: float = 1e-5,
    seed: int = 0,
) -> FiniteDiffReport:
    """Central-difference check of d(L_total)/dθ on coords_per_group randomly
    sampled coordinates of every parameter group (a group pools its weights
    and biases). Relative error uses |fd - an| / max(|an|, |fd|, 1e-6), so
    coordinates where both values vanish do not divide by zero. Demands a
    float64 model.

    The patch encoder group is skipped: it produces the (detached) feature
    regression targets, so the training objective treats it as a constant.
    Differencing the raw loss would measure the derivative through the
    stop-gradient, which the objective deliberately does not have."""
    if state.cfg.dtype != "float64":
        raise ValueError("finite differences need a float64 model state")

    def total_loss() -> torch.Tensor:
        out = md.forward_batch(state, batch)
        return ob.loss_total(out, lcfg)[0]

    loss = total_loss()
    loss.backward()
    analytic = {
        n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for n, p in state.params.items()
    }
    for p in state.params.values():
        p.grad = None

    members: dict[str, list[str]] = {}
    for name in sorted(state.params):
        if md.group_of(name) == "enc.patch":
            continue
        members.setdefault(md.group_of(name), []).append(name)

    per_group: dict[str, float] = {}
    n_checked = 0
    for group, names in sorted(members.items()):
        sizes = [state.params[n].numel() for n in names]
        total = sum(sizes)
        rng = np.random.default_rng(wg.mix64(seed, 0xFD, zlib.crc32(group.encode())))
        picks = rng.choice(total, size=min(coords_per_group, total), replace=False)
        worst = 0.0
        for flat_i in picks:
            flat_i = int(flat_i)
            k = 0
            while flat_i >= sizes[k]:
                flat_i -= sizes[k]
                k += 1
            name = names[k]
            flat = state.params[name].detach().reshape(-1)
            orig = float(flat[flat_i])
            with torch.no_grad():
                flat[flat_i] = orig + eps
                lp = float(total_loss())
                flat[flat_i] = orig - eps
                lm = float(total_loss())
                flat[flat_i] = orig
            fd = (lp - lm) / (2 * eps)
            an = float(analytic[name].reshape(-1)[flat_i])
            worst = max(worst, abs(fd - an) / max(abs(an), abs(fd), 1e-6))
            n_checked += 1
        per_group[group] = worst
    return FiniteDiffReport(
        max_rel_err=max(per_group.values()), per_group=per_group,
        n_checked=n_checked, eps=eps,
    )
