"""Packed multimodal sequences and their attention masks.

A packed sample is one flat token sequence made of typed segments:

    cond_text    conditioning text (prompt or edit instruction), causal
    und_image    clean source image patches for the understanding pathway
    gen_image    noised latent tokens for the generative pathway
    sup_caption  caption supervision tokens ([bot] ... [eot]), causal
    metaquery    learned query slots that read the noised stream

Cross-segment visibility is a pure function of the (query kind, key kind)
pair and three toggles. The table below is the contract; build_mask renders
it with vectorized block fills, mask_oracle re-derives it per position pair
with independent logic so the two can be fuzzed against each other.

  query \\ key   cond    und     gen     sup     mq
  cond          causal  -       -       -       -
  und           yes     bidir   -       -       -
  gen           yes     yes     bidir   -       -
  sup           ~mcp    sbss    yes     causal  -
  mq            ~mcp    sbss    yes     -       order

  mcp  = mask_condition_prompt (true blocks supervision reads of the prompt)
  sbss = sup_blocks_see_source (false blocks supervision reads of und_image)
  order = metaquery_order intra rule, causal or bidirectional
  Supervision blocks (sup, mq) are never attended by anything, and never
  attend each other, so the caption and feature losses stay isolated.

Noising follows rectified flow: x_t = (1-t) x0 + t eps, velocity target
u* = eps - x0, t=1 pure noise. Timesteps are shift-warped uniforms,
t = s u / (1 + (s-1) u), clamped to [1e-4, 1-1e-4].
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import worldgen as wg

SEG_COND = "cond_text"
SEG_UND = "und_image"
SEG_GEN = "gen_image"
SEG_SUP = "sup_caption"
SEG_MQ = "metaquery"
SEGMENT_KINDS = (SEG_COND, SEG_UND, SEG_GEN, SEG_SUP, SEG_MQ)

T_CLAMP = 1e-4

# rng stream tags so each random draw family is independent of the others
_TAG_NOISE = 0x401
_TAG_CAPTION = 0x402
_TAG_STYLE = 0x403


@dataclass(frozen=True)
class Segment:
    kind: str
    start: int
    length: int

    def __post_init__(self):
        if self.kind not in SEGMENT_KINDS:
            raise ValueError(f"unknown segment kind {self.kind!r}")
        if self.length < 1 or self.start < 0:
            raise ValueError("segments need start >= 0 and length >= 1")

    @property
    def stop(self) -> int:
        return self.start + self.length


@dataclass(frozen=True)
class SegmentLayout:
    segments: tuple[Segment, ...]

    def __post_init__(self):
        pos = 0
        for seg in self.segments:
            if seg.start != pos:
                raise ValueError(f"segments must tile the sequence, gap at {pos}")
            pos = seg.stop

    @property
    def length(self) -> int:
        return self.segments[-1].stop if self.segments else 0

    def find(self, kind: str) -> Segment | None:
        for seg in self.segments:
            if seg.kind == kind:
                return seg
        return None


def layout_of(kinds_lengths: Sequence[tuple[str, int]]) -> SegmentLayout:
    segs, pos = [], 0
    for kind, length in kinds_lengths:
        segs.append(Segment(kind, pos, length))
        pos += length
    return SegmentLayout(tuple(segs))


@dataclass(frozen=True)
class MaskToggles:
    mask_condition_prompt: bool = True
    metaquery_order: str = "causal"  # or "bidirectional"
    sup_blocks_see_source: bool = False

    def __post_init__(self):
        if self.metaquery_order not in ("causal", "bidirectional"):
            raise ValueError(f"bad metaquery_order {self.metaquery_order!r}")


ALL_TOGGLE_COMBOS = tuple(
    MaskToggles(mcp, order, sbss)
    for mcp in (True, False)
    for order in ("causal", "bidirectional")
    for sbss in (True, False)
)


# ---------------------------------------------------------------------------
# mask construction

def _intra_causal(kind: str, toggles: MaskToggles) -> bool:
    if kind in (SEG_COND, SEG_SUP):
        return True
    if kind == SEG_MQ:
        return toggles.metaquery_order == "causal"
    return False  # image segments are bidirectional


def _cross_allowed(q_kind: str, k_kind: str, toggles: MaskToggles) -> bool:
    if q_kind == SEG_UND:
        return k_kind == SEG_COND
    if q_kind == SEG_GEN:
        return k_kind in (SEG_COND, SEG_UND)
    if q_kind in (SEG_SUP, SEG_MQ):
        if k_kind == SEG_GEN:
            return True
        if k_kind == SEG_COND:
            return not toggles.mask_condition_prompt
        if k_kind == SEG_UND:
            return toggles.sup_blocks_see_source
    return False  # cond attends nothing else; sup<->mq stay isolated


def build_mask(layout: SegmentLayout, toggles: MaskToggles) -> np.ndarray:
    """(L, L) bool, mask[q, k] true when q may attend k. Block-filled."""
    n = layout.length
    mask = np.zeros((n, n), dtype=bool)
    for qs in layout.segments:
        for ks in layout.segments:
            if qs is ks:
                block = np.ones((qs.length, qs.length), dtype=bool)
                if _intra_causal(qs.kind, toggles):
                    block = np.tril(block)
                mask[qs.start : qs.stop, ks.start : ks.stop] = block
            elif _cross_allowed(qs.kind, ks.kind, toggles):
                mask[qs.start : qs.stop, ks.start : ks.stop] = True
    return mask


def mask_oracle(layout: SegmentLayout, toggles: MaskToggles) -> np.ndarray:
    """Independent per-pair re-derivation of the visibility table. Slow on
    purpose: one scalar decision per (q, k), no block fills, no shared helper
    logic with build_mask."""
    n = layout.length
    seg_of = [None] * n
    for idx, seg in enumerate(layout.segments):
        for p in range(seg.start, seg.stop):
            seg_of[p] = idx
    out = np.zeros((n, n), dtype=bool)
    for q in range(n):
        for k in range(n):
            qs = layout.segments[seg_of[q]]
            ks = layout.segments[seg_of[k]]
            if seg_of[q] == seg_of[k]:
                kind = qs.kind
                if kind == SEG_COND or kind == SEG_SUP:
                    ok = k <= q
                elif kind == SEG_MQ:
                    ok = k <= q if toggles.metaquery_order == "causal" else True
                else:
                    ok = True
            else:
                qk, kk = qs.kind, ks.kind
                if qk == SEG_COND:
                    ok = False
                elif qk == SEG_UND:
                    ok = kk == SEG_COND
                elif qk == SEG_GEN:
                    ok = kk == SEG_COND or kk == SEG_UND
                elif qk == SEG_SUP or qk == SEG_MQ:
                    if kk == SEG_GEN:
                        ok = True
                    elif kk == SEG_COND:
                        ok = not toggles.mask_condition_prompt
                    elif kk == SEG_UND:
                        ok = toggles.sup_blocks_see_source
                    else:
                        ok = False
                else:
                    ok = False
            out[q, k] = ok
    return out


def fuzz_layout(seed: int, max_total: int = 24) -> SegmentLayout:
    """Random layout for mask fuzzing: 1..5 segments, kinds with repetition,
    random small lengths."""
    rng = np.random.default_rng(wg.mix64(seed, 0xF022))
    n_seg = int(rng.integers(1, 6))
    kinds_lengths = []
    total = 0
    for _ in range(n_seg):
        kind = SEGMENT_KINDS[int(rng.integers(len(SEGMENT_KINDS)))]
        length = int(rng.integers(1, 7))
        if total + length > max_total:
            break
        kinds_lengths.append((kind, length))
        total += length
    if not kinds_lengths:
        kinds_lengths = [(SEG_GEN, 1)]
    return layout_of(kinds_lengths)


# ---------------------------------------------------------------------------
# flow-matching noise schedule

def shift_timestep(u: float, shift: float) -> float:
    t = shift * u / (1.0 + (shift - 1.0) * u)
    return float(min(max(t, T_CLAMP), 1.0 - T_CLAMP))


def timestep_cdf(t: float, shift: float) -> float:
    """P(T <= t) for the shifted-uniform timestep: t / (s - (s-1) t)."""
    return t / (shift - (shift - 1.0) * t)


def sample_timestep(rng: np.random.Generator, shift: float) -> float:
    return shift_timestep(float(rng.random()), shift)


def noise_latent(
    x0: np.ndarray, t: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """x_t = (1-t) x0 + t eps; velocity target u* = eps - x0."""
    eps = rng.standard_normal(x0.shape)
    x_t = (1.0 - t) * x0 + t * eps
    return x_t, eps - x0, eps


# ---------------------------------------------------------------------------
# packed samples

@dataclass(frozen=True)
class PackConfig:
    num_metaqueries: int = 16
    aug: bool = True  # paraphrase the supervision caption
    shift: float = 4.0

    def __post_init__(self):
        if self.num_metaqueries < 1:
            raise ValueError("num_metaqueries must be >= 1")
        if self.shift <= 0:
            raise ValueError("shift must be positive")


@dataclass
class PackedSample:
    layout: SegmentLayout
    toggles: MaskToggles
    token_ids: np.ndarray  # (L,) int64; pad id at non-text positions
    mask: np.ndarray  # (L, L) bool
    gen_tokens: np.ndarray  # (n_gen, 16) float64, noised
    velocity_target: np.ndarray  # (n_gen, 16) float64
    caption_targets: np.ndarray  # (L,) int64, -1 where unsupervised
    und_patches: np.ndarray | None  # (16, 48) clean source pixels
    target_patches: np.ndarray | None  # (16, 48) clean pixels for metaquery targets
    t: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.layout.length
        assert self.token_ids.shape == (n,) and self.mask.shape == (n, n)
        assert self.caption_targets.shape == (n,)
        gen = self.layout.find(SEG_GEN)
        n_gen = gen.length if gen else 0
        assert self.gen_tokens.shape == (n_gen, wg.D_LATENT_TOKEN)
        assert self.velocity_target.shape == self.gen_tokens.shape


def _caption_targets(layout: SegmentLayout, token_ids: np.ndarray) -> np.ndarray:
    """Next-token targets inside the sup segment: position p predicts p+1,
    the last position (the [eot] token) is unsupervised."""
    targets = np.full(layout.length, -1, dtype=np.int64)
    sup = layout.find(SEG_SUP)
    if sup is not None:
        for p in range(sup.start, sup.stop - 1):
            targets[p] = token_ids[p + 1]
    return targets


def _assemble(
    kinds_tokens: list[tuple[str, np.ndarray | int]],
    toggles: MaskToggles,
    gen_tokens: np.ndarray,
    velocity_target: np.ndarray,
    und_patches,
    target_patches,
    t: float,
    meta: dict,
) -> PackedSample:
    kinds_lengths = []
    ids: list[int] = []
    for kind, tok in kinds_tokens:
        if isinstance(tok, int):  # token-less segment, length given
            kinds_lengths.append((kind, tok))
            fill = wg.QRY if kind == SEG_MQ else wg.PAD
            ids.extend([fill] * tok)
        else:
            kinds_lengths.append((kind, len(tok)))
            ids.extend(int(x) for x in tok)
    layout = layout_of(kinds_lengths)
    token_ids = np.asarray(ids, dtype=np.int64)
    return PackedSample(
        layout=layout,
        toggles=toggles,
        token_ids=token_ids,
        mask=build_mask(layout, toggles),
        gen_tokens=gen_tokens,
        velocity_target=velocity_target,
        caption_targets=_caption_targets(layout, token_ids),
        und_patches=und_patches,
        target_patches=target_patches,
        t=t,
        meta=meta,
    )


def _supervision_caption(scene: wg.Scene, prompt: list[int], seed: int, aug: bool) -> list[int]:
    if aug:
        return wg.paraphrase_caption(scene, wg.mix64(seed, _TAG_CAPTION))
    return list(prompt)


def pack_t2i_uno(
    prompt: list[int],
    scene: wg.Scene,
    seed: int,
    cfg: PackConfig,
    toggles: MaskToggles = MaskToggles(),
) -> PackedSample:
    """[prompt | gen 16 | [bot] caption [eot] | metaquery N].

    Draw order (t, then eps, then caption surface) is part of the
    determinism contract. With aug off the supervision caption is the prompt
    verbatim, which is the leakage-probe configuration.
    """
    rng = np.random.default_rng(wg.mix64(seed, _TAG_NOISE))
    t = sample_timestep(rng, cfg.shift)
    x0 = wg.latent_tokens(wg.scene_latent(scene))
    x_t, u_star, _ = noise_latent(x0, t, rng)
    sup = [wg.BOT] + _supervision_caption(scene, prompt, seed, cfg.aug) + [wg.EOT]
    return _assemble(
        [
            (SEG_COND, np.asarray(prompt)),
            (SEG_GEN, 16),
            (SEG_SUP, np.asarray(sup)),
            (SEG_MQ, cfg.num_metaqueries),
        ],
        toggles,
        gen_tokens=x_t,
        velocity_target=u_star,
        und_patches=None,
        target_patches=wg.image_patches(wg.render_scene(scene)),
        t=t,
        meta={"seed": seed, "task": "t2i"},
    )


def pack_edit_uno(
    pair: wg.EditPair,
    seed: int,
    cfg: PackConfig,
    toggles: MaskToggles = MaskToggles(),
) -> PackedSample:
    """[instruction | und 16 (clean source) | gen 16 (noised target) |
    [bot] target caption [eot] | metaquery N]."""
    rng = np.random.default_rng(wg.mix64(seed, _TAG_NOISE))
    t = sample_timestep(rng, cfg.shift)
    x0 = wg.latent_tokens(wg.scene_latent(pair.target))
    x_t, u_star, _ = noise_latent(x0, t, rng)
    prompt = wg.edit_instruction(pair)
    if cfg.aug:
        sup_body = wg.paraphrase_caption(pair.target, wg.mix64(seed, _TAG_CAPTION))
    else:
        sup_body = wg.caption_scene(pair.target, template=0)
    sup = [wg.BOT] + sup_body + [wg.EOT]
    return _assemble(
        [
            (SEG_COND, np.asarray(prompt)),
            (SEG_UND, 16),
            (SEG_GEN, 16),
            (SEG_SUP, np.asarray(sup)),
            (SEG_MQ, cfg.num_metaqueries),
        ],
        toggles,
        gen_tokens=x_t,
        velocity_target=u_star,
        und_patches=wg.image_patches(wg.render_scene(pair.source)),
        target_patches=wg.image_patches(wg.render_scene(pair.target)),
        t=t,
        meta={"seed": seed, "task": "edit", "op": pair.op},
    )


def pack_pretrain_caption(
    scene: wg.Scene, seed: int, cfg: PackConfig, template: int | None = None
) -> PackedSample:
    """[und 16 (clean) | [bot] caption [eot]]: stage-0 captioning. By default
    the caption style is a seeded mix weighted toward canonical template 0
    (0.7 / 0.1 canonical, 0.2 paraphrase) so the caption gate is measured on
    the dominant surface form while paraphrase grammar still gets coverage.
    Passing template pins the canonical form (the gate uses template=0)."""
    if template is not None:
        body = wg.caption_scene(scene, template=template)
    else:
        rng = np.random.default_rng(wg.mix64(seed, _TAG_STYLE))
        r = float(rng.random())
        if r < 0.7:
            body = wg.caption_scene(scene, template=0)
        elif r < 0.8:
            body = wg.caption_scene(scene, template=1)
        else:
            body = wg.paraphrase_caption(scene, wg.mix64(seed, _TAG_CAPTION))
    sup = [wg.BOT] + body + [wg.EOT]
    toggles = MaskToggles(sup_blocks_see_source=True)
    return _assemble(
        [(SEG_UND, 16), (SEG_SUP, np.asarray(sup))],
        toggles,
        gen_tokens=np.zeros((0, wg.D_LATENT_TOKEN)),
        velocity_target=np.zeros((0, wg.D_LATENT_TOKEN)),
        und_patches=wg.image_patches(wg.render_scene(scene)),
        target_patches=None,
        t=0.0,
        meta={"seed": seed, "task": "caption"},
    )


def pack_pretrain_t2i(
    prompt: list[int], scene: wg.Scene, seed: int, cfg: PackConfig
) -> PackedSample:
    """[prompt | gen 16]: stage-0 text-to-image flow matching."""
    rng = np.random.default_rng(wg.mix64(seed, _TAG_NOISE))
    t = sample_timestep(rng, cfg.shift)
    x0 = wg.latent_tokens(wg.scene_latent(scene))
    x_t, u_star, _ = noise_latent(x0, t, rng)
    return _assemble(
        [(SEG_COND, np.asarray(prompt)), (SEG_GEN, 16)],
        MaskToggles(),
        gen_tokens=x_t,
        velocity_target=u_star,
        und_patches=None,
        target_patches=None,
        t=t,
        meta={"seed": seed, "task": "t2i_pretrain"},
    )


def pack_infer(
    prompt: list[int],
    gen_tokens: np.ndarray,
    t: float,
    und_patches: np.ndarray | None = None,
) -> PackedSample:
    """Sampling-time layout: [prompt | (und 16) | gen 16], no supervision."""
    parts: list[tuple[str, np.ndarray | int]] = [(SEG_COND, np.asarray(prompt))]
    if und_patches is not None:
        parts.append((SEG_UND, 16))
    parts.append((SEG_GEN, gen_tokens.shape[0]))
    return _assemble(
        parts,
        MaskToggles(),
        gen_tokens=gen_tokens,
        velocity_target=np.zeros_like(gen_tokens),
        und_patches=und_patches,
        target_patches=None,
        t=t,
        meta={"task": "infer"},
    )


# ---------------------------------------------------------------------------
# mask dumps

def mask_to_rle(mask: np.ndarray) -> str:
    flat = mask.astype(np.uint8).reshape(-1)
    runs = []
    if flat.size:
        boundaries = np.flatnonzero(np.diff(flat)) + 1
        pieces = np.split(flat, boundaries)
        runs = [str(len(p)) for p in pieces]
        start = int(flat[0])
    else:
        start = 0
    return (
        "unolab-mask-rle v1\n"
        f"shape {mask.shape[0]} {mask.shape[1]}\n"
        f"start {start}\n"
        "runs " + " ".join(runs) + "\n"
    )


def rle_to_mask(text: str) -> np.ndarray:
    lines = text.strip().splitlines()
    if not lines or lines[0] != "unolab-mask-rle v1":
        raise ValueError("bad rle header")
    shape = tuple(int(x) for x in lines[1].split()[1:])
    start = int(lines[2].split()[1])
    runs = [int(x) for x in lines[3].split()[1:]]
    flat = np.zeros(shape[0] * shape[1], dtype=bool)
    pos, val = 0, bool(start)
    for r in runs:
        flat[pos : pos + r] = val
        pos += r
        val = not val
    if pos != flat.size:
        raise ValueError("rle runs do not cover the mask")
    return flat.reshape(shape)


def write_mask_dump(mask: np.ndarray, rle_path, png_path, scale: int = 8) -> None:
    from PIL import Image

    with open(rle_path, "w") as f:
        f.write(mask_to_rle(mask))
    arr = (mask.astype(np.uint8) * 255).repeat(scale, 0).repeat(scale, 1)
    Image.fromarray(arr, mode="L").save(png_path)
