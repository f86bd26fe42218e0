"""Two-expert transformer over packed multimodal sequences.

Every layer holds two disjoint parameter sets ("und" and "gen") for norms,
QKV, attention output, and FFN. Attention itself is joint: all positions
share one softmax over the packed sequence (under the sample's mask), but
each position's projections come from its own expert. Routing is by segment
kind: gen_image tokens use the gen expert, everything else (text, source
image patches, supervision captions, metaqueries) uses the und expert.
Because keys/values of gen tokens are produced by gen parameters, losses on
positions that attend the gen stream backpropagate into the gen expert even
when every und parameter is frozen.

Residual-branch output projections (attention out, FFN second matmul, time
MLP output) start at zero, so a freshly initialized model is the identity
over its embeddings.

Parameters live in a flat name -> tensor dict; freeze flags apply to named
groups (per layer/expert/role plus the top-level tables, heads, adapters).
The checkpoint format is a little-endian float32 blob plus a JSON manifest
describing name/shape/offset for every entry; EMA shadows follow the raw
parameters inside the same blob.
"""

from __future__ import annotations

import json
import math
import os
import zlib
from dataclasses import dataclass, field, asdict, replace

import numpy as np
import torch
import torch.nn.functional as F

from . import worldgen as wg
from . import packing as pk

EXPERTS = ("und", "gen")
ROLES = ("norm1", "qkv", "attn_out", "norm2", "ffn")
LN_EPS = 1e-5

CKPT_FORMAT = "unolab-ckpt-v1"
CKPT_BLOB = "params.bin"
CKPT_MANIFEST = "manifest.json"


def route_expert(kind: str) -> str:
    """Segment kind -> expert name. Only the noised generative stream uses
    the gen expert; all reading/understanding positions use und."""
    if kind not in pk.SEGMENT_KINDS:
        raise ValueError(f"unknown segment kind {kind!r}")
    return "gen" if kind == pk.SEG_GEN else "und"


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    ffn_hidden: int = 256
    vocab_size: int = wg.VOCAB_SIZE
    d_und_feature: int = 32
    d_latent_token: int = wg.D_LATENT_TOKEN
    num_metaqueries: int = 16
    max_seq_len: int = 96
    dtype: str = "float32"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.vocab_size != wg.VOCAB_SIZE:
            raise ValueError(f"vocab_size is pinned to {wg.VOCAB_SIZE} by the world")
        if self.d_und_feature > self.d_model:
            raise ValueError("d_und_feature cannot exceed d_model")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.num_metaqueries < 1 or self.n_layers < 1 or self.max_seq_len < 4:
            raise ValueError("degenerate model config")

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32


# init kinds: "fan_in" scaled uniform, "zeros", "ones"
def param_spec(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Single source of truth for the parameter inventory: (name, shape,
    init kind), in checkpoint order."""
    d, f = cfg.d_model, cfg.ffn_hidden
    spec: list[tuple[str, tuple[int, ...], str]] = [
        ("embed.tok.w", (cfg.vocab_size, d), "fan_in"),
        ("embed.pos.w", (cfg.max_seq_len, d), "fan_in"),
        ("embed.seg.w", (len(pk.SEGMENT_KINDS), d), "fan_in"),
        ("enc.patch.w", (wg.D_PATCH, cfg.d_und_feature), "fan_in"),
        ("enc.patch.b", (cfg.d_und_feature,), "zeros"),
        ("adapt.und_in.w", (cfg.d_und_feature, d), "fan_in"),
        ("adapt.und_in.b", (d,), "zeros"),
        ("adapt.gen_in.w", (cfg.d_latent_token, d), "fan_in"),
        ("adapt.gen_in.b", (d,), "zeros"),
        ("time.mlp.w1", (32, d), "fan_in"),
        ("time.mlp.b1", (d,), "zeros"),
        ("time.mlp.w2", (d, d), "zeros"),  # residual-style: silent at init
        ("time.mlp.b2", (d,), "zeros"),
        ("head.lm.w", (d, cfg.vocab_size), "fan_in"),
        ("head.lm.b", (cfg.vocab_size,), "zeros"),
        ("head.vel.w", (d, cfg.d_latent_token), "fan_in"),
        ("head.vel.b", (cfg.d_latent_token,), "zeros"),
        ("mq.table.w", (cfg.num_metaqueries, d), "fan_in"),
    ]
    for i in range(cfg.n_layers):
        for ex in EXPERTS:
            g = f"layer{i}.{ex}"
            spec += [
                (f"{g}.norm1.w", (d,), "ones"),
                (f"{g}.norm1.b", (d,), "zeros"),
                (f"{g}.qkv.w", (d, 3 * d), "fan_in"),
                (f"{g}.qkv.b", (3 * d,), "zeros"),
                (f"{g}.attn_out.w", (d, d), "zeros"),
                (f"{g}.attn_out.b", (d,), "zeros"),
                (f"{g}.norm2.w", (d,), "ones"),
                (f"{g}.norm2.b", (d,), "zeros"),
                (f"{g}.ffn.w1", (d, f), "fan_in"),
                (f"{g}.ffn.b1", (f,), "zeros"),
                (f"{g}.ffn.w2", (f, d), "zeros"),
                (f"{g}.ffn.b2", (d,), "zeros"),
            ]
    return spec


def group_of(name: str) -> str:
    """Parameter name -> freeze-group name (strip the leaf)."""
    return name.rsplit(".", 1)[0]


def group_map(cfg: ModelConfig) -> dict[str, list[str]]:
    groups: dict[str, list[str]] = {}
    for name, _, _ in param_spec(cfg):
        groups.setdefault(group_of(name), []).append(name)
    return groups


def param_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape, _ in param_spec(cfg))


@dataclass
class ModelState:
    cfg: ModelConfig
    params: dict[str, torch.Tensor]
    ema: dict[str, torch.Tensor]
    frozen: frozenset[str] = frozenset()
    step: int = 0

    def trainable_names(self) -> list[str]:
        return [n for n in self.params if group_of(n) not in self.frozen]


def _init_array(rng: np.random.Generator, shape, kind: str) -> np.ndarray:
    if kind == "zeros":
        return np.zeros(shape)
    if kind == "ones":
        return np.ones(shape)
    fan_in = shape[0] if len(shape) > 1 else shape[0]
    a = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-a, a, size=shape)


def perturb_params(state: ModelState, scale: float = 0.05, seed: int = 0) -> None:
    """Add seeded gaussian noise to every parameter in place. Gradient-path
    and equivalence checks use this to leave the measure-zero init point
    (residual output projections start at exactly zero, where several
    gradients vanish identically)."""
    with torch.no_grad():
        for name in sorted(state.params):
            rng = np.random.default_rng(wg.mix64(seed, 0x9E27, zlib.crc32(name.encode())))
            noise = rng.standard_normal(state.params[name].shape) * scale
            state.params[name] += torch.tensor(noise, dtype=state.cfg.torch_dtype)


def init_model(cfg: ModelConfig, seed: int) -> ModelState:
    """Deterministic init: each parameter gets its own numpy stream keyed by
    (seed, crc32(name)), so the inventory order can change without silently
    changing any tensor."""
    params: dict[str, torch.Tensor] = {}
    for name, shape, kind in param_spec(cfg):
        rng = np.random.default_rng(wg.mix64(seed, zlib.crc32(name.encode())))
        arr = _init_array(rng, shape, kind)
        params[name] = torch.tensor(arr, dtype=cfg.torch_dtype, requires_grad=True)
    ema = {n: p.detach().clone() for n, p in params.items()}
    return ModelState(cfg=cfg, params=params, ema=ema)


def resize_metaqueries(state: ModelState, n: int, seed: int) -> ModelState:
    """New state with a freshly initialized metaquery table of n rows; every
    other parameter is copied. Used by the ablation over metaquery count,
    where checkpoints trained at one table size seed runs at another."""
    cfg = replace(state.cfg, num_metaqueries=n)
    fresh = init_model(cfg, seed)
    with torch.no_grad():
        for name in fresh.params:
            if name == "mq.table.w":
                continue
            fresh.params[name].copy_(state.params[name])
            fresh.ema[name].copy_(state.ema[name])
    fresh.frozen = state.frozen
    fresh.step = state.step
    return fresh


# ---------------------------------------------------------------------------
# forward

_TIME_FREQS = np.exp(np.linspace(0.0, np.log(200.0), 16))


def _time_features(t: torch.Tensor) -> torch.Tensor:
    freqs = torch.tensor(_TIME_FREQS, dtype=t.dtype)
    ang = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


def _layernorm(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    mu = x.mean(dim=-1, keepdim=True)
    var = x.var(dim=-1, unbiased=False, keepdim=True)
    return (x - mu) / torch.sqrt(var + LN_EPS) * w + b


@dataclass
class BatchOutputs:
    """Gathered head outputs over a batch. Row order is (sample, position)
    lexicographic; *_sample_id maps each row back to its sample index."""

    vel_pred: torch.Tensor  # (n_gen_rows, d_latent_token)
    vel_target: torch.Tensor
    gen_sample_id: torch.Tensor
    cap_logits: torch.Tensor  # (n_sup_rows, vocab) at supervised positions
    cap_targets: torch.Tensor
    cap_sample_id: torch.Tensor
    mq_hidden: torch.Tensor  # (n_mq_rows, d_model), supervised samples only
    vision_targets: torch.Tensor  # (n_mq_rows, d_und_feature), detached
    mq_sample_id: torch.Tensor
    hidden: list[torch.Tensor] | None  # (B, Lmax, d) per depth if requested
    layouts: list[pk.SegmentLayout]


@dataclass
class ForwardOutputs:
    """Single-sample view: heads only where their segment exists."""

    velocity: torch.Tensor  # (n_gen, d_latent_token)
    caption_logits: torch.Tensor  # (n_supervised, vocab)
    caption_targets: torch.Tensor
    metaquery_hidden: torch.Tensor  # (N, d_model) or (0, d_model)
    vision_targets: torch.Tensor | None  # (N, d_und_feature), detached
    hidden: list[torch.Tensor] | None


def encode_und_image(
    state: ModelState, patches: np.ndarray, params: dict | None = None
) -> torch.Tensor:
    """Clean pixel patches (16, 48) -> understanding features (16, d_und)."""
    p = state.params if params is None else params
    x = torch.tensor(patches, dtype=state.cfg.torch_dtype)
    return x @ p["enc.patch.w"] + p["enc.patch.b"]


def forward_batch(
    state: ModelState,
    samples: list[pk.PackedSample],
    params: dict | None = None,
    want_hidden: bool = False,
) -> BatchOutputs:
    cfg = state.cfg
    p = state.params if params is None else params
    dt = cfg.torch_dtype
    bsz = len(samples)
    if bsz == 0:
        raise ValueError("empty batch")
    lmax = max(s.layout.length for s in samples)
    if lmax > cfg.max_seq_len:
        raise ValueError(f"sequence length {lmax} exceeds max_seq_len {cfg.max_seq_len}")

    tokens = np.zeros((bsz, lmax), dtype=np.int64)  # pad id 0
    pos_ids = np.zeros((bsz, lmax), dtype=np.int64)
    kind_ids = np.zeros((bsz, lmax), dtype=np.int64)
    text_rows = np.zeros((bsz, lmax), dtype=bool)
    und_rows = np.zeros((bsz, lmax), dtype=bool)
    gen_rows = np.zeros((bsz, lmax), dtype=bool)
    mq_rows = np.zeros((bsz, lmax), dtype=bool)
    sup_rows = np.zeros((bsz, lmax), dtype=bool)
    attn = np.zeros((bsz, lmax, lmax), dtype=bool)
    attn[:, np.arange(lmax), np.arange(lmax)] = True  # pad rows self-attend
    t_vals = np.zeros(bsz)

    gen_x, und_x, tgt_x, vel_t, cap_t = [], [], [], [], []
    gen_sid, cap_sid, mq_sid = [], [], []
    mq_tgt_idx: list[tuple[int, int]] = []  # (index into tgt_x, patch index)
    for b, s in enumerate(samples):
        n = s.layout.length
        tokens[b, :n] = s.token_ids
        attn[b, :n, :n] = s.mask
        t_vals[b] = s.t
        for seg in s.layout.segments:
            sl = slice(seg.start, seg.stop)
            pos_ids[b, sl] = np.arange(seg.length)
            kind_ids[b, sl] = pk.SEGMENT_KINDS.index(seg.kind)
            if seg.kind in (pk.SEG_COND, pk.SEG_SUP):
                text_rows[b, sl] = True
            elif seg.kind == pk.SEG_UND:
                und_rows[b, sl] = True
            elif seg.kind == pk.SEG_MQ:
                if seg.length > cfg.num_metaqueries:
                    raise ValueError(
                        f"sample has {seg.length} metaqueries, model table holds "
                        f"{cfg.num_metaqueries}"
                    )
                mq_rows[b, sl] = True
            else:
                gen_rows[b, sl] = True
            if seg.kind == pk.SEG_SUP:
                sup_rows[b, sl] = s.caption_targets[sl] >= 0
        if s.gen_tokens.shape[0]:
            gen_x.append(s.gen_tokens)
            vel_t.append(s.velocity_target)
            gen_sid.extend([b] * s.gen_tokens.shape[0])
        if s.und_patches is not None:
            und_x.append(s.und_patches)
        n_sup = int(sup_rows[b].sum())
        if n_sup:
            cap_t.append(s.caption_targets[sup_rows[b, :n]])
            cap_sid.extend([b] * n_sup)
        mq = s.layout.find(pk.SEG_MQ)
        if mq is not None and s.target_patches is not None:
            tgt_x.append(s.target_patches)
            mq_sid.extend([b] * mq.length)
            mq_tgt_idx.extend(
                (len(tgt_x) - 1, j % wg.N_PATCHES) for j in range(mq.length)
            )
        elif mq is not None:
            mq_rows[b, mq.start : mq.stop] = False  # unsupervised mq: skip

    tokens_t = torch.from_numpy(tokens)
    mask_t = torch.from_numpy(attn)
    expert_gen = torch.from_numpy(gen_rows)

    h = torch.zeros((bsz, lmax, cfg.d_model), dtype=dt)
    tr = torch.from_numpy(text_rows)
    h = torch.where(tr[..., None], p["embed.tok.w"][tokens_t], h)
    if und_x:
        feats = torch.tensor(np.concatenate(und_x), dtype=dt) @ p["enc.patch.w"]
        feats = feats + p["enc.patch.b"]
        h = h.masked_scatter(
            torch.from_numpy(und_rows)[..., None],
            feats @ p["adapt.und_in.w"] + p["adapt.und_in.b"],
        )
    if gen_x:
        gx = torch.tensor(np.concatenate(gen_x), dtype=dt)
        h = h.masked_scatter(
            expert_gen[..., None], gx @ p["adapt.gen_in.w"] + p["adapt.gen_in.b"]
        )
        # timestep conditioning enters through the gen stream only
        tf = _time_features(torch.tensor(t_vals, dtype=dt))
        temb = F.gelu(tf @ p["time.mlp.w1"] + p["time.mlp.b1"]) @ p["time.mlp.w2"]
        temb = temb + p["time.mlp.b2"]
        h = h + temb[:, None, :] * expert_gen[..., None].to(dt)
    if mq_rows.any():
        mq_r = torch.from_numpy(mq_rows)
        mq_pos = np.where(mq_rows, pos_ids, 0)  # clamp: table is only N rows
        h = torch.where(mq_r[..., None], p["mq.table.w"][torch.from_numpy(mq_pos)], h)
    h = h + p["embed.pos.w"][torch.from_numpy(pos_ids)]
    h = h + p["embed.seg.w"][torch.from_numpy(kind_ids)]

    hidden = [h] if want_hidden else None
    dh = cfg.d_model // cfg.n_heads
    sel = expert_gen[..., None]

    def by_expert(x: torch.Tensor, role_leaf: str, layer: int) -> torch.Tensor:
        und = x @ p[f"layer{layer}.und.{role_leaf}.w"] + p[f"layer{layer}.und.{role_leaf}.b"]
        gen = x @ p[f"layer{layer}.gen.{role_leaf}.w"] + p[f"layer{layer}.gen.{role_leaf}.b"]
        return torch.where(sel, gen, und)

    for i in range(cfg.n_layers):
        n1u = _layernorm(h, p[f"layer{i}.und.norm1.w"], p[f"layer{i}.und.norm1.b"])
        n1g = _layernorm(h, p[f"layer{i}.gen.norm1.w"], p[f"layer{i}.gen.norm1.b"])
        n1 = torch.where(sel, n1g, n1u)
        qkv = by_expert(n1, "qkv", i)
        q, k, v = qkv.split(cfg.d_model, dim=-1)

        def heads(x):
            return x.view(bsz, lmax, cfg.n_heads, dh).transpose(1, 2)

        scores = heads(q) @ heads(k).transpose(-1, -2) / math.sqrt(dh)
        scores = scores.masked_fill(~mask_t[:, None], float("-inf"))
        ctx = torch.softmax(scores, dim=-1) @ heads(v)
        ctx = ctx.transpose(1, 2).reshape(bsz, lmax, cfg.d_model)
        h = h + by_expert(ctx, "attn_out", i)

        n2u = _layernorm(h, p[f"layer{i}.und.norm2.w"], p[f"layer{i}.und.norm2.b"])
        n2g = _layernorm(h, p[f"layer{i}.gen.norm2.w"], p[f"layer{i}.gen.norm2.b"])
        n2 = torch.where(sel, n2g, n2u)
        mid_u = F.gelu(n2 @ p[f"layer{i}.und.ffn.w1"] + p[f"layer{i}.und.ffn.b1"])
        mid_g = F.gelu(n2 @ p[f"layer{i}.gen.ffn.w1"] + p[f"layer{i}.gen.ffn.b1"])
        out_u = mid_u @ p[f"layer{i}.und.ffn.w2"] + p[f"layer{i}.und.ffn.b2"]
        out_g = mid_g @ p[f"layer{i}.gen.ffn.w2"] + p[f"layer{i}.gen.ffn.b2"]
        h = h + torch.where(sel, out_g, out_u)
        if want_hidden:
            hidden.append(h)

    gen_flat = h[expert_gen]
    vel_pred = gen_flat @ p["head.vel.w"] + p["head.vel.b"]
    sup_flat = h[torch.from_numpy(sup_rows)]
    cap_logits = sup_flat @ p["head.lm.w"] + p["head.lm.b"]
    mq_flat = h[torch.from_numpy(mq_rows)]
    # metaquery j is supervised by the clean-image patch feature (j mod 16)
    # of its own sample, computed with the (frozen) encoder and detached
    with torch.no_grad():
        if tgt_x:
            tgt = torch.tensor(np.concatenate(tgt_x), dtype=dt)
            feats = (tgt @ p["enc.patch.w"] + p["enc.patch.b"]).detach()
            per_sample = feats.view(len(tgt_x), wg.N_PATCHES, cfg.d_und_feature)
            a = torch.tensor([i for i, _ in mq_tgt_idx], dtype=torch.long)
            b_ = torch.tensor([j for _, j in mq_tgt_idx], dtype=torch.long)
            vision_targets = per_sample[a, b_]
        else:
            vision_targets = torch.zeros((0, cfg.d_und_feature), dtype=dt)

    return BatchOutputs(
        vel_pred=vel_pred,
        vel_target=torch.tensor(
            np.concatenate(vel_t) if vel_t else np.zeros((0, cfg.d_latent_token)), dtype=dt
        ),
        gen_sample_id=torch.tensor(gen_sid, dtype=torch.long),
        cap_logits=cap_logits,
        cap_targets=torch.tensor(
            np.concatenate(cap_t) if cap_t else np.zeros(0, dtype=np.int64)
        ),
        cap_sample_id=torch.tensor(cap_sid, dtype=torch.long),
        mq_hidden=mq_flat,
        vision_targets=vision_targets,
        mq_sample_id=torch.tensor(mq_sid, dtype=torch.long),
        hidden=hidden,
        layouts=[s.layout for s in samples],
    )


def forward(
    state: ModelState,
    sample: pk.PackedSample,
    params: dict | None = None,
    want_hidden: bool = False,
) -> ForwardOutputs:
    out = forward_batch(state, [sample], params=params, want_hidden=want_hidden)
    return ForwardOutputs(
        velocity=out.vel_pred,
        caption_logits=out.cap_logits,
        caption_targets=out.cap_targets,
        metaquery_hidden=out.mq_hidden,
        vision_targets=out.vision_targets if out.mq_hidden.shape[0] else None,
        hidden=[t[0] for t in out.hidden] if want_hidden else None,
    )


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(state: ModelState, dirpath) -> None:
    os.makedirs(dirpath, exist_ok=True)
    spec = param_spec(state.cfg)
    entries = []
    offset = 0
    chunks = []
    for name, shape, _ in spec:
        t = state.params[name].detach().to(torch.float32).numpy()
        if tuple(t.shape) != tuple(shape):
            raise ValueError(f"parameter {name} has shape {t.shape}, expected {shape}")
        chunks.append(t.astype("<f4").tobytes())
        entries.append({"name": name, "shape": list(shape), "offset": offset})
        offset += t.size
    ema_offset = offset
    for name, shape, _ in spec:
        chunks.append(state.ema[name].detach().to(torch.float32).numpy().astype("<f4").tobytes())
        offset += int(np.prod(shape))
    manifest = {
        "format": CKPT_FORMAT,
        "dtype": "float32",
        "byte_order": "little",
        "step": state.step,
        "frozen": sorted(state.frozen),
        "model": asdict(state.cfg),
        "n_elements": offset,
        "ema_offset": ema_offset,
        "params": entries,
    }
    blob_tmp = os.path.join(dirpath, CKPT_BLOB + ".tmp")
    with open(blob_tmp, "wb") as f:
        f.write(b"".join(chunks))
    os.replace(blob_tmp, os.path.join(dirpath, CKPT_BLOB))
    man_tmp = os.path.join(dirpath, CKPT_MANIFEST + ".tmp")
    with open(man_tmp, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    os.replace(man_tmp, os.path.join(dirpath, CKPT_MANIFEST))


class CheckpointError(ValueError):
    pass


def load_checkpoint(dirpath, expect_cfg: ModelConfig | None = None) -> ModelState:
    man_path = os.path.join(dirpath, CKPT_MANIFEST)
    blob_path = os.path.join(dirpath, CKPT_BLOB)
    if not os.path.exists(man_path) or not os.path.exists(blob_path):
        raise CheckpointError(f"no checkpoint at {dirpath}")
    with open(man_path) as f:
        manifest = json.load(f)
    if manifest.get("format") != CKPT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}")
    cfg = ModelConfig(**manifest["model"])
    if expect_cfg is not None and cfg != expect_cfg:
        diffs = [
            f"{k}: checkpoint={getattr(cfg, k)} expected={getattr(expect_cfg, k)}"
            for k in asdict(cfg)
            if getattr(cfg, k) != getattr(expect_cfg, k)
        ]
        raise CheckpointError("checkpoint/config mismatch: " + "; ".join(diffs))
    spec = param_spec(cfg)
    if [e["name"] for e in manifest["params"]] != [n for n, _, _ in spec]:
        raise CheckpointError("manifest parameter inventory does not match the model")
    for e, (_, shape, _) in zip(manifest["params"], spec):
        if tuple(e["shape"]) != tuple(shape):
            raise CheckpointError(
                f"parameter {e['name']}: manifest shape {e['shape']} != expected {list(shape)}"
            )
    blob = np.fromfile(blob_path, dtype="<f4")
    if blob.size != manifest["n_elements"]:
        raise CheckpointError(
            f"blob has {blob.size} elements, manifest says {manifest['n_elements']} (truncated?)"
        )
    params: dict[str, torch.Tensor] = {}
    ema: dict[str, torch.Tensor] = {}
    ema_offset = manifest["ema_offset"]
    for e, (name, shape, _) in zip(manifest["params"], spec):
        n = int(np.prod(shape))
        raw = blob[e["offset"] : e["offset"] + n].reshape(shape)
        params[name] = torch.tensor(raw, dtype=cfg.torch_dtype, requires_grad=True)
        raw_e = blob[ema_offset + e["offset"] : ema_offset + e["offset"] + n].reshape(shape)
        ema[name] = torch.tensor(raw_e, dtype=cfg.torch_dtype)
    return ModelState(
        cfg=cfg,
        params=params,
        ema=ema,
        frozen=frozenset(manifest["frozen"]),
        step=int(manifest["step"]),
    )
