"""Procedural micro-world: scenes, pixels, latents, captions, edits, tokens.

A scene is 1..3 colored shapes on a 3x3 cell grid, rendered to a 16x16 RGB
image on a white background (cells are 5x5 px, row/col 15 stay white). The
latent codec is linear (2x2 average pool + fixed orthonormal channel mix +
per-channel affine normalization), and shapes never overlap, so decoding is
exact: a nearest-template probe over each cell's interior 2x2 latent block
recovers the scene from any clean latent.

Text lives in a closed 64-token vocabulary (8 specials + 56 words). Canonical
captions come from two fixed templates; the paraphrase bank keeps semantics
but swaps templates, position names (compass), and color/shape synonyms, so
a paraphrase shares few surface tokens with the canonical caption. Edits are
recolor / move / add / remove with instruction text that disambiguates the
referent only as much as needed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

# ---------------------------------------------------------------------------
# enums and geometry

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
COLOR_RGB = np.array(
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0]]
)

GRID = 3  # 3x3 cells
CELL_PX = 5
IMG_PX = 16  # row/col 15 are white padding
LATENT_CH = 4
LATENT_HW = 8
N_GEN_TOKENS = 16  # 4x4 blocks of the 8x8 latent
D_LATENT_TOKEN = LATENT_CH * 2 * 2
N_PATCHES = 16  # 4x4 pixel patches of 4x4 px
D_PATCH = 3 * 4 * 4

# interior latent rows/cols per cell band: pooled rows untouched by neighbours
_INTERIOR = ((0, 1), (3, 4), (5, 6))


def _shape_stamp(shape: int) -> np.ndarray:
    """5x5 boolean footprint. Chosen so every shape/color pair stays
    distinguishable after 2x2 pooling restricted to any 4x4 sub-window."""
    r, c = np.mgrid[0:CELL_PX, 0:CELL_PX]
    if SHAPES[shape] == "circle":
        return np.abs(r - 2) + np.abs(c - 2) <= 2
    if SHAPES[shape] == "square":
        return np.ones((CELL_PX, CELL_PX), dtype=bool)
    return c <= r  # triangle: lower-left half, diagonal included


_STAMPS = [_shape_stamp(s) for s in range(len(SHAPES))]


@dataclass(frozen=True, order=True)
class Object:
    cell: int  # 0..8, row-major
    shape: int  # index into SHAPES
    color: int  # index into COLORS

    def __post_init__(self):
        if not (0 <= self.cell < GRID * GRID):
            raise ValueError(f"cell out of range: {self.cell}")
        if not (0 <= self.shape < len(SHAPES)):
            raise ValueError(f"shape out of range: {self.shape}")
        if not (0 <= self.color < len(COLORS)):
            raise ValueError(f"color out of range: {self.color}")


@dataclass(frozen=True)
class Scene:
    objects: tuple[Object, ...]

    def __post_init__(self):
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise ValueError("objects must occupy distinct cells")
        if list(cells) != sorted(cells):
            raise ValueError("objects must be sorted by cell (normal form)")
        if len(self.objects) > GRID * GRID:
            raise ValueError("too many objects")

    def cell_map(self) -> dict[int, Object]:
        return {o.cell: o for o in self.objects}


def make_scene(objects: Iterable[Object]) -> Scene:
    """Normal-form constructor: sorts by cell."""
    return Scene(tuple(sorted(objects, key=lambda o: o.cell)))


def validate_scene(scene: Scene, strict: bool = False) -> None:
    """Structural checks run in __post_init__; strict adds the sampler's
    1..3 object count contract."""
    if strict and not (1 <= len(scene.objects) <= 3):
        raise ValueError(f"sampled scenes carry 1..3 objects, got {len(scene.objects)}")


# ---------------------------------------------------------------------------
# deterministic seed plumbing

_MASK64 = (1 << 64) - 1


def mix64(*parts: int) -> int:
    """splitmix64-style hash of integer parts onto [0, 2^63).

    Used everywhere a derived stream seed is needed so that (run_seed, step,
    index) -> seed is stable across platforms and runs.
    """
    h = 0x9E3779B97F4A7C15
    for p in parts:
        h = (h ^ (p & _MASK64)) * 0xBF58476D1CE4E5B9 & _MASK64
        h ^= h >> 27
        h = h * 0x94D049BB133111EB & _MASK64
        h ^= h >> 31
    return h >> 1


# ---------------------------------------------------------------------------
# sampling

def sample_scene(seed: int, max_objects: int = 3) -> Scene:
    if not (1 <= max_objects <= GRID * GRID):
        raise ValueError("max_objects must be in 1..9")
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, max_objects + 1))
    cells = sorted(int(c) for c in rng.choice(GRID * GRID, size=n, replace=False))
    shapes = rng.integers(0, len(SHAPES), size=n)
    colors = rng.integers(0, len(COLORS), size=n)
    return Scene(tuple(Object(cells[i], int(shapes[i]), int(colors[i])) for i in range(n)))


# ---------------------------------------------------------------------------
# rendering and the linear codec

def render_scene(scene: Scene) -> np.ndarray:
    """(3, 16, 16) float64 in [0, 1], white background."""
    img = np.ones((3, IMG_PX, IMG_PX))
    for o in scene.objects:
        r0, c0 = CELL_PX * (o.cell // GRID), CELL_PX * (o.cell % GRID)
        stamp = _STAMPS[o.shape]
        block = img[:, r0 : r0 + CELL_PX, c0 : c0 + CELL_PX]
        block[:, stamp] = COLOR_RGB[o.color][:, None]
    return img


def _channel_map() -> np.ndarray:
    # first three columns of the normalized 4x4 Hadamard matrix: orthonormal,
    # so the 3->4 channel lift is injective and exactly invertible
    h = np.array(
        [[1, 1, 1, 1], [1, -1, 1, -1], [1, 1, -1, -1], [1, -1, -1, 1]], dtype=np.float64
    ) / 2.0
    return h[:, :3]


_Q = _channel_map()
_NORM_CACHE: tuple[np.ndarray, np.ndarray] | None = None


def _pool_and_mix(img: np.ndarray) -> np.ndarray:
    pooled = img.reshape(3, LATENT_HW, 2, LATENT_HW, 2).mean(axis=(2, 4))
    return np.einsum("kc,chw->khw", _Q, pooled)


def _norm_constants() -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std computed once from the 108 single-object scenes
    plus the empty scene. Fixed data, so the codec is a constant of the world."""
    global _NORM_CACHE
    if _NORM_CACHE is None:
        lats = [_pool_and_mix(render_scene(Scene(())))]
        for cell in range(GRID * GRID):
            for shape in range(len(SHAPES)):
                for color in range(len(COLORS)):
                    scene = Scene((Object(cell, shape, color),))
                    lats.append(_pool_and_mix(render_scene(scene)))
        stack = np.stack(lats)  # (109, 4, 8, 8)
        mu = stack.mean(axis=(0, 2, 3))
        sigma = stack.std(axis=(0, 2, 3))
        assert sigma.min() > 1e-6
        _NORM_CACHE = (mu, sigma)
    return _NORM_CACHE


def encode_latent(img: np.ndarray) -> np.ndarray:
    """(3, 16, 16) pixels -> (4, 8, 8) normalized latent. Linear + affine."""
    if img.shape != (3, IMG_PX, IMG_PX):
        raise ValueError(f"bad image shape {img.shape}")
    mu, sigma = _norm_constants()
    return (_pool_and_mix(img) - mu[:, None, None]) / sigma[:, None, None]


def scene_latent(scene: Scene) -> np.ndarray:
    return encode_latent(render_scene(scene))


def latent_tokens(lat: np.ndarray) -> np.ndarray:
    """(4, 8, 8) -> (16, 16): row-major 2x2 blocks, each flattened (ch, r, c)."""
    if lat.shape != (LATENT_CH, LATENT_HW, LATENT_HW):
        raise ValueError(f"bad latent shape {lat.shape}")
    t = lat.reshape(LATENT_CH, 4, 2, 4, 2)
    return t.transpose(1, 3, 0, 2, 4).reshape(16, D_LATENT_TOKEN)


def tokens_to_latent(tok: np.ndarray) -> np.ndarray:
    if tok.shape != (N_GEN_TOKENS, D_LATENT_TOKEN):
        raise ValueError(f"bad token shape {tok.shape}")
    t = tok.reshape(4, 4, LATENT_CH, 2, 2).transpose(2, 0, 3, 1, 4)
    return t.reshape(LATENT_CH, LATENT_HW, LATENT_HW)


def image_patches(img: np.ndarray) -> np.ndarray:
    """(3, 16, 16) -> (16, 48): row-major 4x4 pixel patches for the
    understanding encoder; flattened (ch, r, c)."""
    if img.shape != (3, IMG_PX, IMG_PX):
        raise ValueError(f"bad image shape {img.shape}")
    p = img.reshape(3, 4, 4, 4, 4)
    return p.transpose(1, 3, 0, 2, 4).reshape(N_PATCHES, D_PATCH)


# ---------------------------------------------------------------------------
# exact decoding probe

UNKNOWN = "unknown"

_TEMPLATE_CACHE: tuple[list[list[tuple[object, np.ndarray]]], float] | None = None


def _cell_block(lat: np.ndarray, cell: int) -> np.ndarray:
    rows = _INTERIOR[cell // GRID]
    cols = _INTERIOR[cell % GRID]
    return lat[:, rows, :][:, :, cols].reshape(-1)


def _probe_templates() -> tuple[list[list[tuple[object, np.ndarray]]], float]:
    """Per-cell table of 13 residual templates (empty + 12 shape/color pairs)
    and the acceptance radius: half the minimum pairwise template distance."""
    global _TEMPLATE_CACHE
    if _TEMPLATE_CACHE is None:
        white = scene_latent(Scene(()))
        tables: list[list[tuple[object, np.ndarray]]] = []
        min_gap = np.inf
        for cell in range(GRID * GRID):
            entries: list[tuple[object, np.ndarray]] = [(None, np.zeros(16))]
            for shape in range(len(SHAPES)):
                for color in range(len(COLORS)):
                    lat = scene_latent(Scene((Object(cell, shape, color),)))
                    entries.append(((shape, color), _cell_block(lat - white, cell)))
            vecs = np.stack([v for _, v in entries])
            d = np.linalg.norm(vecs[:, None] - vecs[None, :], axis=-1)
            np.fill_diagonal(d, np.inf)
            min_gap = min(min_gap, float(d.min()))
            tables.append(entries)
        _TEMPLATE_CACHE = (tables, 0.5 * min_gap)
    return _TEMPLATE_CACHE


def probe_threshold() -> float:
    return _probe_templates()[1]


@dataclass(frozen=True)
class ProbeResult:
    """Decoded scene plus the cells whose content matched no template."""

    objects: tuple[Object, ...]
    unknown_cells: tuple[int, ...]

    def scene(self) -> Scene:
        if self.unknown_cells:
            raise ValueError(f"unknown content in cells {self.unknown_cells}")
        return Scene(self.objects)

    def matches(self, scene: Scene) -> bool:
        return not self.unknown_cells and self.objects == scene.objects


def decode_probe(lat: np.ndarray) -> ProbeResult:
    """Nearest-template decode of each cell's interior block. Exact on clean
    latents; returns unknown markers when content sits outside every
    template's acceptance radius."""
    tables, tau = _probe_templates()
    residual = lat - scene_latent(Scene(()))
    objects: list[Object] = []
    unknown: list[int] = []
    for cell in range(GRID * GRID):
        block = _cell_block(residual, cell)
        best_label, best_d = None, np.inf
        for label, vec in tables[cell]:
            d = float(np.linalg.norm(block - vec))
            if d < best_d:
                best_label, best_d = label, d
        if best_d > tau:
            unknown.append(cell)
        elif best_label is not None:
            shape, color = best_label
            objects.append(Object(cell, shape, color))
    return ProbeResult(tuple(objects), tuple(unknown))


# ---------------------------------------------------------------------------
# vocabulary and tokenizer

PAD, BOS, EOS, BOT, EOT, BOI, EOI, QRY = range(8)
SPECIALS = ("<pad>", "<bos>", "<eos>", "<bot>", "<eot>", "<boi>", "<eoi>", "<qry>")

_WORDS = (
    # glue
    "a", "an", "the", "in", "at", "on", "and", "is", "there", "to", "with",
    "holds", "shows", "sits", "picture", "corner", "spot", "canvas",
    # colors, then their paraphrase synonyms (same order)
    "red", "green", "blue", "yellow", "scarlet", "emerald", "azure", "golden",
    # shapes, then their paraphrase synonyms (same order)
    "circle", "square", "triangle", "disc", "box", "wedge",
    # canonical position words
    "top", "bottom", "left", "right", "middle", "center",
    # compass position words (paraphrase bank)
    "north", "south", "east", "west",
    # edit verbs
    "recolor", "move", "add", "remove",
    # empty-scene words
    "empty", "blank", "nothing",
    # extra paraphrase verbs/nouns
    "appears", "lies", "rests", "drawn", "placed", "zone", "region",
)

VOCAB = SPECIALS + _WORDS
assert len(VOCAB) == 64, len(VOCAB)
VOCAB_SIZE = len(VOCAB)
_WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}

COLOR_SYN = {"red": "scarlet", "green": "emerald", "blue": "azure", "yellow": "golden"}
SHAPE_SYN = {"circle": "disc", "square": "box", "triangle": "wedge"}
_COLOR_OF_WORD = {w: i for i, w in enumerate(COLORS)}
_COLOR_OF_WORD.update({COLOR_SYN[c]: i for i, c in enumerate(COLORS)})
_SHAPE_OF_WORD = {w: i for i, w in enumerate(SHAPES)}
_SHAPE_OF_WORD.update({SHAPE_SYN[s]: i for i, s in enumerate(SHAPES)})

CELL_NAMES = (
    "top left", "top middle", "top right",
    "middle left", "center", "middle right",
    "bottom left", "bottom middle", "bottom right",
)
ALT_CELL_NAMES = (
    "north west", "north", "north east",
    "west", "middle", "east",
    "south west", "south", "south east",
)
_CELL_OF_PHRASE = {p: i for i, p in enumerate(CELL_NAMES)}
_CELL_OF_PHRASE.update({p: i for i, p in enumerate(ALT_CELL_NAMES)})


def tokenize(text: str) -> list[int]:
    ids = []
    for w in text.split():
        if w not in _WORD_TO_ID:
            raise ValueError(f"unknown token {w!r}")
        ids.append(_WORD_TO_ID[w])
    return ids


def detokenize(ids: Iterable[int]) -> str:
    out = []
    for i in ids:
        if not (0 <= i < VOCAB_SIZE):
            raise ValueError(f"token id out of range: {i}")
        out.append(VOCAB[i])
    return " ".join(out)


def write_vocab(path) -> None:
    with open(path, "w") as f:
        for w in VOCAB:
            f.write(w + "\n")


def read_vocab(path) -> tuple[str, ...]:
    with open(path) as f:
        words = tuple(line.rstrip("\n") for line in f)
    if words != VOCAB:
        raise ValueError("vocab file does not match the built-in vocabulary")
    return words


# ---------------------------------------------------------------------------
# captions

N_CAPTION_TEMPLATES = 2
EMPTY_CAPTIONS = ("an empty picture", "the picture is blank")

_PARA_STYLES = (
    "the {p} holds a {c} {s}",
    "a {c} {s} appears at the {p}",
    "the {p} zone shows a {c} {s}",
    "a {c} {s} lies in the {p}",
)
_PARA_EMPTY = (
    "the canvas is blank",
    "nothing appears",
    "an empty canvas",
    "the picture shows nothing",
)


def caption_scene(scene: Scene, template: int = 0) -> list[int]:
    """Canonical caption tokens (no specials). Two fixed templates."""
    if template not in (0, 1):
        raise ValueError(f"template must be 0 or 1, got {template}")
    if not scene.objects:
        return tokenize(EMPTY_CAPTIONS[template])
    parts = []
    for o in scene.objects:
        c, s, p = COLORS[o.color], SHAPES[o.shape], CELL_NAMES[o.cell]
        if template == 0:
            parts.append(f"a {c} {s} in the {p}")
        else:
            parts.append(f"there is a {c} {s} at the {p}")
    return tokenize(" and ".join(parts))


def paraphrase_caption(scene: Scene, seed: int) -> list[int]:
    """Same semantics, different surface: alternate templates, compass
    position names, and a per-object coin flip between each color/shape word
    and its synonym. The surface choices are a pure function of the seed, so
    they carry no information about anything else in a training sample."""
    rng = np.random.default_rng(mix64(seed, 0xA11))
    if not scene.objects:
        return tokenize(_PARA_EMPTY[int(rng.integers(len(_PARA_EMPTY)))])
    style = _PARA_STYLES[int(rng.integers(len(_PARA_STYLES)))]
    parts = []
    for o in scene.objects:
        c = COLORS[o.color]
        s = SHAPES[o.shape]
        if rng.integers(2):
            c = COLOR_SYN[c]
        if rng.integers(2):
            s = SHAPE_SYN[s]
        parts.append(style.format(c=c, s=s, p=ALT_CELL_NAMES[o.cell]))
    return tokenize(" and ".join(parts))


def parse_caption(ids: Iterable[int]) -> Scene:
    """Semantic decode shared by every caption surface form. Splits clauses
    on 'and', then pulls the color word, shape word, and longest-match
    position phrase out of each clause."""
    words = detokenize(ids).split()
    if any(w in SPECIALS for w in words):
        raise ValueError("parse_caption expects content tokens only")
    clauses: list[list[str]] = [[]]
    for w in words:
        if w == "and":
            clauses.append([])
        else:
            clauses[-1].append(w)
    objects = []
    for clause in clauses:
        color = next((_COLOR_OF_WORD[w] for w in clause if w in _COLOR_OF_WORD), None)
        shape = next((_SHAPE_OF_WORD[w] for w in clause if w in _SHAPE_OF_WORD), None)
        cell = None
        for i in range(len(clause)):
            for ln in (2, 1):
                phrase = " ".join(clause[i : i + ln])
                if phrase in _CELL_OF_PHRASE:
                    cell = _CELL_OF_PHRASE[phrase]
                    break
            if cell is not None:
                break
        if color is not None and shape is not None and cell is not None:
            objects.append(Object(cell, shape, color))
    return make_scene(objects)


# ---------------------------------------------------------------------------
# edits

EDIT_OPS = ("recolor", "move", "add", "remove")


@dataclass(frozen=True)
class EditPair:
    source: Scene
    target: Scene
    op: str
    cell: int  # recolor/remove/add cell; move: source cell
    dest: int | None = None  # move only
    color: int | None = None  # recolor: new color; add: color
    shape: int | None = None  # add only

    def __post_init__(self):
        if self.op not in EDIT_OPS:
            raise ValueError(f"unknown op {self.op!r}")


def edited_cells(pair: EditPair) -> tuple[int, ...]:
    if pair.op == "move":
        return (pair.cell, pair.dest)
    return (pair.cell,)


def apply_edit(scene: Scene, op: str, cell: int, dest=None, color=None, shape=None) -> Scene:
    by_cell = scene.cell_map()
    if op == "recolor":
        o = by_cell[cell]
        by_cell[cell] = Object(cell, o.shape, color)
    elif op == "move":
        o = by_cell.pop(cell)
        if dest in by_cell:
            raise ValueError("move destination occupied")
        by_cell[dest] = Object(dest, o.shape, o.color)
    elif op == "add":
        if cell in by_cell:
            raise ValueError("add cell occupied")
        by_cell[cell] = Object(cell, shape, color)
    elif op == "remove":
        del by_cell[cell]
    else:
        raise ValueError(f"unknown op {op!r}")
    return make_scene(by_cell.values())


def sample_edit(scene: Scene, seed: int) -> EditPair:
    rng = np.random.default_rng(mix64(seed, 0xED17))
    ops = [op for op in EDIT_OPS if op != "add" or len(scene.objects) < 3]
    op = ops[int(rng.integers(len(ops)))]
    occupied = [o.cell for o in scene.objects]
    empty = [c for c in range(GRID * GRID) if c not in occupied]
    if op == "recolor":
        o = scene.objects[int(rng.integers(len(scene.objects)))]
        new = int(rng.integers(len(COLORS) - 1))
        color = new + 1 if new >= o.color else new  # uniform over colors != old
        return EditPair(scene, apply_edit(scene, op, o.cell, color=color), op, o.cell, color=color)
    if op == "move":
        o = scene.objects[int(rng.integers(len(scene.objects)))]
        dest = empty[int(rng.integers(len(empty)))]
        return EditPair(scene, apply_edit(scene, op, o.cell, dest=dest), op, o.cell, dest=dest)
    if op == "add":
        cell = empty[int(rng.integers(len(empty)))]
        shape = int(rng.integers(len(SHAPES)))
        color = int(rng.integers(len(COLORS)))
        return EditPair(
            scene, apply_edit(scene, op, cell, color=color, shape=shape), op, cell,
            color=color, shape=shape,
        )
    o = scene.objects[int(rng.integers(len(scene.objects)))]
    return EditPair(scene, apply_edit(scene, op, o.cell), op, o.cell)


def _referent(scene: Scene, obj: Object) -> str:
    """Shortest unambiguous description within the source scene."""
    shape = SHAPES[obj.shape]
    if sum(o.shape == obj.shape for o in scene.objects) == 1:
        return shape
    desc = f"{COLORS[obj.color]} {shape}"
    if sum(o.shape == obj.shape and o.color == obj.color for o in scene.objects) == 1:
        return desc
    return f"{desc} in the {CELL_NAMES[obj.cell]}"


def edit_instruction(pair: EditPair) -> list[int]:
    src = pair.source.cell_map()
    if pair.op == "recolor":
        ref = _referent(pair.source, src[pair.cell])
        return tokenize(f"recolor the {ref} to {COLORS[pair.color]}")
    if pair.op == "move":
        ref = _referent(pair.source, src[pair.cell])
        return tokenize(f"move the {ref} to the {CELL_NAMES[pair.dest]}")
    if pair.op == "add":
        return tokenize(
            f"add a {COLORS[pair.color]} {SHAPES[pair.shape]} in the {CELL_NAMES[pair.cell]}"
        )
    ref = _referent(pair.source, src[pair.cell])
    return tokenize(f"remove the {ref}")


# ---------------------------------------------------------------------------
# manifest and json forms

def scene_to_json(scene: Scene) -> dict:
    return {
        "objects": [
            {"cell": o.cell, "shape": SHAPES[o.shape], "color": COLORS[o.color]}
            for o in scene.objects
        ]
    }


def scene_from_json(d: dict) -> Scene:
    return make_scene(
        Object(o["cell"], SHAPES.index(o["shape"]), COLORS.index(o["color"]))
        for o in d["objects"]
    )


def edit_to_json(pair: EditPair) -> dict:
    d = {
        "source": scene_to_json(pair.source),
        "target": scene_to_json(pair.target),
        "op": pair.op,
        "cell": pair.cell,
    }
    if pair.dest is not None:
        d["dest"] = pair.dest
    if pair.color is not None:
        d["color"] = COLORS[pair.color]
    if pair.shape is not None:
        d["shape"] = SHAPES[pair.shape]
    return d


def edit_from_json(d: dict) -> EditPair:
    return EditPair(
        source=scene_from_json(d["source"]),
        target=scene_from_json(d["target"]),
        op=d["op"],
        cell=d["cell"],
        dest=d.get("dest"),
        color=COLORS.index(d["color"]) if "color" in d else None,
        shape=SHAPES.index(d["shape"]) if "shape" in d else None,
    )


def write_manifest(path, entries: Iterable[dict]) -> None:
    """JSONL, one entry per line: {"kind": "scene"|"edit", "seed": int, ...}.
    Latents are regenerated on load; no binary payload."""
    with open(path, "w") as f:
        for e in entries:
            f.write(json.dumps(e, sort_keys=True) + "\n")


def read_manifest(path) -> Iterator[tuple[str, int, object]]:
    """Yields (kind, seed, Scene|EditPair) tuples."""
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno}: bad json ({e.msg})") from e
            kind = d.get("kind")
            if kind == "scene":
                yield kind, int(d["seed"]), scene_from_json(d)
            elif kind == "edit":
                yield kind, int(d["seed"]), edit_from_json(d)
            else:
                raise ValueError(f"{path}:{lineno}: unknown kind {kind!r}")


def manifest_entry(kind: str, seed: int, payload) -> dict:
    if kind == "scene":
        return {"kind": "scene", "seed": seed, **scene_to_json(payload)}
    if kind == "edit":
        return {"kind": "edit", "seed": seed, **edit_to_json(payload)}
    raise ValueError(f"unknown kind {kind!r}")
