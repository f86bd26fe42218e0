"""Layered run configuration: schema defaults < stage defaults < config file
< --set flags, with per-key provenance kept for the snapshot that every run
writes next to its artifacts.

The file format is a small TOML subset -- [section] headers, `key = value`
with int/float/bool/quoted-string scalars, comments -- parsed here directly
(the interpreter this targets predates tomllib, and round-tripping provenance
comments back out needs a writer anyway, so the dependency would buy little).
"""

from __future__ import annotations

import difflib
from dataclasses import dataclass, fields

from . import model as md
from . import trainer as tr


class ConfigError(ValueError):
    pass


# schema: section -> key -> (type, default). Model and post-training entries
# pull their defaults straight off the dataclasses so the two can't drift.
def _dc_defaults(cls, names):
    by_name = {f.name: f.default for f in fields(cls)}
    return {n: (type(by_name[n]), by_name[n]) for n in names}


SCHEMA: dict[str, dict[str, tuple[type, object]]] = {
    "model": _dc_defaults(md.ModelConfig, [
        "d_model", "n_layers", "n_heads", "ffn_hidden", "d_und_feature",
        "num_metaqueries", "max_seq_len", "dtype",
    ]),
    "train": _dc_defaults(tr.TrainConfig, [
        "steps", "batch_size", "lr", "schedule", "warmup", "min_lr_frac",
        "weight_decay", "clip", "ema_ratio", "seed", "deterministic_timing",
        "ckpt_every", "log_every",
    ]),
    "uno": _dc_defaults(tr.TrainConfig, [
        "lambda1", "lambda2", "enable_language", "enable_vision", "aug",
        "unfreeze_und", "freeze_lm_head", "mask_condition_prompt",
        "metaquery_order", "sup_blocks_see_source", "gate_threshold",
        "gate_samples",
    ]),
    "data": {
        **_dc_defaults(tr.TrainConfig, [
            "max_objects", "edit_fraction", "caption_fraction", "shift",
        ]),
        "n_scenes": (int, 500),
    },
    "eval": {
        "n": (int, 100),
        "steps": (int, 32),
        "use_ema": (bool, True),
        "batch_size": (int, 50),
    },
}

# "ckpt" marks model fields adopted from a loaded checkpoint so the snapshot
# records the architecture actually run, not the schema default
ORIGINS = ("default", "file", "flag", "ckpt")


@dataclass
class ConfigValue:
    value: object
    origin: str


class Config:
    """section -> key -> ConfigValue, fully populated from SCHEMA."""

    def __init__(self):
        self.values: dict[str, dict[str, ConfigValue]] = {
            sect: {k: ConfigValue(dv, "default") for k, (_, dv) in keys.items()}
            for sect, keys in SCHEMA.items()
        }

    def get(self, section: str, key: str):
        return self.values[section][key].value

    def origin(self, section: str, key: str) -> str:
        return self.values[section][key].origin

    def set(self, section: str, key: str, value, origin: str) -> None:
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(_unknown_key_message(section, key))
        want, _ = SCHEMA[section][key]
        self.values[section][key] = ConfigValue(_coerce(section, key, value, want), origin)

    def section(self, name: str) -> dict[str, object]:
        return {k: v.value for k, v in self.values[name].items()}


def _unknown_key_message(section: str, key: str) -> str:
    path = f"{section}.{key}"
    known = [f"{s}.{k}" for s, keys in SCHEMA.items() for k in keys]
    close = difflib.get_close_matches(path, known, n=1)
    hint = f"; did you mean {close[0]!r}?" if close else ""
    if section not in SCHEMA:
        return f"unknown config section {section!r}{hint}"
    return f"unknown config key {path!r}{hint}"


def _coerce(section, key, value, want):
    if want is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if want is bool and not isinstance(value, bool):
        raise ConfigError(f"{section}.{key} expects a bool, got {value!r}")
    if want is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigError(f"{section}.{key} expects an int, got {value!r}")
    if not isinstance(value, want):
        raise ConfigError(
            f"{section}.{key} expects {want.__name__}, got {value!r}")
    return value


# ---------------------------------------------------------------------------
# file parsing

def _parse_scalar(tok: str, where: str):
    if tok == "true":
        return True
    if tok == "false":
        return False
    if len(tok) >= 2 and tok[0] == '"' and tok[-1] == '"':
        return tok[1:-1]
    try:
        return int(tok, 10)
    except ValueError:
        pass
    try:
        return float(tok)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse value {tok!r}") from None


def _strip_comment(line: str) -> str:
    out = []
    in_str = False
    for ch in line:
        if ch == '"':
            in_str = not in_str
        if ch == "#" and not in_str:
            break
        out.append(ch)
    return "".join(out)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, dict[str, object]]:
    """TOML-subset parser with line-numbered errors. Returns raw values; the
    schema check happens at overlay time so snapshots of future keys fail
    loudly rather than silently."""
    sections: dict[str, dict[str, object]] = {}
    current: str | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw).strip()
        where = f"{source}:{lineno}"
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]") or len(line) < 3:
                raise ConfigError(f"{where}: malformed section header {raw.strip()!r}")
            current = line[1:-1].strip()
            if not current:
                raise ConfigError(f"{where}: empty section name")
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value', got {raw.strip()!r}")
        if current is None:
            raise ConfigError(f"{where}: key before any [section] header")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if not key or not val:
            raise ConfigError(f"{where}: expected 'key = value', got {raw.strip()!r}")
        if key in sections[current]:
            raise ConfigError(f"{where}: duplicate key {current}.{key}")
        sections[current][key] = _parse_scalar(val, where)
    return sections


def parse_set_flag(flag: str) -> tuple[str, str, object]:
    """--set section.key=value; the value uses file scalar syntax but bare
    words are accepted as strings for shell convenience."""
    head, sep, val = flag.partition("=")
    if not sep or "." not in head:
        raise ConfigError(f"--set expects section.key=value, got {flag!r}")
    section, _, key = head.strip().partition(".")
    val = val.strip()
    if not section or not key or not val:
        raise ConfigError(f"--set expects section.key=value, got {flag!r}")
    try:
        parsed = _parse_scalar(val, "--set")
    except ConfigError:
        parsed = val  # bare string
    return section, key.strip(), parsed


def load_config(
    path: str | None = None,
    sets: list[str] = (),
    stage_defaults: dict[str, dict[str, object]] | None = None,
) -> Config:
    cfg = Config()
    if stage_defaults:
        for sect, keys in stage_defaults.items():
            for k, v in keys.items():
                cfg.set(sect, k, v, "default")
    if path:
        try:
            with open(path) as f:
                text = f.read()
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from None
        for sect, keys in parse_config_text(text, source=path).items():
            for k, v in keys.items():
                cfg.set(sect, k, v, "file")
    for flag in sets:
        section, key, value = parse_set_flag(flag)
        # bare-word strings from flags still go through schema typing
        cfg.set(section, key, value, "flag")
    return cfg


# ---------------------------------------------------------------------------
# snapshot

def _format_scalar(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    return f'"{v}"'


def snapshot_text(cfg: Config) -> str:
    """Snapshot of every key with its provenance; parses back to the same
    values with parse_config_text."""
    out = []
    for sect in SCHEMA:
        out.append(f"[{sect}]")
        for key in SCHEMA[sect]:
            cv = cfg.values[sect][key]
            out.append(f"{key} = {_format_scalar(cv.value)}  # {cv.origin}")
        out.append("")
    return "\n".join(out)


def write_snapshot(cfg: Config, path: str) -> None:
    with open(path, "w") as f:
        f.write(snapshot_text(cfg))


# ---------------------------------------------------------------------------
# materializers

def to_model_config(cfg: Config) -> md.ModelConfig:
    return md.ModelConfig(**cfg.section("model"))


def to_train_config(cfg: Config, stage: str, **overrides) -> tr.TrainConfig:
    kw = {}
    kw.update(cfg.section("train"))
    kw.update(cfg.section("uno"))
    data = cfg.section("data")
    kw.update({k: data[k] for k in
               ("max_objects", "edit_fraction", "caption_fraction", "shift")})
    kw["stage"] = stage
    kw.update(overrides)
    return tr.TrainConfig(**kw)
