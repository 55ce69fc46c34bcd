"""Run configuration: a flat key=value file format plus CLI overrides.

The file format is a small TOML subset: one ``key = value`` pair per line,
``#`` comments, quoted strings, integers, floats and true/false booleans.
No tables, arrays or multi-line values.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .losses import ENERGY_MODES, LossWeights
from .model import ModelConfig, desk_config

PRESETS = ("desk", "paper")
SCORE_MODES = ("energy", "probability")

# model hyper-parameters that may be overridden per run; None means
# "use the preset's value"
MODEL_FIELD_TYPES = {
    "d_model": int, "heads": int, "encoder_layers": int, "decoder_layers": int,
    "n_slots": int, "group_size": int, "max_t": int, "max_report_len": int,
    "feature_rows": int, "feature_dim": int, "ffn_dim": int,
    "norm": str, "pe_base": float, "tied_output": bool,
}


@dataclass(frozen=True)
class RunConfig:
    """Everything a training or evaluation run needs, in one place."""

    dataset: str
    out_dir: str
    seed: int = 0
    epochs: int = 50
    batch_size: int = 8
    lr: float = 1e-4
    lambda_ce: float = 1.0
    lambda_tr: float = 1.0
    gamma: float = 1.0
    min_frequency: int = 3
    preset: str = "desk"
    score_mode: str = "energy"
    energy_mode: str = "likelihood"
    val_every: int = 1
    d_model: int | None = None
    heads: int | None = None
    encoder_layers: int | None = None
    decoder_layers: int | None = None
    n_slots: int | None = None
    group_size: int | None = None
    max_t: int | None = None
    max_report_len: int | None = None
    feature_rows: int | None = None
    feature_dim: int | None = None
    ffn_dim: int | None = None
    norm: str | None = None
    pe_base: float | None = None
    tied_output: bool | None = None

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"preset must be one of {PRESETS}, got {self.preset!r}")
        if self.score_mode not in SCORE_MODES:
            raise ValueError(f"score_mode must be one of {SCORE_MODES}, got {self.score_mode!r}")
        if self.energy_mode not in ENERGY_MODES:
            raise ValueError(f"energy_mode must be one of {ENERGY_MODES}, got {self.energy_mode!r}")
        if self.epochs <= 0 or self.batch_size <= 0 or self.val_every <= 0:
            raise ValueError("epochs, batch_size and val_every must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.min_frequency < 1:
            raise ValueError("min_frequency must be at least 1")
        # loss weight ranges are enforced by LossWeights itself
        LossWeights(self.lambda_ce, self.lambda_tr, self.gamma)

    def model_overrides(self) -> dict:
        return {name: getattr(self, name) for name in MODEL_FIELD_TYPES
                if getattr(self, name) is not None}

    def model_config(self, vocab_size: int) -> ModelConfig:
        overrides = self.model_overrides()
        if self.preset == "desk":
            return desk_config(vocab_size, **overrides)
        return ModelConfig(vocab_size, **overrides)

    def loss_weights(self) -> LossWeights:
        return LossWeights(lambda_ce=self.lambda_ce, lambda_tr=self.lambda_tr,
                           gamma=self.gamma)

    def validate_paths(self):
        if not Path(self.dataset).exists():
            raise FileNotFoundError(f"dataset not found: {self.dataset}")


def _parse_scalar(raw: str, where: str):
    raw = raw.strip()
    if raw.startswith('"'):
        if len(raw) < 2 or not raw.endswith('"'):
            raise ValueError(f"unterminated string in {where}: {raw}")
        return raw[1:-1]
    if raw in ("true", "false"):
        return raw == "true"
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        raise ValueError(f"cannot parse value in {where}: {raw!r} "
                         "(strings must be double-quoted)") from None


def parse_flat_toml(text: str) -> dict:
    """Parse the flat key=value subset described in the module docstring."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"line {lineno}: expected key = value, got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        # strip a trailing comment from unquoted values only
        raw = raw.strip()
        if not raw.startswith('"') and "#" in raw:
            raw = raw.split("#", 1)[0].strip()
        out[key] = _parse_scalar(raw, f"line {lineno}")
    return out


def _field_types() -> dict:
    types = {}
    for f in dataclasses.fields(RunConfig):
        if f.name in MODEL_FIELD_TYPES:
            types[f.name] = MODEL_FIELD_TYPES[f.name]
        else:
            types[f.name] = type(f.default) if f.default is not None else str
    return types


def _coerce(name: str, value, target: type):
    if target is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ValueError(f"{name} expects true or false, got {value!r}")
    if target is float:
        if isinstance(value, bool) or isinstance(value, str) and not _numeric(value):
            raise ValueError(f"{name} expects a number, got {value!r}")
        return float(value)
    if target is int:
        if isinstance(value, bool):
            raise ValueError(f"{name} expects an integer, got {value!r}")
        if isinstance(value, float) and value != int(value):
            raise ValueError(f"{name} expects an integer, got {value!r}")
        return int(value)
    return str(value)


def _numeric(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def build_run_config(values: dict) -> RunConfig:
    """Construct a RunConfig from parsed key/value pairs, coercing types."""
    types = _field_types()
    unknown = sorted(set(values) - set(types))
    if unknown:
        raise ValueError(f"unknown config keys: {unknown}")
    for required in ("dataset", "out_dir"):
        if required not in values:
            raise ValueError(f"config is missing required key {required!r}")
    coerced = {k: _coerce(k, v, types[k]) for k, v in values.items()}
    return RunConfig(**coerced)


def load_run_config(path) -> RunConfig:
    """Read a run configuration file."""
    return build_run_config(parse_flat_toml(Path(path).read_text(encoding="utf-8")))


def apply_overrides(cfg: RunConfig, overrides: list) -> RunConfig:
    """Apply ``key=value`` strings (e.g. from a CLI) on top of a config."""
    types = _field_types()
    updates = {}
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override must look like key=value, got {item!r}")
        key, _, raw = item.partition("=")
        key = key.strip()
        if key not in types:
            raise ValueError(f"unknown config key in override: {key!r}")
        updates[key] = _coerce(key, raw.strip().strip('"'), types[key])
    return dataclasses.replace(cfg, **updates)


def to_flat_toml(cfg: RunConfig) -> str:
    """Serialize a RunConfig so that load_run_config round-trips it."""
    lines = []
    for f in dataclasses.fields(RunConfig):
        value = getattr(cfg, f.name)
        if value is None:
            continue
        if isinstance(value, bool):
            rendered = "true" if value else "false"
        elif isinstance(value, str):
            rendered = f'"{value}"'
        elif isinstance(value, float):
            rendered = repr(value)
        else:
            rendered = str(value)
        lines.append(f"{f.name} = {rendered}")
    return "\n".join(lines) + "\n"
