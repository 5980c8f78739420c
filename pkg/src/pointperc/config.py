"""Structured-text run configuration.

One flat `key = value` document configures the model architecture, the
training loop, and the synthetic data generator. Values are ints, floats,
true/false, quoted or bare strings, or bracketed lists. Unknown keys and
type mismatches are errors; an empty file yields all defaults.

The resolved configuration can be rendered back to lines with echo_config;
those lines re-parse to the same configuration, which is how checkpoints
remember the architecture they were trained with.
"""

import re
from dataclasses import dataclass, field

from .autodiff import load_checkpoint, restore_buffers, restore_params
from .data import SynthConfig
from .model import ModelConfig, PerceptionModel
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)


# key -> (section, attribute, type tag)
# tags: int | float | bool | str | (vec, elem, n) | (seq, elem)
_SCHEMA = {
    # architecture
    "stage_dims": ("model", "stage_dims", ("seq", "int")),
    "stage_cells": ("model", "stage_cells", ("seq", "float")),
    "stage_radii": ("model", "stage_radii", ("seq", "float")),
    "stage_depths": ("model", "stage_depths", ("seq", "int")),
    "window_size": ("model", "window_size", "int"),
    "heads": ("model", "heads", "int"),
    "search": ("model", "search", "str"),
    "seg_depth": ("model", "seg_depth", "int"),
    "num_queries": ("model", "num_queries", "int"),
    "fg_threshold": ("model", "fg_threshold", "float"),
    "decoder_layers": ("model", "decoder_layers", "int"),
    "decoder_radii": ("model", "decoder_radii", ("vec", "float", 2)),
    "decoder_windows": ("model", "decoder_windows", ("vec", "int", 2)),
    "score_threshold": ("model", "score_threshold", "float"),
    "nms_iou": ("model", "nms_iou", "float"),
    # optimization
    "task": ("train", "task", "str"),
    "optimizer": ("train", "optimizer", "str"),
    "learning_rate": ("train", "lr", "float"),
    "lr_schedule": ("train", "lr_schedule", "str"),
    "lr_min": ("train", "lr_min", "float"),
    "weight_decay": ("train", "weight_decay", "float"),
    "epochs": ("train", "epochs", "int"),
    "range_min": ("train", "range_min", ("vec", "float", 3)),
    "range_max": ("train", "range_max", ("vec", "float", 3)),
    "augment": ("train", "augment", "bool"),
    "scale_range": ("train", "scale_range", ("vec", "float", 2)),
    "rotate_range_deg": ("train", "rotate_range_deg", ("vec", "float", 2)),
    "flip_prob": ("train", "flip_prob", "float"),
    "query_noise_scale": ("train", "noise_scale", "float"),
    # synthetic scenes
    "synth_range_min": ("synth", "range_min", ("vec", "float", 3)),
    "synth_range_max": ("synth", "range_max", ("vec", "float", 3)),
    "ground_density": ("synth", "ground_density", "float"),
    "wall_count": ("synth", "wall_count", ("vec", "int", 2)),
    "wall_points": ("synth", "wall_points", "int"),
    "object_count": ("synth", "object_count", ("vec", "int", 2)),
    "points_per_object": ("synth", "points_per_object", "int"),
    "noise_sigma": ("synth", "noise_sigma", "float"),
    "intensity_noise": ("synth", "intensity_noise", "float"),
}

_KEY_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*$")
_INT_RE = re.compile(r"[+-]?\d+$")


def _type_name(tag) -> str:
    if isinstance(tag, tuple):
        if tag[0] == "vec":
            return f"list of {tag[2]} {tag[1]}s"
        return f"list of {tag[1]}s"
    return tag


def _strip_comment(line: str) -> str:
    out = []
    quoted = False
    for ch in line:
        if ch == '"':
            quoted = not quoted
        elif ch == "#" and not quoted:
            break
        out.append(ch)
    return "".join(out)


def _parse_scalar(text: str, where: str):
    """One literal: int, float, bool, quoted string, or bare word."""
    text = text.strip()
    if not text:
        raise ConfigError(f"{where}: empty value")
    if text.startswith('"'):
        if not text.endswith('"') or len(text) < 2:
            raise ConfigError(f"{where}: unterminated string")
        return text[1:-1]
    if text in ("true", "false"):
        return text == "true"
    if _INT_RE.match(text):
        return int(text)
    try:
        return float(text)
    except ValueError:
        pass
    if _KEY_RE.match(text):
        return text  # bare word
    raise ConfigError(f"{where}: cannot parse value {text!r}")


def _parse_value(text: str, where: str):
    text = text.strip()
    if text.startswith("["):
        if not text.endswith("]"):
            raise ConfigError(f"{where}: unterminated list")
        inner = text[1:-1].strip()
        if not inner:
            return []
        return [_parse_scalar(p, where) for p in inner.split(",")]
    return _parse_scalar(text, where)


def _coerce_elem(value, elem: str, key: str, where: str):
    if elem == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: {key}: expected int, got {value!r}")
        return value
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where}: {key}: expected float, got {value!r}")
    return float(value)


def _coerce(value, tag, key: str, where: str):
    if isinstance(tag, tuple):
        if not isinstance(value, list):
            raise ConfigError(
                f"{where}: {key}: expected {_type_name(tag)}, got {value!r}")
        if tag[0] == "vec" and len(value) != tag[2]:
            raise ConfigError(
                f"{where}: {key}: expected {_type_name(tag)}, got {len(value)} elements")
        return tuple(_coerce_elem(v, tag[1], key, where) for v in value)
    if tag == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: {key}: expected bool, got {value!r}")
        return value
    if tag == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: {key}: expected int, got {value!r}")
        return value
    if tag == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: {key}: expected float, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{where}: {key}: expected str, got {value!r}")
    return value


def parse_config_lines(lines, source: str = "config") -> RunConfig:
    sections: dict = {"model": {}, "train": {}, "synth": {}}
    seen = set()
    for lineno, raw in enumerate(lines, start=1):
        where = f"{source}:{lineno}"
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value'")
        key, _, rhs = line.partition("=")
        key = key.strip()
        if not _KEY_RE.match(key):
            raise ConfigError(f"{where}: invalid key {key!r}")
        if key not in _SCHEMA:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        seen.add(key)
        section, attr, tag = _SCHEMA[key]
        sections[section][attr] = _coerce(_parse_value(rhs, where), tag, key, where)
    try:
        return RunConfig(model=ModelConfig(**sections["model"]),
                         train=TrainConfig(**sections["train"]),
                         synth=SynthConfig(**sections["synth"]))
    except ValueError as e:
        raise ConfigError(f"{source}: {e}") from e


def parse_config(path) -> RunConfig:
    with open(path, "r") as fh:
        return parse_config_lines(fh.read().splitlines(), source=str(path))


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return f'"{value}"'
    if isinstance(value, tuple):
        return "[" + ", ".join(_render(v) for v in value) + "]"
    return repr(value)


def echo_config(run: RunConfig) -> list:
    """Resolved configuration as lines that parse_config_lines accepts."""
    out = []
    for key, (section, attr, _tag) in _SCHEMA.items():
        out.append(f"{key} = {_render(getattr(getattr(run, section), attr))}")
    return out


def load_model(path):
    """Rebuild a model from a checkpoint via its embedded config echo.

    Returns (model, RunConfig). Checkpoints written in multi-task mode
    carry uncertainty weights as extra entries; those are ignored here."""
    arrays, echo = load_checkpoint(path)
    run = parse_config_lines(echo, source=str(path))
    model = PerceptionModel(run.model)
    restore_params(model.store, arrays)
    restore_buffers(model.buffers, arrays)
    return model, run
