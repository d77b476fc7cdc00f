"""Strict TOML experiment files: one ``[shared]`` table plus ``[[rows]]``.

Example::

    [shared]
    max_steps = 1500
    [shared.model]
    hidden = 128

    [[rows]]
    name = "None / Fprop"
    mx_paths = ["fprop"]
    stabilizer = "none"

    [[rows]]
    name = "Det. Hadamard / Fprop+Dgrad+Wgrad"
    mx_paths = ["fprop", "dgrad", "wgrad"]
    stabilizer = "deterministic_hadamard"
    hadamard = "det16"

Unknown keys anywhere are errors. A baseline row (no MXFP4 paths, no
stabilizer) is prepended when the file does not list one.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import tomli
import tomli_w

from mxfp4sim.task import DataConfig
from mxfp4sim.trainer import (
    ConfigError,
    DivergenceConfig,
    LadderConfig,
    ModelConfig,
    OptimConfig,
)

BASELINE_NAME = "FP8 baseline"
_NESTED = {"model": ModelConfig, "data": DataConfig, "optim": OptimConfig, "divergence": DivergenceConfig}
_ROW_KEYS = {"name", "mx_paths", "stabilizer", "hadamard"}
_SHARED_KEYS = {
    f.name for f in dataclasses.fields(LadderConfig)
} - {"name", "mx_paths", "stabilizer", "hadamard_size"}


class ParseError(ValueError):
    pass


def _build(cls, table: dict, where: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in table:
        if key not in fields:
            raise ParseError(f"unknown key {key!r} in {where}")
    kwargs = {}
    for key, val in table.items():
        default = getattr(cls(), key)
        if isinstance(default, bool) and not isinstance(val, bool):
            raise ParseError(f"{where}.{key} must be a boolean")
        if isinstance(default, float) and isinstance(val, int) and not isinstance(val, bool):
            val = float(val)
        elif type(default) is not type(val):
            raise ParseError(f"{where}.{key} must be {type(default).__name__}, got {type(val).__name__}")
        kwargs[key] = val
    return cls(**kwargs)


def _hadamard_fields(row: dict, where: str) -> tuple[str, int]:
    stabilizer = row.get("stabilizer", "none")
    tag = row.get("hadamard", "none")
    if not isinstance(tag, str):
        raise ParseError(f"{where}.hadamard must be a string")
    if stabilizer.endswith("hadamard"):
        prefix = "det" if stabilizer == "deterministic_hadamard" else "rand"
        size = tag[len(prefix):]
        if not tag.startswith(prefix) or size not in ("16", "32"):
            raise ParseError(f"{where}: stabilizer {stabilizer!r} needs hadamard = '{prefix}16' or '{prefix}32'")
        return stabilizer, int(size)
    if tag != "none":
        raise ParseError(f"{where}: hadamard {tag!r} given without a Hadamard stabilizer")
    return stabilizer, 16


def parse_experiment(text: str, seed: int | None = None) -> list[LadderConfig]:
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ParseError(f"syntax error: {exc}") from exc
    for key in doc:
        if key not in ("shared", "rows"):
            raise ParseError(f"unknown top-level key {key!r}")
    shared = dict(doc.get("shared", {}))
    rows = doc.get("rows", [])
    if not isinstance(rows, list) or not rows:
        raise ParseError("experiment needs at least one [[rows]] entry")
    for key in shared:
        if key not in _SHARED_KEYS:
            raise ParseError(f"unknown key {key!r} in [shared]")
    try:
        kwargs = {}
        for key, val in shared.items():
            if key in _NESTED:
                if not isinstance(val, dict):
                    raise ParseError(f"[shared.{key}] must be a table")
                kwargs[key] = _build(_NESTED[key], val, f"shared.{key}")
            else:
                kwargs[key] = val
        if seed is not None:
            kwargs["seed"] = seed
        base = _build_top(kwargs)
        configs = []
        for i, row in enumerate(rows):
            where = f"rows[{i}]"
            for key in row:
                if key not in _ROW_KEYS:
                    raise ParseError(f"unknown key {key!r} in {where}")
            paths = row.get("mx_paths", [])
            if not isinstance(paths, list) or not all(isinstance(p, str) for p in paths):
                raise ParseError(f"{where}.mx_paths must be a list of strings")
            stabilizer, size = _hadamard_fields(row, where)
            configs.append(
                base.replace(
                    name=str(row.get("name", f"row {i}")),
                    mx_paths=tuple(paths),
                    stabilizer=stabilizer,
                    hadamard_size=size,
                )
            )
    except ConfigError as exc:
        raise ParseError(f"invalid config: {exc}") from exc
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"invalid config: {exc}") from exc
    if not any(c.is_baseline for c in configs):
        configs.insert(0, base.replace(name=BASELINE_NAME, mx_paths=(), stabilizer="none"))
    return configs


def _build_top(kwargs: dict) -> LadderConfig:
    plain = {k: v for k, v in kwargs.items() if k not in _NESTED}
    checked = _build_flat(plain)
    nested = {k: v for k, v in kwargs.items() if k in _NESTED}
    return LadderConfig(**checked, **nested)


def _build_flat(plain: dict) -> dict:
    ref = LadderConfig()
    out = {}
    for key, val in plain.items():
        default = getattr(ref, key)
        if key == "target_loss":
            if not isinstance(val, (int, float)) or isinstance(val, bool):
                raise ParseError("shared.target_loss must be a number")
            val = float(val)
        elif isinstance(default, bool):
            if not isinstance(val, bool):
                raise ParseError(f"shared.{key} must be a boolean")
        elif isinstance(default, float):
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ParseError(f"shared.{key} must be a number")
            val = float(val)
        elif type(default) is not type(val):
            raise ParseError(f"shared.{key} must be {type(default).__name__}")
        out[key] = val
    return out


def load_experiment(path, seed: int | None = None) -> list[LadderConfig]:
    return parse_experiment(Path(path).read_text(), seed)


def _table(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}


def serialize_experiment(configs: list[LadderConfig]) -> str:
    """Inverse of parse_experiment (the baseline row is written explicitly)."""
    if not configs:
        raise ValueError("nothing to serialize")
    ref = configs[0]
    shared = {}
    for key in sorted(_SHARED_KEYS):
        val = getattr(ref, key)
        if key in _NESTED:
            shared[key] = _table(val)
        elif val is not None:
            shared[key] = val
    rows = []
    for c in configs:
        row = {"name": c.name, "mx_paths": list(c.mx_paths), "stabilizer": c.stabilizer}
        if c.stabilizer == "deterministic_hadamard":
            row["hadamard"] = f"det{c.hadamard_size}"
        elif c.stabilizer == "randomized_hadamard":
            row["hadamard"] = f"rand{c.hadamard_size}"
        rows.append(row)
    return tomli_w.dumps({"shared": shared, "rows": rows})
