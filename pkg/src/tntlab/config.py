"""Declarative experiment configuration: one JSON document, every field defaulted."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .flow_sim import DirectionSweep, SimConfig
from .pipeline import VARIANTS, PipelineConfig

OUTPUT_ENV = "TNT_OUTPUT_DIR"
DEFAULT_OUTPUT = "tnt_output"
MOTION_SETS = ("1", "all")


@dataclass
class GlyphConfig:
    """Where glyph bitmaps come from: procedural templates, or an IDX image/label pair."""
    n_classes: int = 10
    n_train: int = 8
    n_test: int = 3
    jitter: float = 1.0
    idx_images: Optional[str] = None
    idx_labels: Optional[str] = None


@dataclass
class ExperimentConfig:
    seed: int = 0
    variants: list = field(default_factory=lambda: ["baseline", "tnt"])
    splits: list = field(default_factory=lambda: ["1/all"])
    simulate: bool = True
    dataset: Optional[str] = None
    save_dataset: bool = False
    output_dir: Optional[str] = None
    pipeline: PipelineConfig = field(default_factory=lambda: PipelineConfig(iterations=1500, input_shift_px=2))
    sim: SimConfig = field(default_factory=SimConfig)
    sweep: DirectionSweep = field(default_factory=DirectionSweep)
    glyphs: GlyphConfig = field(default_factory=GlyphConfig)

    # --- validation --------------------------------------------------------------

    def validate(self) -> "ExperimentConfig":
        if not self.simulate and not self.dataset:
            raise ConfigError("dataset", "no dataset path given and simulation is disabled")
        if not self.variants:
            raise ConfigError("variants", "at least one variant is required")
        for v in self.variants:
            if v not in VARIANTS:
                raise ConfigError("variants", f"unknown variant {v!r}; expected one of {VARIANTS}")
        if not self.splits:
            raise ConfigError("splits", "at least one train/test split is required")
        for s in self.splits:
            parts = str(s).split("/")
            if len(parts) != 2 or any(p not in MOTION_SETS for p in parts):
                raise ConfigError("splits", f"split {s!r} must look like 'train/test' with parts in {MOTION_SETS}")
        if (self.glyphs.idx_images is None) != (self.glyphs.idx_labels is None):
            raise ConfigError("glyphs", "idx_images and idx_labels must be given together")
        return self

    # --- serialization -----------------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sim"] = {k: v for k, v in d["sim"].items() if k != "flow"}  # flow comes from the sweep
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        nested = {"pipeline": PipelineConfig, "sim": SimConfig, "sweep": DirectionSweep, "glyphs": GlyphConfig}
        top = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in data.items():
            if key not in top:
                raise ConfigError(key, "unknown field")
            if key in nested:
                kwargs[key] = _build(nested[key], value, key)
            else:
                kwargs[key] = value
        try:
            cfg = cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError("<root>", str(exc)) from exc
        return cfg.validate()

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"invalid JSON: {exc}") from exc
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    def config_hash(self) -> str:
        """sha256 over the canonical JSON, excluding where outputs are written."""
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def resolved_output_dir(self) -> Path:
        return Path(self.output_dir or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT)

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        """Apply dotted-key overrides such as {"pipeline.lr": 0.05}."""
        d = self.to_dict()
        for key, value in overrides.items():
            parts = key.split(".")
            node = d
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(key, "unknown field")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(key, "unknown field")
            node[parts[-1]] = value
        return ExperimentConfig.from_dict(d)

    def for_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=seed)


def _build(cls, value, name):
    if not isinstance(value, dict):
        raise ConfigError(name, "expected an object")
    known = {f.name for f in fields(cls)}
    for k in value:
        if k not in known:
            raise ConfigError(f"{name}.{k}", "unknown field")
    try:
        return cls(**value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(name, str(exc)) from exc


def parse_override(text: str):
    """'--pipeline.lr=0.05' -> ("pipeline.lr", 0.05); values are JSON when they parse, else strings."""
    body = text[2:] if text.startswith("--") else text
    if "=" not in body:
        raise ConfigError(body, "override must look like --key=value")
    key, raw = body.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value
