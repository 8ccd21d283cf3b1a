"""Run configuration: schema-validated JSON with documented defaults.

Every output artifact embeds the hash of the effective configuration
(defaults applied), so ablation runs are distinguishable by provenance.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import jsonschema
import numpy as np

from .encoder import ReferenceEncoderConfig
from .errors import ConfigError
from .pretext import RECON_SOURCES, RECON_TARGETS, PretrainSettings
from .finetune import FinetuneSettings
from .scenario import StandardProfile

DEFAULTS: dict = {
    "standard": {"sample_rate_hz": 10.0, "T_h": 20, "T_f": 30, "map_resolution": 1.0},
    "encoder": {"embed_dim": 64, "hidden_dim": 64, "k_map": 4, "attention_radius": 50.0},
    "banks": {"pretrain": [], "train": [], "eval": []},
    "temperature": 0.1,
    "recon_weight": 1.0,
    "recon_target": "other_window",
    "recon_source": "encoder",
    "tasks": "both",
    "lr": 1e-3,
    "weight_decay": 1e-4,
    "batch_size": 64,
    "pretrain_epochs": 20,
    "finetune_epochs": 10,
    "ema_m0": 0.996,
    "ema_every_n_steps": 1,
    "num_modes": 6,
    "miss_threshold": 2.0,
    "ade_mode": "endpoint_winner",
    "seed": 0,
    "precision": "f32",
    "checkpoint_every": 0,
}

SCHEMA: dict = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "standard": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "sample_rate_hz": {"type": "number", "exclusiveMinimum": 0},
                "T_h": {"type": "integer", "minimum": 2},
                "T_f": {"type": "integer", "minimum": 1},
                "map_resolution": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "encoder": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "embed_dim": {"type": "integer", "minimum": 8},
                "hidden_dim": {"type": "integer", "minimum": 8},
                "k_map": {"type": "integer", "minimum": 0},
                "attention_radius": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "banks": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "pretrain": {"type": "array", "items": {"type": "string"}},
                "train": {"type": "array", "items": {"type": "string"}},
                "eval": {"type": "array", "items": {"type": "string"}},
            },
        },
        "temperature": {"type": "number", "exclusiveMinimum": 0},
        "recon_weight": {"type": "number", "minimum": 0},
        "recon_target": {"enum": list(RECON_TARGETS)},
        "recon_source": {"enum": list(RECON_SOURCES)},
        "tasks": {"enum": ["both", "contrastive", "reconstruction"]},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "weight_decay": {"type": "number", "minimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "pretrain_epochs": {"type": "integer", "minimum": 1},
        "finetune_epochs": {"type": "integer", "minimum": 1},
        "ema_m0": {"type": "number", "minimum": 0, "maximum": 1},
        "ema_every_n_steps": {"type": "integer", "minimum": 0},
        "num_modes": {"type": "integer", "minimum": 1},
        "miss_threshold": {"type": "number", "exclusiveMinimum": 0},
        "ade_mode": {"enum": ["endpoint_winner", "best"]},
        "seed": {"type": "integer", "minimum": 0},
        "precision": {"enum": ["f32", "f64"]},
        "checkpoint_every": {"type": "integer", "minimum": 0},
    },
}


@dataclass(frozen=True)
class RunConfig:
    standard: StandardProfile
    encoder: ReferenceEncoderConfig
    banks: dict = field(default_factory=lambda: {"pretrain": [], "train": [], "eval": []})
    temperature: float = 0.1
    recon_weight: float = 1.0
    recon_target: str = "other_window"
    recon_source: str = "encoder"
    tasks: str = "both"
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 64
    pretrain_epochs: int = 20
    finetune_epochs: int = 10
    ema_m0: float = 0.996
    ema_every_n_steps: int = 1
    num_modes: int = 6
    miss_threshold: float = 2.0
    ade_mode: str = "endpoint_winner"
    seed: int = 0
    precision: str = "f32"
    checkpoint_every: int = 0

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32

    def pretrain_settings(self) -> PretrainSettings:
        return PretrainSettings(
            enc_cfg=self.encoder,
            temperature=self.temperature,
            recon_weight=self.recon_weight,
            recon_target=self.recon_target,
            recon_source=self.recon_source,
            tasks=self.tasks,
            lr=self.lr,
            weight_decay=self.weight_decay,
            ema_m0=self.ema_m0,
            ema_every_n_steps=self.ema_every_n_steps,
        )

    def finetune_settings(self) -> FinetuneSettings:
        return FinetuneSettings(
            enc_cfg=self.encoder,
            num_modes=self.num_modes,
            lr=self.lr,
            weight_decay=self.weight_decay,
        )


def _merge(defaults: dict, given: dict) -> dict:
    out = {}
    for key, dval in defaults.items():
        if key in given and isinstance(dval, dict) and not key == "banks":
            out[key] = _merge(dval, given[key])
        elif key in given:
            out[key] = given[key]
        else:
            out[key] = json.loads(json.dumps(dval))  # deep copy
    if "banks" in given:
        merged = dict(out["banks"])
        merged.update(given["banks"])
        out["banks"] = merged
    return out


def effective_dict(raw: dict | None) -> dict:
    """Validate against the schema and apply defaults."""
    raw = raw or {}
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        path = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config field {path}: {exc.message}") from exc
    return _merge(DEFAULTS, raw)


def config_from_dict(raw: dict | None) -> RunConfig:
    eff = effective_dict(raw)
    std = eff["standard"]
    enc = eff["encoder"]
    scalar = {k: v for k, v in eff.items() if k not in ("standard", "encoder")}
    return RunConfig(
        standard=StandardProfile(
            sample_rate=std["sample_rate_hz"], T_h=std["T_h"], T_f=std["T_f"],
            map_resolution=std["map_resolution"],
        ),
        encoder=ReferenceEncoderConfig(
            embed_dim=enc["embed_dim"], hidden_dim=enc["hidden_dim"],
            k_map=enc["k_map"], attention_radius=enc["attention_radius"],
        ),
        **scalar,
    )


def load_config(path=None, overrides: dict | None = None) -> tuple[RunConfig, dict]:
    """Read the config file (optional), apply CLI overrides, validate.

    Returns (RunConfig, effective dict). Overrides use the same keys as the
    schema, pre-validated by the schema too.
    """
    raw: dict = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if overrides:
        for key, val in overrides.items():
            if val is None:
                continue
            raw[key] = val
    cfg = config_from_dict(raw)
    return cfg, effective_dict(raw)


def config_hash(effective: dict) -> str:
    blob = json.dumps(effective, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:12]
