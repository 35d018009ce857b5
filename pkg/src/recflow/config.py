"""Run configuration: a single flat JSON document, validated strictly.

Unknown keys are rejected so typos never pass silently; CLI flags override
file values. The adversarial-loop fields follow the documented tuning grids
(rho in 1e-1/1e-2/1e-3, delta in 0.9/0.8/0.7, learning rates around 1e-4).
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field


class ConfigError(ValueError):
    def __init__(self, field_name, reason):
        super().__init__(f"config field {field_name!r}: {reason}")
        self.field = field_name
        self.reason = reason


@dataclass
class RunConfig:
    # paths
    kg_path: str = ""
    types_path: str = ""
    dialogues_path: str = ""
    val_path: str = ""
    test_path: str = ""
    out_dir: str = "out"
    # model dims
    d_e: int = 128
    rgcn_layers: int = 1
    rgcn_bases: int = 8
    flm_d_model: int = 64
    flm_layers: int = 2
    flm_heads: int = 4
    flm_ff_mult: int = 4
    # mining / sampling
    min_support: int = 5
    max_len: int = 16
    hop_limit: int = 2
    connectivity_mask: bool = True
    # pre-training
    rec_steps: int = 500
    rec_lr: float = 1e-3
    rec_batch: int = 64
    flm_epochs: int = 3
    flm_lr: float = 1e-3
    flm_batch: int = 16
    pseudo_ratio: int = 4
    clf_steps: int = 200
    clf_lr: float = 1e-3
    # adversarial curriculum
    courses: int = 20
    rho: float = 0.1
    delta: float = 0.9
    alpha: float = 1e-4
    rollouts: int = 8
    edit_steps: int = 3
    k_edits: int = 1
    pairs_per_course: int = 8
    sims_per_pair: int = 2
    mix_ratio: float = 1.0
    course_rec_steps: int = 50
    patience: int = 3
    temperature: float = 1.0
    use_baseline: bool = False
    # misc
    seed: int = 0
    precision: str = "f64"
    workers: int = 0
    n_simulate: int = 100
    sweep_rho: list = field(default_factory=lambda: [0.1, 0.01, 0.001])
    sweep_delta: list = field(default_factory=lambda: [0.9, 0.8, 0.7])
    sweep_mix: list = field(default_factory=lambda: [0.5, 1.0, 2.0])

    def validate(self):
        positive_ints = ("d_e", "rgcn_layers", "rgcn_bases", "flm_d_model",
                         "flm_layers", "flm_heads", "flm_ff_mult",
                         "min_support", "max_len", "hop_limit", "rec_batch",
                         "flm_epochs", "flm_batch", "clf_steps", "rollouts",
                         "edit_steps", "k_edits", "pairs_per_course",
                         "sims_per_pair", "patience", "n_simulate")
        for name in positive_ints:
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(name, f"must be a positive integer, got {v!r}")
        non_negative_ints = ("rec_steps", "courses", "course_rec_steps",
                             "seed", "workers", "pseudo_ratio")
        for name in non_negative_ints:
            v = getattr(self, name)
            if not isinstance(v, int) or v < 0:
                raise ConfigError(name, f"must be a non-negative integer, got {v!r}")
        for name in ("rec_lr", "flm_lr", "clf_lr", "alpha", "temperature"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or not v > 0:
                raise ConfigError(name, f"must be positive, got {v!r}")
        for name in ("rho", "mix_ratio"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or v < 0:
                raise ConfigError(name, f"must be >= 0, got {v!r}")
        if not 0 < self.delta <= 1:
            raise ConfigError("delta", f"must be in (0, 1], got {self.delta!r}")
        if self.precision not in ("f64", "f32"):
            raise ConfigError("precision", f"must be f64 or f32, got "
                                           f"{self.precision!r}")
        if self.flm_d_model % self.flm_heads:
            raise ConfigError("flm_heads", "must divide flm_d_model")
        return self

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown config key")
        return cls(**data).validate()

    @classmethod
    def load(cls, path=None, overrides=None):
        data = {}
        if path:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
            if not isinstance(data, dict):
                raise ConfigError("<root>", "config must be a JSON object")
        if overrides:
            data.update(overrides)
        return cls.from_dict(data)

    def resolved_workers(self):
        if self.workers > 0:
            return self.workers
        return int(os.environ.get("RECFLOW_WORKERS", "1"))

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)
