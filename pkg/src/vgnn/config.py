"""Pipeline configuration: one JSON document, defaults from the published setup."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .ingest import NYC_BOUNDS, GridSpec


class ConfigKeyError(ValueError):
    pass


@dataclass
class PipelineConfig:
    grid_rows: int = 40
    grid_cols: int = 30
    bounds: tuple[float, float, float, float] = NYC_BOUNDS
    bin_width: int = 3600
    delta: float = 1.0
    epsilon: float = 0.5
    top_frac: float = 0.1
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    normalization: str = "minmax"
    model: dict = field(default_factory=lambda: {"M": 12, "L": 4, "C1": 12, "K": 3, "d_k": 16})
    train: dict = field(default_factory=lambda: {"lr": 0.003, "batch": 16, "patience": 10,
                                                 "max_epochs": 200})
    variants: list = field(default_factory=list)
    seed: int = 0
    paths: dict = field(default_factory=dict)

    @property
    def grid(self) -> GridSpec:
        return GridSpec(*self.bounds, self.grid_rows, self.grid_cols)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bounds"] = list(self.bounds)
        d["fractions"] = list(self.fractions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigKeyError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls()
        for k, v in d.items():
            if k in ("model", "train"):
                merged = dict(getattr(cfg, k))
                merged.update(v)
                v = merged
            elif k in ("bounds", "fractions"):
                v = tuple(float(x) for x in v)
            setattr(cfg, k, v)
        return cfg

    @classmethod
    def load(cls, path: str | Path | None) -> "PipelineConfig":
        if path is None:
            return cls()
        return cls.from_dict(json.loads(Path(path).read_text()))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
