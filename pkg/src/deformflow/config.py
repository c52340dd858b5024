"""Pipeline-wide configuration with per-field validation."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError
from .optimizer import OptimConfig

DENSITY_MODES = ("count", "component")
ROTATION_BLENDS = ("quaternion", "linear")
TRANSLATION_MODES = ("linear", "embedded")


@dataclass(frozen=True)
class PipelineConfig:
    k: int = 20
    tau: float = 7e-5
    alpha: float = 0.1
    lr: float = 0.001
    iterations: int = 3000
    target_nodes: int = 2000
    confidence_threshold: float = 0.5
    fusion_radius: int = 1
    density_mode: str = "count"
    cluster_radius: float | None = None
    kappa: float = 3.0
    min_cluster_size: int = 3
    metric_resolution: int = 128
    metric_samples: int = 100_000
    success_threshold: float = 0.004
    consistency_mode: str = "linear"
    rotation_blend: str = "quaternion"
    surface_distance: str = "vertex"
    seed: int = 0

    def __post_init__(self):
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(isinstance(self.k, int) and self.k >= 1, "k must be an integer >= 1")
        need(self.tau > 0, "tau must be > 0")
        need(isinstance(self.target_nodes, int) and self.target_nodes >= 1, "target_nodes must be an integer >= 1")
        need(0 <= self.confidence_threshold <= 1, "confidence_threshold must lie in [0, 1]")
        need(isinstance(self.fusion_radius, int) and self.fusion_radius >= 1, "fusion_radius must be an integer >= 1")
        need(self.density_mode in DENSITY_MODES, f"density_mode must be one of {DENSITY_MODES}")
        need(self.cluster_radius is None or self.cluster_radius > 0, "cluster_radius must be > 0")
        need(self.kappa > 0, "kappa must be > 0")
        need(isinstance(self.min_cluster_size, int) and self.min_cluster_size >= 2, "min_cluster_size must be >= 2")
        need(isinstance(self.metric_resolution, int) and self.metric_resolution >= 16, "metric_resolution must be >= 16")
        need(isinstance(self.metric_samples, int) and self.metric_samples >= 1, "metric_samples must be >= 1")
        need(self.success_threshold > 0, "success_threshold must be > 0")
        need(self.rotation_blend in ROTATION_BLENDS, f"rotation_blend must be one of {ROTATION_BLENDS}")
        need(self.consistency_mode in TRANSLATION_MODES, f"consistency_mode must be one of {TRANSLATION_MODES}")
        need(self.surface_distance in ("vertex", "triangle"), "surface_distance must be 'vertex' or 'triangle'")
        need(isinstance(self.seed, int), "seed must be an integer")
        self.optim_config()

    def optim_config(self) -> OptimConfig:
        return OptimConfig(alpha=self.alpha, lr=self.lr, iterations=self.iterations, seed=self.seed,
                           consistency_mode=self.consistency_mode)

    def with_overrides(self, overrides: dict) -> "PipelineConfig":
        names = {f.name for f in fields(self)}
        unknown = sorted(set(overrides) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return replace(self, **overrides)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(path: str | Path | None, base: PipelineConfig | None = None) -> PipelineConfig:
    cfg = base or PipelineConfig()
    if path is None:
        return cfg
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return cfg.with_overrides(data)
