"""Run configuration: model dimensions, seeds, grids, loss and controller
settings, and the named scene suites. One JSON file plus flag overrides is
the whole reproducibility surface; all randomness flows from the two seeds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .fusion import BlockConfig
from .heads_losses import LossConfig, LossWeights
from .pillar import GridSpec
from .scene_synth import SceneSpec
from .sim_eval import ControllerConfig, EvalConfig

__all__ = ["RunConfig", "derive_seed", "SUITE_NAMES"]

SUITE_NAMES = ("reference", "trivial")

SIGNAL_CLASSES = ("none", "green", "red")


def derive_seed(base: int, index: int) -> int:
    """Stable per-scene seed derived from a master seed."""
    return int(np.random.SeedSequence([base, index]).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class RunConfig:
    n_d: int = 6
    n_p: int = 20
    e_dim: int = 32
    k_layers: int = 2
    heads: int = 4
    c_channels: int = 16
    view_h: int = 8
    view_w: int = 8
    seed_scene: int = 42
    seed_params: int = 7
    lidar_density: float = 3.0
    lidar_noise_sigma: float = 0.02
    r_max: float = 2.0
    voxel_resolution: tuple[float, float, float] = (0.5, 0.5, 0.5)
    pillar_resolution: tuple[float, float, float] = (0.5, 0.5, 8.0)
    bounds_min: tuple[float, float, float] = (-20.0, -60.0, 0.0)
    bounds_max: tuple[float, float, float] = (170.0, 130.0, 8.0)
    horizon: float = 60.0
    bench_repeats: int = 10
    suite: str = "reference"
    loss_weights: LossWeights = field(default_factory=LossWeights)
    loss_config: LossConfig = field(default_factory=LossConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    eval_config: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.n_p % 2 != 0:
            raise ValueError(f"n_p must be even, got {self.n_p}")
        if self.e_dim % self.heads != 0:
            raise ValueError(f"e_dim {self.e_dim} not divisible by heads {self.heads}")
        if self.suite not in SUITE_NAMES:
            raise ValueError(f"suite must be one of {SUITE_NAMES}, got {self.suite!r}")
        span = self.bounds_max[2] - self.bounds_min[2]
        if abs(self.pillar_resolution[2] - span) > 1e-9:
            raise ValueError(
                f"pillar_resolution dz {self.pillar_resolution[2]} must equal "
                f"the z span {span} (single z bin)"
            )

    def block_config(self) -> BlockConfig:
        return BlockConfig(layers=self.k_layers, heads=self.heads, embed=self.e_dim,
                           seed=self.seed_params, n_d=self.n_d, n_p=self.n_p,
                           c_channels=self.c_channels)

    def voxel_spec(self) -> GridSpec:
        return GridSpec(resolution=self.voxel_resolution,
                        bounds_min=self.bounds_min, bounds_max=self.bounds_max)

    def pillar_spec(self) -> GridSpec:
        return GridSpec(resolution=self.pillar_resolution,
                        bounds_min=self.bounds_min, bounds_max=self.bounds_max)

    def suite_specs(self) -> list[SceneSpec]:
        rows = _SUITES[self.suite]
        return [
            SceneSpec(seed=derive_seed(self.seed_scene, i),
                      lane_count=lanes, geometry=geom, radius=radius,
                      lane_width=3.5, route_length=length, agent_count=agents,
                      clutter_density=clutter, traffic_signal=signal)
            for i, (geom, radius, lanes, agents, clutter, signal, length) in enumerate(rows)
        ]

    # -- JSON round trip -----------------------------------------------------

    def to_json(self) -> bytes:
        obj = {
            f.name: getattr(self, f.name)
            for f in fields(self)
            if f.name not in ("loss_weights", "loss_config", "controller", "eval_config")
        }
        obj["loss_weights"] = vars(self.loss_weights).copy()
        obj["loss_config"] = vars(self.loss_config).copy()
        obj["controller"] = vars(self.controller).copy()
        obj["eval_config"] = {
            "penalties": dict(self.eval_config.penalties),
            "ego_radius": self.eval_config.ego_radius,
            "arrival_radius": self.eval_config.arrival_radius,
            "deviation_lane_widths": self.eval_config.deviation_lane_widths,
            "deviation_seconds": self.eval_config.deviation_seconds,
        }
        for key in ("voxel_resolution", "pillar_resolution", "bounds_min", "bounds_max"):
            obj[key] = list(obj[key])
        return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")

    @classmethod
    def from_obj(cls, obj: dict) -> "RunConfig":
        kwargs = dict(obj)
        for key in ("voxel_resolution", "pillar_resolution", "bounds_min", "bounds_max"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        if "loss_weights" in kwargs:
            kwargs["loss_weights"] = LossWeights(**kwargs["loss_weights"])
        if "loss_config" in kwargs:
            kwargs["loss_config"] = LossConfig(**kwargs["loss_config"])
        if "controller" in kwargs:
            kwargs["controller"] = ControllerConfig(**kwargs["controller"])
        if "eval_config" in kwargs:
            kwargs["eval_config"] = EvalConfig(**kwargs["eval_config"])
        known = {f.name for f in fields(cls)}
        unknown = set(kwargs) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        return cls.from_obj(json.loads(Path(path).read_text("utf-8")))

    def with_overrides(self, **kwargs) -> "RunConfig":
        kwargs = {k: v for k, v in kwargs.items() if v is not None}
        return replace(self, **kwargs) if kwargs else self


# (geometry, radius, lane_count, agent_count, clutter_density, signal, route_length)
_SUITES: dict[str, list[tuple]] = {
    "reference": [
        ("straight", None, 1, 0, 0.0, "none", 100.0),
        ("straight", None, 2, 1, 0.5, "green", 100.0),
        ("straight", None, 3, 2, 1.0, "none", 120.0),
        ("arc", 60.0, 1, 0, 0.5, "none", 90.0),
        ("arc", 80.0, 2, 1, 1.0, "none", 110.0),
        ("arc", 70.0, 3, 2, 0.0, "green", 100.0),
        ("intersection", None, 2, 1, 0.5, "red", 100.0),
        ("intersection", None, 3, 2, 1.0, "green", 120.0),
        ("intersection", None, 4, 3, 0.5, "none", 100.0),
        ("straight", None, 4, 4, 1.5, "red", 120.0),
    ],
    "trivial": [
        ("straight", None, 1, 0, 0.0, "none", 100.0),
        ("straight", None, 1, 0, 0.0, "none", 100.0),
        ("straight", None, 1, 0, 0.0, "none", 100.0),
    ],
}
