"""Run configuration: nested sections with strict key checking.

Every section is a dataclass; ``RunConfig.from_dict`` rejects unknown keys
and ``to_dict`` materialises all defaults for the persisted effective config.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from dataclasses import field as dc_field
from pathlib import Path

from .codec import Codec
from .denoise import GuidanceScales
from .schedule import make_schedule
from .scene_edit import SceneEditConfig


@dataclass
class ScheduleSection:
    kind: str = "linear_beta"
    T: int = 1000

    def build(self):
        return make_schedule(self.kind, self.T)


@dataclass
class CodecSection:
    kind: str = "avgpool"
    factor: int = 2
    channels: int = 3

    def build(self) -> Codec:
        return Codec(self.kind, self.factor, self.channels)


@dataclass
class RelevanceSection:
    t_rel: float = 0.8
    samples: int = 1


@dataclass
class EditorSection:
    tau: float = 0.5
    s_I: float = 1.0
    s_T: float = 7.5
    t_edit: float = 0.9
    steps: int = 100
    resample_unedited_noise: bool = False


@dataclass
class FieldSection:
    dims: list = dc_field(default_factory=lambda: [32, 32, 32])
    lr: float = 1e-2
    lr_density: float = 1e-1
    lr_relevance: float = 1e-1
    batch_size: int = 1024
    n_samples: int = 64
    # the reference setting pre-fits for 30000 iterations
    prefit_iters: int = 2000


@dataclass
class SceneEditSection:
    n_edit: int = 10
    t_edit_range: list = dc_field(default_factory=lambda: [0.02, 0.98])
    steps_per_edit: int = 20
    tau: float = 0.5
    s_I: float = 1.0
    s_T: float = 1.0
    total_iters: int = 1000
    relevance_refresh: str = "once"
    relevance_warmup: int = 50
    lr_density: float = 1e-2

    def build(self, relevance: RelevanceSection, fld: FieldSection) -> SceneEditConfig:
        return SceneEditConfig(
            n_edit=self.n_edit, t_edit_range=tuple(self.t_edit_range),
            steps_per_edit=self.steps_per_edit, tau=self.tau,
            scales=GuidanceScales(self.s_I, self.s_T), total_iters=self.total_iters,
            relevance_refresh=self.relevance_refresh, relevance_warmup=self.relevance_warmup,
            t_rel=relevance.t_rel, relevance_samples=relevance.samples, lr=fld.lr, lr_density=self.lr_density,
            lr_relevance=fld.lr_relevance, batch_size=fld.batch_size, n_samples=fld.n_samples,
        )


@dataclass
class SynthSection:
    n_views: int = 8
    resolution: int = 64
    radius: float = 2.8
    elevation_deg: float = 25.0
    fov_deg: float = 45.0


@dataclass
class RunConfig:
    seed: int = 0
    deterministic: bool = True
    schedule: ScheduleSection = dc_field(default_factory=ScheduleSection)
    codec: CodecSection = dc_field(default_factory=CodecSection)
    relevance: RelevanceSection = dc_field(default_factory=RelevanceSection)
    editor: EditorSection = dc_field(default_factory=EditorSection)
    field: FieldSection = dc_field(default_factory=FieldSection)
    scene_edit: SceneEditSection = dc_field(default_factory=SceneEditSection)
    synth: SynthSection = dc_field(default_factory=SynthSection)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        cfg = cls()
        cfg.update(data)
        return cfg

    def update(self, data: dict) -> None:
        _merge(self, data, "")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def _merge(obj, data, prefix):
    if not isinstance(data, dict):
        raise ValueError(f"config section {prefix or '<root>'} must be an object")
    names = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in data.items():
        if key not in names:
            raise ValueError(f"unknown config key {prefix + key!r}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            _merge(current, value, f"{prefix}{key}.")
        else:
            setattr(obj, key, value)
