"""Scenario files: flat YAML mappings of documented keys.

See the README for the key reference. Paths are resolved relative to the
scenario file.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import InvalidSpecError

FAMILY_DEFAULTS = {
    # gains and loop rate per scenario family
    "sim": {"K_s": 80.0, "Gamma": 500.0, "rate_hz": 50.0},
    "experiment": {"K_s": 0.1, "Gamma": 0.1, "rate_hz": 30.0},
}
SAMPLING_MODES = ("nodes", "contour", "contour_levels")


@dataclass
class Scenario:
    name: str = "scenario"
    family: str = "sim"

    # plant
    plant_mesh: str = None
    plant_box: list = None
    plant_box_divisions: list = None
    plant_box_origin: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    plant_E: float = 1000.0
    plant_v: float = 0.45
    plant_M: float = 1.0
    corotational: bool = False
    fixed_nodes: list = field(default_factory=list)
    manip_nodes: list = field(default_factory=list)

    # sampling
    sampling: str = "nodes"
    sample_nodes: list = field(default_factory=list)
    n_samples: int = 20
    outline_axis: int = 2
    noise_std: float = 0.0
    events: list = field(default_factory=list)

    # desired deformation
    manip_displacement: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    desired_steps: int = 1

    # base mesh
    base_mesh: str = "given"
    base_axes: list = None
    base_translation: list = None
    base_offset: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    base_euler_deg: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    base_resolution: list = field(default_factory=lambda: [8, 16, 2])
    base_a_z: float = None
    base_E: float = 50.0
    base_v: float = 0.45
    base_M: float = 20.0
    m: int = 30

    # controller
    K_s: float = None
    Gamma: float = None
    rate_hz: float = None
    speed_clamp: float = None
    theta_bounds: list = None

    # stopping
    max_ticks: int = 20000
    tol_rel: float = 1e-3
    seed: int = 0

    # point-based baseline
    baseline_probe: float = None
    baseline_Kp: float = None
    baseline_broyden_gain: float = 1.0

    source: str = None

    def __post_init__(self):
        if self.family not in FAMILY_DEFAULTS:
            raise InvalidSpecError(f"unknown family {self.family!r}")
        for key, val in FAMILY_DEFAULTS[self.family].items():
            if getattr(self, key) is None:
                setattr(self, key, val)
        if self.sampling not in SAMPLING_MODES:
            raise InvalidSpecError(f"sampling must be one of {SAMPLING_MODES}")
        if (self.plant_mesh is None) == (self.plant_box is None):
            raise InvalidSpecError("give exactly one of plant_mesh or plant_box")
        if self.base_mesh not in ("given", "estimate"):
            raise InvalidSpecError("base_mesh must be 'given' or 'estimate'")
        if self.base_mesh == "given" and self.base_axes is None:
            raise InvalidSpecError("base_axes is required for a given base mesh")
        if self.base_mesh == "estimate" and not (self.base_a_z and self.base_a_z > 0):
            raise InvalidSpecError("base_a_z is required to estimate the base mesh")
        if not self.m >= 1 or not self.rate_hz > 0 or not self.max_ticks >= 1:
            raise InvalidSpecError("m, rate_hz and max_ticks must be positive")
        if not self.manip_nodes:
            raise InvalidSpecError("manip_nodes is empty")
        if self.sampling == "nodes" and not self.sample_nodes:
            raise InvalidSpecError("sample_nodes is empty")
        self.parsed_events()

    @property
    def dt(self):
        return 1.0 / self.rate_hz

    @property
    def k(self):
        return len(self.manip_nodes)

    @property
    def l(self):
        return len(self.sample_nodes) if self.sampling == "nodes" else int(self.n_samples)

    def parsed_events(self):
        """``"<tick> lose|restore <id> ..."`` strings as (tick, action, ids), by tick."""
        out = []
        for ev in self.events:
            parts = str(ev).split()
            if len(parts) < 3 or parts[1] not in ("lose", "restore"):
                raise InvalidSpecError(f"bad event {ev!r}")
            try:
                out.append((int(parts[0]), parts[1], tuple(int(p) for p in parts[2:])))
            except ValueError as exc:
                raise InvalidSpecError(f"bad event {ev!r}") from exc
        return sorted(out, key=lambda e: e[0])

    def resolve(self, path):
        p = Path(path)
        if not p.is_absolute() and self.source:
            p = Path(os.path.normpath(Path(self.source).parent / p))
        return p

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name for f in dataclasses.fields(Scenario)} - {"source"}


def scenario_from_dict(data, source=None) -> Scenario:
    unknown = set(data) - _FIELDS
    if unknown:
        raise InvalidSpecError(f"unknown scenario keys: {sorted(unknown)}")
    return Scenario(**data, source=None if source is None else str(source))


def load_scenario(path) -> Scenario:
    path = Path(path)
    data = yaml.safe_load(path.read_text())
    if not isinstance(data, dict):
        raise InvalidSpecError(f"{path}: scenario must be a mapping")
    return scenario_from_dict(data, path)
