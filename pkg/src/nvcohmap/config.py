"""JSON run configuration: schema, defaults, validation and hashing."""

from __future__ import annotations

import hashlib
import json
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .fitting import FitOptions
from .pulses import DeviceDelays
from .scene import AcquisitionPlan, AntennaModel, CameraModel, build_scene, default_tau_list
from .spin import NV_AXES, SpinParams, mhz_to_radns

__all__ = [
    "ConfigError",
    "RunConfig",
    "SequenceConfig",
    "config_hash",
    "load_config",
    "load_sequence_config",
]

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; the message lists offending fields by dotted path."""


DEFAULT_NV_AXIS = 2


def _default_bias():
    # upper resonance of the driven NV axis at 3111.5 MHz, plus a component
    # orthogonal to it so all eight ODMR lines are distinct
    axis = NV_AXES[DEFAULT_NV_AXIS].vector
    return tuple(float(v) for v in 8.625 * axis + np.array([1.0, 1.5, 0.5]))


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SpinConfig(_Model):
    D_mhz: float = Field(2870.0, gt=0)
    gamma_e_mhz_per_mt: float = Field(28.0, gt=0)
    bias_mt: Tuple[float, float, float] = Field(default_factory=_default_bias)


class AntennaConfig(_Model):
    center_xy_um: Optional[Tuple[float, float]] = None  # default: upper-right scene corner
    radius_um: float = Field(250.0, gt=0)
    standoff_um: float = Field(125.0, gt=0)
    rabi_mhz_at_center: float = Field(5.0, gt=0)
    n_segments: int = Field(256, ge=16)


class MapSpec(_Model):
    kind: Literal["uniform", "gradient", "gaussian", "table"]
    value: Optional[float] = None
    start: Optional[float] = None
    end: Optional[float] = None
    direction: Optional[Tuple[float, float]] = None
    peak: Optional[float] = None
    center_xy: Optional[Tuple[float, float]] = None
    diameter: Optional[float] = Field(None, gt=0)
    floor: Optional[float] = None
    values: Optional[List[List[float]]] = None

    def numbers(self):
        """Values that set the map's level; ``floor`` is an additive offset and excluded."""
        out = [v for v in (self.value, self.start, self.end, self.peak) if v is not None]
        if self.values is not None:
            out += [v for row in self.values for v in row]
        return out

    def as_spec(self):
        return self.model_dump(exclude_none=True)


_REQUIRED = {"uniform": ("value",), "gradient": ("start", "end"), "gaussian": ("peak", "diameter"),
             "table": ("values",)}


def _check_map(spec: MapSpec, positive: bool):
    missing = [f for f in _REQUIRED[spec.kind] if getattr(spec, f) is None]
    if missing:
        raise ValueError(f"{spec.kind} map needs {', '.join(missing)}")
    nums = spec.numbers()
    if spec.floor is not None and spec.floor < 0:
        raise ValueError("floor must be nonnegative")
    if positive and any(v <= 0 for v in nums):
        raise ValueError("T2* values must be positive")
    if not positive and any(v < 0 for v in nums):
        raise ValueError("values must be nonnegative")
    return spec


class SceneConfig(_Model):
    width: int = Field(60, gt=0)
    height: int = Field(60, gt=0)
    pixel_pitch_um: float = Field(1.67, gt=0)
    t2: MapSpec = MapSpec(kind="gradient", start=300.0, end=900.0, direction=(1.0, -1.0))
    brightness: MapSpec = MapSpec(kind="gaussian", peak=200.0, diameter=185.0)
    contrast: float = Field(0.03, ge=0, lt=1)
    signal_model: Literal["plain", "detuned"] = "plain"
    uniform_rabi_mhz: Optional[float] = Field(None, gt=0)

    @field_validator("t2")
    @classmethod
    def _t2_positive(cls, v):
        return _check_map(v, positive=True)

    @field_validator("brightness")
    @classmethod
    def _brightness_nonnegative(cls, v):
        return _check_map(v, positive=False)


class CameraConfig(_Model):
    gain: float = Field(1.0, gt=0)
    read_noise_sigma: float = Field(5.0, ge=0)
    dark_mean: float = Field(100.0, ge=0)
    full_well_counts: int = Field(65535, gt=0, le=65535)


class PlanConfig(_Model):
    tau_start_ns: float = Field(0.0, ge=0)
    tau_stop_ns: float = Field(930.0, ge=0)
    tau_step_ns: float = Field(10.0, gt=0)
    tau_list_ns: Optional[List[float]] = None
    sequences_per_frame: int = Field(150, ge=1)
    frames_per_kind: int = Field(250, ge=1)
    exposure_ms: float = Field(40.0, gt=0)
    init_duration_us: float = Field(300.0, gt=0)

    def taus(self):
        if self.tau_list_ns is not None:
            return np.asarray(self.tau_list_ns, dtype=float)
        return default_tau_list(self.tau_start_ns, self.tau_stop_ns, self.tau_step_ns)


class FitConfig(_Model):
    max_iterations: int = Field(200, ge=1)
    rel_tolerance: float = Field(1e-10, gt=0)
    initial_damping: float = Field(1e-3, gt=0)
    baseline_bounds: Tuple[float, float] = (0.5, 1.5)
    contrast_bounds: Tuple[float, float] = (0.0, 0.5)
    rabi_mhz_bounds: Tuple[float, float] = (0.1, 50.0)
    t2_ns_bounds: Tuple[float, float] = (10.0, 1e5)


class QualityConfig(_Model):
    min_r2: float = Field(0.5, le=1)
    min_contrast: float = Field(0.005, ge=0)
    bound_margin: float = Field(1e-3, ge=0, lt=1)


class RunConfig(_Model):
    schema_version: Literal[1] = SCHEMA_VERSION
    seed: int = Field(20211, ge=0, lt=2**64)
    spin: SpinConfig = SpinConfig()
    nv_axis: int = Field(DEFAULT_NV_AXIS, ge=0, le=3)
    mw_freq_mhz: Optional[float] = Field(None, gt=0)
    antenna: AntennaConfig = AntennaConfig()
    scene: SceneConfig = SceneConfig()
    camera: CameraConfig = CameraConfig()
    plan: PlanConfig = PlanConfig()
    fit: FitConfig = FitConfig()
    quality: QualityConfig = QualityConfig()

    # builders for the runtime objects

    def spin_params(self):
        s = self.spin
        return SpinParams(s.D_mhz, s.gamma_e_mhz_per_mt, tuple(s.bias_mt))

    def antenna_model(self):
        a = self.antenna
        center = a.center_xy_um or (self.scene.width * self.scene.pixel_pitch_um, 0.0)
        return AntennaModel.calibrated(a.rabi_mhz_at_center, NV_AXES[self.nv_axis].vector,
                                       loop_center_xy=center,
                                       loop_radius=a.radius_um, standoff_z=a.standoff_um,
                                       n_segments=a.n_segments)

    def camera_model(self):
        c = self.camera
        return CameraModel(c.gain, c.read_noise_sigma, c.dark_mean, 16, c.full_well_counts)

    def acquisition_plan(self):
        p = self.plan
        return AcquisitionPlan(tuple(p.taus()), p.sequences_per_frame, p.frames_per_kind,
                               p.exposure_ms, p.init_duration_us)

    def fit_options(self):
        f = self.fit
        w = tuple(float(v) for v in mhz_to_radns(f.rabi_mhz_bounds))
        return FitOptions(f.max_iterations, f.rel_tolerance, f.initial_damping,
                          (f.baseline_bounds, f.contrast_bounds, w, f.t2_ns_bounds))

    def build_scene(self):
        s = self.scene
        return build_scene(
            self.antenna_model(), self.spin_params(), self.mw_freq_mhz, s.t2.as_spec(),
            s.brightness.as_spec(), (s.width, s.height), s.pixel_pitch_um,
            nv_axis=self.nv_axis, contrast=s.contrast, signal_model=s.signal_model,
            uniform_rabi_mhz=s.uniform_rabi_mhz,
        )


class SequenceConfig(_Model):
    schema_version: Literal[1] = SCHEMA_VERSION
    tau_ns: float = Field(930.0, ge=0)
    init_duration_us: float = Field(300.0, gt=0)
    readout_duration_us: float = Field(300.0, gt=0)
    gap_ns: float = 1000.0
    lead_in_ns: Optional[float] = Field(None, ge=0)  # default: the AOM delay
    grid_ns: float = Field(3.3, gt=0)
    aom_delay_ns: float = Field(130.0, ge=0)
    aom_rise_ns: float = Field(35.0, ge=0)
    repeat_count: int = Field(150, ge=1)
    extra_segments: List[dict] = Field(default_factory=list)

    def delays(self):
        return DeviceDelays(self.aom_delay_ns, self.aom_rise_ns)


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "; ".join(lines)


def _load(model, path):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return parse_config(model, data, source=path)


def parse_config(model, data, source="<config>"):
    try:
        return model.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"{source}: {_format_errors(exc)}") from exc


def load_config(path) -> RunConfig:
    return _load(RunConfig, path)


def load_sequence_config(path) -> SequenceConfig:
    return _load(SequenceConfig, path)


def canonical_json(cfg) -> bytes:
    """Deterministic serialization of every semantic field, defaults included."""
    return json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":")).encode()


def config_hash(cfg) -> str:
    return hashlib.sha256(canonical_json(cfg)).hexdigest()
