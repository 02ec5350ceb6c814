"""Ground-truth scenes and synthetic M/L/B camera acquisitions.

A scene assigns every pixel a bare Rabi frequency (from the microwave loop's
near field), a detuning, an intrinsic T2* and a PL brightness. The camera model
turns a scene into integer frames for the three image kinds:

* ``M`` -- PL with the microwave sequence applied,
* ``L`` -- same timing with the microwave disabled,
* ``B`` -- background with the excitation laser off.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from ._parallel import parallel_map
from .pgm import write_pgm
from .spin import (
    NV_AXES,
    SpinParams,
    generalized_rabi,
    mhz_to_radns,
    normalized_pl_model,
    resonance_pair,
)

__all__ = [
    "KINDS",
    "AcquisitionPlan",
    "AntennaModel",
    "CameraModel",
    "FrameStack",
    "SaturationError",
    "SceneMap",
    "build_scene",
    "default_tau_list",
    "expected_counts",
    "frame_filename",
    "mw_field_at",
    "synthesize_stack",
    "write_acquisition",
]

KINDS = ("M", "L", "B")
_KIND_CODE = {"M": 0, "L": 1, "B": 2}
# below this photoelectron mean the exact Poisson sampler is used
_POISSON_EXACT_BELOW = 30.0


class SaturationError(ValueError):
    """Expected counts come within 3 sigma of the camera full well."""


def default_tau_list(start=0.0, stop=930.0, step=10.0) -> np.ndarray:
    n = int(round((stop - start) / step)) + 1
    return start + step * np.arange(n, dtype=float)


@dataclass(frozen=True)
class AntennaModel:
    """Circular microwave loop parallel to the NV layer.

    ``drive_scale`` converts the loop field (Biot-Savart units with the
    ``mu0 I / 4 pi`` prefactor dropped, i.e. 1/um) into a Rabi frequency in rad/ns.
    """

    loop_center_xy: tuple = (0.0, 0.0)
    loop_radius: float = 200.0
    standoff_z: float = 30.0
    drive_scale: float = 1.0
    n_segments: int = 256

    def __post_init__(self):
        if not self.loop_radius > 0:
            raise ValueError("loop_radius must be positive")
        if not self.standoff_z > 0:
            raise ValueError("standoff_z must be positive")
        if self.n_segments < 16:
            raise ValueError("n_segments must be at least 16")
        if not self.drive_scale > 0:
            raise ValueError("drive_scale must be positive")
        object.__setattr__(self, "loop_center_xy", tuple(float(v) for v in self.loop_center_xy))

    @classmethod
    def calibrated(cls, rabi_mhz_at_center, nv_axis=None, **kwargs):
        """Set ``drive_scale`` so the Rabi frequency below the loop center is ``rabi_mhz_at_center``.

        With ``nv_axis`` (a unit 3-vector) the calibration targets the field
        component transverse to that axis; otherwise the bare magnitude.
        """
        proto = cls(**kwargs)
        drive = on_axis_field(proto.loop_radius, proto.standoff_z)
        if nv_axis is not None:
            # the on-axis field points along z
            drive *= np.sqrt(1.0 - float(np.asarray(nv_axis, dtype=float)[2]) ** 2)
        return cls(**{**kwargs, "drive_scale": float(mhz_to_radns(rabi_mhz_at_center)) / drive})


def on_axis_field(radius, z):
    """Closed-form on-axis field of a unit circular loop (same units as :func:`mw_field_at`)."""
    return 2.0 * np.pi * radius**2 / (radius**2 + z**2) ** 1.5


def mw_field_at(antenna: AntennaModel, xy):
    """Loop field at points ``xy`` (..., 2) in the NV plane, in um.

    Returns ``(magnitude, direction)`` with ``direction`` of shape (..., 3).
    The line integral uses the tangent at equally spaced nodes, which converges
    exponentially for a smooth closed loop.
    """
    xy = np.asarray(xy, dtype=float)
    pts = xy.reshape(-1, 2)
    n = antenna.n_segments
    theta = 2.0 * np.pi * np.arange(n) / n
    R = antenna.loop_radius
    cx, cy = antenna.loop_center_xy
    src = np.stack(
        [cx + R * np.cos(theta), cy + R * np.sin(theta), np.full(n, antenna.standoff_z)], axis=1
    )
    dl = (2.0 * np.pi * R / n) * np.stack([-np.sin(theta), np.cos(theta), np.zeros(n)], axis=1)

    field = np.zeros((pts.shape[0], 3))
    # chunk over field points to bound memory
    for s in range(0, pts.shape[0], 4096):
        p = pts[s : s + 4096]
        r = np.concatenate([p, np.zeros((p.shape[0], 1))], axis=1)[:, None, :] - src[None]
        dist3 = np.linalg.norm(r, axis=2) ** 3
        field[s : s + 4096] = np.sum(np.cross(dl[None], r) / dist3[..., None], axis=1)

    mag = np.linalg.norm(field, axis=1)
    direction = field / mag[:, None]
    return mag.reshape(xy.shape[:-1]), direction.reshape(xy.shape[:-1] + (3,))


def _pixel_centers(width, height, pitch):
    """Pixel-center coordinates in um; x to the right, y downward (row 0 on top)."""
    x = (np.arange(width) + 0.5) * pitch
    y = (np.arange(height) + 0.5) * pitch
    return np.meshgrid(x, y)


def _eval_map_spec(spec, X, Y, name):
    """Evaluate a per-pixel map spec: a number, or a dict with ``kind`` in
    ``uniform``, ``gradient``, ``gaussian`` or ``table``."""
    if np.isscalar(spec):
        spec = {"kind": "uniform", "value": spec}
    kind = spec.get("kind")
    if kind == "uniform":
        out = np.full(X.shape, float(spec["value"]))
    elif kind == "gradient":
        d = np.asarray(spec.get("direction", (1.0, 0.0)), dtype=float)
        if not np.any(d):
            raise ValueError(f"{name}: gradient direction must be nonzero")
        proj = d[0] * X + d[1] * Y
        span = proj.max() - proj.min()
        s = (proj - proj.min()) / span if span > 0 else np.zeros_like(proj)
        out = spec["start"] + (spec["end"] - spec["start"]) * s
    elif kind == "gaussian":
        cx, cy = spec.get("center_xy", (X.mean(), Y.mean()))
        w = 0.5 * float(spec["diameter"])  # 1/e^2 radius
        r2 = (X - cx) ** 2 + (Y - cy) ** 2
        out = spec.get("floor", 0.0) + spec["peak"] * np.exp(-2.0 * r2 / w**2)
    elif kind == "table":
        out = np.asarray(spec["values"], dtype=float)
        if out.shape != X.shape:
            raise ValueError(f"{name}: table shape {out.shape} does not match scene {X.shape}")
    else:
        raise ValueError(f"{name}: unknown map kind {kind!r}")
    return np.asarray(out, dtype=float)


@dataclass
class SceneMap:
    width: int
    height: int
    pixel_pitch: float
    omega_R: np.ndarray
    delta: np.ndarray
    t2_intrinsic: np.ndarray
    brightness_L0: np.ndarray
    contrast: np.ndarray
    signal_model: str = "plain"

    def __post_init__(self):
        shape = (self.height, self.width)
        for name in ("omega_R", "delta", "t2_intrinsic", "brightness_L0", "contrast"):
            arr = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), shape).copy()
            setattr(self, name, arr)
        if np.any(self.omega_R < 0):
            raise ValueError("omega_R must be nonnegative")
        if np.any(self.t2_intrinsic <= 0):
            raise ValueError("t2_intrinsic must be positive")
        if np.any(self.brightness_L0 < 0):
            raise ValueError("brightness_L0 must be nonnegative")
        if np.any(self.contrast < 0):
            raise ValueError("contrast must be nonnegative")
        if self.signal_model not in ("plain", "detuned"):
            raise ValueError(f"unknown signal_model {self.signal_model!r}")

    @property
    def shape(self):
        return (self.height, self.width)

    @property
    def omega_prime(self) -> np.ndarray:
        return generalized_rabi(self.omega_R, self.delta)

    @property
    def effective_contrast(self) -> np.ndarray:
        """Dip depth entering the PL model; the detuned variant adds ``Omega_R^2 / Omega'^2``."""
        if self.signal_model == "plain":
            return self.contrast
        w2 = self.omega_prime**2
        ratio = np.divide(self.omega_R**2, w2, out=np.ones_like(w2), where=w2 > 0)
        return self.contrast * ratio

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps([self.width, self.height, self.pixel_pitch, self.signal_model]).encode())
        for name in ("omega_R", "delta", "t2_intrinsic", "brightness_L0", "contrast"):
            h.update(np.ascontiguousarray(getattr(self, name), dtype="<f8").tobytes())
        return h.hexdigest()


def build_scene(
    antenna,
    spin,
    mw_freq,
    t2_map_spec,
    brightness_spec,
    dims,
    pixel_pitch,
    *,
    nv_axis=0,
    contrast=0.03,
    signal_model="plain",
    uniform_rabi_mhz=None,
    bias_gradient=None,
) -> SceneMap:
    """Build the per-pixel ground truth.

    Parameters
    ----------
    antenna : AntennaModel or None
        Source of the bare Rabi map; ignored when ``uniform_rabi_mhz`` is given.
    spin : SpinParams
    mw_freq : float or None
        Drive frequency in MHz. ``None`` drives the upper resonance of the chosen
        NV axis at the scene center, i.e. zero detuning under a uniform bias.
    t2_map_spec, brightness_spec : number or dict
        See :func:`_eval_map_spec`.
    dims : (width, height)
    pixel_pitch : float
        um per pixel.
    bias_gradient : (3, 2) array-like, optional
        d(B_bias)/d(x, y) in mT/um about the scene center. Defaults to uniform.
    """
    width, height = (int(v) for v in dims)
    if width <= 0 or height <= 0:
        raise ValueError(f"scene dimensions must be positive, got {dims}")
    if not pixel_pitch > 0:
        raise ValueError("pixel_pitch must be positive")
    X, Y = _pixel_centers(width, height, pixel_pitch)
    axis = NV_AXES[nv_axis].vector

    if uniform_rabi_mhz is not None:
        omega_R = np.full(X.shape, float(mhz_to_radns(uniform_rabi_mhz)))
    else:
        mag, direction = mw_field_at(antenna, np.stack([X, Y], axis=-1))
        # only the field component transverse to the NV axis drives the spin
        par = direction @ axis
        perp = mag * np.sqrt(np.clip(1.0 - par**2, 0.0, 1.0))
        omega_R = antenna.drive_scale * perp

    bias = np.broadcast_to(spin.bias, X.shape + (3,)).copy()
    if bias_gradient is not None:
        g = np.asarray(bias_gradient, dtype=float)
        dx, dy = X - X.mean(), Y - Y.mean()
        bias = bias + g[:, 0] * dx[..., None] + g[:, 1] * dy[..., None]
    b_proj = np.abs(bias @ axis)
    _, f_plus = resonance_pair(spin, b_proj)
    if mw_freq is None:
        _, mw_freq = resonance_pair(spin, abs(float(spin.bias @ axis)))
    delta = mhz_to_radns(mw_freq - f_plus)

    t2 = _eval_map_spec(t2_map_spec, X, Y, "t2")
    if np.any(t2 <= 0):
        raise ValueError("t2 map spec yields nonpositive T2* values")
    brightness = _eval_map_spec(brightness_spec, X, Y, "brightness")
    c = _eval_map_spec(contrast, X, Y, "contrast")
    return SceneMap(
        width=width,
        height=height,
        pixel_pitch=float(pixel_pitch),
        omega_R=omega_R,
        delta=delta,
        t2_intrinsic=t2,
        brightness_L0=brightness,
        contrast=c,
        signal_model=signal_model,
    )


@dataclass(frozen=True)
class CameraModel:
    gain: float = 1.0
    read_noise_sigma: float = 5.0
    dark_mean: float = 100.0
    bit_depth: int = 16
    full_well_counts: int = 65535

    def __post_init__(self):
        if not self.gain > 0:
            raise ValueError("gain must be positive")
        if self.read_noise_sigma < 0:
            raise ValueError("read_noise_sigma must be nonnegative")
        if self.bit_depth != 16:
            raise ValueError("only 16-bit cameras are modelled")
        if not 0 <= self.dark_mean < self.full_well_counts <= 65535:
            raise ValueError("need 0 <= dark_mean < full_well_counts <= 65535")


@dataclass(frozen=True)
class AcquisitionPlan:
    tau_list: tuple = field(default_factory=lambda: tuple(default_tau_list()))
    sequences_per_frame: int = 150
    frames_per_kind: int = 250
    exposure: float = 40.0  # ms
    init_duration: float = 300.0  # us

    def __post_init__(self):
        tau = np.asarray(self.tau_list, dtype=float)
        if tau.ndim != 1 or tau.size == 0:
            raise ValueError("tau_list must be a nonempty 1-D sequence")
        if np.any(tau < 0) or np.any(np.diff(tau) <= 0):
            raise ValueError("tau_list must be nonnegative and strictly increasing")
        if self.sequences_per_frame < 1 or self.frames_per_kind < 1:
            raise ValueError("sequence and frame counts must be >= 1")
        object.__setattr__(self, "tau_list", tuple(float(t) for t in tau))

    @property
    def taus(self) -> np.ndarray:
        return np.asarray(self.tau_list)

    def tau_index(self, tau) -> int:
        idx = np.flatnonzero(self.taus == float(tau))
        if idx.size != 1:
            raise ValueError(f"tau={tau} is not in the acquisition plan")
        return int(idx[0])

    def to_dict(self):
        d = asdict(self)
        d["tau_list"] = list(self.tau_list)
        return d


def _photoelectron_mean(scene, plan, kind, tau):
    if kind not in _KIND_CODE:
        raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
    if kind == "B":
        return np.zeros(scene.shape)
    lam = plan.sequences_per_frame * scene.brightness_L0
    if kind == "M":
        n = normalized_pl_model(
            tau, 1.0, scene.effective_contrast, scene.omega_prime, scene.t2_intrinsic
        )
        lam = lam * n
    return lam


def expected_counts(scene, plan, camera, kind, tau, pixel=None):
    """Noiseless mean counts per frame, for every pixel or one ``(row, col)``."""
    counts = camera.dark_mean + camera.gain * _photoelectron_mean(scene, plan, kind, tau)
    if pixel is not None:
        return float(counts[pixel])
    return counts


@dataclass
class FrameStack:
    kind: str
    tau: float
    frames: np.ndarray  # (n_frames, height, width)
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.frames.ndim != 3:
            raise ValueError("frames must have shape (n_frames, height, width)")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self):
        return self.frames.shape[1:]


def _frame_rng(seed, kind, tau_index, frame_index):
    ss = np.random.SeedSequence([seed, _KIND_CODE[kind], tau_index, frame_index])
    return np.random.Generator(np.random.Philox(ss))


def _check_seed(seed):
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    return seed


def synthesize_stack(scene, plan, camera, kind, tau, seed, *, oracle=False, n_threads=None):
    """Synthesize ``plan.frames_per_kind`` frames of one kind at one tau.

    Each frame draws from its own counter-based stream keyed on
    ``(seed, kind, tau index, frame index)``; within a frame, pixels consume the
    stream in raster order. Frames are therefore reproducible individually and
    the stack does not depend on ``n_threads``.

    With ``oracle=True`` every frame is the float64 noiseless expectation, which
    bypasses shot noise, read noise and integer quantization.
    """
    seed = _check_seed(seed)
    tau_index = plan.tau_index(tau)
    lam = _photoelectron_mean(scene, plan, kind, tau)
    mean = camera.dark_mean + camera.gain * lam
    sigma = np.sqrt(camera.gain**2 * lam + camera.read_noise_sigma**2)
    manifest = {"seed": seed, "kind": kind, "tau_ns": float(tau), "tau_index": tau_index,
                "scene_hash": scene.fingerprint(), "oracle": bool(oracle)}
    n = plan.frames_per_kind
    if oracle:
        frames = np.broadcast_to(mean, (n,) + scene.shape).astype(np.float64)
        return FrameStack(kind, float(tau), frames, manifest)

    worst = np.max(mean + 3.0 * sigma)
    if worst > camera.full_well_counts:
        raise SaturationError(
            f"{kind} frames at tau={tau} ns reach {worst:.0f} counts (mean + 3 sigma), "
            f"above the full well of {camera.full_well_counts}"
        )

    small = lam < _POISSON_EXACT_BELOW
    any_small = bool(np.any(small & (lam > 0)))
    sqrt_lam = np.sqrt(lam)
    frames = np.empty((n,) + scene.shape, dtype=np.uint16)

    def one(i):
        rng = _frame_rng(seed, kind, tau_index, i)
        z = rng.standard_normal((2,) + scene.shape)
        pe = np.maximum(np.rint(lam + sqrt_lam * z[0]), 0.0)
        if any_small:
            pe[small] = rng.poisson(lam[small])
        counts = np.rint(pe * camera.gain + camera.dark_mean + camera.read_noise_sigma * z[1])
        frames[i] = np.clip(counts, 0, camera.full_well_counts)

    parallel_map(one, range(n), n_threads)
    return FrameStack(kind, float(tau), frames, manifest)


def frame_filename(kind, tau, frame_index) -> str:
    return f"{kind}_{float(tau):g}_{frame_index:04d}.pgm"


def write_acquisition(directory, scene, plan, camera, seed, *, n_threads=None, extra=None):
    """Synthesize every (kind, tau) stack and write PGM frames plus ``manifest.json``.

    Returns the manifest path. Output is byte-identical for a fixed
    ``(scene, plan, camera, seed)``.
    """
    seed = _check_seed(seed)
    os.makedirs(directory, exist_ok=True)
    stacks = []
    for tau in plan.tau_list:
        for kind in KINDS:
            stack = synthesize_stack(scene, plan, camera, kind, tau, seed, n_threads=n_threads)
            names = [frame_filename(kind, tau, i) for i in range(stack.n_frames)]

            def write(i, stack=stack, names=names):
                write_pgm(os.path.join(directory, names[i]), stack.frames[i], maxval=65535)

            parallel_map(write, range(stack.n_frames), n_threads)
            stacks.append({"kind": kind, "tau_ns": float(tau), "files": names})
    manifest = {
        "format": "nvcohmap-acquisition",
        "version": 1,
        "seed": seed,
        "scene_hash": scene.fingerprint(),
        "width": scene.width,
        "height": scene.height,
        "pixel_pitch_um": scene.pixel_pitch,
        "plan": plan.to_dict(),
        "camera": asdict(camera),
        "stacks": stacks,
    }
    if extra:
        manifest.update(extra)
    path = os.path.join(directory, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path
