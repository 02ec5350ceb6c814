"""NV ground-state spin physics.

Resonance frequencies from the ground-state Hamiltonian ``D Sz^2 + gamma_e B_z Sz``,
the generalized Rabi frequency, and the damped Rabi photoluminescence model
that both the scene synthesizer and the fitter share.

Unit conventions: linear frequencies are in MHz, fields in mT, times in ns.
Angular frequencies used inside the Rabi model are in rad/ns. Convert with
:func:`mhz_to_radns` and :func:`radns_to_mhz`, never by hand.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import curve_fit
from scipy.signal import find_peaks

__all__ = [
    "NV_AXES",
    "ModelValidityError",
    "NVOrientation",
    "OdmrLine",
    "RabiParams",
    "SpinParams",
    "find_odmr_lines",
    "generalized_rabi",
    "mhz_to_radns",
    "normalized_pl_model",
    "odmr_frequencies",
    "odmr_spectrum",
    "rabi_signal",
    "radns_to_mhz",
    "resonance_pair",
    "zeeman_splitting",
]

ZFS_MHZ = 2870.0
GAMMA_E_MHZ_PER_MT = 28.0


class ModelValidityError(ValueError):
    """Raised when inputs leave the regime where the simple Hamiltonian holds."""


def mhz_to_radns(f_mhz):
    """Linear frequency in MHz to angular frequency in rad/ns."""
    return 2.0 * np.pi * np.asarray(f_mhz, dtype=float) * 1e-3


def radns_to_mhz(omega):
    """Angular frequency in rad/ns to linear frequency in MHz."""
    return np.asarray(omega, dtype=float) * 1e3 / (2.0 * np.pi)


@dataclass(frozen=True)
class SpinParams:
    D: float = ZFS_MHZ
    gamma_e: float = GAMMA_E_MHZ_PER_MT
    B_bias: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.D > 0:
            raise ValueError(f"D must be positive, got {self.D}")
        if not self.gamma_e > 0:
            raise ValueError(f"gamma_e must be positive, got {self.gamma_e}")
        b = np.asarray(self.B_bias, dtype=float)
        if b.shape != (3,) or not np.all(np.isfinite(b)):
            raise ValueError(f"B_bias must be a finite 3-vector, got {self.B_bias}")
        object.__setattr__(self, "B_bias", tuple(float(v) for v in b))

    @property
    def bias(self) -> np.ndarray:
        return np.asarray(self.B_bias, dtype=float)


@dataclass(frozen=True)
class NVOrientation:
    axis: tuple

    def __post_init__(self):
        a = np.asarray(self.axis, dtype=float)
        object.__setattr__(self, "axis", tuple(a / np.linalg.norm(a)))

    @property
    def vector(self) -> np.ndarray:
        return np.asarray(self.axis)


NV_AXES = (
    NVOrientation((1, 1, 1)),
    NVOrientation((1, -1, -1)),
    NVOrientation((-1, 1, -1)),
    NVOrientation((-1, -1, 1)),
)


@dataclass(frozen=True)
class RabiParams:
    omega_R: float
    delta: float = 0.0
    t2_star: float = np.inf

    def __post_init__(self):
        if self.omega_R < 0:
            raise ValueError("omega_R must be nonnegative")
        if not self.t2_star > 0:
            raise ValueError("t2_star must be positive")


@dataclass(frozen=True)
class OdmrLine:
    center: float
    contrast: float = 0.02
    linewidth: float = 5.0

    def __post_init__(self):
        if not self.center > 0:
            raise ValueError("center must be positive")
        if not self.linewidth > 0:
            raise ValueError("linewidth must be positive")
        if not 0 < self.contrast < 1:
            raise ValueError("contrast must lie in (0, 1)")


def zeeman_splitting(params: SpinParams, b_proj):
    """Splitting between ms=+1 and ms=-1 in MHz for a field projection in mT."""
    return 2.0 * params.gamma_e * b_proj


def resonance_pair(params: SpinParams, b_proj):
    """Return ``(f_minus, f_plus)`` in MHz for the |0> -> |-1> and |0> -> |+1> lines."""
    shift = params.gamma_e * b_proj
    f_minus = params.D - shift
    if np.any(np.asarray(f_minus) <= 0):
        raise ModelValidityError(
            f"field projection {b_proj} mT drives the lower resonance below zero"
        )
    return f_minus, params.D + shift


def odmr_frequencies(params: SpinParams) -> np.ndarray:
    """All eight resonance frequencies (MHz, ascending) for the four NV orientations."""
    lines = []
    for nv in NV_AXES:
        b_proj = abs(float(np.dot(params.bias, nv.vector)))
        lines.extend(resonance_pair(params, b_proj))
    return np.sort(np.asarray(lines))


def generalized_rabi(omega_R, delta):
    return np.hypot(omega_R, delta)


def rabi_signal(t, p: RabiParams):
    """Damped Rabi population signal ``exp(-t/T2*) sin^2(omega' t / 2)``."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("t must be nonnegative")
    w = generalized_rabi(p.omega_R, p.delta)
    return np.exp(-t / p.t2_star) * np.sin(0.5 * w * t) ** 2


def normalized_pl_model(tau, a, c, omega_prime, t2_star):
    """Normalized PL trace ``a - c exp(-tau/t2_star) sin^2(omega_prime tau / 2)``.

    This is the single definition of the Rabi dip used for synthesis and fitting.
    Arguments broadcast, so per-pixel parameter planes work directly.
    """
    tau = np.asarray(tau, dtype=float)
    return a - c * np.exp(-tau / t2_star) * np.sin(0.5 * omega_prime * tau) ** 2


def odmr_spectrum(freq_grid, lines) -> np.ndarray:
    """Normalized PL over a frequency grid with one Lorentzian dip per line."""
    f = np.asarray(freq_grid, dtype=float)
    if f.size > 1 and np.any(np.diff(f) <= 0):
        raise ValueError("frequency grid must be strictly increasing")
    out = np.ones_like(f)
    for line in lines:
        hw2 = (0.5 * line.linewidth) ** 2
        out -= line.contrast * hw2 / ((f - line.center) ** 2 + hw2)
    return out


def _lorentzian_dips(f, baseline, *p):
    out = np.full_like(f, baseline)
    for center, contrast, width in zip(p[0::3], p[1::3], p[2::3]):
        hw2 = (0.5 * width) ** 2
        out -= contrast * hw2 / ((f - center) ** 2 + hw2)
    return out


@dataclass
class OdmrFit:
    lines: list = field(default_factory=list)
    baseline: float = 1.0

    @property
    def centers(self) -> np.ndarray:
        return np.array([line.center for line in self.lines])


def find_odmr_lines(freq_grid, spectrum, n_lines=None, min_depth=None) -> OdmrFit:
    """Locate resonance dips and refine them with a joint Lorentzian fit.

    Candidate dips come from a prominence search on ``1 - spectrum``; the
    strongest ``n_lines`` (all of them when ``None``) seed a sum-of-Lorentzians
    least-squares fit with a free baseline, so neighbouring lines that overlap
    do not bias one another.
    """
    f = np.asarray(freq_grid, dtype=float)
    y = np.asarray(spectrum, dtype=float)
    depth = np.median(y) - y
    if min_depth is None:
        min_depth = 0.1 * max(depth.max(), 0.0)
    idx, props = find_peaks(depth, prominence=min_depth)
    if n_lines is not None and idx.size > n_lines:
        keep = np.argsort(props["prominences"])[::-1][:n_lines]
        idx = np.sort(idx[keep])
    if idx.size == 0:
        return OdmrFit(baseline=float(np.median(y)))

    step = float(np.median(np.diff(f)))
    p0 = [float(np.median(y))]
    lo, hi = [-np.inf], [np.inf]
    for i in idx:
        half = depth[i] / 2.0
        # crude FWHM from the samples above half depth around the dip
        j0, j1 = i, i
        while j0 > 0 and depth[j0 - 1] > half:
            j0 -= 1
        while j1 < f.size - 1 and depth[j1 + 1] > half:
            j1 += 1
        width = max((j1 - j0 + 1) * step, step)
        p0 += [f[i], depth[i], width]
        lo += [f[i] - 5 * step, 0.0, 0.1 * step]
        hi += [f[i] + 5 * step, 1.0, 50.0 * width]
    popt, _ = curve_fit(_lorentzian_dips, f, y, p0=p0, bounds=(lo, hi), maxfev=20000)
    lines = [
        OdmrLine(center=c, contrast=min(max(d, 1e-12), 1 - 1e-12), linewidth=w)
        for c, d, w in zip(popt[1::3], popt[2::3], popt[3::3])
    ]
    lines.sort(key=lambda line: line.center)
    return OdmrFit(lines=lines, baseline=float(popt[0]))
