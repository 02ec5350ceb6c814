"""Per-pixel coherence maps: parallel fitting, quality masking and export."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from ._parallel import parallel_map
from .fitting import FitOptions, fit_batch, initial_guess
from .pgm import write_pgm

__all__ = [
    "CoherenceMap",
    "CoherenceMapper",
    "fit_map",
    "map_summary",
    "quality_mask",
    "write_map_csv",
    "write_summary_json",
    "write_t2_pgm",
]

# fixed so that results never depend on the worker count
CHUNK_PIXELS = 64

_PLANES = ("baseline", "contrast", "omega_prime", "t2_star")


@dataclass
class CoherenceMap:
    t2_star: np.ndarray
    omega_prime: np.ndarray
    contrast: np.ndarray
    baseline: np.ndarray
    r_squared: np.ndarray
    residual_norm: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    at_bound: np.ndarray  # (h, w, 4)
    fitted: np.ndarray  # pixels that had a valid trace
    quality: np.ndarray  # pixels passing quality checks
    bounds: tuple = ()
    meta: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.t2_star.shape

    @property
    def height(self):
        return self.shape[0]

    @property
    def width(self):
        return self.shape[1]

    def valid_t2(self) -> np.ndarray:
        return self.t2_star[self.quality]


def _fit_chunk(tau, traces, opts):
    guesses = np.array([initial_guess(y, tau, opts.bounds).to_array() for y in traces])
    return fit_batch(tau, traces, guesses, opts)


def fit_map(cube, opts=None, n_threads=None) -> CoherenceMap:
    """Fit every valid pixel of a trace cube independently.

    Valid pixels are taken in raster order and split into fixed-size chunks;
    chunks run on a thread pool and write disjoint slices, so the map is
    bit-identical for any thread count. Masked pixels stay unfitted (NaN).
    """
    opts = opts or FitOptions()
    h, w = cube.shape
    flat = cube.values.reshape(h * w, -1)
    pix = np.flatnonzero(cube.mask.reshape(-1))
    chunks = [pix[i : i + CHUNK_PIXELS] for i in range(0, pix.size, CHUNK_PIXELS)]
    results = parallel_map(lambda ch: _fit_chunk(cube.tau_list, flat[ch], opts), chunks, n_threads)

    params = np.full((h * w, 4), np.nan)
    r2 = np.full(h * w, np.nan)
    rnorm = np.full(h * w, np.nan)
    iters = np.zeros(h * w, dtype=int)
    conv = np.zeros(h * w, dtype=bool)
    at_bound = np.zeros((h * w, 4), dtype=bool)
    for ch, res in zip(chunks, results):
        params[ch] = res["params"]
        r2[ch] = res["r_squared"]
        rnorm[ch] = np.sqrt(res["ssr"])
        iters[ch] = res["iterations"]
        conv[ch] = res["converged"]
        at_bound[ch] = res["at_bound"]
    fitted = cube.mask.copy()
    return CoherenceMap(
        t2_star=params[:, 3].reshape(h, w),
        omega_prime=params[:, 2].reshape(h, w),
        contrast=params[:, 1].reshape(h, w),
        baseline=params[:, 0].reshape(h, w),
        r_squared=r2.reshape(h, w),
        residual_norm=rnorm.reshape(h, w),
        iterations=iters.reshape(h, w),
        converged=conv.reshape(h, w),
        at_bound=at_bound.reshape(h, w, 4),
        fitted=fitted,
        quality=fitted & conv.reshape(h, w),
        bounds=opts.bounds,
        meta=dict(cube.meta),
    )


def quality_mask(cmap, min_r2=0.5, min_contrast=0.005, bound_margin=1e-3) -> CoherenceMap:
    """Flag pixels that did not converge, fit poorly, show no dip, or sit at a bound.

    ``bound_margin`` is relative: a parameter within ``margin * |bound|`` of a
    bound counts as pinned (an exact hit on a zero bound too).
    """
    if not 0.0 <= bound_margin < 1.0:
        raise ValueError("bound_margin must lie in [0, 1)")
    q = cmap.fitted & cmap.converged
    with np.errstate(invalid="ignore"):
        q &= cmap.r_squared >= min_r2
        q &= cmap.contrast >= min_contrast
        planes = np.stack([getattr(cmap, name) for name in _PLANES], axis=-1)
        for i, (lo, hi) in enumerate(cmap.bounds):
            near = (planes[..., i] <= lo + bound_margin * abs(lo)) | (
                planes[..., i] >= hi - bound_margin * abs(hi)
            )
            q &= ~near
    cmap.quality = q & ~np.isnan(cmap.t2_star)
    return cmap


def map_summary(cmap) -> dict:
    t2 = cmap.valid_t2()
    n_fit = int(cmap.fitted.sum())
    pct = {f"p{q}": float(np.percentile(t2, q)) for q in (5, 25, 50, 75, 95)} if t2.size else {}
    return {
        "width": cmap.width,
        "height": cmap.height,
        "n_fitted": n_fit,
        "n_quality": int(t2.size),
        "convergence_fraction": float(cmap.converged[cmap.fitted].mean()) if n_fit else 0.0,
        "quality_fraction": float(t2.size / n_fit) if n_fit else 0.0,
        "t2_star_ns": pct,
    }


def _fmt(v):
    return repr(float(v))


def write_map_csv(path, cmap):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["x", "y", "t2_star_ns", "omega_prime_radns", "contrast", "baseline", "r2", "converged"])
        for y, x in zip(*np.nonzero(cmap.fitted)):
            out.writerow([x, y, _fmt(cmap.t2_star[y, x]), _fmt(cmap.omega_prime[y, x]),
                          _fmt(cmap.contrast[y, x]), _fmt(cmap.baseline[y, x]),
                          _fmt(cmap.r_squared[y, x]), int(cmap.converged[y, x])])


def write_t2_pgm(path, cmap, vrange=None):
    """16-bit heatmap of T2*, linear over ``vrange`` (default: quality pixels' range).

    Pixels failing the quality mask are written as 0. The range is recorded in
    a comment line.
    """
    t2 = cmap.valid_t2()
    if vrange is None:
        vrange = (float(t2.min()), float(t2.max())) if t2.size else (0.0, 1.0)
    vmin, vmax = (float(v) for v in vrange)
    span = vmax - vmin if vmax > vmin else 1.0
    scaled = np.clip((np.nan_to_num(cmap.t2_star) - vmin) / span, 0.0, 1.0)
    img = np.where(cmap.quality, np.rint(scaled * 65535), 0).astype(np.uint16)
    write_pgm(path, img, comments=[f"t2_star_ns range [{vmin!r}, {vmax!r}]"])
    return vmin, vmax


def write_summary_json(path, cmap, extra=None):
    summary = map_summary(cmap)
    if extra:
        summary.update(extra)
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return summary


class CoherenceMapper(BaseEstimator):
    """Estimator that fits a :class:`~nvcohmap.pipeline.TraceCube` into a coherence map.

    ``fit(cube)`` stores the quality-masked result in ``map_``;
    ``transform(cube)`` returns the T2* plane with NaN where quality fails.
    """

    def __init__(self, max_iterations=200, rel_tolerance=1e-10, initial_damping=1e-3,
                 bounds=FitOptions().bounds, min_r2=0.5, min_contrast=0.005,
                 bound_margin=1e-3, n_threads=None):
        self.max_iterations = max_iterations
        self.rel_tolerance = rel_tolerance
        self.initial_damping = initial_damping
        self.bounds = bounds
        self.min_r2 = min_r2
        self.min_contrast = min_contrast
        self.bound_margin = bound_margin
        self.n_threads = n_threads

    def fit(self, X, y=None):
        opts = FitOptions(self.max_iterations, self.rel_tolerance, self.initial_damping, self.bounds)
        cmap = fit_map(X, opts, self.n_threads)
        self.map_ = quality_mask(cmap, self.min_r2, self.min_contrast, self.bound_margin)
        return self

    def transform(self, X):
        self.fit(X)
        return np.where(self.map_.quality, self.map_.t2_star, np.nan)

    def fit_transform(self, X, y=None):
        return self.transform(X)
