import csv
import json

import numpy as np
import pytest

from nvcohmap.config import RunConfig
from nvcohmap.fitting import DEFAULT_BOUNDS, FitOptions
from nvcohmap.mapping import (
    CHUNK_PIXELS,
    CoherenceMapper,
    fit_map,
    map_summary,
    quality_mask,
    write_map_csv,
    write_summary_json,
    write_t2_pgm,
)
from nvcohmap.pgm import read_pgm
from nvcohmap.pipeline import FramePipeline, TraceCube, stack_sum
from nvcohmap.scene import synthesize_stack
from nvcohmap.spin import mhz_to_radns, normalized_pl_model

TAU = np.arange(0.0, 931.0, 10.0)
SIGMA = 5e-4


def synthetic_cube(h, w, t2, seed=0, sigma=SIGMA, contrast=0.03):
    rng = np.random.default_rng(seed)
    t2 = np.broadcast_to(np.asarray(t2, float), (h, w))
    vals = normalized_pl_model(TAU, 1.0, contrast, mhz_to_radns(5.0), t2[..., None])
    vals = vals + sigma * rng.standard_normal(vals.shape)
    return TraceCube(TAU, vals, np.ones((h, w), bool))


def test_fit_map_15x15_has_225_results():
    cmap = fit_map(synthetic_cube(15, 15, 318.0))
    assert cmap.shape == (15, 15)
    assert np.count_nonzero(cmap.fitted) == 225
    assert np.all(np.isfinite(cmap.t2_star))
    assert cmap.converged.all()


def test_masked_pixels_are_skipped():
    cube = synthetic_cube(4, 5, 300.0)
    cube.mask[1, 2] = False
    cube.mask[3, 0] = False
    cmap = fit_map(cube)
    assert np.isnan(cmap.t2_star[1, 2]) and not cmap.fitted[1, 2]
    assert np.count_nonzero(np.isfinite(cmap.t2_star)) == 18
    assert not cmap.quality[3, 0]


def test_uniform_scene_has_no_structure_above_noise():
    cmap = fit_map(synthetic_cube(12, 12, 318.0, seed=3))
    t2 = cmap.t2_star.ravel()
    # the per-pixel scatter from noise alone, cf. repeated single-trace fits
    spread = np.std(t2, ddof=1)
    assert np.all(np.abs(t2 - np.median(t2)) < 5 * spread)
    assert abs(np.median(t2) / 318.0 - 1) < 0.02
    rows = cmap.t2_star.mean(axis=1)
    assert np.ptp(rows) < 5 * spread / np.sqrt(12) * np.sqrt(2)


def test_fitted_t2_largest_toward_upper_right():
    cfg = RunConfig()
    cfg = cfg.model_copy(update={"plan": cfg.plan.model_copy(update={"frames_per_kind": 1})})
    scene, plan, cam = cfg.build_scene(), cfg.acquisition_plan(), cfg.camera_model()
    sums = {(k, t): stack_sum(synthesize_stack(scene, plan, cam, k, t, 0, oracle=True))
            for t in plan.tau_list for k in "MLB"}
    cmap = fit_map(FramePipeline(bin=4).transform(sums))
    t2 = cmap.t2_star
    r, c = np.unravel_index(np.argmax(t2), t2.shape)
    assert r <= 2 and c >= 12
    h = t2.shape[0] // 2
    assert t2[:h, h:].mean() > max(t2[:h, :h].mean(), t2[h:, h:].mean(), t2[h:, :h].mean())


def test_thread_count_does_not_change_results():
    cube = synthetic_cube(9, 17, np.linspace(200, 800, 17), seed=5)
    assert cube.shape[0] * cube.shape[1] > 2 * CHUNK_PIXELS
    one = fit_map(cube, n_threads=1)
    many = fit_map(cube, n_threads=4)
    for name in ("t2_star", "omega_prime", "contrast", "baseline", "r_squared", "iterations"):
        assert np.array_equal(getattr(one, name), getattr(many, name))


def test_quality_mask_examples():
    cmap = fit_map(synthetic_cube(3, 3, 318.0))
    lenient = quality_mask(cmap, min_r2=-np.inf, min_contrast=0.0, bound_margin=0.0)
    assert lenient.quality.all()
    cmap.r_squared[0, 0] = 0.1
    cmap.t2_star[1, 1] = DEFAULT_BOUNDS[3][1]
    cmap.contrast[2, 2] = 0.001
    q = quality_mask(cmap, min_r2=0.5).quality
    assert not q[0, 0] and not q[1, 1] and not q[2, 2]
    assert q.sum() == 6
    with pytest.raises(ValueError):
        quality_mask(cmap, bound_margin=1.5)


def test_unconverged_pixels_flagged():
    cmap = fit_map(synthetic_cube(2, 2, 318.0), FitOptions(max_iterations=1))
    assert not cmap.converged.any()
    assert not quality_mask(cmap).quality.any()


def test_noise_pixels_fail_quality():
    cube = synthetic_cube(3, 3, 318.0, sigma=1e-3, contrast=0.0)
    cmap = quality_mask(fit_map(cube))
    assert not cmap.quality.any()


def test_exports(tmp_path):
    cube = synthetic_cube(3, 4, np.linspace(250, 700, 4), seed=2)
    cube.mask[0, 0] = False
    cmap = quality_mask(fit_map(cube))

    write_map_csv(tmp_path / "map.csv", cmap)
    rows = list(csv.reader(open(tmp_path / "map.csv")))
    assert rows[0] == ["x", "y", "t2_star_ns", "omega_prime_radns", "contrast", "baseline", "r2", "converged"]
    assert len(rows) == 12
    first = rows[1]
    assert (int(first[0]), int(first[1])) == (1, 0)
    assert float(first[2]) == cmap.t2_star[0, 1]

    vmin, vmax = write_t2_pgm(tmp_path / "t2.pgm", cmap)
    raw = (tmp_path / "t2.pgm").read_bytes()
    assert f"# t2_star_ns range [{vmin!r}, {vmax!r}]".encode() in raw
    img = read_pgm(tmp_path / "t2.pgm")
    assert img[0, 0] == 0
    k = np.unravel_index(np.nanargmax(np.where(cmap.quality, cmap.t2_star, np.nan)), img.shape)
    assert img[k] == 65535

    summary = write_summary_json(tmp_path / "s.json", cmap, {"bin": 1})
    loaded = json.loads((tmp_path / "s.json").read_text())
    assert loaded == summary
    assert set(loaded["t2_star_ns"]) == {"p5", "p25", "p50", "p75", "p95"}
    assert loaded["n_fitted"] == 11 and loaded["convergence_fraction"] == 1.0


def test_summary_of_empty_map():
    cube = synthetic_cube(2, 2, 318.0)
    cube.mask[:] = False
    s = map_summary(quality_mask(fit_map(cube)))
    assert s["n_fitted"] == 0 and s["t2_star_ns"] == {}


def test_coherence_mapper_estimator():
    est = CoherenceMapper(min_r2=0.6)
    assert est.get_params()["min_r2"] == 0.6
    cube = synthetic_cube(3, 3, 400.0)
    out = est.fit_transform(cube)
    assert out.shape == (3, 3)
    assert np.allclose(out, 400.0, rtol=0.1)
    assert est.map_.quality.all()
