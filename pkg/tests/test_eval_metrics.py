import json

import numpy as np
import pytest

from evsplat import losses
from evsplat.eval_metrics import EvalReport, evaluate, psnr, ssim, validate_report
from evsplat.trainer import init_scene


def test_psnr_values(rng):
    a = rng.uniform(0, 1, (8, 8, 3))
    assert psnr(a, a) == 99.0
    assert psnr(np.zeros((4, 4)), np.full((4, 4), 0.1)) == pytest.approx(20.0, abs=1e-12)
    b = rng.uniform(0, 1, (8, 8, 3))
    assert psnr(a, b) == psnr(b, a)
    with pytest.raises(ValueError):
        psnr(np.zeros((2, 2)), np.zeros((2, 3)))


def test_psnr_decreasing_in_mse():
    z = np.zeros((5, 5))
    vals = [psnr(z, np.full((5, 5), e)) for e in (0.01, 0.02, 0.05, 0.1, 0.5)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_ssim_identities(rng):
    a = rng.uniform(0, 1, (12, 12, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    for _ in range(3):
        x, y = rng.uniform(0, 1, (2, 10, 10))
        assert abs(float(losses.dssim(x, y)) - (1 - ssim(x, y)) / 2) < 1e-12
    binary = (rng.uniform(size=(32, 32)) > 0.5).astype(np.float64)
    assert ssim(binary, 1 - binary) < 0.1


def test_gt_inputs_hit_the_cap(toy):
    rep = evaluate(toy.gt_scene(), toy.gt_trajectories(), toy, initial=toy.init_poses)
    assert len(rep.views) == 16
    assert rep.mean_psnr == 99.0
    assert rep.ate_final == pytest.approx(0.0, abs=1e-12)
    assert rep.ate_initial > 0


def test_report_means_and_round_trip(toy):
    rep = evaluate(init_scene(toy.points, toy.point_colors, toy.extent), None, toy)
    assert rep.mean_psnr == float(np.mean([v["psnr"] for v in rep.views]))
    assert rep.mean_ssim == float(np.mean([v["ssim"] for v in rep.views]))
    assert rep.mean_psnr < 99
    d = json.loads(rep.to_json())
    validate_report(d)
    assert EvalReport.from_json(rep.to_json()) == rep
    assert d["lpips"] is None and d["nr_iqa"] is None


def test_evaluate_deterministic(small_dir):
    from evsplat.synthdata import load_dataset
    ds = load_dataset(small_dir)
    scene = init_scene(ds.points, ds.point_colors, ds.extent)
    assert evaluate(scene, ds.init_poses, ds).to_json() == evaluate(scene, ds.init_poses, ds).to_json()


def test_validate_rejects_bad_reports():
    good = {"schema": "evarep/1", "views": [{"id": 0, "psnr": 20.0, "ssim": 0.5}], "mean_psnr": 20.0,
            "mean_ssim": 0.5}
    validate_report(good)
    for bad in ({**good, "schema": "x"}, {k: v for k, v in good.items() if k != "mean_psnr"},
                {**good, "mean_psnr": 21.0}, {**good, "views": [{"id": 0, "psnr": 20.0}]}):
        with pytest.raises(ValueError):
            validate_report(bad)


def test_resolution_mismatch_names_dimensions(small_dir):
    from evsplat.synthdata import load_dataset
    ds = load_dataset(small_dir)
    ds.tests[0].image = np.zeros((10, 12, 3))
    with pytest.raises(ValueError, match="12x10"):
        evaluate(ds.gt_scene(), None, ds)
