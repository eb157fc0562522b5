import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import fid_ref, mae_ref, psnr_ref, ssim_ref

from vlinknet.imagecore import DimensionError
from vlinknet.metrics import MetricReport, fid, mae, psnr, ssim


def rand_img(rng, shape=(3, 16, 16)):
    return rng.uniform(-1, 1, shape)


def test_mae_examples(rng):
    a = rand_img(rng)
    assert mae(a, a) == 0.0
    assert mae(a, a + 10 / 255 * 2) == pytest.approx(10.0)
    b = rand_img(rng)
    assert mae(a, b) == pytest.approx(mae_ref(a, b), abs=1e-9)
    with pytest.raises(DimensionError):
        mae(a, b[:2])


def test_mae_and_psnr_on_hole_region(rng):
    a, b = rand_img(rng, (3, 4, 4)), rand_img(rng, (3, 4, 4))
    mask = np.ones((1, 4, 4))
    mask[0, :2] = 0
    assert mae(a, b, mask) == pytest.approx(mae_ref(a[:, :2], b[:, :2]))
    assert psnr(a, b, mask) == pytest.approx(psnr_ref(a[:, :2], b[:, :2]))
    assert mae(a, b, np.ones((1, 4, 4))) == 0.0


def test_psnr_examples(rng):
    a = rand_img(rng)
    assert psnr(a, a) == 100.0
    a8 = np.full((3, 4, 4), 100.0)
    assert psnr(a8 / 127.5 - 1, (a8 + 1) / 127.5 - 1) == pytest.approx(48.1308, abs=1e-4)
    b = rand_img(rng)
    assert psnr(a, b) == pytest.approx(psnr_ref(a, b), abs=1e-9)


def test_ssim_examples(rng):
    a = rand_img(rng)
    assert ssim(a, a) == pytest.approx(1.0)
    b = rand_img(rng)
    assert ssim(a, b) == pytest.approx(ssim_ref(a, b), abs=1e-9)
    with pytest.raises(DimensionError):
        ssim(a[:, :10, :10], a[:, :10, :10])


def test_ssim_anticorrelated_zero_mean_patch():
    # an 8-bit patch p with zero weighted mean against -p: SSIM reduces to
    # (C2 - 2 var) / (C2 + 2 var), which tends to -1 as the variance grows
    r = np.random.default_rng(0)
    c2 = (0.03 * 255) ** 2
    for scale in (40.0, 400.0):
        p8 = r.normal(0, scale, (1, 11, 11))
        p8 -= (p8 * _w()).sum()
        var = (_w() * p8[0] ** 2).sum()
        value = ssim(p8 / 127.5 - 1, -p8 / 127.5 - 1)
        assert value == pytest.approx((c2 - 2 * var) / (c2 + 2 * var), abs=1e-9)
    assert value < -0.999


def _w():
    x = np.arange(11) - 5
    g = np.exp(-(x**2) / (2 * 1.5**2))
    g /= g.sum()
    return np.outer(g, g)


def test_ssim_accepts_tensors_and_2d(rng):
    a, b = rand_img(rng, (12, 12)), rand_img(rng, (12, 12))
    assert ssim(torch.tensor(a), torch.tensor(b)) == pytest.approx(ssim_ref(a[None], b[None]))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_metric_symmetry(seed):
    r = np.random.default_rng(seed)
    a, b = rand_img(r, (1, 12, 12)), rand_img(r, (1, 12, 12))
    assert mae(a, b) == pytest.approx(mae(b, a))
    assert psnr(a, b) == pytest.approx(psnr(b, a))
    assert ssim(a, b) == pytest.approx(ssim(b, a))
    assert ssim(a, b) <= 1.0 + 1e-12


def test_fid_examples(rng):
    x = rng.normal(size=(50, 3))
    assert fid(x, x) == pytest.approx(0.0, abs=1e-6)
    s = rng.normal(size=200)
    s = (s - s.mean()) / s.std(ddof=1)
    assert fid(s, s + 3) == pytest.approx(9.0, abs=1e-9)
    y = rng.normal(1.0, 2.0, size=(40, 4))
    assert fid(x[:, :3], y[:, :3]) == pytest.approx(fid_ref(x[:, :3], y[:, :3]), abs=1e-6)


def test_fid_errors(rng):
    with pytest.raises(ValueError):
        fid(rng.normal(size=(1, 3)), rng.normal(size=(5, 3)))
    with pytest.raises(DimensionError):
        fid(rng.normal(size=(5, 3)), rng.normal(size=(5, 2)))


def test_fid_regularizes_singular_covariances():
    # 3 samples in 4-D give rank-deficient covariances
    r = np.random.default_rng(3)
    a, b = r.normal(size=(3, 4)), r.normal(size=(3, 4))
    with warnings.catch_warnings(record=True):
        warnings.simplefilter("always")
        value = fid(a, b)
    assert math.isfinite(value) and value >= 0
    assert value == pytest.approx(fid_ref(a, b), abs=1e-3)


def test_report_csv_and_table():
    sub = MetricReport(1.0, 2.0, 30.0, 0.9, 2)
    rep = MetricReport(1.5, 2.5, 31.0, 0.95, 4, buckets={"MaskDataset3": sub}, extractor="abc")
    lines = rep.to_csv().splitlines()
    assert lines[0] == "Method,Bucket,MAE,FID,PSNR,SSIM,Count"
    assert lines[2].split(",")[1] == "MaskDataset3"
    assert "abc" in rep.table()
