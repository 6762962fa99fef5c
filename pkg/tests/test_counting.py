"""Density ground truth and counting metrics."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mamba_moc.counting import (MetricReport, PointAnnotation, count_from_density, gaussian_kernel,
                                gt_density, mae_rmse, mse_bar, sum_pool, uniform_weights, wmse)
from mamba_moc.errors import ConfigError, ShapeError

PUBLISHED_MSE = [4.0277, 10.5133, 6.4310, 5.5722, 30.4554, 0.4768]


def test_kernel_is_normalised_gaussian():
    k = gaussian_kernel()
    assert k.shape == (15, 15)
    assert k.sum() == pytest.approx(1.0, abs=1e-12)
    assert k[7, 7] == k.max()
    assert k[7, 11] / k[7, 7] == pytest.approx(np.exp(-16 / 32))


def test_single_interior_point():
    d = gt_density([PointAnnotation(20.0, 20.0, 1)], 40, 40, 3)
    assert d[..., 1].sum() == pytest.approx(1.0, abs=1e-6)
    assert d[..., 0].sum() == 0 and d[..., 2].sum() == 0
    assert np.unravel_index(d[..., 1].argmax(), (40, 40)) == (20, 20)


def test_three_points_same_category():
    pts = [PointAnnotation(10, 10, 0), PointAnnotation(25, 12, 0), PointAnnotation(18, 30, 0)]
    d = gt_density(pts, 40, 40, 2)
    assert d[..., 0].sum() == pytest.approx(3.0, abs=1e-6)
    assert np.all(d[..., 1] == 0)


def test_corner_point_renormalised():
    d = gt_density([PointAnnotation(0.0, 0.0, 0)], 32, 32, 1)
    assert d.sum() == pytest.approx(1.0, abs=1e-6)


def test_truncated_mass_without_renormalisation():
    d = gt_density([PointAnnotation(0.0, 0.0, 0)], 32, 32, 1, renormalize=False)
    k = gaussian_kernel()
    assert d.sum() == pytest.approx(k[7:, 7:].sum(), abs=1e-12)
    assert d.sum() < 0.5


def test_rounding_to_nearest_pixel():
    d = gt_density([PointAnnotation(4.6, 7.4, 0)], 16, 16, 1)
    assert np.unravel_index(d[..., 0].argmax(), (16, 16)) == (7, 5)
    edge = gt_density([PointAnnotation(15.9, 15.9, 0)], 16, 16, 1)
    assert edge.sum() == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("point", [PointAnnotation(16.0, 3.0, 0), PointAnnotation(-0.1, 3.0, 0),
                                   PointAnnotation(3.0, 3.0, 2)])
def test_invalid_points_rejected_with_index(point):
    pts = [PointAnnotation(1.0, 1.0, 0), point]
    with pytest.raises(ValueError, match="point 1"):
        gt_density(pts, 16, 16, 2)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 4))
def test_mass_conservation_property(seed, k):
    rng = np.random.default_rng(seed)
    h, w = (int(v) for v in rng.integers(1, 40, size=2))
    n = int(rng.integers(0, 25))
    pts = [PointAnnotation(float(rng.uniform(0, w)), float(rng.uniform(0, h)), int(rng.integers(0, k)))
           for _ in range(n)]
    d = gt_density(pts, h, w, k)
    expected = np.bincount([p.category for p in pts], minlength=k)
    np.testing.assert_allclose(d.sum(axis=(0, 1)), expected, atol=1e-3)
    assert np.all(d >= 0)


def test_count_from_density_examples():
    assert np.all(count_from_density(np.zeros((8, 8, 3))) == 0)
    pts = [PointAnnotation(10 + 3 * i, 12, 2) for i in range(5)]
    d = gt_density(pts, 32, 32, 3)
    assert count_from_density(d)[2] == pytest.approx(5.0, abs=1e-3)
    np.testing.assert_allclose(count_from_density(sum_pool(d, 4)), count_from_density(d), atol=1e-5)


def test_sum_pool_rejects_indivisible():
    with pytest.raises(ShapeError):
        sum_pool(np.zeros((10, 8, 1)), 4)


def test_mae_rmse_examples():
    g = np.array([[3.0, 5.0], [1.0, 2.0]])
    mae, rmse = mae_rmse(g, g)
    assert np.all(mae == 0) and np.all(rmse == 0)
    mae, rmse = mae_rmse([[2.0, 3.0]], [[1.0, 2.0]])
    np.testing.assert_allclose(mae, 1.0)
    np.testing.assert_allclose(rmse, 1.0)
    mae, rmse = mae_rmse([[3.0], [-4.0]], [[0.0], [0.0]])
    assert mae[0] == pytest.approx(3.5) and rmse[0] == pytest.approx(np.sqrt(12.5))
    with pytest.raises(ValueError):
        mae_rmse(np.zeros((0, 2)), np.zeros((0, 2)))
    with pytest.raises(ShapeError):
        mae_rmse(np.zeros((2, 2)), np.zeros((2, 3)))


def test_mse_bar_published_anchor():
    assert abs(mse_bar(PUBLISHED_MSE) - 9.5794) <= 5e-5


def test_mse_bar_trivial_cases():
    assert mse_bar([2.5] * 4) == 2.5
    assert mse_bar([7.0]) == 7.0
    with pytest.raises(ValueError):
        mse_bar([])


@settings(max_examples=50)
@given(st.lists(st.floats(0, 1e4), min_size=1, max_size=14))
def test_mse_bar_between_extremes(values):
    v = mse_bar(values)
    assert min(values) - 1e-9 <= v <= max(values) + 1e-9


def test_wmse_examples():
    assert wmse([2.0, 4.0], [0.5, 0.5]) == pytest.approx(10.0)
    assert wmse([2.0, 4.0, 6.0], [0, 1, 0]) == 16.0
    v = np.array([1.0, 2.0, 5.0, 3.0])
    assert wmse(v, uniform_weights(4)) == pytest.approx(np.mean(v * v))
    assert wmse([3.0], [1.0]) == 9.0
    assert wmse([2.0, 4.0], [0.25, 0.75], convention="linear") == pytest.approx(3.5)


def test_wmse_errors():
    with pytest.raises(ValueError):
        wmse([1.0, 2.0], [0.5, 0.6])
    with pytest.raises(ValueError):
        wmse([1.0, 2.0], [1.5, -0.5])
    with pytest.raises(ShapeError):
        wmse([1.0, 2.0], [1.0])
    with pytest.raises(ConfigError):
        wmse([1.0], [1.0], convention="cubic")


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_metrics_invariant_to_image_order(seed):
    rng = np.random.default_rng(seed)
    p, g = rng.uniform(0, 50, (7, 3)), rng.uniform(0, 50, (7, 3))
    perm = rng.permutation(7)
    a = MetricReport.from_counts(p, g)
    b = MetricReport.from_counts(p[perm], g[perm])
    np.testing.assert_allclose(a.mae, b.mae, rtol=1e-12)
    np.testing.assert_allclose(a.rmse, b.rmse, rtol=1e-12)
    assert a.mse_bar == pytest.approx(b.mse_bar, rel=1e-12)
    assert a.wmse == pytest.approx(b.wmse, rel=1e-12)


def test_metric_report_csv():
    report = MetricReport.from_counts([[1.0, 4.0], [3.0, 0.0]], [[0.0, 0.0], [0.0, 0.0]], weights=[0.5, 0.5])
    lines = report.to_csv().splitlines()
    assert lines[0] == "category,mae,rmse"
    assert lines[1] == "0,2.000000,2.236068"
    assert lines[2] == "1,2.000000,2.828427"
    assert lines[3] == f"mse_bar,{(np.sqrt(5) + np.sqrt(8)) / 2:.6f}"
    assert lines[4] == "wmse,6.500000"
    assert np.all(report.weights == 0.5)
