import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import norm

from logos_gpo.bench import bench_cell, run_bench
from logos_gpo.evaluation import METRICS_HEADER, Z95, MetricsRecord, coverage_95, read_metrics, rel_l2, write_metrics
from logos_gpo.train import TrainConfig


def test_z95_is_the_normal_quantile():
    assert Z95 == pytest.approx(norm.ppf(0.975), rel=1e-14)


def test_rel_l2_examples():
    truth = np.array([[3.0, 4.0], [1.0, 0.0]])
    pred = np.array([[3.0, 4.0], [1.0, 1.0]])
    np.testing.assert_allclose(rel_l2(pred, truth), [0.0, 1.0])
    np.testing.assert_allclose(rel_l2(np.zeros((1, 2)), np.array([[3.0, 4.0]])), [1.0])
    np.testing.assert_allclose(rel_l2(2 * truth, truth), [1.0, 1.0])


def test_rel_l2_zero_truth():
    np.testing.assert_array_equal(rel_l2(np.zeros((2, 3)), np.zeros((2, 3))), [0.0, 0.0])
    assert np.isinf(rel_l2(np.ones((1, 3)), np.zeros((1, 3))))[0]


def test_rel_l2_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        rel_l2(np.zeros((2, 3)), np.zeros((2, 4)))


@given(st.integers(1, 5), st.integers(1, 20), st.floats(0.01, 100.0), st.integers(0, 2**32 - 1))
def test_rel_l2_scale_invariant(n, d, scale, seed):
    rng = np.random.default_rng(seed)
    truth = rng.standard_normal((n, d)) + 0.1
    pred = truth + rng.standard_normal((n, d))
    np.testing.assert_allclose(rel_l2(scale * pred, scale * truth), rel_l2(pred, truth), rtol=1e-12)


def test_coverage_of_calibrated_gaussian():
    rng = np.random.default_rng(0)
    mean = rng.standard_normal(10_000)
    sd = rng.uniform(0.1, 2.0, 10_000)
    truth = mean + sd * rng.standard_normal(10_000)
    assert abs(coverage_95(mean, sd**2, truth) - 0.95) <= 0.02


def test_coverage_extremes():
    truth = np.arange(5.0)
    assert coverage_95(truth, np.zeros(5), truth) == 1.0
    assert coverage_95(truth + 10, np.ones(5), truth) == 0.0
    with pytest.raises(ValueError):
        coverage_95(truth, -np.ones(5), truth)


def test_metrics_round_trip(tmp_path):
    recs = [
        MetricsRecord("burgers", 32, 256, 64, 8, 0.0123, 0.002, 0.97, 1.5, 1000, 2000, 0),
        MetricsRecord("advection", 8, 128, 8, 4, float("nan"), float("nan"), float("nan"), float("nan"),
                      0, 0, 3, status="failed: UnstableStep: boom"),
    ]
    path = tmp_path / "m.csv"
    write_metrics(recs, path)
    assert path.read_text().splitlines()[0] == ",".join(METRICS_HEADER)
    back = read_metrics(path)
    assert back[0] == recs[0]
    assert back[1].status == recs[1].status and np.isnan(back[1].rel_l2_mean)


def test_metrics_record_validates():
    with pytest.raises(ValueError):
        MetricsRecord("x", 1, 8, 1, 1, -0.1, 0, 0.5, 0, 0, 0, 0)
    with pytest.raises(ValueError):
        MetricsRecord("x", 1, 8, 1, 1, 0.1, 0, 1.5, 0, 0, 0, 0)


SMALL = dict(width=4, layers=2, levels=2, inducing=4, neighbors=4, batch_size=4, proj_width=8, latent_dim=4, epochs=1)


def test_bench_cell_reports_timing_and_memory():
    rec = bench_cell("advection", 64, 8, TrainConfig(**SMALL), n_test=4)
    assert rec.status == "ok"
    assert rec.grid_size == 64 and rec.n_train == 8 and rec.dataset == "advection"
    assert rec.epoch_wall_seconds_mean > 0 and rec.peak_bytes > 0 and rec.peak_rss_bytes > 0
    assert 0 <= rec.coverage_95 <= 1


def test_bench_failed_cell_becomes_a_row():
    rows = run_bench("advection", [64, 48], [8], TrainConfig(**SMALL), n_test=4)
    assert rows[0].status == "ok"
    assert rows[1].status.startswith("failed")


def test_bench_needs_cells():
    with pytest.raises(ValueError):
        run_bench("advection", [], [8], TrainConfig(**SMALL))
