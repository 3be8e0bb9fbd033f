import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from logos_gpo.data import (
    ADVECTION_RANGES,
    DATASET_MAGIC,
    Dataset,
    FunctionSample,
    advect_exact,
    advection_initial,
    generate,
    generate_advection,
    generate_burgers,
    grf_pointwise_variance,
    read_dataset,
    sample_grf,
    solve_burgers,
    write_dataset,
)
from logos_gpo.exceptions import CorruptHeader, ShapeMismatch, UnstableStep, UnsupportedVersion
from logos_gpo.grid import Grid

# -- Gaussian random fields ------------------------------------------------------------


def test_zero_scale_gives_zero_field():
    assert not np.any(sample_grf(Grid.uniform(64), scale=0.0, seed=3).values)


def test_grf_determinism():
    g = Grid.uniform(64)
    a, b, c = sample_grf(g, seed=1), sample_grf(g, seed=1), sample_grf(g, seed=2)
    np.testing.assert_array_equal(a.values, b.values)
    assert not np.allclose(a.values, c.values)


def _spectral_sum(n, tau, alpha, scale, L=1.0):
    k = np.arange(-(n // 2) + 1, n // 2 + 1)
    return float(np.sum(scale * (4 * np.pi**2 * k**2 / L**2 + tau**2) ** (-alpha)) / L)


@pytest.mark.parametrize("tau,alpha,scale", [(5.0, 2.0, 625.0), (3.0, 1.5, 10.0), (1.0, 2.5, 1.0)])
def test_grf_pointwise_variance(tau, alpha, scale):
    g = Grid.uniform(64)
    draws = np.stack([sample_grf(g, tau, alpha, scale, seed=s).values for s in range(2000)])
    want = _spectral_sum(64, tau, alpha, scale)
    assert grf_pointwise_variance(64, tau, alpha, scale) == pytest.approx(want, rel=1e-12)
    emp = draws.var(axis=0)
    assert np.all(np.abs(emp / want - 1) < 0.1)
    assert abs(draws.mean()) < 4 * np.sqrt(want / 2000)


def test_grf_stationarity():
    g = Grid.uniform(32)
    draws = np.stack([sample_grf(g, 3.0, 1.5, 10.0, seed=s).values for s in range(2000)])
    C = np.cov(draws.T)
    var = grf_pointwise_variance(32, 3.0, 1.5, 10.0)
    for lag in (1, 4, 9):
        diag = np.array([C[i, (i + lag) % 32] for i in range(32)])
        assert np.max(np.abs(diag - diag.mean())) < 0.15 * var


def test_grf_rejects_non_periodic_grid():
    with pytest.raises(ValueError):
        sample_grf(Grid.uniform(16, periodic=False))


# -- Burgers ---------------------------------------------------------------------------


def test_zero_initial_condition_stays_zero():
    g = Grid.uniform(64)
    np.testing.assert_array_equal(solve_burgers(np.zeros(64), g, n_steps=50), np.zeros(64))


@pytest.mark.parametrize("k", [1, 3, 7])
def test_linear_mode_matches_heat_decay(k):
    g = Grid.uniform(128)
    x = g.axes()[0]
    u0 = np.sin(2 * np.pi * k * x) + 0.5 * np.cos(2 * np.pi * k * x)
    nu, t = 0.1, 1.0
    out = solve_burgers(u0, g, nu, t, 200, nonlinear=False)
    np.testing.assert_allclose(out, u0 * np.exp(-nu * (2 * np.pi * k) ** 2 * t), atol=1e-8)


def _smooth_initial(x):
    return np.sin(2 * np.pi * x) + 0.5 * np.cos(4 * np.pi * x + 0.3) + 0.2 * np.sin(10 * np.pi * x)


def test_grid_refinement_self_consistency():
    coarse, fine = Grid.uniform(1024), Grid.uniform(2048)
    uc = solve_burgers(_smooth_initial(coarse.axes()[0]), coarse, 0.1, 1.0, 2000)
    uf = solve_burgers(_smooth_initial(fine.axes()[0]), fine, 0.1, 1.0, 2000)
    assert np.linalg.norm(uf[::2] - uc) / np.linalg.norm(uc) < 1e-6


def test_energy_never_increases():
    g = Grid.uniform(256)
    energy = []
    solve_burgers(sample_grf(g, seed=4).values, g, 0.1, 1.0, 2000, energy=energy)
    e = np.array(energy)
    assert np.all(np.diff(e) <= 1e-12 * e[:-1])


def test_batched_solve_matches_single():
    g = Grid.uniform(64)
    u0 = np.stack([sample_grf(g, seed=s).values for s in range(3)])
    batch = solve_burgers(u0, g, n_steps=100)
    np.testing.assert_allclose(batch[1], solve_burgers(u0[1], g, n_steps=100), atol=1e-13)


def test_oversized_time_step_is_reported():
    g = Grid.uniform(256)
    with pytest.raises(UnstableStep):
        solve_burgers(1e3 * sample_grf(g, seed=0).values, g, 0.1, 1.0, 10)


# -- advection ----------------------------------------------------------------------------


def test_zero_height_profile():
    assert not np.any(advection_initial(0.5, 0.4, 0.0, Grid.uniform(64)).values)


def test_far_from_supports_is_zero():
    u = advection_initial(0.5, 0.3, 1.5, Grid.uniform(128))
    x = u.grid.axes()[0]
    assert not np.any(u.values[np.abs(x - 0.5) > 0.16])


def test_centre_value_is_twice_height():
    prof = advection_initial(0.5, 0.4, 1.3, Grid.uniform(64)).profile
    assert prof(0.5) == pytest.approx(2.6)


def test_zero_time_and_full_period_are_identity():
    u0 = advection_initial(0.45, 0.35, 1.7, Grid.uniform(128))
    np.testing.assert_array_equal(advect_exact(u0, 1.0, 0.0).values, u0.values)
    np.testing.assert_array_equal(advect_exact(u0, 1.0, 1.0).values, u0.values)


@given(st.floats(0.3, 0.7), st.floats(0.3, 0.6), st.floats(1.0, 2.0), st.floats(0.0, 3.0))
def test_shift_equals_formula_at_shifted_points(c, omega, h, shift):
    g = Grid.uniform(128)
    u0 = advection_initial(c, omega, h, g)
    out = advect_exact(u0, 1.0, shift)
    xs = np.mod(g.axes()[0] - shift, 1.0)
    assert np.max(np.abs(out.values - u0.profile(xs))) == 0.0


def test_quarter_shift_of_grid_aligned_profile():
    g = Grid.uniform(128)
    u0 = advection_initial(0.5, 0.25, 1.5, g)
    np.testing.assert_array_equal(advect_exact(u0, 1.0, 0.25).values, np.roll(u0.values, 32))


def test_fourier_shift_for_samples_without_formula():
    g = Grid.uniform(64)
    x = g.axes()[0]
    u0 = FunctionSample(g, np.sin(2 * np.pi * x))
    np.testing.assert_allclose(advect_exact(u0, 1.0, 0.1).values, np.sin(2 * np.pi * (x - 0.1)), atol=1e-13)


def test_generated_advection_pairs_are_exact_shifts():
    d = generate_advection(4, 128, seed=2)
    for a, y in zip(d.inputs, d.outputs):
        np.testing.assert_array_equal(y, np.roll(a, 64))
    for i in range(4):
        r = np.random.default_rng(2 ^ i)
        c, omega, h = (r.uniform(*ADVECTION_RANGES[k]) for k in ("c", "omega", "h"))
        np.testing.assert_array_equal(d.inputs[i], advection_initial(c, omega, h, d.grid).values)


def test_generate_dispatch_and_errors():
    assert generate("advection", 2, 32).problem == "advection"
    with pytest.raises(ValueError):
        generate("darcy", 2, 32)


# -- dataset files --------------------------------------------------------------------


def random_dataset(seed=0, n=3, size=16):
    r = np.random.default_rng(seed)
    return Dataset(Grid.uniform(size), r.standard_normal((n, size)), r.standard_normal((n, size)),
                   "custom", {"note": "random"}, seed)


def test_round_trip_is_bit_exact(tmp_path):
    d = random_dataset()
    write_dataset(d, tmp_path / "d.bin")
    back = read_dataset(tmp_path / "d.bin")
    assert back.inputs.tobytes() == d.inputs.tobytes()
    assert back.outputs.tobytes() == d.outputs.tobytes()
    assert back.grid == d.grid and back.params == d.params and back.seed == d.seed


def test_generated_datasets_round_trip(tmp_path):
    for d in (generate_burgers(3, 64, seed=1, n_steps=100), generate_advection(3, 64, seed=1)):
        write_dataset(d, tmp_path / "g.bin")
        back = read_dataset(tmp_path / "g.bin")
        np.testing.assert_array_equal(back.inputs, d.inputs)
        np.testing.assert_array_equal(back.outputs, d.outputs)
        assert back.problem == d.problem


def test_file_layout(tmp_path):
    write_dataset(random_dataset(n=2, size=8), tmp_path / "d.bin")
    raw = (tmp_path / "d.bin").read_bytes()
    assert raw[:8] == DATASET_MAGIC
    (hlen,) = struct.unpack("<Q", raw[8:16])
    assert len(raw) == 16 + hlen + 2 * 2 * 8 * 8


def test_truncated_file(tmp_path):
    write_dataset(random_dataset(), tmp_path / "d.bin")
    raw = (tmp_path / "d.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:20])
    with pytest.raises(CorruptHeader):
        read_dataset(tmp_path / "t.bin")
    (tmp_path / "m.bin").write_bytes(b"NOTMAGIC" + raw[8:])
    with pytest.raises(CorruptHeader):
        read_dataset(tmp_path / "m.bin")


def test_payload_length_disagreement(tmp_path):
    write_dataset(random_dataset(), tmp_path / "d.bin")
    raw = (tmp_path / "d.bin").read_bytes()
    (tmp_path / "s.bin").write_bytes(raw[:-8])
    with pytest.raises(ShapeMismatch):
        read_dataset(tmp_path / "s.bin")


def test_unknown_version(tmp_path):
    d = random_dataset()
    d.version = 99
    write_dataset(d, tmp_path / "v.bin")
    with pytest.raises(UnsupportedVersion):
        read_dataset(tmp_path / "v.bin")


def test_dataset_invariants():
    g = Grid.uniform(8)
    with pytest.raises(ShapeMismatch):
        Dataset(g, np.zeros((2, 8)), np.zeros((2, 4)))
    with pytest.raises(ValueError):
        FunctionSample(g, np.full(8, np.nan))
    tr, te = random_dataset(n=5).split(3)
    assert len(tr) == 3 and len(te) == 2
