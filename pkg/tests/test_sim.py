import numpy as np
import pytest
from scipy.linalg import expm

from hjm_fdr.curve_space import ForwardCurve, combine, embed, project
from hjm_fdr.errors import ConfigError, DomainError, PreconditionError
from hjm_fdr.fdr import (
    CirParams,
    SpanFamily,
    cir_forward_basis,
    cir_model,
    leaf_parametrization,
    make_chart,
    nu_semiflow,
    svensson_model,
)
from hjm_fdr.hjm_core import constant_volatility_model
from hjm_fdr.sim import (
    NoiseRecord,
    SpdePath,
    SvenssonZDynamics,
    ZPath,
    compare_realization,
    invariance_residuals,
    invariance_study,
    realize_curve_path,
    simulate_hjm_spde,
    simulate_z_svensson,
)

ALPHA = 1.3
Z0 = (0.05, -0.02, 0.01, 0.02)


@pytest.fixture(scope="module")
def sv16(sv_grid):
    return svensson_model(ALPHA, sv_grid, Z0)


def z2_mean(t, alpha=ALPHA, z0=Z0):
    """Mean of Z2: the drift is affine, so the mean solves the noiseless equation."""
    _, z2, z3, z4 = z0
    e = np.exp(-alpha * t)
    return e * (z2 + z3 * t + z4 * (1 - e) / alpha)


# -- noise ------------------------------------------------------------------------------

def test_noise_deterministic_and_stream_stable():
    a = NoiseRecord.generate(42, 0.01, 100, 3)
    b = NoiseRecord.generate(42, 0.01, 100, 3)
    np.testing.assert_array_equal(a.increments, b.increments)
    more = NoiseRecord.generate(42, 0.01, 100, 5)
    np.testing.assert_array_equal(more.increments[:3], a.increments)
    assert not np.array_equal(NoiseRecord.generate(43, 0.01, 100, 3).increments, a.increments)


def test_noise_scale():
    n = NoiseRecord.generate(1, 0.04, 5000, 4, 2)
    assert n.increments.shape == (4, 5000, 2)
    assert np.std(n.increments) == pytest.approx(0.2, rel=0.02)


def test_coarsen_sums_exactly():
    fine = NoiseRecord.generate(7, 0.01, 64, 2, 2)
    coarse = fine.coarsen(2)
    assert coarse.dt == pytest.approx(0.02)
    for k in range(32):
        np.testing.assert_array_equal(coarse.increments[:, k], fine.increments[:, 2 * k] + fine.increments[:, 2 * k + 1])
    with pytest.raises(DomainError):
        NoiseRecord.generate(7, 0.01, 63).coarsen(2)


def test_seed_range():
    with pytest.raises(DomainError):
        NoiseRecord.generate(-1, 0.1, 10)


# -- Svensson factors --------------------------------------------------------------------------

def test_z_degenerate_is_linear_ode():
    z0 = (0.04, -0.02, 0.01, 0.0)
    errs = []
    for n in (64, 128, 256):
        dt = 1.0 / n
        z = simulate_z_svensson(z0, ALPHA, 1.0, dt, NoiseRecord.generate(3, dt, n))
        errs.append(np.max(np.abs(z.states[0, :, 1] - z2_mean(z.times, z0=z0))))
    assert errs[0] < 1e-3
    assert 1.8 < errs[0] / errs[1] < 2.2 and 1.8 < errs[1] / errs[2] < 2.2


def test_z_exact_decays():
    dt = 1 / 64
    z = simulate_z_svensson(Z0, ALPHA, 1.0, dt, NoiseRecord.generate(5, dt, 64, 3))
    for p in range(3):
        np.testing.assert_allclose(z.states[p, :, 3], Z0[3] * np.exp(-2 * ALPHA * z.times), rtol=1e-15)
        np.testing.assert_allclose(z.states[p, :, 2], Z0[2] * np.exp(-ALPHA * z.times), rtol=1e-15)
    assert np.all(z.states[:, :, 0] == Z0[0])
    assert np.all(z.states[:, :, 3] >= 0)
    assert np.all(z.clip_counts == 0)


def test_z_negative_start():
    with pytest.raises(DomainError):
        simulate_z_svensson((0.0, 0.0, 0.0, -0.01), ALPHA, 1.0, 0.1, NoiseRecord.generate(0, 0.1, 10))


def test_z_noise_mismatch():
    with pytest.raises(ConfigError):
        simulate_z_svensson(Z0, ALPHA, 1.0, 0.1, NoiseRecord.generate(0, 0.05, 20))


def test_z_monte_carlo_mean():
    dt, n, P = 1 / 256, 256, 10_000
    z = simulate_z_svensson(Z0, ALPHA, 1.0, dt, NoiseRecord.generate(11, dt, n, P))
    zt = z.states[:, -1, 1]
    se = zt.std(ddof=1) / np.sqrt(P)
    assert abs(zt.mean() - z2_mean(1.0)) < 3 * se


# -- realized curves --------------------------------------------------------------------------------

def test_realize_examples(sv16):
    model, chart, basis = sv16
    zero = ZPath(np.arange(3) * 0.1, np.zeros((1, 3, 4)), np.zeros(1, dtype=np.int64))
    assert np.all(realize_curve_path(zero, basis).values == 0)
    dt = model.grid.spacing
    z = simulate_z_svensson(Z0, ALPHA, 1.0, dt, NoiseRecord.generate(2, dt, 16, 2))
    path = realize_curve_path(z, basis)
    np.testing.assert_allclose(path.values[:, 0], np.broadcast_to(combine(basis, Z0).values, (2, model.grid.n_points)),
                               atol=1e-17)
    (ell,) = model.functionals
    np.testing.assert_allclose(ell.apply_values(path.values, model.grid), z.states[:, :, 3], atol=1e-10)
    assert np.max(invariance_residuals(path, SpanFamily(basis))) < 1e-10


# -- SPDE ------------------------------------------------------------------------------------------

def test_spde_pure_transport(sv_grid):
    model = constant_volatility_model(sv_grid, [0.0], [1.0])
    h0 = ForwardCurve.exponential(sv_grid, 0.3, 1)
    dt = sv_grid.spacing
    path = simulate_hjm_spde(model, h0, 1.0, dt, NoiseRecord.generate(0, dt, 16))
    for k in (1, 8, 16):
        np.testing.assert_array_equal(path.values[0, k], h0.sampled().shift(k * dt).values)


def test_spde_zero_noise_matches_semiflow(sv16):
    model, chart, _ = sv16
    dt = model.grid.spacing
    path = simulate_hjm_spde(model, chart.base_point, 1.0, dt, NoiseRecord.zeros(dt, 16))
    flow = nu_semiflow(model, chart.base_point, 1.0, method="splitting")
    assert np.max(np.abs(path.values[0, -1] - flow.values)) < 1e-12


def test_spde_gaussian_mean(sv_grid):
    s, a = 0.01, 0.7
    model = constant_volatility_model(sv_grid, [s], [a])
    h0 = ForwardCurve.constant(sv_grid, 0.03) + ForwardCurve.exponential(sv_grid, 0.3, 1, 0.01)
    dt = sv_grid.spacing
    P = 10_000
    path = simulate_hjm_spde(model, h0, 1.0, dt, NoiseRecord.generate(21, dt, 16, P))
    mean_curve = nu_semiflow(model, h0, 1.0, method="splitting")
    for x in (0.0, 1.0, 5.0):
        i = sv_grid.node_index(x)
        v = path.values[:, -1, i]
        se = v.std(ddof=1) / np.sqrt(P)
        assert abs(v.mean() - mean_curve.values[i]) < 3 * se


def test_spde_dt_must_equal_spacing(sv16):
    model, chart, _ = sv16
    with pytest.raises(ConfigError):
        simulate_hjm_spde(model, chart.base_point, 1.0, 0.125, NoiseRecord.generate(0, 0.125, 8))


def test_spde_region_exit(sv_grid):
    # the Svensson noise leaves l unchanged, so the exit is provoked in the
    # short-rate model, whose noise moves h(0) directly
    p = CirParams(1.0, 1.0, 0.5, 0.02)
    g0, g1 = cir_forward_basis(p, sv_grid)
    h0 = g0 + 0.01 * g1
    model = cir_model(p, sv_grid, h0)
    dt = sv_grid.spacing
    noise = NoiseRecord(0, dt, np.full((1, 16, 1), -0.5))
    path = simulate_hjm_spde(model, h0, 1.0, dt, noise)
    t = path.exited_region_at[0]
    assert np.isfinite(t)
    k = path.valid_steps(0)
    assert np.all(np.isnan(path.values[0, k:]))
    assert np.all(np.isfinite(path.values[0, :k]))
    assert len(path.curves(0)) == k


def test_spde_deterministic(sv16):
    model, chart, _ = sv16
    dt = model.grid.spacing
    a = simulate_hjm_spde(model, chart.base_point, 1.0, dt, NoiseRecord.generate(9, dt, 16, 3))
    b = simulate_hjm_spde(model, chart.base_point, 1.0, dt, NoiseRecord.generate(9, dt, 16, 3))
    assert a.values.tobytes() == b.values.tobytes()


# -- invariance ---------------------------------------------------------------------------------------

def test_invariance_refinement(sv16):
    model, chart, basis = sv16
    rep = invariance_study(model, chart.base_point, basis, 1.0, seed=4, n_paths=2)
    assert rep["levels"][0]["sup_residual"] < 5e-3
    assert rep["refinement_ratio"] >= 1.5


def test_invariance_initial_offset(sv16):
    model, chart, basis = sv16
    grid = model.grid
    q = ForwardCurve.exponential(grid, 0.25, 2).sampled()
    B = [b.sampled() for b in basis]
    coeffs, _, _ = project(q, B, exact=False)
    q = q - combine(B, coeffs)
    q = q / float(np.linalg.norm(embed(q, exact=False)))
    eps = 1e-3
    h0 = chart.base_point.sampled() + eps * q
    path = simulate_hjm_spde(model, h0, grid.spacing, grid.spacing, NoiseRecord.zeros(grid.spacing, 1))
    res = invariance_residuals(path, SpanFamily(basis), "weighted")
    absolute = res[0, 0] * np.linalg.norm(embed(h0, exact=False))
    assert absolute == pytest.approx(eps, abs=1e-8)
    # the nearest span member is the base point, so the sup remainder is eps * q
    sup = invariance_residuals(path, SpanFamily(basis))[0, 0]
    assert sup == pytest.approx(eps * q.sup_norm() / h0.sup_norm(), rel=1e-6)


# -- realization comparison --------------------------------------------------------------------------

class ShiftDynamics:
    """Exact transport of ``z1 e^{-4x} + z2 x e^{-4x}`` (zero volatility)."""

    M = np.array([[-4.0, 1.0], [0.0, -4.0]])

    def __init__(self, z0):
        self.z0 = np.asarray(z0, dtype=float)

    def simulate(self, T, dt, noise):
        n = int(round(T / dt))
        times = np.arange(n + 1) * dt
        z = np.stack([expm(self.M * t) @ self.z0 for t in times])
        return ZPath(times, np.broadcast_to(z, (noise.n_paths, n + 1, 2)).copy(), np.zeros(noise.n_paths, dtype=np.int64))

    def realize(self, z, grid):
        return realize_curve_path(z, [ForwardCurve.exponential(grid, 4.0), ForwardCurve.exponential(grid, 4.0, 1)])


def test_compare_zero_vol(sv_grid):
    model = constant_volatility_model(sv_grid, [0.0], [1.0])
    h0 = combine([ForwardCurve.exponential(sv_grid, 4.0), ForwardCurve.exponential(sv_grid, 4.0, 1)], [0.02, 0.05])
    chart = make_chart(h0, None, [])
    rep = compare_realization(model, chart, ShiftDynamics([0.02, 0.05]), 1.0)
    for lvl in rep["levels"]:
        assert lvl["sup_gap"] < 1e-12


def test_compare_svensson_start_and_decrease(sv16):
    model, chart, basis = sv16
    rep = compare_realization(model, chart, SvenssonZDynamics(ALPHA, Z0), 1.0, seed=3)
    assert rep["initial_gap"] == 0.0
    assert rep["refinement_ratio"] >= 1.4


def test_compare_base_point_mismatch(sv16, sv_grid):
    model, chart, basis = sv16
    other = make_chart(combine(basis, (0.04, -0.02, 0.01, 0.02)), None, [])
    with pytest.raises(PreconditionError):
        compare_realization(model, other, SvenssonZDynamics(ALPHA, Z0), 1.0)


def test_residuals_on_leaf_members(sv16):
    model, chart, _ = sv16
    members = [leaf_parametrization(chart, u, [y]) for u, y in ((0.0, 0.0), (0.25, 0.01), (0.5, -0.01))]
    path = SpdePath(np.array([0.0, 0.25, 0.5]), np.array([[m.values for m in members]]), model.grid,
                    np.array([np.nan]), np.zeros(1, dtype=np.int64))
    for norm in ("sup", "weighted"):
        assert np.max(invariance_residuals(path, chart, norm)) < 1e-8
    with pytest.raises(ValueError):
        invariance_residuals(path, chart, "l2")
