import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stokes_rb import constants as cst
from stokes_rb import estimation as est
from stokes_rb import reduced as rb
from stokes_rb import truth
from stokes_rb.assembly import TimeGrid


def make_consts(alpha_a=1.0, gamma_a=1.0, gamma_m=1.0, beta=1.0, alpha_c=1.0):
    return cst.BoundConstants(
        alpha_a_lb=alpha_a, alpha_a_ub=alpha_a,
        gamma_a_lb=gamma_a, gamma_a_ub=gamma_a,
        gamma_m_lb=gamma_m, gamma_m_ub=gamma_m,
        beta_lb=beta, beta_ub=beta,
        alpha_c_lb=alpha_c, alpha_c_ub=alpha_c,
        mode="exact",
    )


def unit_norms(k=1):
    ones = np.ones(k + 1)
    ones[0] = 0.0
    return est.ResidualNorms(r1=ones, r2=ones.copy())


@pytest.fixture(scope="module")
def mu_star():
    return np.array([1.2, 0.8])


@pytest.fixture(scope="module")
def trained_db(tiny_ops, tiny_spaces, tiny_grid, mu_star):
    traj = truth.solve_truth(tiny_ops, tiny_spaces, tiny_grid, mu_star, eps=1e-2)
    pair = rb.RBSpacePair(tiny_spaces)
    rb.append_basis(pair, traj.velocity[1:].T[:, ::3], "velocity")
    rb.append_basis(pair, traj.pressure[1:].T[:, ::3], "pressure")
    return rb.compress_offline(pair, tiny_ops, tiny_grid, eps=1e-2)


# --- Riesz machinery -------------------------------------------------------


def test_riesz_zero(tiny_spaces):
    w = est.riesz_representer(tiny_spaces, np.zeros(tiny_spaces.n_velocity), "X")
    assert np.all(w == 0.0)
    assert est.dual_norm(tiny_spaces, np.zeros(tiny_spaces.n_velocity), "X") == 0.0


def test_riesz_identity(tiny_spaces, rng):
    v = rng.standard_normal(tiny_spaces.n_velocity)
    functional = tiny_spaces.X_inner @ v
    w = est.riesz_representer(tiny_spaces, functional, "X")
    np.testing.assert_allclose(w, v, atol=1e-10 * np.abs(v).max())
    x_norm = float(np.sqrt(v @ (tiny_spaces.X_inner @ v)))
    assert est.dual_norm(tiny_spaces, functional, "X") == pytest.approx(x_norm, rel=1e-12)


def test_dual_norm_matches_dense_inverse(tiny_spaces, rng):
    r = rng.standard_normal(tiny_spaces.n_pressure)
    dense = float(np.sqrt(r @ np.linalg.solve(tiny_spaces.Y_inner.toarray(), r)))
    assert est.dual_norm(tiny_spaces, r, "Y") == pytest.approx(dense, rel=1e-10)


def test_riesz_bad_space(tiny_spaces):
    with pytest.raises(est.UsageError):
        est.riesz_representer(tiny_spaces, np.zeros(3), "Z")


# --- online residual norms --------------------------------------------------


def test_online_matches_direct_truth_computation(trained_db, tiny_ops, tiny_spaces, tiny_grid, rng):
    for mu in tiny_ops.domain.sample(4, rng):
        for eps in (1e-2, 1e-4):
            rtraj = rb.solve_rb_online(trained_db, mu, eps)
            online = est.residual_norms_online(trained_db, rtraj, mu, eps)
            rec = rb.reconstruct_trajectory(trained_db, rtraj)
            direct = est.residual_norms_direct(
                tiny_spaces, tiny_ops, tiny_grid, rec.velocity, rec.pressure, mu, eps
            )
            assert np.abs(online.r1 - direct.r1).max() <= 1e-8 * direct.r1.max()
            assert np.abs(online.r2 - direct.r2).max() <= 1e-8 * direct.r2.max()


def test_snapshot_reproducing_space_tiny_residuals(tiny_ops, tiny_spaces, tiny_grid, mu_star):
    traj = truth.solve_truth(tiny_ops, tiny_spaces, tiny_grid, mu_star, eps=1e-2)
    pair = rb.RBSpacePair(tiny_spaces)
    rb.append_basis(pair, traj.velocity[1:].T, "velocity")
    rb.append_basis(pair, traj.pressure[1:].T, "pressure")
    db = rb.compress_offline(pair, tiny_ops, tiny_grid, eps=1e-2)
    rtraj = rb.solve_rb_online(db, mu_star, 1e-2)
    rec = rb.reconstruct_trajectory(db, rtraj)
    direct = est.residual_norms_direct(
        tiny_spaces, tiny_ops, tiny_grid, rec.velocity, rec.pressure, mu_star, 1e-2
    )
    assert direct.r1.max() < 1e-8
    assert direct.r2.max() < 1e-8
    # the online quadratic expansion bottoms out at its cancellation noise
    # floor (~sqrt of the clamp scale), above the true residual size
    online = est.residual_norms_online(db, rtraj, mu_star, 1e-2)
    assert online.r1.max() < 1e-6
    assert online.r2.max() < 1e-6


def test_eps_zero_equals_eps_positive_with_zero_pressure_term(trained_db, mu_star):
    rtraj = rb.solve_rb_online(trained_db, mu_star, 1e-2)
    gram_y = {
        key: (np.zeros_like(block) if "cp" in key else block)
        for key, block in trained_db.gram_y.items()
    }
    no_c = dataclasses.replace(trained_db, gram_y=gram_y)
    with_eps = est.residual_norms_online(no_c, rtraj, mu_star, eps=0.7)
    without = est.residual_norms_online(no_c, rtraj, mu_star, eps=0.0)
    np.testing.assert_allclose(with_eps.r2, without.r2, rtol=1e-12)


def test_clamp_window():
    squares = np.array([1.0, -1e-13, 4.0])
    scales = np.ones(3)
    values, clamped = est._clamped_sqrt(squares, scales)
    np.testing.assert_array_equal(values, [1.0, 0.0, 2.0])
    assert clamped == 1
    with pytest.raises(est.NumericalError):
        est._clamped_sqrt(np.array([-1e-6]), np.ones(1))


# --- bound formulas ----------------------------------------------------------


def test_bound_zero_residuals():
    grid = TimeGrid(T=3.0, K=3)
    norms = est.ResidualNorms(r1=np.zeros(4), r2=np.zeros(4))
    for series in (
        est.bound_nonsym(norms, make_consts(), grid),
        est.bound_sym(norms, make_consts(), grid),
        est.bound_penalty(norms, make_consts(), grid, eps=1.0),
    ):
        assert np.all(series.values == 0.0)


def test_bound_hand_values_unit_constants():
    grid = TimeGrid(T=1.0, K=1)
    norms = unit_norms()
    assert est.bound_nonsym(norms, make_consts(), grid).values[1] == pytest.approx(np.sqrt(7.0))
    assert est.bound_sym(norms, make_consts(), grid).values[1] == pytest.approx(np.sqrt(7.0))
    assert est.bound_penalty(norms, make_consts(), grid, eps=1.0).values[1] == pytest.approx(
        np.sqrt(2.0)
    )


def test_bound_hand_values_gamma_four():
    grid = TimeGrid(T=1.0, K=1)
    consts = make_consts(gamma_a=4.0)
    assert est.bound_nonsym(unit_norms(), consts, grid).values[1] == pytest.approx(np.sqrt(28.0))
    assert est.bound_sym(unit_norms(), consts, grid).values[1] == pytest.approx(np.sqrt(12.0))


def test_penalty_hand_values_quarter_eps():
    grid = TimeGrid(T=1.0, K=1)
    series = est.bound_penalty(unit_norms(), make_consts(), grid, eps=0.25)
    assert series.values[1] == pytest.approx(np.sqrt(5.0))


def test_penalty_eps_scaling_limit(rng):
    # sqrt(eps) * penalty bound approaches the pure continuity-residual term
    grid = TimeGrid(T=1.0, K=10)
    r1 = np.concatenate([[0.0], rng.uniform(0.1, 1.0, 10)])
    r2 = np.concatenate([[0.0], rng.uniform(0.1, 1.0, 10)])
    norms = est.ResidualNorms(r1=r1, r2=r2)
    consts = make_consts(alpha_a=0.5, alpha_c=0.8)
    target = np.sqrt(grid.dt * np.sum(r2[1:] ** 2) / consts.alpha_c_lb)
    for eps in (1e-6, 1e-9):
        series = est.bound_penalty(norms, consts, grid, eps=eps)
        assert np.sqrt(eps) * series.values[-1] == pytest.approx(target, rel=1e-4 if eps > 1e-7 else 1e-7)


@given(
    st.floats(0.1, 10.0), st.floats(1.0, 10.0), st.floats(0.1, 10.0),
    st.floats(0.1, 10.0), st.lists(st.floats(0.0, 5.0), min_size=2, max_size=8),
    st.lists(st.floats(0.0, 5.0), min_size=8, max_size=8),
)
@settings(max_examples=60, deadline=None)
def test_sym_never_exceeds_nonsym(alpha, ratio, gamma_m, beta, r1_list, r2_list):
    # whenever gamma_a >= alpha_a the sharpened bound is pointwise tighter
    k = min(len(r1_list), len(r2_list))
    grid = TimeGrid(T=1.0, K=k)
    consts = make_consts(alpha_a=alpha, gamma_a=alpha * ratio, gamma_m=gamma_m, beta=beta)
    norms = est.ResidualNorms(
        r1=np.concatenate([[0.0], np.asarray(r1_list[:k])]),
        r2=np.concatenate([[0.0], np.asarray(r2_list[:k])]),
    )
    sym = est.bound_sym(norms, consts, grid).values
    nonsym = est.bound_nonsym(norms, consts, grid).values
    assert np.all(sym <= nonsym * (1 + 1e-12))
    assert np.all(np.diff(sym) >= -1e-12)
    assert np.all(np.diff(nonsym) >= -1e-12)


def test_bound_argument_validation():
    grid = TimeGrid(T=1.0, K=1)
    with pytest.raises(est.UsageError):
        est.bound_nonsym(unit_norms(), make_consts(alpha_a=0.0), grid)
    with pytest.raises(est.UsageError):
        est.bound_sym(unit_norms(), make_consts(beta=0.0), grid)
    with pytest.raises(est.UsageError):
        est.bound_penalty(unit_norms(), make_consts(), grid, eps=0.0)
    with pytest.raises(est.UsageError):
        est.bound_penalty(unit_norms(), make_consts(alpha_c=-1.0), grid, eps=1.0)


def test_effectivity():
    assert est.effectivity(2.0, 2.0) == 1.0
    assert est.effectivity(np.sqrt(7.0), 1.0) == pytest.approx(2.6458, abs=5e-5)
    assert est.effectivity(1.0, 0.0) == float("inf")


# --- rigor on the tiny problem ----------------------------------------------


def test_bounds_dominate_errors_exact_constants(trained_db, tiny_ops, tiny_spaces, tiny_grid, rng):
    for mu in tiny_ops.domain.sample(3, rng):
        consts = cst.exact_bound_constants(mu, tiny_ops, tiny_spaces)
        # eps = 0 bounds against the velocity energy error
        rtraj = rb.solve_rb_online(trained_db, mu, 0.0)
        norms = est.residual_norms_online(trained_db, rtraj, mu, 0.0)
        rec = rb.reconstruct_trajectory(trained_db, rtraj)
        tru = truth.solve_truth(tiny_ops, tiny_spaces, tiny_grid, mu, 0.0)
        diff = truth.Trajectory(
            eps=0.0, mu=mu,
            velocity=tru.velocity - rec.velocity, pressure=tru.pressure - rec.pressure,
        )
        rep = truth.energy_norms(diff, tiny_ops, grid=tiny_grid)
        sym = est.bound_sym(norms, consts, tiny_grid).values
        nonsym = est.bound_nonsym(norms, consts, tiny_grid).values
        for k in (5, 10, 20):
            assert sym[k] >= rep.l2x[k]
            assert nonsym[k] >= sym[k]
        # penalty bound against the velocity-pressure energy error
        eps = 1e-3
        rtraj_eps = rb.solve_rb_online(trained_db, mu, eps)
        norms_eps = est.residual_norms_online(trained_db, rtraj_eps, mu, eps)
        rec_eps = rb.reconstruct_trajectory(trained_db, rtraj_eps)
        tru_eps = truth.solve_truth(tiny_ops, tiny_spaces, tiny_grid, mu, eps)
        diff_eps = truth.Trajectory(
            eps=eps, mu=mu,
            velocity=tru_eps.velocity - rec_eps.velocity,
            pressure=tru_eps.pressure - rec_eps.pressure,
        )
        rep_eps = truth.energy_norms(diff_eps, tiny_ops, grid=tiny_grid)
        pen = est.bound_penalty(norms_eps, consts, tiny_grid, eps).values
        for k in (5, 10, 20):
            assert pen[k] >= rep_eps.l2z[k]


def test_reduced_trajectory_norms_match_truth_side(trained_db, tiny_ops, tiny_grid, mu_star):
    rtraj = rb.solve_rb_online(trained_db, mu_star, 1e-2)
    l2x, l2z = est.reduced_trajectory_norms(trained_db, rtraj, mu_star)
    rec = rb.reconstruct_trajectory(trained_db, rtraj)
    rep = truth.energy_norms(rec, tiny_ops, grid=tiny_grid)
    np.testing.assert_allclose(l2x, rep.l2x, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(l2z, rep.l2z, rtol=1e-9, atol=1e-12)
