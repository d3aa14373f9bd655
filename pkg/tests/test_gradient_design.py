import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cbf_forge.dynamics import REAL_PARAMS, quadrotor_z_system, single_integrator
from cbf_forge.gradient_design import (
    BoundaryDesign,
    GradientDesignConfig,
    InfeasibleDesign,
    PriorConstraint,
    build_target_field,
    decompose_target,
    design_gradient,
    orthonormal_complement,
    solve_alpha_step,
    solve_beta_theta_step,
    solve_joint_gradient_problem,
)
from cbf_forge.safe_sets import (
    BoundarySample,
    ellipsoid_safe_set,
    halfspace_safe_set,
    interval_safe_set,
    partition_boundary,
    sample_boundary,
)

BOX = np.array([[-2.0, 2.0], [-2.0, 2.0]])
finite = st.floats(-10, 10, allow_nan=False)


# -- linear algebra ----------------------------------------------------------


def test_complement_quadrotor():
    b = orthonormal_complement(np.array([[0.0], [3.65]]))
    np.testing.assert_allclose(np.abs(b[:, 0]), [1.0, 0.0], atol=1e-15)


def test_complement_full_rank_is_empty():
    assert orthonormal_complement(np.eye(2)).shape == (2, 0)


def test_complement_diagonal_direction():
    b = orthonormal_complement(np.array([[1.0], [1.0]]) / np.sqrt(2))
    np.testing.assert_allclose(np.abs(b[:, 0]), [1 / np.sqrt(2)] * 2, atol=1e-12)
    assert b[0, 0] * b[1, 0] < 0


@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 10_000))
def test_complement_gram(n, m, seed):
    g = np.random.default_rng(seed).normal(size=(n, m))
    b = orthonormal_complement(g)
    assert b.shape == (n, n - np.linalg.matrix_rank(g))
    np.testing.assert_allclose(b.T @ b, np.eye(b.shape[1]), atol=1e-9)
    assert np.abs(b.T @ g).max(initial=0.0) < 1e-9


def test_decompose_quadrotor_hand_algebra():
    k2 = 3.65
    g = np.array([[0.0], [k2]])
    b = np.array([[1.0], [0.0]])
    alpha, beta = decompose_target(np.array([0.7, -1.3]), g, b)
    assert alpha[0] == pytest.approx(-1.3 / k2)
    assert beta[0] == pytest.approx(0.7)
    alpha, _ = decompose_target(np.array([2.0, 0.0]), g, b)
    assert alpha[0] == 0.0


@given(st.tuples(finite, finite), st.floats(0.1, 5), st.floats(-3, 3))
def test_decompose_reconstructs(target, k, c):
    g = np.array([[c], [k]])
    b = orthonormal_complement(g)
    t = np.array(target)
    alpha, beta = decompose_target(t, g, b)
    assert np.linalg.norm(g @ alpha + b @ beta - t) < 1e-10 * max(1.0, np.linalg.norm(t))


def test_decompose_rank_deficient():
    with pytest.raises(np.linalg.LinAlgError):
        decompose_target(np.ones(2), np.zeros((2, 1)), np.eye(2))


# -- alpha step --------------------------------------------------------------


@pytest.mark.parametrize("target, expected", [(0.2, 0.2), (0.05, 0.1), (-0.025, -0.1), (0.0, 0.1)])
def test_alpha_step_examples(target, expected):
    assert solve_alpha_step(np.array([target]), 0.1)[0] == pytest.approx(expected)


def test_alpha_step_zero_takes_majority_sign():
    assert solve_alpha_step(np.array([0.0]), 0.1, majority_sign=np.array([-1.0]))[0] == -0.1


def test_alpha_step_rejects_nonpositive_epsilon():
    with pytest.raises(ValueError):
        solve_alpha_step(np.array([1.0]), 0.0)


@given(st.floats(-1, 1), st.floats(0.01, 0.5))
def test_alpha_step_matches_grid_oracle(a, eps):
    grid = np.concatenate([np.linspace(-2, -eps, 40001), np.linspace(eps, 2, 40001)])
    best = grid[np.argmin((grid - a) ** 2)]
    got = solve_alpha_step(np.array([a]), eps)[0]
    assert abs(got) >= eps
    assert (got - a) ** 2 <= (best - a) ** 2 + 1e-9


# -- target field ------------------------------------------------------------


def _segment_from(set_, count=400, seed=0):
    smp = sample_boundary(set_, count, seed, box=BOX)
    return smp


def test_halfspace_lookup_is_constant():
    S = halfspace_safe_set([-1.0, -0.5], 1.0)
    fld = build_target_field(_segment_from(S, 50), S)
    x = np.random.default_rng(0).uniform(-2, 2, size=(200, 2))
    a = np.array([-1.0, -0.5]) / np.linalg.norm([-1.0, -0.5])
    np.testing.assert_allclose(fld.lookup(x), np.broadcast_to(a, x.shape), atol=1e-9)


def test_arc_lookup_matches_axis_normal():
    S = ellipsoid_safe_set([0.0, 0.0], np.eye(2))
    th = np.linspace(np.pi / 3, 2 * np.pi / 3, 200)
    pts = np.column_stack([np.cos(th), np.sin(th)])
    fld = build_target_field(BoundarySample(pts, -pts), S)
    s = fld.cone_axis
    np.testing.assert_allclose(s, [0.0, -1.0], atol=1e-12)
    # the ray from 2 s along s meets the arc at -s, where the inward normal is s
    np.testing.assert_allclose(fld.lookup((2 * s)[None])[0], s, atol=1e-9)


def test_lookup_constant_along_axis():
    S = ellipsoid_safe_set([0.0, 0.0], np.eye(2))
    th = np.linspace(0.2, 1.2, 200)
    pts = np.column_stack([np.cos(th), np.sin(th)])
    fld = build_target_field(BoundarySample(pts, -pts), S)
    x = np.random.default_rng(1).uniform(-0.5, 0.5, size=(50, 2))
    # equal up to the rounding of the transverse projection
    np.testing.assert_allclose(fld.lookup(x), fld.lookup(x + 0.1 * fld.cone_axis), rtol=0, atol=1e-14)


def test_field_zero_level_on_segment():
    S = ellipsoid_safe_set([0.0, 0.0], np.eye(2) / 1.44)
    part = partition_boundary(_segment_from(S, 800), 8)
    for seg in part.segments:
        fld = build_target_field(seg, S)
        sigma, _, ok = fld.evaluate(seg.points)
        assert np.abs(sigma[ok]).max() < 1e-8


def test_field_rejects_cancelling_normals():
    pts = np.array([[0.0, 1.0], [0.0, -1.0]])
    with pytest.raises(ValueError):
        build_target_field(BoundarySample(pts, -pts), ellipsoid_safe_set([0, 0], np.eye(2)))


# -- beta/theta step ---------------------------------------------------------


def _integrator_second_cbf(x, x_min, x_max, theta, theta_max=10.0, prior=None):
    sys = single_integrator()
    N = len(x)
    if prior is None:
        prior = [PriorConstraint(np.ones((N, 1)), np.zeros(N), x[:, 0] - x_min, theta)]
    cfg = GradientDesignConfig(epsilon=0.1, theta_init=theta, theta_max=theta_max)
    return solve_beta_theta_step(
        2, np.zeros((N, 0)), prior, cfg, points=x, alpha=-np.ones((N, 1)), system=sys,
        basis_b=np.zeros((N, 1, 0)), sigma=x_max - x[:, 0], cone_axis=np.array([-1.0]),
    )


def test_integrator_first_cbf_trivially_feasible():
    x = np.linspace(-1, 1.5, 101)[:, None]
    sys = single_integrator()
    cfg = GradientDesignConfig(epsilon=0.1)
    beta, theta, wit, cert, n_proj = solve_beta_theta_step(
        1, np.zeros((101, 0)), [], cfg, points=x, alpha=np.ones((101, 1)), system=sys,
        basis_b=np.zeros((101, 1, 0)), sigma=x[:, 0] + 1.0, cone_axis=np.array([1.0]))
    assert cert.all() and n_proj == 0 and beta.shape == (101, 0)
    assert np.all(wit[:, 0] >= -theta * (x[:, 0] + 1.0))


@given(st.floats(0.2, 5.0))
def test_integrator_two_cbfs_interval_oracle(c):
    x_min, x_max = -1.0, 1.5
    x = np.linspace(-2, 2, 401)[:, None]
    _, theta, wit, cert, _ = _integrator_second_cbf(x, x_min, x_max, c)
    inside = (x[:, 0] >= x_min) & (x[:, 0] <= x_max)
    np.testing.assert_array_equal(cert, inside)
    lo, hi = -theta * (x[inside, 0] - x_min), theta * (x_max - x[inside, 0])
    assert np.all(lo <= hi)
    u = wit[inside, 0]
    assert np.all((u >= lo - 1e-12) & (u <= hi + 1e-12))
    assert np.all(np.isnan(wit[~inside]))


def test_adversarial_prior_forces_infeasibility():
    # a frozen earlier constraint demanding u >= 3 everywhere, against h = x_max - x with a capped slope
    x = np.linspace(0.0, 1.5, 61)[:, None]
    N = len(x)
    prior = [PriorConstraint(np.ones((N, 1)), np.full(N, -3.0), np.zeros(N), 1.0)]
    with pytest.raises(InfeasibleDesign) as err:
        _integrator_second_cbf(x, -1.0, 1.5, 1.0, theta_max=1.0, prior=prior)
    assert err.value.q == 2
    lo, hi = 3.0, 1.0 * (1.5 - np.array(err.value.point)[0])
    assert lo > hi  # the reported point is genuinely infeasible


# -- full design -------------------------------------------------------------


@pytest.fixture(scope="module")
def ellipse_design():
    sys = quadrotor_z_system(REAL_PARAMS)
    S = ellipsoid_safe_set([0.0, 0.0], np.eye(2) / 1.44)
    part = partition_boundary(sample_boundary(S, 1600, 0, box=BOX), 8, system=sys)
    X = np.random.default_rng(0).uniform(-2, 2, size=(1500, 2))
    design = BoundaryDesign(boundary_offset=0.02, corner_offset=0.05)
    cfg = GradientDesignConfig(theta_init=5.0, theta_max=50.0)
    prior, out = [], []
    for k, seg in enumerate(part.segments):
        fld = build_target_field(seg, S, sys, design)
        d = design_gradient(k + 1, fld, sys, X, cfg, prior)
        tab = d.collocation
        prior.append(tab.as_prior(d.theta))
        out.append((fld, d))
    return sys, X, out


def test_design_lie_derivative_bound(ellipse_design):
    _, _, out = ellipse_design
    for _, d in out:
        ok = d.collocation.valid
        assert np.abs(d.collocation.upsilon[ok]).min() >= d.epsilon * (1 - 1e-12)


def test_design_sign_constant_per_segment(ellipse_design):
    _, _, out = ellipse_design
    for _, d in out:
        ok = d.collocation.valid
        signs = np.sign(d.collocation.upsilon[ok])
        assert np.all(signs == signs[0])


def test_design_witnesses_satisfy_all_constraints(ellipse_design):
    _, _, out = ellipse_design
    for q, (_, d) in enumerate(out, start=1):
        tab = d.collocation
        cert = tab.certified
        assert cert.any()
        u = tab.witnesses[cert]
        for _, dj in out[:q]:
            tj = dj.collocation
            slack = np.einsum("km,km->k", tj.upsilon[cert], u) + tj.lf[cert] + dj.theta * tj.value[cert]
            assert slack.min() >= -1e-9


def test_joint_solver_matches_two_step():
    sys = quadrotor_z_system(REAL_PARAMS)
    S = ellipsoid_safe_set([0.0, 0.0], np.eye(2) / 1.44)
    part = partition_boundary(sample_boundary(S, 800, 0, box=BOX), 4, system=sys)
    fld = build_target_field(part.segments[0], S, sys, BoundaryDesign())
    X = np.random.default_rng(3).uniform(-2, 2, size=(400, 2))
    cfg = GradientDesignConfig(epsilon=0.05, theta_init=5.0, theta_max=50.0)
    two = design_gradient(1, fld, sys, X, cfg, [])
    joint = solve_joint_gradient_problem(1, fld, [], cfg, system=sys, collocation=X, epsilon=0.05)
    ok = two.collocation.valid
    np.testing.assert_allclose(joint.collocation.gradient[ok], two.collocation.gradient[ok], atol=1e-8)
    assert joint.theta == two.theta


def test_feasible_target_passes_through_unchanged():
    sys = single_integrator()
    S = interval_safe_set(-1.0, 1.5)
    seg = BoundarySample(np.array([[-1.0]]), np.array([[1.0]]))
    fld = build_target_field(seg, S, sys)
    X = np.linspace(-2, 2, 64)[:, None]
    d = design_gradient(1, fld, sys, X, GradientDesignConfig(epsilon=0.5), [])
    np.testing.assert_array_equal(d.collocation.gradient, fld.lookup(X))
    j = solve_joint_gradient_problem(1, fld, [], GradientDesignConfig(epsilon=0.5), system=sys, collocation=X)
    np.testing.assert_allclose(j.collocation.gradient, fld.lookup(X), atol=0)


def test_design_round_trip(ellipse_design):
    from cbf_forge.gradient_design import DesignedGradient

    _, _, out = ellipse_design
    d = out[2][1]
    again = DesignedGradient.from_dict(d.to_dict())
    np.testing.assert_array_equal(again.collocation.gradient, d.collocation.gradient)
    assert again.theta == d.theta and again.epsilon == d.epsilon
