import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cbf_forge.dynamics import REAL_PARAMS, SIM_PARAMS, quadrotor_z_system, single_integrator
from cbf_forge.relative_degree import (
    BOUNDARY,
    INTERIOR,
    lie_derivatives,
    scan_inactivity,
)
from cbf_forge.safe_sets import ellipsoid_safe_set, halfspace_safe_set, interval_safe_set


def test_integrator_midpoint_lie_derivative_vanishes():
    sys = single_integrator()
    S = interval_safe_set(-1.0, 1.5)
    ld = lie_derivatives(sys, S, np.array([0.25]))
    assert ld.lf_h == 0.0
    assert abs(ld.lg_h[0]) < 1e-15


@given(st.floats(-2, 2), st.floats(-2, 2))
def test_quadrotor_ellipsoid_closed_form(z, zd):
    p = REAL_PARAMS
    sys = quadrotor_z_system(p)
    P = np.array([[0.9, 0.2], [0.2, 0.6]])
    c = np.array([0.1, -0.2])
    S = ellipsoid_safe_set(c, P)
    x = np.array([z, zd])
    ld = lie_derivatives(sys, S, x)
    v = P @ (x - c)
    assert ld.lg_h[0] == pytest.approx(-2 * p.k2 * v[1], abs=1e-12)
    f = sys.f(x)
    assert ld.lf_h == pytest.approx(-2 * v @ f, abs=1e-10)


def test_zero_gradient_gives_zero_derivatives():
    sys = quadrotor_z_system()
    S = ellipsoid_safe_set([0.3, -0.4], np.eye(2))
    ld = lie_derivatives(sys, S, np.array([0.3, -0.4]))
    assert ld.lf_h == 0.0 and np.all(ld.lg_h == 0.0)


def test_dimension_mismatch():
    sys = quadrotor_z_system()
    with pytest.raises(ValueError):
        lie_derivatives(sys, ellipsoid_safe_set([0, 0], np.eye(2)), np.zeros(3))
    with pytest.raises(ValueError):
        lie_derivatives(sys, interval_safe_set(-1, 1), np.zeros(2))


def test_scan_rejects_coarse_grid():
    with pytest.raises(ValueError):
        scan_inactivity(single_integrator(), interval_safe_set(-1, 1), grid_resolution=4)


def test_scan_integrator_single_interior_zero():
    rep = scan_inactivity(single_integrator(), interval_safe_set(-1.0, 1.5))
    assert len(rep.points) == 1
    assert abs(rep.points[0, 0] - 0.25) < 1e-6
    assert rep.classification == (INTERIOR,)
    assert rep.zero_locus.all()


def test_scan_halfspace_empty():
    rep = scan_inactivity(quadrotor_z_system(), halfspace_safe_set([-1.0, -0.5], 1.0))
    assert rep.is_empty()
    assert rep.to_csv().splitlines() == ["x0,x1,channel,h,class"]


@pytest.mark.parametrize("params", [SIM_PARAMS, REAL_PARAMS])
def test_scan_ellipsoid_hits_boundary(params):
    sys = quadrotor_z_system(params)
    S = ellipsoid_safe_set([0.0, 0.0], np.eye(2) / 1.44)
    t0 = time.perf_counter()
    rep = scan_inactivity(sys, S)
    assert time.perf_counter() - t0 < 5.0
    bnd = rep.boundary_points
    assert len(bnd) >= 2
    # locus is the line zdot = 0; it meets the boundary at z = +-1.2
    np.testing.assert_allclose(np.sort(bnd[:, 0])[[0, -1]], [-1.2, 1.2], atol=1e-6)
    assert np.all(np.abs(rep.points[:, 1]) < 1e-6)
    assert len(rep.interior_points) > 0


def test_report_soundness_and_serialization():
    sys = quadrotor_z_system()
    S = ellipsoid_safe_set([0.2, 0.1], [[1.0, 0.4], [0.4, 0.8]])
    rep = scan_inactivity(sys, S, grid_resolution=60)
    for x, ch in zip(rep.points, rep.channels):
        assert abs(lie_derivatives(sys, S, x).lg_h[ch]) < rep.tol
    assert np.all(rep.h >= -rep.boundary_band)
    assert set(rep.classification) <= {INTERIOR, BOUNDARY}
    d = rep.to_dict()
    assert len(d["points"]) == len(rep.points) == len(rep.to_csv().splitlines()) - 1
    assert len(rep.per_channel) == 1


@given(st.floats(-1.5, 1.5), st.floats(0.1, 0.4))
def test_integrator_midpoint_property(lo, width):
    hi = lo + width
    rep = scan_inactivity(single_integrator(), interval_safe_set(lo, hi), grid_resolution=57)
    assert len(rep.points) == 1
    assert abs(rep.points[0, 0] - 0.5 * (lo + hi)) < 1e-6
