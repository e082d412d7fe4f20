import math

import numpy as np
import pytest

import mdsaw.anisotropy as an
from mdsaw.anisotropy import (
    GridTooCoarse,
    beam_steering,
    derivative,
    diffraction_parameter,
    find_md_orientations,
    local_eta_gamma,
    map_parameter_space,
    md_theta,
    q_diffraction,
    theta_grid,
    velocity_profile,
)
from mdsaw.materials import Orientation


def analytic_gamma(v, d1, d2):
    return (d2 * v - d1**2) / (v**2 + d1**2)


def test_constant_profile():
    th = np.arange(0, 30, 0.25)
    v = np.full_like(th, 3000.0)
    assert np.abs(beam_steering(th, v)).max() < 1e-9
    assert np.abs(diffraction_parameter(th, beam_steering(th, v))).max() < 1e-9


def test_cosine_profile_is_ideal_md():
    th0 = 23.4
    th = th0 + np.arange(-40, 40.001, 0.25)
    v = 3600 * np.cos(np.radians(th - th0))
    eta = beam_steering(th, v)
    d = th - th0
    inner = np.abs(d) < 30
    assert np.allclose(eta[inner], -d[inner], atol=1e-6)
    g = diffraction_parameter(th, eta)
    assert g[np.argmin(np.abs(d))] == pytest.approx(-1.0, abs=1e-6)


def test_quadratic_profile():
    a = 0.3
    th = np.arange(-10, 10.001, 0.05)
    r = np.radians(th)
    v = 3000 * (1 + a * r**2)
    eta = beam_steering(th, v)
    i0 = np.argmin(np.abs(th))
    assert eta[i0] == pytest.approx(0.0, abs=1e-12)
    g = diffraction_parameter(th, eta)
    assert g[i0] == pytest.approx(2 * a, abs=1e-6)


def test_gamma_two_ways():
    th = np.arange(0, 60, 0.1)
    r = np.radians(th)
    v = 3500 + 80 * np.sin(2 * r) + 30 * np.cos(3 * r)
    d1 = 160 * np.cos(2 * r) - 90 * np.sin(3 * r)
    d2 = -320 * np.sin(2 * r) - 270 * np.cos(3 * r)
    g = diffraction_parameter(th, beam_steering(th, v))
    inner = slice(4, -4)
    assert np.abs(g[inner] - analytic_gamma(v, d1, d2)[inner]).max() < 1e-6


def test_eta_integrates_back_to_v():
    th = np.arange(0, 50, 0.05)
    r = np.radians(th)
    v = 3500 + 80 * np.sin(2 * r) + 30 * np.cos(3 * r)
    eta = np.radians(beam_steering(th, v))
    from scipy.integrate import cumulative_trapezoid

    v_rec = v[0] * np.exp(cumulative_trapezoid(np.tan(eta), r, initial=0))
    assert np.abs(v_rec / v - 1).max() < 1e-6


def test_periodic_stencil_wraps():
    th, periodic = theta_grid(1.0)
    assert periodic and th[0] == 0.5 and th.size == 180
    v = 3000 + 50 * np.cos(np.radians(2 * th))
    d = derivative(th, v)
    assert np.allclose(d, -100 * np.sin(np.radians(2 * th)), atol=1e-3)


def test_grid_too_coarse():
    th = np.arange(0, 30, 2.0)
    with pytest.raises(GridTooCoarse):
        beam_steering(th, np.ones_like(th))
    with pytest.raises(ValueError):
        beam_steering(np.array([0, 0.1, 0.3, 0.4]), np.ones(4))


def test_richardson_convergence(quartz):
    th = np.arange(20.0, 26.0001, 0.1)
    coarse = velocity_profile(quartz, 40.2, th, periodic=False)
    fine = velocity_profile(quartz, 40.2, np.arange(20.0, 26.0001, 0.05), periodic=False)
    inner = slice(4, -4)
    assert np.abs(coarse.eta[inner] - fine.eta[::2][inner]).max() < an.ETA_CONVERGENCE_TOL
    assert np.abs(coarse.gamma[inner] - fine.gamma[::2][inner]).max() < an.GAMMA_CONVERGENCE_TOL
    assert coarse.derivative_meta["step_deg"] == pytest.approx(0.1)


def test_st_gamma(quartz):
    eta, gamma, v = local_eta_gamma(quartz, [[-47.25, 0.0]])
    assert abs(eta[0]) < 1e-6
    assert gamma[0] == pytest.approx(0.378, abs=0.03)


def test_local_matches_profile(quartz):
    th = np.arange(18, 28.001, 0.05)
    p = velocity_profile(quartz, 40.2, th, periodic=False)
    i = np.argmin(np.abs(th - 23.4))
    eta, g, v = local_eta_gamma(quartz, [[40.2, 23.4]])
    assert eta[0] == pytest.approx(p.eta[i], abs=1e-4)
    assert g[0] == pytest.approx(p.gamma[i], abs=1e-3)


def test_warm_md_angle(quartz):
    th = np.arange(10, 40.001, 0.05)
    p = velocity_profile(quartz, 40.2, th, periodic=False)
    t, eta, slope = md_theta(p)
    assert t == pytest.approx(22.5, abs=0.5)


def test_q_diffraction():
    assert q_diffraction(0.378, 10) == pytest.approx(5 * math.pi * 100 / 1.378, rel=1e-12)
    assert q_diffraction(0.378, 10) == pytest.approx(1139.6, rel=5e-4)
    assert q_diffraction(0.0, 10) == pytest.approx(500 * math.pi)
    assert q_diffraction(-1.0, 3.0) == math.inf
    assert np.all(np.isinf(q_diffraction(np.array([-1.0, -1.0]), 5)))
    with pytest.raises(ValueError):
        q_diffraction(0.1, 0.0)


def test_isotropic_map_has_no_candidates(iso):
    pm = map_parameter_space(iso, (-30, 30), (0, 180), resolution=1.0, jobs=1)
    assert np.nanmax(np.abs(pm.gamma)) < 1e-3
    assert np.nanmax(np.abs(pm.eta)) < 1e-3
    assert find_md_orientations(pm, iso) == []
    assert np.all(pm.k2 == 0)


def test_phi0_map_threefold(quartz):
    pm = map_parameter_space(quartz, (0, 0), (0, 180), resolution=0.5, jobs=1)
    n = int(120 / 0.5)
    v = pm.v[0]
    # theta grid spans 180 deg; compare theta with theta + 120 where both exist
    assert np.allclose(v[: v.size - n], v[n:], rtol=1e-8)
    assert np.allclose(pm.gamma[0][: v.size - n], pm.gamma[0][n:], atol=1e-5)


def test_map_csv_and_holes(quartz, tmp_path):
    pm = map_parameter_space(quartz, (15, 17), (88, 92), resolution=0.5, jobs=1)
    holes = pm.holes()
    assert holes, "expected directions without a surface wave near phi = 16, theta = 90"
    for phi, th, reason in holes:
        i = np.argmin(np.abs(pm.phi - phi))
        j = np.argmin(np.abs(pm.theta - th))
        assert np.isnan(pm.v[i, j]) and "surface wave" in reason
    pm.to_csv(tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "phi_deg,theta_deg,v_mps,eta_deg,gamma,k2_percent,polarization"
    assert len(lines) == pm.v.size + 1


def test_map_cache_resume(quartz, tmp_path, monkeypatch):
    kw = dict(phi_range=(40, 41), theta_range=(20, 25), resolution=0.5, jobs=1, cache_dir=tmp_path)
    a = map_parameter_space(quartz, **kw)
    assert any(tmp_path.rglob("*.npz"))

    def boom(*args, **kwargs):
        raise AssertionError("should have used the cache")

    monkeypatch.setattr(an, "_solve_rows", boom)
    b = map_parameter_space(quartz, **kw)
    assert np.array_equal(a.v, b.v, equal_nan=True)
    with pytest.raises(AssertionError):
        map_parameter_space(quartz, resume=False, **kw)


def test_map_parallel_equals_serial(quartz):
    kw = dict(phi_range=(-10, 10), theta_range=(30, 35), resolution=1.0, rows_per_task=4)
    a = map_parameter_space(quartz, jobs=1, **kw)
    b = map_parameter_space(quartz, jobs=2, **kw)
    assert np.array_equal(a.v, b.v, equal_nan=True)


def test_find_md_local_and_resolution_invariant(quartz):
    out = []
    for res in (0.5, 0.25):
        pm = map_parameter_space(quartz, (36, 48), (15, 30), resolution=res, jobs=1)
        c = find_md_orientations(pm, quartz)
        assert len(c) == 1
        out.append(c[0])
    a, b = out
    assert abs(a.orientation.phi - b.orientation.phi) < 1e-3
    assert abs(a.orientation.theta - b.orientation.theta) < 1e-3
    assert abs(a.eta_residual) < 1e-4 and abs(a.gamma_value + 1) < 1e-4
    assert a.polarization.value == "R"
    assert a.k2 > 0 and 3600 < a.velocity < 3700
    assert a.sens_eta > 0 and a.sens_gamma >= 0
    d = a.as_dict()
    assert d["orientation"]["psi"] == 0.0 and d["k2_percent"] == pytest.approx(100 * a.k2)


def test_md_theta_none_without_crossing():
    th = np.arange(0, 10, 0.1)
    p = an.AnisotropyProfile(0.0, th, np.ones_like(th), np.zeros_like(th), np.zeros_like(th))
    assert md_theta(p) is None


def test_orientation_canonical_in_candidates(quartz):
    pm = map_parameter_space(quartz, (36, 48), (150, 170), resolution=0.5, jobs=1)
    # theta -> 180 - theta mirror of the cut above folds back to theta < 90
    cands = find_md_orientations(pm, quartz)
    assert len(cands) == 1
    assert cands[0].orientation.theta == pytest.approx(22.6, abs=0.2)
    for c in cands:
        assert 0 <= c.orientation.theta <= 90
        assert isinstance(c.orientation, Orientation)
