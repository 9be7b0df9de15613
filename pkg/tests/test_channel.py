import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qkdtime import channel
from qkdtime.channel import AtmosphereModel, OpticalTerminal, TurbulenceProfile
from qkdtime.orbit import LookAngles

HV = TurbulenceProfile(1e-14, 21.0)
MA_TERMINAL = OpticalTerminal(1550e-9, 0.15, 1.5, 0.1, 6.25e-6, 100e-6, 13.0)


def geom(el, r_km):
    return LookAngles(np.asarray(el, float), np.zeros_like(np.asarray(el, float)), np.asarray(r_km, float))


def riemann_integral(profile, el, r_km, ground_alt, n=1_000_000):
    # midpoint rule in xi with 1e6 uniform nodes, xi = 0 at the station
    R = r_km * 1e3
    xi = (np.arange(n) + 0.5) / n
    h = ground_alt + xi * R * math.sin(math.radians(el))
    v = profile.wind_speed
    cn2 = (0.00594 * (v / 27) ** 2 * (1e-5 * h) ** 10 * np.exp(-h / 1000)
           + 2.7e-16 * np.exp(-h / 1500) + profile.cn2_ground * np.exp(-h / 100))
    return R * np.mean((1 - xi) ** (5 / 3) * cn2)


# --- Cn2 -------------------------------------------------------------------

def test_cn2_ground_value():
    assert channel.cn2_at_height(HV, 0.0) == pytest.approx(1e-14 + 2.7e-16, rel=1e-15)


def test_cn2_isolated_mid_term():
    p = TurbulenceProfile(0.0, 0.0)
    h = np.array([0.0, 500.0, 5000.0, 20000.0])
    assert np.allclose(channel.cn2_at_height(p, h), 2.7e-16 * np.exp(-h / 1500), rtol=1e-15, atol=0)


def test_cn2_at_1km():
    h = 1000.0
    expected = 0.00594 * (21 / 27) ** 2 * 1e-20 * math.exp(-1) + 2.7e-16 * math.exp(-2 / 3) + 1e-14 * math.exp(-10)
    assert channel.cn2_at_height(HV, h) == pytest.approx(expected, rel=1e-14)


def test_cn2_negative_height():
    with pytest.raises(ValueError):
        channel.cn2_at_height(HV, -1.0)


def test_profile_validation():
    with pytest.raises(ValueError):
        TurbulenceProfile(-1e-14, 21)
    with pytest.raises(ValueError):
        TurbulenceProfile(1e-14, 21, "kolmogorov")


# --- rho0 ------------------------------------------------------------------

def test_rho0_infinite_without_turbulence():
    rho = channel.coherence_length_rho0(channel.NO_TURBULENCE, geom(90.0, 500.0), 0.0, 1550e-9)
    assert np.isinf(rho)
    assert channel.total_divergence(0.15, 1550e-9, rho) == pytest.approx(1550e-9 / (math.pi * 0.15))


def test_rho0_wavelength_scaling():
    g = geom([90.0, 45.0, 20.0], [500.0, 690.0, 1250.0])
    a = channel.coherence_length_rho0(HV, g, 536.0, 1550e-9)
    b = channel.coherence_length_rho0(HV, g, 536.0, 3100e-9)
    assert np.allclose(b / a, 2 ** 1.2, rtol=1e-9, atol=0)


@pytest.mark.parametrize("el,r_km", [(90.0, 500.0), (45.0, 690.0), (20.0, 1250.0)])
def test_path_integral_matches_riemann(el, r_km):
    ours = float(channel.path_integral(HV, geom(el, r_km), 536.0))
    ref = riemann_integral(HV, el, r_km, 536.0)
    assert ours == pytest.approx(ref, rel=1e-3)


def test_path_integral_short_path():
    # a 5 km path stays below the grid cut and uses the per-path grid
    ours = float(channel.path_integral(HV, geom(30.0, 5.0), 0.0))
    assert ours == pytest.approx(riemann_integral(HV, 30.0, 5.0, 0.0), rel=1e-3)


def test_path_integral_orientation_switch():
    g = geom(60.0, 570.0)
    ground = float(channel.path_integral(HV, g, 0.0, "ground"))
    sat = float(channel.path_integral(HV, g, 0.0, "satellite"))
    # turbulence sits near the station, so weighting that end gives the larger integral
    assert ground > 1e3 * sat
    with pytest.raises(ValueError):
        channel.path_integral(HV, g, 0.0, "middle")


def test_path_integral_rejects_bad_geometry():
    with pytest.raises(ValueError):
        channel.path_integral(HV, geom(0.0, 500.0))
    with pytest.raises(ValueError):
        channel.path_integral(HV, geom(30.0, 0.0))


# --- divergence and beam ----------------------------------------------------

def test_divergence_values():
    theta_d = 1550e-9 / (math.pi * 0.15)
    assert theta_d == pytest.approx(3.289e-6, rel=1e-3)
    assert channel.total_divergence(0.15, 1550e-9, 0.15) == pytest.approx(math.sqrt(2) * theta_d)
    rho = np.logspace(-3, 1, 50)
    theta = channel.total_divergence(0.15, 1550e-9, rho)
    assert np.all(np.diff(theta) < 0)
    assert np.all(theta >= theta_d)


def test_beam_radius():
    assert channel.beam_radius_at_ground(0.15, 1e-6, 0.0) == pytest.approx(0.15)
    assert channel.beam_radius_at_ground(0.15, 150.0 / 500e3, 500e3) == pytest.approx(150.0, rel=1e-4)
    theta = 1550e-9 / (math.pi * 0.15)
    assert channel.beam_radius_at_ground(0.15, theta, 500e3) == pytest.approx(
        math.sqrt(0.15**2 + (theta * 500e3) ** 2))
    with pytest.raises(ValueError):
        channel.beam_radius_at_ground(0.15, 1e-6, -1.0)


# --- eta_g -----------------------------------------------------------------

def annulus_power_2d(w, d_rx, d_occ, n=2001):
    # Gaussian intensity 2/(pi w^2) exp(-2 r^2 / w^2) integrated on a Cartesian grid
    half = d_rx / 2
    x = np.linspace(-half, half, n)
    dx = x[1] - x[0]
    X, Y = np.meshgrid(x, x)
    r2 = X**2 + Y**2
    mask = (r2 <= half**2) & (r2 >= (d_occ / 2) ** 2)
    return float(np.sum(2 / (math.pi * w**2) * np.exp(-2 * r2 / w**2) * mask) * dx * dx)


@pytest.mark.parametrize("w,d_rx,d_occ", [(5.0, 1.5, 0.1), (2.0, 0.8, 0.3), (1.0, 1.5, 0.1)])
def test_eta_g_numeric_integration(w, d_rx, d_occ):
    # eta_g's form uses D in place of the radius; the 2-D integral over an
    # annulus of radius D/2 with intensity exp(-2 r^2/w^2) gives exactly that.
    eta = float(channel.geometric_transmittance(w, d_rx, d_occ))
    assert eta == pytest.approx(annulus_power_2d(w, d_rx, d_occ), rel=1e-3)


def test_eta_g_ma_value():
    expected = math.exp(-0.01 / 50) - math.exp(-2.25 / 50)
    assert channel.geometric_transmittance(5.0, 1.5, 0.1) == pytest.approx(expected, rel=1e-14)


def test_eta_g_limits():
    assert channel.geometric_transmittance(1.0, 0.5, 0.5) == 0.0
    assert channel.geometric_transmittance(1.0, 1e3, 0.0) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        channel.geometric_transmittance(1.0, 0.5, 0.6)


@settings(max_examples=200, deadline=None)
@given(st.floats(1.0, 100.0), st.floats(0.01, 0.1), st.floats(0.0, 0.99))
def test_eta_g_small_aperture(w, frac, occ_frac):
    d_rx = frac * w
    d_occ = occ_frac * d_rx
    eta = float(channel.geometric_transmittance(w, d_rx, d_occ))
    approx = (d_rx**2 - d_occ**2) / (2 * w**2)
    assert eta == pytest.approx(approx, rel=0.01)


def test_eta_g_monotone_grid():
    w = np.linspace(0.5, 20, 40)
    g = channel.geometric_transmittance(w, 1.0, 0.2)
    assert np.all(np.diff(g) < 0)
    d = np.linspace(0.3, 3.0, 30)
    assert np.all(np.diff(channel.geometric_transmittance(3.0, d, 0.2)) > 0)
    occ = np.linspace(0.0, 0.9, 30)
    assert np.all(np.diff(channel.geometric_transmittance(3.0, 1.0, occ)) < 0)


# --- eta_f, eta_0, atmosphere ----------------------------------------------

def test_eta_f_values():
    assert channel.angular_transmittance(6.25e-6, 100e-6) == pytest.approx(1 - math.exp(-0.001953125))
    assert channel.angular_transmittance(6.25e-6, 100e-6) == pytest.approx(1.95e-3, rel=1e-3)
    assert channel.angular_transmittance(100e-6, 6.25e-6) == pytest.approx(1.0)
    assert channel.angular_transmittance(1e-6, 0.0) == 1.0
    assert channel.angular_transmittance(0.0, 1e-5) == 0.0
    theta = np.linspace(1e-6, 1e-4, 20)
    vals = [channel.angular_transmittance(t, 2e-5) for t in theta]
    assert np.all(np.diff(vals) > 0)


def test_eta0():
    assert channel.db_to_transmittance(13.0) == pytest.approx(10**-1.3)
    assert channel.db_to_transmittance(13.0) == pytest.approx(0.0501, abs=1e-4)


def test_atmosphere_parametric():
    atm = AtmosphereModel(t_zenith=0.7)
    assert atm(90.0) == pytest.approx(0.7, rel=1e-15)
    assert atm(30.0) == pytest.approx(0.49)
    assert atm.mode == "parametric"
    with pytest.raises(ValueError):
        AtmosphereModel(t_zenith=1.2)
    with pytest.raises(ValueError):
        AtmosphereModel()


def test_atmosphere_table(tmp_path):
    path = tmp_path / "atm.csv"
    path.write_text("elevation_deg,transmittance\n20,0.45\n90,0.72\n")
    atm = AtmosphereModel.from_table(path)
    assert atm.mode == "table"
    # linear in elevation: 0.45 + 0.5 * 0.27
    assert atm(55.0) == pytest.approx(0.585)
    with pytest.raises(ValueError):
        atm(10.0)
    assert AtmosphereModel.from_table(path, extrapolate=True)(10.0) == pytest.approx(0.45)


def test_atmosphere_table_bad_header(tmp_path):
    path = tmp_path / "atm.csv"
    path.write_text("el,t\n20,0.45\n")
    with pytest.raises(ValueError):
        AtmosphereModel.from_table(path)
    with pytest.raises(ValueError):
        AtmosphereModel(table=[(30, 0.5), (20, 0.4)])


# --- full chain --------------------------------------------------------------

def test_all_factors_one():
    term = OpticalTerminal(1550e-9, 0.15, 1e4, 0.0, 1.0, 0.0, 0.0)
    s = channel.channel_efficiency(term, channel.NO_TURBULENCE, geom(90.0, 0.001), AtmosphereModel(t_zenith=1.0))
    assert float(s.eta) == pytest.approx(1.0)


def test_eta0_alone():
    term = OpticalTerminal(1550e-9, 0.15, 1e4, 0.0, 1.0, 0.0, 13.0)
    s = channel.channel_efficiency(term, channel.NO_TURBULENCE, geom(90.0, 0.001), AtmosphereModel(t_zenith=1.0))
    assert float(s.eta) == pytest.approx(10**-1.3)


def test_formula_chain_ma_zenith():
    # independent evaluation: Riemann rho0, then each formula by hand
    lam, w0, R = 1550e-9, 0.15, 500e3
    k = 2 * math.pi / lam
    rho0 = (1.46 * k**2 * riemann_integral(HV, 90.0, 500.0, 536.0)) ** (-0.6)
    theta = math.hypot(lam / (math.pi * w0), lam / (math.pi * rho0))
    wg = math.sqrt(w0**2 + (theta * R) ** 2)
    eta_g = math.exp(-0.1**2 / (2 * wg**2)) - math.exp(-1.5**2 / (2 * wg**2))
    eta_f = 1 - math.exp(-(6.25e-6) ** 2 / (2 * (100e-6) ** 2))
    expected = 0.7 * eta_g * eta_f * 10**-1.3
    s = channel.channel_efficiency(MA_TERMINAL, HV, geom(90.0, 500.0), AtmosphereModel(t_zenith=0.7), 536.0)
    assert float(s.eta) == pytest.approx(expected, rel=2e-3)
    assert float(s.rho0) == pytest.approx(rho0, rel=1e-3)


def test_swap_fov_pointing():
    g = geom(90.0, 500.0)
    atm = AtmosphereModel(t_zenith=0.7)
    lit = channel.channel_efficiency(MA_TERMINAL, HV, g, atm, 536.0)
    swp = channel.channel_efficiency(MA_TERMINAL, HV, g, atm, 536.0, swap_fov_pointing=True)
    assert lit.eta_f == pytest.approx(1.95e-3, rel=1e-3)
    assert swp.eta_f == pytest.approx(1.0)
    assert float(swp.eta / lit.eta) == pytest.approx(1 / lit.eta_f)


def test_eta_is_ordered_product():
    el = np.linspace(20, 90, 71)
    r = 500.0 / np.sin(np.radians(el))
    s = channel.channel_efficiency(MA_TERMINAL, HV, geom(el, r), AtmosphereModel(t_zenith=0.7), 536.0)
    assert np.array_equal(s.eta, ((s.eta_a * s.eta_g) * s.eta_f) * s.eta_0)
    again = channel.channel_efficiency(MA_TERMINAL, HV, geom(el, r), AtmosphereModel(t_zenith=0.7), 536.0)
    assert np.array_equal(s.eta, again.eta)


@settings(max_examples=60, deadline=None)
@given(el=st.floats(20.0, 90.0), r=st.floats(480.0, 1500.0), tz=st.floats(0.0, 1.0),
       cn2=st.floats(0.0, 1e-12), drx=st.floats(0.05, 3.0), occ=st.floats(0.0, 0.95),
       fov=st.floats(0.0, 2e-4), alpha=st.floats(0.0, 2e-4), db=st.floats(0.0, 40.0))
def test_transmittances_in_unit_interval(el, r, tz, cn2, drx, occ, fov, alpha, db):
    term = OpticalTerminal(1550e-9, 0.15, drx, occ * drx, fov, alpha, db)
    s = channel.channel_efficiency(term, TurbulenceProfile(cn2, 21.0), geom(el, r), AtmosphereModel(t_zenith=tz))
    for v in (s.eta_a, s.eta_g, s.eta_f, s.eta_0, s.eta):
        assert 0.0 <= float(v) <= 1.0
    assert float(s.theta) >= s.theta_d
    assert float(s.w_g) >= 0.15
