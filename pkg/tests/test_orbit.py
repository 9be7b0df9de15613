import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qkdtime import orbit
from qkdtime.orbit import KeplerianElements, StationLocation

EPOCH = "2022-11-09T00:00:00Z"


@pytest.fixture(scope="module")
def table_i():
    return KeplerianElements.circular(500.0, 75.6, 300.6, 84.38, 38.29, EPOCH)


def test_iso_roundtrip():
    t = orbit.to_posix(EPOCH)
    assert orbit.iso_utc(t) == EPOCH
    assert orbit.mjd(t) == pytest.approx(59892.0)


def test_period_500km(table_i):
    # 2*pi*sqrt(a^3/mu) with a = 6878.137 km
    assert table_i.period == pytest.approx(5676.98, abs=0.01)


def test_invalid_elements():
    with pytest.raises(ValueError):
        KeplerianElements(7000.0, 1.2, 50, 0, 0, 0, 0)
    with pytest.raises(ValueError):
        KeplerianElements(6000.0, 0.0, 50, 0, 0, 0, 0)
    with pytest.raises(ValueError):
        StationLocation("X", 91.0, 0.0)


def test_solve_kepler_circular_and_eccentric():
    M = np.linspace(0, 2 * np.pi, 50)
    assert np.allclose(orbit.solve_kepler(M, 0.0), M)
    E = orbit.solve_kepler(M, 0.3)
    assert np.allclose(E - 0.3 * np.sin(E), M, atol=1e-12)


def test_propagation_radius_and_energy(table_i):
    track = orbit.propagate_orbit(table_i, 6000.0, 10.0)
    r = np.linalg.norm(track.positions, axis=1)
    v = np.linalg.norm(track.velocities, axis=1)
    assert np.allclose(r, table_i.semi_major_axis, rtol=1e-12)
    energy = v**2 / 2 - orbit.MU_EARTH / r
    assert np.allclose(energy, -orbit.MU_EARTH / (2 * table_i.semi_major_axis), rtol=1e-9)


def test_eccentric_energy_conserved():
    el = KeplerianElements(8000.0, 0.1, 40.0, 10.0, 20.0, 30.0, 0.0)
    track = orbit.propagate_orbit(el, 3 * el.period, 30.0, start=0.0)
    r = np.linalg.norm(track.positions, axis=1)
    v = np.linalg.norm(track.velocities, axis=1)
    a = 1.0 / (2.0 / r - v**2 / orbit.MU_EARTH)
    assert np.allclose(a, 8000.0, rtol=1e-9)


def test_propagate_rejects_bad_step(table_i):
    with pytest.raises(ValueError):
        orbit.propagate_orbit(table_i, 100.0, 0.0)


def test_station_ecef_on_ellipsoid():
    loc = StationLocation("eq", 0.0, 0.0, 0.0)
    assert np.allclose(orbit.station_ecef(loc), [orbit.WGS84_A, 0.0, 0.0])
    pole = StationLocation("np", 90.0, 0.0, 0.0)
    b = orbit.WGS84_A * (1 - orbit.WGS84_F)
    assert np.allclose(orbit.station_ecef(pole), [0.0, 0.0, b], atol=1e-6)


def test_zenith_look_angle():
    t = orbit.to_posix(EPOCH)
    loc = StationLocation("eq", 0.0, 30.0, 0.0)
    up = orbit.station_position(loc, t)
    sat = up * (1 + 500.0 / np.linalg.norm(up))
    ang = orbit.look_angles(sat, loc, t)
    assert float(ang.elevation) == pytest.approx(90.0, abs=1e-9)
    assert float(ang.slant_range) == pytest.approx(500.0, rel=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.floats(-80, 80), st.floats(-179, 179), st.floats(0, 1e6))
def test_look_angles_rotation_consistent(lat, lon, dt):
    # rotating satellite and station together by the Earth rotation leaves the geometry unchanged
    loc = StationLocation("s", lat, lon, 100.0)
    t0 = orbit.to_posix(EPOCH)
    sat_ecef = orbit.station_ecef(loc) + np.array([300.0, -200.0, 450.0])
    a = orbit.look_angles_ecef(sat_ecef, loc)
    for t in (t0, t0 + dt):
        theta = orbit.earth_rotation_angle(t)
        sat_inertial = orbit._rot_z(sat_ecef, theta)
        b = orbit.look_angles(sat_inertial, loc, t)
        assert float(b.elevation) == pytest.approx(float(a.elevation), abs=1e-8)
        assert float(b.slant_range) == pytest.approx(float(a.slant_range), rel=1e-10)


def test_slant_range_at_least_altitude(table_i):
    track = orbit.propagate_orbit(table_i, 86400.0, 5.0)
    for loc in (orbit.MATERA, orbit.OBERPFAFFENHOFEN):
        for p in orbit.extract_passes(track, loc, 20.0):
            assert np.all(p.slant_range >= 500.0 - loc.altitude / 1e3 - 1e-6)


def test_pass_invariants(table_i):
    track = orbit.propagate_orbit(table_i, 2 * 86400.0, 1.0)
    passes = orbit.extract_passes(track, orbit.MATERA, 20.0)
    assert passes
    for p in passes:
        assert np.all(p.elevation >= 20.0)
        assert np.allclose(np.diff(p.times), 1.0)
    for a, b in zip(passes, passes[1:]):
        assert b.start - a.end >= 1.0


def test_find_passes_matches_full_track(table_i):
    days = 3
    track = orbit.propagate_orbit(table_i, days * 86400.0, 1.0)
    fast = orbit.find_passes(table_i, [orbit.MATERA, orbit.OBERPFAFFENHOFEN], days * 86400.0, 1.0, 20.0)
    for loc in (orbit.MATERA, orbit.OBERPFAFFENHOFEN):
        ref = orbit.extract_passes(track, loc, 20.0)
        got = fast[loc.name]
        assert len(ref) == len(got)
        for r, g in zip(ref, got):
            assert np.array_equal(r.times, g.times)
            assert np.array_equal(r.elevation, g.elevation)


def test_passes_twice_a_day(table_i):
    res = orbit.find_passes(table_i, [orbit.MATERA, orbit.OBERPFAFFENHOFEN], 10 * 86400.0, 1.0, 20.0)
    for name, passes in res.items():
        stats = orbit.pass_statistics(passes, 10)
        assert 1.0 <= stats.passes_per_day <= 3.0, name


def test_pass_statistics_arithmetic():
    t = np.arange(300.0)
    p = orbit.Pass("X", t, np.full(300, 30.0), np.zeros(300), np.full(300, 800.0), 1.0)
    stats = orbit.pass_statistics([p, p], 1.0)
    assert stats.minutes_per_day == pytest.approx(10.0)
    assert stats.passes_per_day == 2.0
    assert orbit.pass_statistics([], 1.0).minutes_per_day == 0.0
    with pytest.raises(ValueError):
        orbit.pass_statistics([p], 0.0)


def test_pass_at_horizon_excluded():
    t = np.arange(5.0)
    el = np.array([19.9, 20.0, 25.0, 20.0, 19.99])
    ang = orbit.LookAngles(el, np.zeros(5), np.full(5, 900.0))
    passes = orbit.passes_from_angles("X", t, ang, 20.0, 1.0)
    assert len(passes) == 1 and passes[0].duration == 3.0


def test_sun_elevation_noon_vs_midnight():
    loc = orbit.MATERA
    noon = orbit.to_posix("2022-06-21T10:53:00Z")  # near local solar noon at 16.7 E
    midnight = noon + 43200
    assert float(orbit.sun_elevation(loc, noon)) == pytest.approx(90 - 40.6486 + 23.44, abs=1.0)
    assert float(orbit.sun_elevation(loc, midnight)) < 0


def test_era_j2000():
    # ERA at the J2000 epoch (UT1 = UTC here) is 2*pi*0.779057...
    t = orbit.to_posix("2000-01-01T12:00:00Z")
    assert orbit.earth_rotation_angle(t) == pytest.approx(2 * math.pi * 0.7790572732640, abs=1e-9)
