"""Two-body orbit propagation, ground-station geometry and pass extraction.

Times are POSIX seconds (UTC, treated as UT1). Inertial positions are in km
in a mean-equator frame whose x-axis is tied to the Earth rotation angle at
J2000; no precession, nutation or polar motion.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

MU_EARTH = 398600.4418  # km^3/s^2
WGS84_A = 6378.137  # km
WGS84_F = 1.0 / 298.257223563
WGS84_E2 = WGS84_F * (2.0 - WGS84_F)
OMEGA_EARTH = 7.2921150e-5  # rad/s, sidereal

JD_UNIX_EPOCH = 2440587.5
JD_J2000 = 2451545.0

MAX_TRACK_SAMPLES = 20_000_000


class KeplerConvergenceError(RuntimeError):
    pass


def to_posix(t) -> float:
    """Accept a datetime, ISO string or number and return POSIX seconds."""
    if isinstance(t, (int, float, np.floating, np.integer)):
        return float(t)
    if isinstance(t, str):
        t = datetime.fromisoformat(t.replace("Z", "+00:00"))
    if t.tzinfo is None:
        t = t.replace(tzinfo=timezone.utc)
    return t.timestamp()


def iso_utc(t: float) -> str:
    return datetime.fromtimestamp(round(float(t), 3), tz=timezone.utc).strftime(
        "%Y-%m-%dT%H:%M:%SZ"
    )


def mjd(t):
    return np.asarray(t, dtype=float) / 86400.0 + (JD_UNIX_EPOCH - 2400000.5)


@dataclass(frozen=True)
class KeplerianElements:
    semi_major_axis: float  # km
    eccentricity: float
    inclination: float  # deg
    raan: float
    arg_perigee: float
    mean_anomaly: float
    epoch: float  # POSIX seconds

    def __post_init__(self):
        if not 0.0 <= self.eccentricity < 1.0:
            raise ValueError(f"eccentricity must be in [0, 1), got {self.eccentricity}")
        if self.semi_major_axis * (1.0 - self.eccentricity) <= WGS84_A:
            raise ValueError("perigee lies inside the Earth")
        for name in ("raan", "arg_perigee", "mean_anomaly"):
            object.__setattr__(self, name, getattr(self, name) % 360.0)
        object.__setattr__(self, "epoch", to_posix(self.epoch))

    @classmethod
    def circular(cls, altitude_km, inclination, raan, arg_perigee, mean_anomaly, epoch):
        return cls(WGS84_A + altitude_km, 0.0, inclination, raan, arg_perigee, mean_anomaly, epoch)

    @property
    def period(self) -> float:
        return 2.0 * math.pi * math.sqrt(self.semi_major_axis**3 / MU_EARTH)


@dataclass(frozen=True)
class StationLocation:
    name: str
    latitude: float  # deg, geodetic
    longitude: float  # deg, east positive
    altitude: float = 0.0  # m above the ellipsoid

    def __post_init__(self):
        if not -90.0 <= self.latitude <= 90.0:
            raise ValueError(f"latitude out of range: {self.latitude}")
        if not -180.0 <= self.longitude <= 180.0:
            raise ValueError(f"longitude out of range: {self.longitude}")


MATERA = StationLocation("MA", 40.6486, 16.7046, 536.0)
OBERPFAFFENHOFEN = StationLocation("OP", 48.0857, 11.2795, 600.0)


@dataclass
class OrbitTrack:
    times: np.ndarray  # (N,) POSIX seconds
    positions: np.ndarray  # (N, 3) km, inertial
    velocities: np.ndarray  # (N, 3) km/s
    step: float

    def __len__(self):
        return len(self.times)


@dataclass
class LookAngles:
    elevation: np.ndarray  # deg
    azimuth: np.ndarray  # deg in [0, 360)
    slant_range: np.ndarray  # km


@dataclass
class Pass:
    station: str
    times: np.ndarray
    elevation: np.ndarray
    azimuth: np.ndarray
    slant_range: np.ndarray
    step: float

    @property
    def start(self) -> float:
        return float(self.times[0])

    @property
    def end(self) -> float:
        return float(self.times[-1])

    @property
    def duration(self) -> float:
        """Useful time: every sample stands for one step of link time."""
        return len(self.times) * self.step

    @property
    def max_elevation(self) -> float:
        return float(np.max(self.elevation))

    def look_angles(self) -> LookAngles:
        return LookAngles(self.elevation, self.azimuth, self.slant_range)


@dataclass
class PassStats:
    minutes_per_day: float
    passes_per_day: float
    n_passes: int
    elevation_bins: np.ndarray = field(repr=False)
    elevation_counts: np.ndarray = field(repr=False)


def earth_rotation_angle(t):
    """Earth rotation angle [rad] at POSIX time(s) t, assuming UT1 = UTC."""
    du = np.asarray(t, dtype=float) / 86400.0 + (JD_UNIX_EPOCH - JD_J2000)
    frac = 0.7790572732640 + 0.00273781191135448 * du + np.mod(du, 1.0)
    return 2.0 * np.pi * np.mod(frac, 1.0)


def _rot_z(vec, angle):
    c, s = np.cos(angle), np.sin(angle)
    x, y, z = vec[..., 0], vec[..., 1], vec[..., 2]
    return np.stack([c * x - s * y, s * x + c * y, z], axis=-1)


def solve_kepler(mean_anomaly, e, tol=1e-13, max_iter=50):
    """Eccentric anomaly from mean anomaly (rad), Newton iteration."""
    M = np.asarray(mean_anomaly, dtype=float)
    if e == 0.0:
        return M.copy()
    E = np.where(e < 0.8, M, np.pi * np.ones_like(M))
    for _ in range(max_iter):
        f = E - e * np.sin(E) - M
        dE = f / (1.0 - e * np.cos(E))
        E = E - dE
        if np.all(np.abs(dE) < tol):
            return E
    raise KeplerConvergenceError(f"Kepler solver did not converge for e={e}")


def _state_at(elements: KeplerianElements, times):
    a, e = elements.semi_major_axis, elements.eccentricity
    n = math.sqrt(MU_EARTH / a**3)
    M = np.radians(elements.mean_anomaly) + n * (np.asarray(times, dtype=float) - elements.epoch)
    M = np.mod(M, 2.0 * np.pi)
    E = solve_kepler(M, e)
    cosE, sinE = np.cos(E), np.sin(E)
    b = a * math.sqrt(1.0 - e * e)
    r = a * (1.0 - e * cosE)
    # perifocal frame
    xp, yp = a * (cosE - e), b * sinE
    vfac = math.sqrt(MU_EARTH * a) / r
    vxp, vyp = -vfac * sinE, vfac * math.sqrt(1.0 - e * e) * cosE

    O, i, w = (math.radians(x) for x in (elements.raan, elements.inclination, elements.arg_perigee))
    cO, sO, ci, si, cw, sw = math.cos(O), math.sin(O), math.cos(i), math.sin(i), math.cos(w), math.sin(w)
    P = np.array([cO * cw - sO * sw * ci, sO * cw + cO * sw * ci, sw * si])
    Q = np.array([-cO * sw - sO * cw * ci, -sO * sw + cO * cw * ci, cw * si])
    pos = np.outer(xp, P) + np.outer(yp, Q)
    vel = np.outer(vxp, P) + np.outer(vyp, Q)
    return pos, vel


def propagate_orbit(elements: KeplerianElements, duration: float, step: float, start=None) -> OrbitTrack:
    """Sample the two-body orbit every ``step`` seconds over ``duration``.

    Returns ``floor(duration / step) + 1`` states starting at ``start``
    (default: the element epoch).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if duration < step:
        raise ValueError("duration must be at least one step")
    n = int(math.floor(duration / step + 1e-9)) + 1
    if n > MAX_TRACK_SAMPLES:
        raise OverflowError(
            f"{n} samples requested; use find_passes for long spans (limit {MAX_TRACK_SAMPLES})"
        )
    t0 = elements.epoch if start is None else to_posix(start)
    times = t0 + step * np.arange(n)
    pos, vel = _state_at(elements, times)
    return OrbitTrack(times, pos, vel, float(step))


def station_ecef(loc: StationLocation) -> np.ndarray:
    lat, lon = math.radians(loc.latitude), math.radians(loc.longitude)
    h = loc.altitude / 1000.0
    N = WGS84_A / math.sqrt(1.0 - WGS84_E2 * math.sin(lat) ** 2)
    return np.array([
        (N + h) * math.cos(lat) * math.cos(lon),
        (N + h) * math.cos(lat) * math.sin(lon),
        (N * (1.0 - WGS84_E2) + h) * math.sin(lat),
    ])


def station_position(loc: StationLocation, t):
    """Inertial station position [km] at time(s) t."""
    ecef = station_ecef(loc)
    theta = earth_rotation_angle(t)
    return _rot_z(np.broadcast_to(ecef, np.shape(theta) + (3,)), theta)


def _enu_basis(loc: StationLocation):
    lat, lon = math.radians(loc.latitude), math.radians(loc.longitude)
    east = np.array([-math.sin(lon), math.cos(lon), 0.0])
    north = np.array([-math.sin(lat) * math.cos(lon), -math.sin(lat) * math.sin(lon), math.cos(lat)])
    up = np.array([math.cos(lat) * math.cos(lon), math.cos(lat) * math.sin(lon), math.sin(lat)])
    return east, north, up


def look_angles_ecef(sat_ecef, loc: StationLocation) -> LookAngles:
    rho = np.asarray(sat_ecef, dtype=float) - station_ecef(loc)
    rng = np.linalg.norm(rho, axis=-1)
    if np.any(rng == 0.0):
        raise ValueError("satellite coincides with the station")
    east, north, up = _enu_basis(loc)
    u = rho @ up
    el = np.degrees(np.arcsin(np.clip(u / rng, -1.0, 1.0)))
    az = np.mod(np.degrees(np.arctan2(rho @ east, rho @ north)), 360.0)
    return LookAngles(el, az, rng)


def look_angles(sat_pos, loc: StationLocation, t) -> LookAngles:
    """Topocentric elevation/azimuth/slant range of an inertial position."""
    sat_ecef = _rot_z(np.asarray(sat_pos, dtype=float), -earth_rotation_angle(t))
    return look_angles_ecef(sat_ecef, loc)


def _runs(mask):
    """(start, stop) index pairs of maximal True runs."""
    m = np.concatenate([[False], np.asarray(mask, dtype=bool), [False]])
    d = np.diff(m.astype(np.int8))
    return list(zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1)))


def passes_from_angles(station: str, times, angles: LookAngles, min_elevation: float, step: float):
    times = np.asarray(times, dtype=float)
    el = np.asarray(angles.elevation, dtype=float)
    out = []
    for i, j in _runs(el >= min_elevation):
        out.append(Pass(station, times[i:j], el[i:j], np.asarray(angles.azimuth)[i:j],
                        np.asarray(angles.slant_range)[i:j], step))
    return out


def extract_passes(track: OrbitTrack, loc: StationLocation, min_elevation: float):
    if len(track) == 0:
        raise ValueError("empty track")
    if not 0.0 < min_elevation < 90.0:
        raise ValueError("min_elevation must be in (0, 90) degrees")
    ang = look_angles(track.positions, loc, track.times)
    return passes_from_angles(loc.name, track.times, ang, min_elevation, track.step)


def find_passes(elements: KeplerianElements, stations, duration: float, step: float,
                min_elevation: float, start=None, coarse_step: float = 60.0):
    """Passes over each station for a long span without materialising the track.

    A coarse screen on the Earth-central angle between sub-satellite point and
    station selects candidate windows, which are then sampled on the same
    fine grid ``propagate_orbit`` would use, so the result is identical to
    ``extract_passes`` on the full track.
    """
    if not 0.0 < min_elevation < 90.0:
        raise ValueError("min_elevation must be in (0, 90) degrees")
    t0 = elements.epoch if start is None else to_posix(start)
    n_fine = int(math.floor(duration / step + 1e-9)) + 1
    coarse_k = max(1, int(round(coarse_step / step)))
    a, e = elements.semi_major_axis, elements.eccentricity
    r_p, r_a = a * (1 - e), a * (1 + e)
    rate = math.sqrt(MU_EARTH * (1 + e) / r_p) / r_p + OMEGA_EARTH
    margin = 1.5 * rate * coarse_k * step / 2.0 + math.radians(0.5)

    result = {}
    chunk = 864 * coarse_k * 10  # ~10 days of fine samples per screening chunk at 1 s
    for loc in stations:
        s_ecef = station_ecef(loc)
        s_norm = np.linalg.norm(s_ecef)
        el_m = math.radians(min_elevation)
        cap = math.acos(min(1.0, s_norm * math.cos(el_m) / r_a)) - el_m
        cos_lim = math.cos(min(math.pi, cap + margin))
        fine_idx = []
        for c0 in range(0, n_fine, chunk):
            c1 = min(n_fine, c0 + chunk)
            k = np.arange(c0, c1, coarse_k)
            if k[-1] != c1 - 1:
                k = np.append(k, c1 - 1)
            tc = t0 + step * k
            pos, _ = _state_at(elements, tc)
            ecef = _rot_z(pos, -earth_rotation_angle(tc))
            cosang = (ecef @ s_ecef) / (np.linalg.norm(ecef, axis=1) * s_norm)
            for i, j in _runs(cosang >= cos_lim):
                lo = k[max(i - 1, 0)]
                hi = k[min(j, len(k) - 1)]
                fine_idx.append((lo, hi + 1))
        passes = []
        for lo, hi in _merge(fine_idx):
            tf = t0 + step * np.arange(lo, hi)
            pos, _ = _state_at(elements, tf)
            ang = look_angles(pos, loc, tf)
            passes.extend(passes_from_angles(loc.name, tf, ang, min_elevation, step))
        result[loc.name] = _join_split(passes, step)
    return result


def _merge(intervals):
    out = []
    for lo, hi in sorted(intervals):
        if out and lo <= out[-1][1]:
            out[-1] = (out[-1][0], max(out[-1][1], hi))
        else:
            out.append((lo, hi))
    return out


def _join_split(passes, step):
    # a pass cut at a screening-chunk edge comes back as two touching pieces
    out = []
    for p in passes:
        if out and abs(p.start - out[-1].end - step) < 1e-6 * step:
            q = out[-1]
            out[-1] = Pass(q.station, *(np.concatenate([getattr(q, f), getattr(p, f)])
                                        for f in ("times", "elevation", "azimuth", "slant_range")), step)
        else:
            out.append(p)
    return out


def pass_statistics(passes, duration_days: float, bin_width: float = 10.0) -> PassStats:
    if duration_days <= 0:
        raise ValueError("duration must be positive")
    bins = np.arange(0.0, 90.0 + bin_width, bin_width)
    if not passes:
        return PassStats(0.0, 0.0, 0, bins, np.zeros(len(bins) - 1, dtype=int))
    total = sum(p.duration for p in passes)
    counts, _ = np.histogram([p.max_elevation for p in passes], bins=bins)
    return PassStats(total / 60.0 / duration_days, len(passes) / duration_days, len(passes), bins, counts)


def sun_elevation(loc: StationLocation, t):
    """Low-precision solar elevation [deg] (about 0.01 deg accuracy)."""
    d = np.asarray(t, dtype=float) / 86400.0 + (JD_UNIX_EPOCH - JD_J2000)
    g = np.radians(np.mod(357.529 + 0.98560028 * d, 360.0))
    q = np.mod(280.459 + 0.98564736 * d, 360.0)
    lam = np.radians(q + 1.915 * np.sin(g) + 0.020 * np.sin(2 * g))
    eps = np.radians(23.439 - 0.00000036 * d)
    ra = np.arctan2(np.cos(eps) * np.sin(lam), np.cos(lam))
    dec = np.arcsin(np.sin(eps) * np.sin(lam))
    # GMST from the rotation angle is good enough at this accuracy
    ha = earth_rotation_angle(t) + np.radians(loc.longitude) - ra
    lat = math.radians(loc.latitude)
    return np.degrees(np.arcsin(math.sin(lat) * np.sin(dec) + math.cos(lat) * np.cos(dec) * np.cos(ha)))
