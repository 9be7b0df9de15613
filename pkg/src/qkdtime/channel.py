"""Satellite-to-ground optical channel efficiency.

The efficiency of one orbit sample is the product of atmospheric,
geometric (beam clipping by an obscured aperture), angular (field of view vs
pointing error) and fixed transmittances. All functions broadcast over numpy
arrays so a whole pass is evaluated at once.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .orbit import LookAngles

HV_HIGH_ALT = 0.00594
HV_MID = 2.7e-16


@dataclass(frozen=True)
class TurbulenceProfile:
    cn2_ground: float = 1e-14  # m^-2/3
    wind_speed: float = 21.0  # m/s
    profile_form: str = "hufnagel-valley"

    def __post_init__(self):
        if self.cn2_ground < 0 or self.wind_speed < 0:
            raise ValueError("cn2_ground and wind_speed must be non-negative")
        if self.profile_form not in ("hufnagel-valley", "none"):
            raise ValueError(f"unknown profile form {self.profile_form!r}")


NO_TURBULENCE = TurbulenceProfile(0.0, 0.0, "none")


@dataclass(frozen=True)
class OpticalTerminal:
    wavelength: float = 1550e-9  # m
    tx_beam_radius: float = 0.15  # m
    rx_diameter: float = 1.5  # m
    rx_obscuration: float = 0.1  # m
    rx_half_fov: float = 6.25e-6  # rad
    pointing_error: float = 100e-6  # rad
    fixed_losses_db: float = 13.0

    def __post_init__(self):
        if self.wavelength <= 0 or self.tx_beam_radius <= 0:
            raise ValueError("wavelength and beam radius must be positive")
        if not 0 <= self.rx_obscuration < self.rx_diameter:
            raise ValueError("obscuration must satisfy 0 <= D_occ < D_Rx")
        if self.rx_half_fov < 0 or self.pointing_error < 0 or self.fixed_losses_db < 0:
            raise ValueError("angles and fixed losses must be non-negative")


@dataclass
class ChannelSample:
    elevation: np.ndarray
    slant_range: np.ndarray  # km
    rho0: np.ndarray  # m, inf without turbulence
    theta_d: float
    theta_t: np.ndarray
    theta: np.ndarray
    w_g: np.ndarray
    eta_a: np.ndarray
    eta_g: np.ndarray
    eta_f: float
    eta_0: float
    eta: np.ndarray
    timestamp: np.ndarray | None = field(default=None)


def cn2_at_height(profile: TurbulenceProfile, h):
    """Hufnagel-Valley Cn^2 [m^-2/3] at altitude h [m]."""
    h = np.asarray(h, dtype=float)
    if np.any(h < 0):
        raise ValueError("height must be non-negative")
    if profile.profile_form == "none":
        return np.zeros_like(h)
    v = profile.wind_speed
    return (HV_HIGH_ALT * (v / 27.0) ** 2 * (1e-5 * h) ** 10 * np.exp(-h / 1000.0)
            + HV_MID * np.exp(-h / 1500.0)
            + profile.cn2_ground * np.exp(-h / 100.0))


def _simpson_weights(n_intervals: int):
    if n_intervals % 2:
        raise ValueError("Simpson rule needs an even number of intervals")
    w = np.ones(n_intervals + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w / (3.0 * n_intervals)


def path_integral(profile: TurbulenceProfile, geometry: LookAngles, ground_alt: float = 0.0,
                  orientation: str = "ground", nodes: int = 2048, chunk: int = 4096):
    """R * int_0^1 (1 - xi)^(5/3) Cn^2(h(xi R)) dxi in m^(1/3).

    Path altitude is ``ground_alt + xi * R * sin(el)``. With
    ``orientation='ground'`` xi = 0 sits at the station; ``'satellite'`` puts
    xi = 0 at the satellite. The integral is taken in height above the station
    under z = z0 (e^u - 1), which resolves the 100 m ground layer with a fixed
    ``nodes``-interval composite Simpson rule. Paths taller than ``Z_CUT`` are
    integrated up to ``Z_CUT`` only.
    """
    if orientation not in ("ground", "satellite"):
        raise ValueError(f"unknown orientation {orientation!r}")
    el = np.atleast_1d(np.asarray(geometry.elevation, dtype=float))
    R = np.atleast_1d(np.asarray(geometry.slant_range, dtype=float)) * 1e3
    if np.any(R <= 0) or np.any(el <= 0):
        raise ValueError("need positive slant range and elevation")
    H = R * np.sin(np.radians(el))
    w = _simpson_weights(nodes)
    s = np.linspace(0.0, 1.0, nodes + 1)
    out = np.empty_like(H)

    # Above Z_CUT the profile is < 1e-30, so tall paths share one height grid
    tall = H >= Z_CUT
    if np.any(tall):
        umax = math.log1p(Z_CUT / Z_SCALE)
        eu = np.exp(s * umax)
        z = Z_SCALE * (eu - 1.0)
        base = w * cn2_at_height(profile, ground_alt + z) * Z_SCALE * eu * umax
        idx = np.flatnonzero(tall)
        for c in range(0, len(idx), chunk):
            sel = idx[c:c + chunk]
            frac = z / H[sel, None]
            out[sel] = _path_weight(frac, orientation) @ base * (R[sel] / H[sel])
    for i in np.flatnonzero(~tall):
        umax = math.log1p(H[i] / Z_SCALE)
        eu = np.exp(s * umax)
        z = Z_SCALE * (eu - 1.0)
        frac = np.clip(z / H[i], 0.0, 1.0)
        f = _path_weight(frac, orientation) * cn2_at_height(profile, ground_alt + z) * Z_SCALE * eu
        out[i] = R[i] / H[i] * umax * (f @ w)
    return out.reshape(np.shape(geometry.elevation))


Z_SCALE = 50.0  # m, grid clustering length near the station
Z_CUT = 100e3  # m


def _path_weight(frac, orientation):
    # frac is the fractional distance from the station along the path
    t = 1.0 - frac if orientation == "ground" else frac
    t = np.clip(t, 0.0, 1.0)
    return t * np.cbrt(t * t)


def coherence_length_rho0(profile: TurbulenceProfile, geometry: LookAngles, ground_alt: float,
                          wavelength: float, orientation: str = "ground", nodes: int = 2048):
    """Spherical-wave coherence length [m]; inf when the profile is zero."""
    k = 2.0 * math.pi / wavelength
    integral = path_integral(profile, geometry, ground_alt, orientation, nodes)
    with np.errstate(divide="ignore"):
        return np.where(integral > 0, (1.46 * k**2 * integral) ** (-3.0 / 5.0), np.inf)


def total_divergence(w0, wavelength, rho0):
    theta_d = wavelength / (math.pi * w0)
    theta_t = wavelength / (np.pi * np.asarray(rho0, dtype=float))
    return np.sqrt(theta_d**2 + theta_t**2)


def beam_radius_at_ground(w0, theta, R):
    """Paraxial Gaussian beam radius [m]; R in metres."""
    R = np.asarray(R, dtype=float)
    if np.any(R < 0):
        raise ValueError("range must be non-negative")
    return np.sqrt(w0**2 + (np.asarray(theta) * R) ** 2)


def geometric_transmittance(w_g, d_rx, d_occ):
    d_rx, d_occ = np.asarray(d_rx, dtype=float), np.asarray(d_occ, dtype=float)
    if np.any(d_occ < 0) or np.any(d_occ > d_rx):
        raise ValueError("obscuration must satisfy 0 <= D_occ <= D_Rx")
    two_w2 = 2.0 * np.asarray(w_g, dtype=float) ** 2
    return np.exp(-d_occ**2 / two_w2) - np.exp(-d_rx**2 / two_w2)


def angular_transmittance(theta_rx: float, alpha_rx: float) -> float:
    if alpha_rx == 0:
        return 1.0
    ratio = theta_rx / alpha_rx  # squared separately so tiny alpha cannot underflow to 0
    return -math.expm1(-0.5 * ratio * ratio)


def db_to_transmittance(db: float) -> float:
    return 10.0 ** (-db / 10.0)


class AtmosphereModel:
    """Elevation-dependent transmittance, parametric or tabulated.

    ``AtmosphereModel(t_zenith=0.7)`` uses T(el) = T_zenith ** (1 / sin el).
    ``AtmosphereModel.from_table(...)`` interpolates linearly in elevation.
    """

    def __init__(self, t_zenith: float | None = None, table=None, extrapolate: bool = False):
        if (t_zenith is None) == (table is None):
            raise ValueError("give exactly one of t_zenith or table")
        if t_zenith is not None and not 0 <= t_zenith <= 1:
            raise ValueError("t_zenith must be in [0, 1]")
        self.t_zenith = t_zenith
        self.extrapolate = extrapolate
        if table is not None:
            el, tr = (np.asarray(x, dtype=float) for x in zip(*table))
            if np.any(np.diff(el) <= 0):
                raise ValueError("table elevations must be strictly increasing")
            if np.any((tr < 0) | (tr > 1)):
                raise ValueError("table transmittances must be in [0, 1]")
            self.table = (el, tr)
        else:
            self.table = None

    @classmethod
    def from_table(cls, path, extrapolate: bool = False):
        with open(Path(path), newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["elevation_deg", "transmittance"]:
                raise ValueError(f"{path}: expected header 'elevation_deg,transmittance'")
            rows = [(float(r["elevation_deg"]), float(r["transmittance"])) for r in reader]
        return cls(table=rows, extrapolate=extrapolate)

    @property
    def mode(self) -> str:
        return "parametric" if self.table is None else "table"

    def __call__(self, elevation):
        el = np.asarray(elevation, dtype=float)
        if self.table is None:
            return self.t_zenith ** (1.0 / np.sin(np.radians(el)))
        tel, ttr = self.table
        if not self.extrapolate and (np.any(el < tel[0] - 1e-9) or np.any(el > tel[-1] + 1e-9)):
            raise ValueError(f"elevation outside table range [{tel[0]}, {tel[-1]}]")
        return np.interp(el, tel, ttr)

    def describe(self) -> str:
        if self.table is None:
            return f"parametric airmass law, T_zenith={self.t_zenith}"
        return f"tabulated ({len(self.table[0])} points, {self.table[0][0]}-{self.table[0][-1]} deg)"


def atmospheric_transmittance(elevation, model: AtmosphereModel):
    return model(elevation)


def channel_efficiency(terminal: OpticalTerminal, profile: TurbulenceProfile, geometry: LookAngles,
                       atmosphere: AtmosphereModel, ground_alt: float = 0.0,
                       orientation: str = "ground", swap_fov_pointing: bool = False,
                       nodes: int = 2048) -> ChannelSample:
    """Full per-sample link efficiency.

    eta is evaluated as ((eta_a * eta_g) * eta_f) * eta_0, always in that
    order. ``swap_fov_pointing`` exchanges the roles of the receiver half
    field of view and the pointing error in the angular term.
    """
    el = np.asarray(geometry.elevation, dtype=float)
    R_m = np.asarray(geometry.slant_range, dtype=float) * 1e3
    rho0 = coherence_length_rho0(profile, geometry, ground_alt, terminal.wavelength, orientation, nodes)
    theta_d = terminal.wavelength / (math.pi * terminal.tx_beam_radius)
    theta_t = terminal.wavelength / (np.pi * rho0)
    theta = total_divergence(terminal.tx_beam_radius, terminal.wavelength, rho0)
    w_g = beam_radius_at_ground(terminal.tx_beam_radius, theta, R_m)
    eta_a = atmospheric_transmittance(el, atmosphere)
    eta_g = geometric_transmittance(w_g, terminal.rx_diameter, terminal.rx_obscuration)
    fov, alpha = terminal.rx_half_fov, terminal.pointing_error
    if swap_fov_pointing:
        fov, alpha = alpha, fov
    eta_f = angular_transmittance(fov, alpha)
    eta_0 = db_to_transmittance(terminal.fixed_losses_db)
    eta = ((eta_a * eta_g) * eta_f) * eta_0
    return ChannelSample(el, np.asarray(geometry.slant_range, dtype=float), rho0, theta_d, theta_t,
                         theta, w_g, eta_a, eta_g, eta_f, eta_0, eta)
