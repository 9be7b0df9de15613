"""Simulated timing-facility and GNSS clocks, all-in-view clock comparison
and daily drift fits.

Clock values are offsets from true time in seconds. A measured difference
against one satellite is t_ptf - (t_sat - tau) before correction and
t_ptf - (t_sat - tau + tau_est) after it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import orbit
from .orbit import KeplerianElements, LookAngles, StationLocation

C_LIGHT = 299_792_458.0  # m/s
NS = 1e-9
DAY = 86400.0


@dataclass
class ClockModel:
    initial_offset: float = 0.0  # s
    drift: float | tuple = 0.0  # s/s, or one rate per day (piecewise linear)
    white_noise_sigma: float = 0.0  # s
    seed: int | None = None

    def __post_init__(self):
        if self.white_noise_sigma < 0:
            raise ValueError("white_noise_sigma must be non-negative")

    def deterministic(self, elapsed):
        """Noise-free offset after ``elapsed`` seconds."""
        elapsed = np.asarray(elapsed, dtype=float)
        if np.ndim(self.drift) == 0:
            return self.initial_offset + float(self.drift) * elapsed
        rates = np.asarray(self.drift, dtype=float)
        day = np.clip(np.floor(elapsed / DAY).astype(int), 0, len(rates) - 1)
        day_start = np.concatenate([[0.0], np.cumsum(rates[:-1] * DAY)])
        return self.initial_offset + day_start[day] + rates[day] * (elapsed - day * DAY)


@dataclass
class ClockTrace:
    times: np.ndarray
    offsets: np.ndarray


def simulate_clock(model: ClockModel, duration: float, step: float, start: float = 0.0) -> ClockTrace:
    """t(k) = offset + drift * k * step + white noise, reproducible per seed."""
    if step <= 0:
        raise ValueError("step must be positive")
    n = int(math.floor(duration / step + 1e-9)) + 1
    elapsed = step * np.arange(n)
    values = model.deterministic(elapsed)
    if model.white_noise_sigma > 0:
        values = values + np.random.default_rng(model.seed).normal(0.0, model.white_noise_sigma, n)
    return ClockTrace(start + elapsed, values)


@dataclass
class DelayBudget:
    """Propagation-delay terms. Dynamic lengths in metres, times in seconds.

    The static terms are instrument delays: antenna, RF cable, receiver RF,
    PPS-in to internal reference and PPS cable.
    """

    pseudorange: float = 0.0  # ionosphere-free, m
    geometric_range: float = 0.0  # |x_sat - x_rec|, m
    sagnac: float = 0.0  # m
    relativistic: float = 0.0  # s
    tropo: float = 0.0  # s
    group_delay: float = 0.0  # s
    antenna: float = 0.0
    cable: float = 0.0
    receiver: float = 0.0
    pps_ref: float = 0.0
    pps_cable: float = 0.0

    def __post_init__(self):
        for name in ("antenna", "cable", "receiver"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} delay must be non-negative")

    @classmethod
    def for_geometry(cls, slant_range_km: float, tropo=0.0, relativistic=0.0, group_delay=0.0,
                     sagnac=0.0, **static):
        """Budget whose dynamic estimate equals the geometric light time."""
        rho = slant_range_km * 1e3
        # pick the pseudorange so the dynamic formula returns rho / c
        p_if = rho + rho + sagnac + C_LIGHT * (-relativistic + tropo + group_delay)
        return cls(p_if, rho, sagnac, relativistic, tropo, group_delay, **static)


def dynamic_delay(budget: DelayBudget) -> float:
    chi = budget.pseudorange - budget.geometric_range - budget.sagnac
    return chi / C_LIGHT + budget.relativistic - budget.tropo - budget.group_delay


def static_delay(budget: DelayBudget) -> float:
    return budget.antenna + budget.cable + budget.receiver - budget.pps_ref - budget.pps_cable


def estimated_propagation(budget: DelayBudget, calibrated: bool = True) -> float:
    est = dynamic_delay(budget)
    return est + static_delay(budget) if calibrated else est


@dataclass
class ClockObservation:
    ptf: str
    sat: str
    timestamp: float
    delta_t_raw: float
    delta_t_corr: float
    correction_residual: float
    elevation: float = 90.0


def observe_satellite(ptf_offset: float, sat_offset: float, geometry: LookAngles, budget: DelayBudget,
                      residual: float = 0.0, ptf: str = "", sat: str = "", timestamp: float = 0.0,
                      calibrated: bool = True) -> ClockObservation:
    """One raw and corrected PTF-minus-satellite time difference.

    The true propagation time is the light time over the slant range plus
    the instrument delays; ``residual`` is the estimation error added to the
    budget-based estimate.
    """
    el = float(np.asarray(geometry.elevation))
    if el < 0:
        raise ValueError(f"satellite {sat} below the horizon ({el:.1f} deg)")
    tau = float(np.asarray(geometry.slant_range)) * 1e3 / C_LIGHT + static_delay(budget)
    tau_est = estimated_propagation(budget, calibrated) + residual
    raw = ptf_offset - (sat_offset - tau)
    corr = ptf_offset - (sat_offset - tau + tau_est)
    return ClockObservation(ptf, sat, timestamp, raw, corr, tau_est - tau, el)


def all_in_view_median(observations) -> float:
    """PTF minus the median corrected satellite time, i.e. the median of the
    corrected differences (midpoint of the two central values for even counts)."""
    values = [o.delta_t_corr if isinstance(o, ClockObservation) else float(o) for o in observations]
    if not values:
        raise ValueError("no satellites in view")
    return float(np.median(values))


@dataclass
class OffsetSeries:
    times: np.ndarray
    values: np.ndarray  # s
    n_sats: np.ndarray = field(default=None)
    label: str = ""

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.n_sats is None:
            self.n_sats = np.ones(len(self.times), dtype=int)
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.times)

    def window(self, t0, t1) -> "OffsetSeries":
        m = (self.times >= t0) & (self.times < t1)
        return OffsetSeries(self.times[m], self.values[m], self.n_sats[m], self.label)


def ptf_offset(series_op: OffsetSeries, series_ma: OffsetSeries, tolerance: float = 1e-3) -> OffsetSeries:
    """Difference of two PTF-vs-GNSS series at common epochs."""
    i = np.searchsorted(series_ma.times, series_op.times)
    i = np.clip(i, 0, max(len(series_ma) - 1, 0))
    if len(series_ma) == 0:
        raise ValueError("no overlapping epochs")
    hit = np.abs(series_ma.times[i] - series_op.times) <= tolerance
    if not np.any(hit):
        raise ValueError("no overlapping epochs")
    j = i[hit]
    return OffsetSeries(series_op.times[hit], series_op.values[hit] - series_ma.values[j],
                        np.minimum(series_op.n_sats[hit], series_ma.n_sats[j]), "OP-MA")


@dataclass
class DriftFit:
    slope_ns_per_day: float
    sigma: float  # 1-sigma of the slope, ns/day
    intercept_ns: float
    residual_rms_ns: float
    n: int


def fit_daily_drift(series: OffsetSeries) -> DriftFit:
    """Least-squares line through the series, slope in ns/day."""
    if len(series) < 2 or series.times[-1] - series.times[0] <= 0:
        raise ValueError("need at least two samples spanning a positive time")
    x = (series.times - series.times[0]) / DAY
    y = series.values / NS
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    slope = np.sum((x - xm) * (y - ym)) / sxx
    intercept = ym - slope * xm
    resid = y - (intercept + slope * x)
    dof = len(x) - 2
    s2 = np.sum(resid**2) / dof if dof > 0 else 0.0
    return DriftFit(float(slope), float(math.sqrt(s2 / sxx)), float(intercept),
                    float(math.sqrt(np.mean(resid**2))), len(x))


# --- constellation and campaign -------------------------------------------

def galileo_like_constellation(n_sats: int = 16, epoch: float = 0.0, planes: int = 3):
    """Circular MEO satellites (29 600 km, 56 deg) spread over ``planes`` planes."""
    sats = {}
    per_plane = math.ceil(n_sats / planes)
    for k in range(n_sats):
        plane, slot = divmod(k, per_plane)
        sats[f"E{k + 1:02d}"] = KeplerianElements(
            29600.318, 0.0, 56.0, 120.0 * plane, 0.0, 360.0 * slot / per_plane + 15.0 * plane, epoch)
    return sats


@dataclass
class TrackSchedule:
    """CGGTTS-style tracking grid: a track of ``track_length`` starts every ``spacing`` s."""

    track_length: float = 780.0
    spacing: float = 960.0
    first_start: float = 120.0

    def starts(self, day_start: float, days: int):
        out = []
        for d in range(days):
            t0 = day_start + d * DAY
            k = np.arange(int((DAY - self.first_start - self.track_length) // self.spacing) + 1)
            out.append(t0 + self.first_start + k * self.spacing)
        return np.concatenate(out) if out else np.zeros(0)


@dataclass
class CampaignConfig:
    start: float
    days: int = 2
    n_sats: int = 16
    mask_deg: float = 10.0
    gst: ClockModel = field(default_factory=ClockModel)
    per_sat_noise: float = 0.3e-9
    sigma0: float = 2e-9
    min_track: float = 780.0
    calibrated: bool = False
    seed: int = 0
    sample_step: float = 30.0


@dataclass
class SiteTrack:
    """Per-site CGGTTS-ready observations."""

    station: StationLocation
    observations: list  # list of lists, one per epoch
    epochs: np.ndarray
    track_starts: np.ndarray


def visible_tracks(sats, loc: StationLocation, starts, track_length, mask_deg, sample_step=30.0):
    """For each track start and satellite: mean geometry if the satellite stays
    above the mask for the whole track, else None."""
    n_sub = int(track_length // sample_step) + 1
    offs = np.linspace(0.0, track_length, n_sub)
    times = (np.asarray(starts)[:, None] + offs[None, :]).ravel()
    result = {}
    for name, el in sats.items():
        pos, _ = orbit._state_at(el, times)
        ang = orbit.look_angles(pos, loc, times)
        elev = ang.elevation.reshape(len(starts), n_sub)
        rng = ang.slant_range.reshape(len(starts), n_sub)
        ok = np.all(elev >= mask_deg, axis=1)
        mid = n_sub // 2
        result[name] = (ok, elev[:, mid], rng[:, mid])
    return result


def run_campaign(cfg: CampaignConfig, sites: dict, clocks: dict, budgets: dict | None = None):
    """Simulate all-in-view observations at each site.

    ``sites`` maps a label to a StationLocation, ``clocks`` maps the same
    label to its ClockModel. Returns {label: SiteTrack}.
    """
    sched = TrackSchedule(track_length=max(cfg.min_track, 780.0))
    starts = sched.starts(cfg.start, cfg.days)
    mids = starts + sched.track_length / 2.0
    sats = galileo_like_constellation(cfg.n_sats, cfg.start)
    gst = cfg.gst.deterministic(mids - cfg.start)
    if cfg.gst.white_noise_sigma > 0:
        gst = gst + np.random.default_rng(cfg.gst.seed).normal(0, cfg.gst.white_noise_sigma, len(mids))
    sat_rng = np.random.default_rng([cfg.seed, 7])
    sat_noise = {s: sat_rng.normal(0.0, cfg.per_sat_noise, len(mids)) if cfg.per_sat_noise > 0
                 else np.zeros(len(mids)) for s in sats}
    out = {}
    for idx, (label, loc) in enumerate(sorted(sites.items())):
        clock = clocks[label]
        ptf = clock.deterministic(mids - cfg.start)
        if clock.white_noise_sigma > 0:
            ptf = ptf + np.random.default_rng(clock.seed).normal(0, clock.white_noise_sigma, len(mids))
        budget_kw = (budgets or {}).get(label, {})
        vis = visible_tracks(sats, loc, starts, sched.track_length, cfg.mask_deg, cfg.sample_step)
        res_rng = np.random.default_rng([cfg.seed, 11, idx])
        epochs = []
        for e, t in enumerate(mids):
            obs = []
            for s in sats:
                ok, el, rng_km = (v[e] for v in vis[s])
                # one draw per (site, epoch, satellite) keeps streams aligned
                z = res_rng.standard_normal()
                if not ok:
                    continue
                sigma = cfg.sigma0 / math.sin(math.radians(el))
                geo = LookAngles(np.float64(el), np.float64(0.0), np.float64(rng_km))
                budget = DelayBudget.for_geometry(rng_km, **budget_kw)
                obs.append(observe_satellite(ptf[e], gst[e] + sat_noise[s][e], geo, budget,
                                             sigma * z, label, s, t, cfg.calibrated))
            epochs.append(obs)
        out[label] = SiteTrack(loc, epochs, mids, starts)
    return out


def offset_series(track: SiteTrack, label: str = "") -> OffsetSeries:
    t, v, n = [], [], []
    for epoch, obs in zip(track.epochs, track.observations):
        if obs:
            t.append(epoch)
            v.append(all_in_view_median(obs))
            n.append(len(obs))
    return OffsetSeries(np.array(t), np.array(v), np.array(n, dtype=int), label or track.station.name)
