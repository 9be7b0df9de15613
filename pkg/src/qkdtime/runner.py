"""End-to-end use case: orbit, channel and QKD link, key relay, GNSS time
transfer and the secured transfer loop, plus report writing."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import channel, keymgmt, orbit, pipeline, qkdlink, timetransfer as tt
from .cggtts import CggttsRecord
from .scenario import SITES, Scenario

NS = 1e-9
DAY = 86400.0


@dataclass
class RunResult:
    scenario: Scenario
    passes: dict = field(default_factory=dict)
    pass_stats: dict = field(default_factory=dict)
    links: dict = field(default_factory=dict)  # station -> (StationLink, sample times)
    reports: dict = field(default_factory=dict)  # station -> derated SkrReport
    atmospheres: dict = field(default_factory=dict)
    eta_f: dict = field(default_factory=dict)
    feasibility: dict = field(default_factory=dict)
    stores: list = field(default_factory=list)
    relays: list = field(default_factory=list)
    series: dict = field(default_factory=dict)  # OP, MA, OP-MA OffsetSeries
    fits: dict = field(default_factory=dict)  # (label, mjd) -> DriftFit
    tracks: dict = field(default_factory=dict)
    transfer: pipeline.TransferOutcome | None = None
    key_accounting: dict = field(default_factory=dict)


# --- builders ---------------------------------------------------------------

def stations(scn: Scenario):
    return [orbit.StationLocation(name, s["lat_deg"], s["lon_deg"], s["alt_m"])
            for name, s in sorted(scn.config["stations"].items())]


def elements(scn: Scenario) -> orbit.KeplerianElements:
    o = scn.config["orbit"]
    return orbit.KeplerianElements.circular(o["altitude_km"], o["inclination_deg"], o["raan_deg"],
                                            o["arg_perigee_deg"], o["mean_anomaly_deg"], o["epoch"])


def terminal(scn: Scenario, site: str) -> channel.OpticalTerminal:
    t = scn.config["terminal"][site]
    return channel.OpticalTerminal(t["wavelength_nm"] * 1e-9, t["w0_m"], t["drx_m"], t["docc_m"],
                                   t["theta_rx_urad"] * 1e-6, t["alpha_rx_urad"] * 1e-6,
                                   scn.config["channel"]["eta0_db"])


def atmosphere(scn: Scenario, site: str) -> channel.AtmosphereModel:
    a = scn.config["channel"]["atmosphere"]
    if a["mode"] == "table":
        return channel.AtmosphereModel.from_table(a["table_path"][site])
    return channel.AtmosphereModel(t_zenith=a["t_zenith"][site])


def turbulence(scn: Scenario) -> channel.TurbulenceProfile:
    t = scn.config["channel"]["turbulence"]
    return channel.TurbulenceProfile(t["cn2_ground"], t["wind_speed_ms"])


def protocol(scn: Scenario) -> qkdlink.ProtocolParams:
    q = scn.config["qkd"]
    return qkdlink.ProtocolParams(
        source_rate=q["source_rate_hz"], mu1=q["mu1"], mu2=q["mu2"], p_mu1=q["p_mu1"],
        p_z_alice=q["p_z"], p_z_bob=q["p_z"], coding_error=q["coding_error"],
        det_efficiency=q["det_eff"], dark_rate=q["dark_hz"], background_rate=0.0,
        dead_time=q["dead_time_ns"] * 1e-9, eps_sec=q["eps_sec"], eps_corr=q["eps_corr"],
        block_size=q["block_bits"], f_ec=q["f_ec"])


def eta_f_interpretation(scn: Scenario, site: str) -> str:
    t = scn.config["terminal"][site]
    if scn.config["terminal"]["swap_fov_pointing"]:
        return (f"swapped: theta_Rx={t['alpha_rx_urad']} urad used as half field of view, "
                f"alpha_Rx={t['theta_rx_urad']} urad as pointing error")
    return (f"literal: theta_Rx={t['theta_rx_urad']} urad half field of view, "
            f"alpha_Rx={t['alpha_rx_urad']} urad pointing error")


# --- stages -----------------------------------------------------------------

def run_orbit(scn: Scenario, result: RunResult):
    cfg = scn.config
    days = cfg["run"]["duration_days"]
    result.passes = orbit.find_passes(elements(scn), stations(scn), days * DAY, cfg["sim"]["step_s"],
                                      cfg["sim"]["min_elevation_deg"])
    result.pass_stats = {k: orbit.pass_statistics(v, days) for k, v in result.passes.items()}


def station_link(scn: Scenario, loc: orbit.StationLocation, passes, seed=None):
    """Channel and detection statistics for every sample of every pass."""
    params = protocol(scn)
    step = scn.config["sim"]["step_s"]
    if not passes:
        empty = qkdlink.DetectionBatch.concat([])
        return qkdlink.StationLink(loc.name, empty, np.zeros(0, dtype=int), np.zeros(0)), np.zeros(0)
    times = np.concatenate([p.times for p in passes])
    geo = orbit.LookAngles(*(np.concatenate([getattr(p, f) for p in passes])
                             for f in ("elevation", "azimuth", "slant_range")))
    sample = channel.channel_efficiency(
        terminal(scn, loc.name), turbulence(scn), geo, atmosphere(scn, loc.name), loc.altitude,
        scn.config["channel"]["orientation"], scn.config["terminal"]["swap_fov_pointing"],
        scn.config["channel"]["quadrature_nodes"])
    day_bg = scn.config["qkd"]["background_hz"]
    background = None
    if day_bg > 0:
        background = np.where(orbit.sun_elevation(loc, times) > 0.0, day_bg, 0.0)
    batch = qkdlink.detection_statistics(sample, params, step, seed, scn.deterministic, background)
    pass_ids = np.repeat(np.arange(len(passes)), [len(p.times) for p in passes])
    durations = np.array([p.duration for p in passes])
    return qkdlink.StationLink(loc.name, batch, pass_ids, durations), times


def run_qkd(scn: Scenario, result: RunResult):
    cfg = scn.config
    params = protocol(scn)
    days = cfg["run"]["duration_days"]
    w = cfg["weather"]
    for i, loc in enumerate(stations(scn)):
        link, times = station_link(scn, loc, result.passes[loc.name], [scn.seed, 1, i])
        result.links[loc.name] = (link, times)
        result.atmospheres[loc.name] = atmosphere(scn, loc.name).describe()
        t = terminal(scn, loc.name)
        fov, alpha = t.rx_half_fov, t.pointing_error
        if cfg["terminal"]["swap_fov_pointing"]:
            fov, alpha = alpha, fov
        result.eta_f[loc.name] = channel.angular_transmittance(fov, alpha)
        report = qkdlink.annual_skr(link, params, days)
        if w["mode"] != "none":
            report = qkdlink.apply_weather(report, w["p_overcast"][loc.name], w["mode"], [scn.seed, 2, i])
        result.reports[loc.name] = report
        result.feasibility[loc.name] = keymgmt.consumption_feasibility(
            report.derated_skr_bps, cfg["demand"]["rate_bpm"], days,
            cfg["keymgmt"]["initial_buffer_bits"])


def run_timetransfer(scn: Scenario, result: RunResult):
    cfg = scn.config
    seed = scn.seed
    start = orbit.to_posix(cfg["timetransfer"]["start"])
    days = int(cfg["timetransfer"]["days"])

    def clock(c, k):
        drift = c["drift_ns_per_day"]
        rates = [d * NS / DAY for d in (drift if isinstance(drift, list) else [drift])]
        return tt.ClockModel(c["offset_ns"] * NS, tuple(rates), c["noise_ns"] * NS, [seed, 3, k])

    g = cfg["gnss"]
    camp = tt.CampaignConfig(
        start=start, days=days, n_sats=g["n_sats"], mask_deg=g["mask_deg"],
        gst=tt.ClockModel(0.0, g["gst_drift"] * NS / DAY, 0.0, [seed, 4]),
        per_sat_noise=g["per_sat_noise_ns"] * NS, sigma0=cfg["corrections"]["sigma0_ns"] * NS,
        min_track=cfg["cggtts"]["min_track_min"] * 60.0, calibrated=cfg["corrections"]["calibrated"],
        seed=seed)
    sites = {loc.name: loc for loc in stations(scn)}
    clocks = {"OP": clock(cfg["clocks"]["op"], 0), "MA": clock(cfg["clocks"]["ma"], 1)}
    result.tracks = tt.run_campaign(camp, sites, clocks)
    op = tt.offset_series(result.tracks["OP"], "OP")
    ma = tt.offset_series(result.tracks["MA"], "MA")
    result.series = {"OP": op, "MA": ma, "OP-MA": tt.ptf_offset(op, ma)}
    for label, s in result.series.items():
        for d in range(days):
            win = s.window(start + d * DAY, start + (d + 1) * DAY)
            if len(win) >= 3:
                result.fits[(label, int(math.floor(orbit.mjd(start + d * DAY))))] = tt.fit_daily_drift(win)


def _records_for(track: tt.SiteTrack, t0: float, t1: float):
    out = []
    for start, epoch_obs in zip(track.track_starts, track.observations):
        end = start + 780.0
        if not t0 < end <= t1:
            continue
        day = math.floor(orbit.mjd(start))
        sod = int(round(start - (day - 40587) * DAY))
        for o in epoch_obs:
            v = int(round(o.delta_t_corr / 1e-10))
            out.append(CggttsRecord(o.sat.rjust(3, "0"), int(day), sod, 780, v, v,
                                    int(round(o.elevation * 10))))
    return out


def run_keys_and_transfer(scn: Scenario, result: RunResult):
    """Satellite key to both OGS, OTP relay to the PTFs, then the MA->OP loop."""
    cfg = scn.config
    start = orbit.to_posix(cfg["timetransfer"]["start"])
    cadence = cfg["pipeline"]["cadence_s"]
    n_ticks = int(round(cfg["timetransfer"]["days"] * DAY / cadence))
    policy = pipeline.SessionKeyPolicy(cfg["demand"]["key_bits"], cfg["demand"]["refresh_s"])
    rng = np.random.default_rng([scn.seed, 5])
    ogs = {s: keymgmt.KeyStore(f"OGS-{s}") for s in SITES}
    ptf = {s: keymgmt.KeyStore(f"PTF-{s}") for s in SITES}
    result.stores = [ogs["MA"], ptf["MA"], ogs["OP"], ptf["OP"]]
    lastmile_bps = {"MA": cfg["lastmile"]["ma_skr_bps"], "OP": cfg["lastmile"]["op_skr_bps"]}
    # common satellite key can only grow as fast as the slower station
    supply = min((r.derated_skr_bps for r in result.reports.values()), default=0.0)
    initial = cfg["keymgmt"]["initial_buffer_bits"]
    if initial > 0:
        keymgmt.satellite_exchange(ogs.values(), initial, rng, "sat-0", start)
    sender = pipeline.EncryptionSession(ptf["MA"], policy, start)
    receiver = pipeline.EncryptionSession(ptf["OP"], policy, start)
    relayed = {s: 0 for s in SITES}
    bits = policy.key_bits

    def hook(tick, now):
        # top up the OGS pool, then relay what the sessions need until the next tick
        t_prev = now - cadence
        fresh = int(math.floor(supply * cadence))
        if fresh > 0:
            keymgmt.satellite_exchange(ogs.values(), fresh, rng, f"sat-{tick}", t_prev)
        need_total = sender.keys_due(now) * bits
        for s in SITES:
            have = ogs[s].available(keymgmt.SATELLITE)
            n = min(need_total - relayed[s], have // bits * bits,
                    int(lastmile_bps[s] * cadence) // bits * bits)
            if n <= 0:
                continue
            keymgmt.lastmile_exchange(ogs[s], ptf[s], n, rng, f"lm-{s}-{tick}", t_prev)
            result.relays.append(keymgmt.relay_satellite_key(ogs[s], ptf[s], n, t_prev))
            relayed[s] += n

    def source(tick, now):
        return _records_for(result.tracks["MA"], now - cadence, now) if result.tracks else []

    result.transfer = pipeline.run_transfer_loop(source, sender, receiver, n_ticks, cadence, start, hook)
    result.key_accounting = {
        "refresh_epochs_ma": sender.withdrawals,
        "refresh_epochs_op": receiver.withdrawals,
        "session_bits_ma": ptf["MA"].withdrawn,
        "session_bits_op": ptf["OP"].withdrawn,
        "relayed_bits": dict(relayed),
        "exact": (ptf["MA"].withdrawn == bits * sender.withdrawals
                  and ptf["OP"].withdrawn == bits * receiver.withdrawals),
        "ledgers_balanced": all(s.audit() for s in result.stores),
    }


def run_usecase(scn: Scenario, stages=("orbit", "qkd", "timetransfer", "transfer")) -> RunResult:
    result = RunResult(scn)
    for stage in stages:
        try:
            if stage == "orbit":
                run_orbit(scn, result)
            elif stage == "qkd":
                run_qkd(scn, result)
            elif stage == "timetransfer":
                run_timetransfer(scn, result)
            elif stage == "transfer":
                run_keys_and_transfer(scn, result)
            else:
                raise ValueError(f"unknown stage {stage!r}")
        except Exception as exc:
            raise StageError(stage, exc) from exc
    return result


class StageError(RuntimeError):
    def __init__(self, stage, exc):
        self.stage = stage
        super().__init__(f"[{stage}] {type(exc).__name__}: {exc}")


# --- reports ----------------------------------------------------------------

def _writer(path):
    fh = open(path, "w", newline="", encoding="utf-8")
    return fh, csv.writer(fh, lineterminator="\n")


def _num(x, digits=12):
    return float(f"{x:.{digits}g}")


def write_passes(result: RunResult, path):
    fh, w = _writer(path)
    with fh:
        w.writerow(["station", "start_utc", "end_utc", "duration_s", "max_elevation_deg"])
        for name in sorted(result.passes):
            for p in result.passes[name]:
                w.writerow([name, orbit.iso_utc(p.start), orbit.iso_utc(p.end), f"{p.duration:g}",
                            f"{p.max_elevation:.3f}"])


def write_blocks(result: RunResult, path):
    fh, w = _writer(path)
    with fh:
        w.writerow(["station", "block_id", "n_z", "n_x", "qber_z", "qber_x", "secret_bits",
                    "first_pass", "last_pass"])
        for name in sorted(result.reports):
            for i, b in enumerate(bl for bl in result.reports[name].blocks if bl.finalized):
                nz, nx = b.total_z, b.total_x
                qz = b.m_z.sum() / nz if nz > 0 else float("nan")
                qx = b.m_x.sum() / nx if nx > 0 else float("nan")
                w.writerow([name, i, f"{nz:.6f}", f"{nx:.6f}", f"{qz:.8f}", f"{qx:.8f}",
                            b.secret_bits, b.first_pass, b.last_pass])


def write_offsets(result: RunResult, path):
    fh, w = _writer(path)
    with fh:
        w.writerow(["epoch_utc", "mjd", "station", "delta_t_ns", "n_sats"])
        for label in ("OP", "MA", "OP-MA"):
            s = result.series.get(label)
            if s is None:
                continue
            for t, v, n in zip(s.times, s.values, s.n_sats):
                w.writerow([orbit.iso_utc(t), f"{float(orbit.mjd(t)):.6f}", label, f"{v / NS:.4f}", int(n)])


def write_drift(result: RunResult, path):
    """Daily OP-MA drift fits; the per-site fits are in summary.json."""
    fh, w = _writer(path)
    with fh:
        w.writerow(["mjd", "slope_ns_per_day", "sigma"])
        for (label, day), fit in sorted(result.fits.items(), key=lambda kv: kv[0][1]):
            if label == "OP-MA":
                w.writerow([day, f"{fit.slope_ns_per_day:.4f}", f"{fit.sigma:.4f}"])


def summary(result: RunResult) -> dict:
    scn = result.scenario
    out = {"scenario": scn.name, "seed": scn.seed, "deterministic": scn.deterministic,
           "duration_days": scn.config["run"]["duration_days"], "stations": {}}
    for name in sorted(set(result.pass_stats) | set(result.reports)):
        entry = {}
        if name in result.pass_stats:
            ps = result.pass_stats[name]
            entry.update(minutes_per_day=_num(ps.minutes_per_day), passes_per_day=_num(ps.passes_per_day),
                         n_passes=ps.n_passes)
        if name in result.reports:
            r = result.reports[name]
            f = result.feasibility[name]
            entry.update(
                annual_secret_bits=_num(r.annual_secret_bits), average_skr_bps=_num(r.average_skr_bps),
                raw_key_per_pass_bps=_num(r.raw_per_pass_bps), derated_skr_bps=_num(r.derated_skr_bps),
                p_overcast=r.p_overcast, weather_mode=r.weather_mode, n_blocks=r.n_blocks,
                eta_f=_num(result.eta_f[name]),
                eta_f_interpretation=eta_f_interpretation(scn, name),
                atmosphere_model=result.atmospheres[name],
                feasible_at_demand=f.feasible, demand_bps=_num(f.demand_bps))
        out["stations"][name] = entry
    if result.fits:
        out["drift_fits"] = {f"{label}@{day}": {"slope_ns_per_day": _num(fit.slope_ns_per_day, 8),
                                                "sigma": _num(fit.sigma, 8)}
                             for (label, day), fit in sorted(result.fits.items())}
        s = result.series["OP-MA"]
        out["op_ma_mean_offset_ns"] = _num(float(np.mean(s.values)) / NS, 10)
    if result.transfer is not None:
        out["transfer"] = {"events": len(result.transfer.log), "ok": result.transfer.successes,
                           "relays": len(result.relays), **result.key_accounting}
    return out


def emit_plotdata(result: RunResult, outdir):
    d = Path(outdir) / "plotdata"
    d.mkdir(parents=True, exist_ok=True)
    fh, w = _writer(d / "transmittance.csv")
    with fh:
        names = sorted(result.atmospheres)
        w.writerow(["elevation_deg", *names])
        if names:
            models = {n: atmosphere(result.scenario, n) for n in names}
            for el in range(20, 91):
                w.writerow([el, *(f"{float(models[n](el)):.6f}" for n in names)])
    fh, w = _writer(d / "offset.csv")
    with fh:
        w.writerow(["epoch_utc", "mjd", "series", "delta_t_ns"])
        for label in sorted(result.series):
            s = result.series[label]
            for t, v in zip(s.times, s.values):
                w.writerow([orbit.iso_utc(t), f"{float(orbit.mjd(t)):.6f}", label, f"{v / NS:.4f}"])
    fh, w = _writer(d / "skr_per_day.csv")
    with fh:
        names = sorted(result.reports)
        w.writerow(["day", *names])
        if names:
            per_day = {}
            n_days = int(math.ceil(result.scenario.config["run"]["duration_days"]))
            t0 = elements(result.scenario).epoch
            for n in names:
                link, times = result.links[n]
                bits = np.zeros(n_days)
                for b in result.reports[n].blocks:
                    if b.finalized and len(times):
                        day = min(int((times[b.last_batch] - t0) // DAY), n_days - 1)
                        bits[day] += b.secret_bits
                per_day[n] = bits
            for k in range(n_days):
                w.writerow([k, *(int(per_day[n][k]) for n in names)])


def write_outputs(result: RunResult, outdir):
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    if result.passes:
        write_passes(result, outdir / "passes.csv")
    if result.reports:
        write_blocks(result, outdir / "blocks.csv")
    if result.series:
        write_offsets(result, outdir / "offsets.csv")
        write_drift(result, outdir / "drift.csv")
    if result.stores:
        keymgmt.export_ledger(result.stores, outdir / "ledger.csv", orbit.iso_utc)
    if result.transfer is not None:
        pipeline.write_transfer_log(result.transfer.log, outdir / "transfer_log.csv")
    emit_plotdata(result, outdir)
    with open(outdir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary(result), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return outdir
