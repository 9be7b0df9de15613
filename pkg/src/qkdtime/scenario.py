"""Scenario files: defaults, JSON/TOML loading and key validation."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import tomli

SITES = ("MA", "OP")

DEFAULTS = {
    "run": {"name": "default", "seed": 0, "deterministic": True, "duration_days": 365.0},
    "orbit": {
        "altitude_km": 500.0,
        "inclination_deg": 75.6,
        "raan_deg": 300.6,
        "arg_perigee_deg": 84.38,
        "mean_anomaly_deg": 38.29,
        "epoch": "2022-11-09T00:00:00Z",
    },
    "sim": {"step_s": 1.0, "min_elevation_deg": 20.0},
    "stations": {
        "MA": {"lat_deg": 40.6486, "lon_deg": 16.7046, "alt_m": 536.0},
        "OP": {"lat_deg": 48.0857, "lon_deg": 11.2795, "alt_m": 600.0},
    },
    "channel": {
        "eta0_db": 13.0,
        "orientation": "ground",
        "quadrature_nodes": 2048,
        "atmosphere": {
            "mode": "parametric",
            "t_zenith": {"MA": 0.70, "OP": 0.65},
            "table_path": {"MA": "", "OP": ""},
        },
        "turbulence": {"cn2_ground": 1e-14, "wind_speed_ms": 21.0},
    },
    "terminal": {
        "swap_fov_pointing": False,
        "MA": {"wavelength_nm": 1550.0, "w0_m": 0.15, "drx_m": 1.5, "docc_m": 0.1,
               "theta_rx_urad": 6.25, "alpha_rx_urad": 100.0},
        "OP": {"wavelength_nm": 1550.0, "w0_m": 0.15, "drx_m": 0.8, "docc_m": 0.3,
               "theta_rx_urad": 6.25, "alpha_rx_urad": 100.0},
    },
    "qkd": {
        "mu1": 0.5, "mu2": 0.25, "p_mu1": 0.7, "p_z": 0.9, "f_ec": 1.16,
        "eps_sec": 1e-10, "eps_corr": 1e-15, "block_bits": 1e8, "source_rate_hz": 5e8,
        "coding_error": 0.005, "det_eff": 0.9, "dark_hz": 100.0, "background_hz": 0.0,
        "dead_time_ns": 10.0,
    },
    "weather": {"mode": "deterministic", "p_overcast": {"MA": 0.342, "OP": 0.553}},
    "lastmile": {"ma_skr_bps": 1900.0, "op_skr_bps": 3600.0},
    "demand": {"key_bits": 256, "refresh_s": 120.0, "rate_bpm": 256.0},
    "keymgmt": {"initial_buffer_bits": 1048576},
    "gnss": {"n_sats": 16, "gst_drift": 0.0, "per_sat_noise_ns": 0.3, "mask_deg": 10.0},
    "clocks": {
        "op": {"offset_ns": 4917.0, "drift_ns_per_day": [-2.6, -0.6], "noise_ns": 0.3},
        "ma": {"offset_ns": 0.0, "drift_ns_per_day": [-3.1, 1.0], "noise_ns": 0.3},
    },
    "corrections": {"sigma0_ns": 2.0, "calibrated": False},
    "cggtts": {"min_track_min": 13.0},
    "timetransfer": {"start": "2022-11-09T00:00:00Z", "days": 2},
    "pipeline": {"cadence_s": 1800.0},
}

NAMED = ("paper-baseline", "paper-baseline-swapped-fov", "smoke-1day")


class ScenarioError(ValueError):
    pass


@dataclass
class Scenario:
    name: str
    config: dict
    source: Path | None = None
    overrides: dict = field(default_factory=dict)

    def __getitem__(self, dotted: str):
        node = self.config
        for part in dotted.split("."):
            node = node[part]
        return node

    @property
    def seed(self) -> int:
        return self.config["run"]["seed"]

    @property
    def deterministic(self) -> bool:
        return self.config["run"]["deterministic"]

    def to_json(self) -> str:
        return json.dumps(self.config, indent=2, sort_keys=True)


def _check_type(path, default, value):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, (int, float)):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        if ok and isinstance(default, int) and not isinstance(default, bool) and not float(value).is_integer():
            ok = False
    elif isinstance(default, list):
        ok = (isinstance(value, (int, float)) and not isinstance(value, bool)) or (
            isinstance(value, list) and value and all(isinstance(v, (int, float)) for v in value))
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ScenarioError(f"{path}: expected {type(default).__name__}, got {value!r}")


def merge(base: dict, override: dict, prefix: str = "") -> dict:
    """Deep-merge ``override`` into a copy of ``base``, rejecting unknown keys."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ScenarioError(f"unknown key '{path}'")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ScenarioError(f"{path}: expected a table of keys")
            out[key] = merge(base[key], value, path + ".")
        else:
            _check_type(path, base[key], value)
            out[key] = value
    return out


def _parse(text: str, path: Path) -> dict:
    if not text.strip():
        return {}
    suffix = path.suffix.lower()
    try:
        if suffix == ".json":
            data = json.loads(text)
        elif suffix == ".toml":
            data = tomli.loads(text)
        else:
            raise ScenarioError(f"{path}: unknown scenario format {suffix!r} (use .json or .toml)")
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    except tomli.TOMLDecodeError as exc:
        raise ScenarioError(f"{path}: {exc}") from None
    if not isinstance(data, dict):
        raise ScenarioError(f"{path}: top level must be a table")
    return data


def _validate(cfg: dict, base_dir: Path | None):
    tz = cfg["channel"]["atmosphere"]
    if tz["mode"] not in ("parametric", "table"):
        raise ScenarioError(f"channel.atmosphere.mode: unknown mode {tz['mode']!r}")
    if tz["mode"] == "table":
        for site in SITES:
            p = tz["table_path"][site]
            if not p:
                raise ScenarioError(f"channel.atmosphere.table_path.{site}: required in table mode")
            full = Path(p) if base_dir is None or Path(p).is_absolute() else base_dir / p
            if not full.is_file():
                raise ScenarioError(f"channel.atmosphere.table_path.{site}: no such file {p}")
            tz["table_path"][site] = str(full)
    if cfg["channel"]["orientation"] not in ("ground", "satellite"):
        raise ScenarioError("channel.orientation: must be 'ground' or 'satellite'")
    if cfg["weather"]["mode"] not in ("deterministic", "monte_carlo", "none"):
        raise ScenarioError(f"weather.mode: unknown mode {cfg['weather']['mode']!r}")
    if cfg["sim"]["step_s"] <= 0:
        raise ScenarioError("sim.step_s: must be positive")
    if cfg["run"]["duration_days"] <= 0:
        raise ScenarioError("run.duration_days: must be positive")
    if cfg["demand"]["key_bits"] != 256:
        raise ScenarioError("demand.key_bits: AES-256 session keys are 256 bits")
    if cfg["cggtts"]["min_track_min"] < 13:
        raise ScenarioError("cggtts.min_track_min: must be at least 13")


def from_dict(data: dict, name: str = "custom", source: Path | None = None) -> Scenario:
    cfg = merge(DEFAULTS, data)
    _validate(cfg, None if source is None else source.parent)
    if "name" not in data.get("run", {}):
        cfg["run"]["name"] = name
    return Scenario(cfg["run"]["name"], cfg, source, data)


def load_scenario(path) -> Scenario:
    """Load a scenario file, or one of the shipped scenarios by name."""
    if str(path) in NAMED:
        ref = resources.files("qkdtime") / "scenarios" / f"{path}.json"
        return from_dict(_parse(ref.read_text(encoding="utf-8"), Path(f"{path}.json")), str(path))
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(f"cannot read {path}: {exc.strerror}") from None
    return from_dict(_parse(text, path), path.stem, path)


def with_overrides(scenario: Scenario, **dotted) -> Scenario:
    """Apply ``section__key=value`` style overrides (used by the CLI flags)."""
    data = copy.deepcopy(scenario.overrides)
    for key, value in dotted.items():
        if value is None:
            continue
        node = data
        *parents, leaf = key.split("__")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return from_dict(data, scenario.name, scenario.source)
