"""Detection statistics, raw-key accumulation and finite-key secret key length
for the three-state efficient BB84 protocol with one decoy intensity.

Counts are per intensity, index 0 for mu1 (signal) and 1 for mu2 (decoy).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .channel import ChannelSample

INTENSITIES = 2


@dataclass(frozen=True)
class ProtocolParams:
    source_rate: float = 500e6  # Hz
    mu1: float = 0.5
    mu2: float = 0.25
    p_mu1: float = 0.7
    p_z_alice: float = 0.9
    p_z_bob: float = 0.9
    coding_error: float = 0.005
    det_efficiency: float = 0.9
    dark_rate: float = 100.0  # Hz
    background_rate: float = 0.0  # Hz
    dead_time: float = 10e-9  # s
    jitter: float = 10e-12  # s, folded into coding_error
    eps_sec: float = 1e-10
    eps_corr: float = 1e-15
    block_size: float = 100e6  # sifted Z bits
    f_ec: float = 1.16

    def __post_init__(self):
        if not 0 < self.mu2 < self.mu1:
            raise ValueError("need 0 < mu2 < mu1")
        for name in ("p_mu1", "p_z_alice", "p_z_bob", "eps_sec", "eps_corr"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must be in (0, 1), got {v}")
        if not 0 <= self.coding_error <= 0.5 or not 0 <= self.det_efficiency <= 1:
            raise ValueError("coding_error must be in [0, 0.5] and det_efficiency in [0, 1]")
        if self.block_size <= 0 or self.source_rate <= 0:
            raise ValueError("block_size and source_rate must be positive")
        if min(self.dark_rate, self.background_rate, self.dead_time) < 0:
            raise ValueError("noise rates and dead time must be non-negative")

    @property
    def intensities(self):
        return np.array([self.mu1, self.mu2])

    @property
    def intensity_probs(self):
        return np.array([self.p_mu1, 1.0 - self.p_mu1])


@dataclass
class DetectionBatch:
    """Sifted and error counts, shape (n_batches, 2) per array."""

    duration: np.ndarray
    n_z: np.ndarray
    n_x: np.ndarray
    m_z: np.ndarray
    m_x: np.ndarray
    eta: np.ndarray

    def __len__(self):
        return len(self.duration)

    def __getitem__(self, idx):
        return DetectionBatch(*(getattr(self, f)[idx] for f in _BATCH_FIELDS))

    @classmethod
    def concat(cls, batches):
        batches = list(batches)
        if not batches:
            z = np.zeros((0, INTENSITIES))
            return cls(np.zeros(0), z, z.copy(), z.copy(), z.copy(), np.zeros(0))
        return cls(*(np.concatenate([getattr(b, f) for b in batches]) for f in _BATCH_FIELDS))

    def totals(self):
        return {f: getattr(self, f).sum(axis=0) for f in ("n_z", "n_x", "m_z", "m_x")}


_BATCH_FIELDS = ("duration", "n_z", "n_x", "m_z", "m_x", "eta")


@dataclass
class KeyBlock:
    n_z: np.ndarray
    n_x: np.ndarray
    m_z: np.ndarray
    m_x: np.ndarray
    first_batch: int
    last_batch: int
    first_pass: int = -1
    last_pass: int = -1
    finalized: bool = True
    secret_bits: int = 0

    @property
    def total_z(self) -> float:
        return float(self.n_z.sum())

    @property
    def total_x(self) -> float:
        return float(self.n_x.sum())


@dataclass
class StationLink:
    """Chronological per-sample detection record of one ground station."""

    station: str
    batch: DetectionBatch
    pass_ids: np.ndarray
    pass_durations: np.ndarray  # s, indexed by pass id

    def subset(self, keep_passes) -> "StationLink":
        keep_passes = np.asarray(keep_passes, dtype=bool)
        rows = keep_passes[self.pass_ids]
        return StationLink(self.station, self.batch[rows], self.pass_ids[rows], self.pass_durations)


@dataclass
class SkrReport:
    station: str
    annual_secret_bits: float
    average_skr_bps: float
    raw_per_pass_bps: float
    derated_skr_bps: float
    duration_s: float
    n_blocks: int
    n_passes: int
    p_overcast: float = 0.0
    weather_mode: str = "none"
    blocks: list = field(default_factory=list, repr=False)
    link: StationLink | None = field(default=None, repr=False)
    params: ProtocolParams | None = field(default=None, repr=False)


def expected_rates(eta, params: ProtocolParams, background=None):
    """Expected per-second sifted and error rates, each of shape (N, 2)."""
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    bg = params.background_rate if background is None else np.atleast_1d(background)
    mu, p = params.intensities, params.intensity_probs
    eta_tot = eta[:, None] * params.det_efficiency
    signal = params.source_rate * p * -np.expm1(-mu * eta_tot)
    noise = np.broadcast_to((params.dark_rate + np.asarray(bg, dtype=float))[..., None] * p, signal.shape)
    total = (signal + noise).sum(axis=1, keepdims=True)
    dead = 1.0 / (1.0 + total * params.dead_time)
    signal, noise = signal * dead, noise * dead
    pzz = params.p_z_alice * params.p_z_bob
    pxx = (1.0 - params.p_z_alice) * (1.0 - params.p_z_bob)
    clicks = signal + noise
    errors = params.coding_error * signal + 0.5 * noise
    return {"n_z": pzz * clicks, "n_x": pxx * clicks, "m_z": pzz * errors, "m_x": pxx * errors}


def detection_statistics(sample, params: ProtocolParams, dt: float, rng_seed=None,
                         deterministic: bool = True, background=None) -> DetectionBatch:
    """Counts collected during ``dt`` seconds at each channel sample.

    ``sample`` is a ChannelSample or an array of link efficiencies. In
    deterministic mode counts equal their expectation; otherwise sifted
    counts are Poisson and errors binomial given the sifted count, drawn from
    a PCG64 generator seeded with ``rng_seed``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    eta = np.atleast_1d(np.asarray(sample.eta if isinstance(sample, ChannelSample) else sample, dtype=float))
    rates = expected_rates(eta, params, background)
    exp = {k: v * dt for k, v in rates.items()}
    if deterministic:
        counts = exp
    else:
        rng = np.random.default_rng(rng_seed)
        counts = {}
        for basis in ("z", "x"):
            n = rng.poisson(exp[f"n_{basis}"])
            with np.errstate(invalid="ignore", divide="ignore"):
                q = np.where(exp[f"n_{basis}"] > 0, exp[f"m_{basis}"] / exp[f"n_{basis}"], 0.0)
            counts[f"n_{basis}"] = n.astype(float)
            counts[f"m_{basis}"] = rng.binomial(n, q).astype(float)
    return DetectionBatch(np.full(len(eta), float(dt)), counts["n_z"], counts["n_x"],
                          counts["m_z"], counts["m_x"], eta)


def qber_of_batch(batch, basis: str = "Z"):
    """Pooled error rate of one basis; None when nothing was sifted."""
    b = basis.lower()
    if b not in ("z", "x"):
        raise ValueError("basis must be 'Z' or 'X'")
    n = float(np.sum(getattr(batch, f"n_{b}")))
    m = float(np.sum(getattr(batch, f"m_{b}")))
    if n <= 0:
        return None
    return m / n


def accumulate_blocks(batch: DetectionBatch, block_size: float, pass_ids=None):
    """Greedy chronological fold of batches into finite-key blocks.

    A block closes on the first batch that brings its sifted Z count to
    ``block_size``; that batch stays whole in the block. A trailing partial
    block is returned with ``finalized=False``.
    """
    if block_size <= 0:
        raise ValueError("block_size must be positive")
    nz_rows = batch.n_z.sum(axis=1).tolist()
    pids = None if pass_ids is None else np.asarray(pass_ids)
    blocks, start, acc = [], 0, 0.0
    for i, nz in enumerate(nz_rows):
        acc += nz
        if acc >= block_size:
            blocks.append(_make_block(batch, start, i + 1, pids, True))
            start, acc = i + 1, 0.0
    if start < len(nz_rows):
        blocks.append(_make_block(batch, start, len(nz_rows), pids, False))
    return blocks


def _make_block(batch, lo, hi, pids, finalized):
    part = batch[lo:hi]
    t = part.totals()
    fp, lp = (-1, -1) if pids is None else (int(pids[lo]), int(pids[hi - 1]))
    return KeyBlock(t["n_z"], t["n_x"], t["m_z"], t["m_x"], lo, hi - 1, fp, lp, finalized)


def binary_entropy(x: float) -> float:
    if x <= 0.0 or x >= 1.0:
        return 0.0
    return -x * math.log2(x) - (1.0 - x) * math.log2(1.0 - x)


def _gamma(a, b, c, d):
    if b <= 0.0 or b >= 1.0:
        return 0.0
    arg = (c + d) / (c * d * (1.0 - b) * b) * 21.0**2 / a**2
    return math.sqrt((c + d) * (1.0 - b) * b / (c * d * math.log(2.0)) * math.log2(arg))


def decoy_bounds(n_z, n_x, m_z, m_x, params: ProtocolParams):
    """Vacuum/single-photon bounds and the phase-error bound of one block."""
    mu1, mu2 = params.mu1, params.mu2
    p = (params.p_mu1, 1.0 - params.p_mu1)
    eps1 = params.eps_sec / 19.0
    ln_eps = math.log(1.0 / eps1)
    tau0 = p[0] * math.exp(-mu1) + p[1] * math.exp(-mu2)
    tau1 = p[0] * math.exp(-mu1) * mu1 + p[1] * math.exp(-mu2) * mu2

    def hoeffding(total):
        return math.sqrt(total / 2.0 * ln_eps)

    def scaled(counts, total, sign):
        d = hoeffding(total)
        return [math.exp(mu) / pk * (c + sign * d) for mu, pk, c in zip((mu1, mu2), p, counts)]

    def vacuum_upper(errors, total_sifted):
        m_plus = scaled(errors, sum(errors), +1)
        return 2.0 * (tau0 * m_plus[1] + hoeffding(total_sifted))

    def single_photon(counts, errors):
        total = sum(counts)
        n_minus = scaled(counts, total, -1)
        n_plus = scaled(counts, total, +1)
        s0u = vacuum_upper(errors, total)
        s1 = tau1 * mu1 / (mu2 * (mu1 - mu2)) * (
            n_minus[1] - (mu2 / mu1) ** 2 * n_plus[0] - (mu1**2 - mu2**2) / mu1**2 * s0u / tau0)
        return max(s1, 0.0), n_minus, n_plus

    s_z1, nz_minus, nz_plus = single_photon(n_z, m_z)
    s_z0 = max(tau0 * (mu1 * nz_minus[1] - mu2 * nz_plus[0]) / (mu1 - mu2), 0.0)
    s_x1, _, _ = single_photon(n_x, m_x)
    mx = sum(m_x)
    mx_plus = scaled(m_x, mx, +1)
    mx_minus = scaled(m_x, mx, -1)
    v_x1 = tau1 * (mx_plus[0] - mx_minus[1]) / (mu1 - mu2)
    if s_x1 <= 0.0 or s_z1 <= 0.0:
        phi = 0.5
    else:
        ratio = max(v_x1, 0.0) / s_x1
        phi = min(ratio + _gamma(params.eps_sec, ratio, s_z1, s_x1), 0.5)
    return {"s_z0": s_z0, "s_z1": s_z1, "s_x1": s_x1, "v_x1": v_x1, "phi_z": phi}


def finite_key_length(block: KeyBlock, params: ProtocolParams) -> int:
    """Extractable secret bits of a finalized block, floored and clamped at 0."""
    if not block.finalized:
        raise ValueError("block is not finalized")
    nz = [float(v) for v in block.n_z]
    mz = [float(v) for v in block.m_z]
    b = decoy_bounds(nz, [float(v) for v in block.n_x], mz, [float(v) for v in block.m_x], params)
    n_tot = sum(nz)
    if n_tot <= 0:
        return 0
    leak_ec = n_tot * params.f_ec * binary_entropy(sum(mz) / n_tot)
    length = (b["s_z0"] + b["s_z1"] * (1.0 - binary_entropy(b["phi_z"])) - leak_ec
              - 6.0 * math.log2(19.0 / params.eps_sec) - math.log2(2.0 / params.eps_corr))
    return int(min(max(math.floor(length), 0), math.floor(n_tot)))


def annual_skr(link: StationLink, params: ProtocolParams, duration_days: float) -> SkrReport:
    """Fold the station record into blocks and sum their secret lengths."""
    if duration_days <= 0:
        raise ValueError("duration must be positive")
    blocks = accumulate_blocks(link.batch, params.block_size, link.pass_ids)
    total = 0
    for blk in blocks:
        if blk.finalized:
            blk.secret_bits = finite_key_length(blk, params)
            total += blk.secret_bits
    seconds = duration_days * 86400.0
    raw = raw_rate_per_pass(link)
    avg = total / seconds
    n_passes = len(np.unique(link.pass_ids))
    return SkrReport(link.station, float(total), avg, raw, avg, seconds, sum(b.finalized for b in blocks),
                     n_passes, blocks=blocks, link=link, params=params)


def raw_rate_per_pass(link: StationLink) -> float:
    """Mean over passes of sifted (Z + X) bits per second of pass time."""
    if len(link.batch) == 0:
        return 0.0
    sifted = link.batch.n_z.sum(axis=1) + link.batch.n_x.sum(axis=1)
    ids, inv = np.unique(link.pass_ids, return_inverse=True)
    per_pass = np.bincount(inv, weights=sifted)
    return float(np.mean(per_pass / link.pass_durations[ids]))


def apply_weather(report: SkrReport, p_overcast: float, mode: str = "deterministic", seed=None) -> SkrReport:
    """Derate the average key rate for overcast skies.

    Deterministic mode scales by (1 - p). Monte Carlo mode drops each pass
    with probability p and recomputes blocks and secret lengths.
    """
    if not 0.0 <= p_overcast <= 1.0:
        raise ValueError("p_overcast must be in [0, 1]")
    if mode == "deterministic":
        return replace(report, derated_skr_bps=report.average_skr_bps * (1.0 - p_overcast),
                       p_overcast=p_overcast, weather_mode=mode)
    if mode != "monte_carlo":
        raise ValueError(f"unknown weather mode {mode!r}")
    if report.link is None or report.params is None:
        raise ValueError("Monte Carlo derating needs the per-sample link record")
    rng = np.random.default_rng(seed)
    keep = rng.random(len(report.link.pass_durations)) >= p_overcast
    clear = annual_skr(report.link.subset(keep), report.params, report.duration_s / 86400.0)
    return replace(report, derated_skr_bps=clear.average_skr_bps, p_overcast=p_overcast, weather_mode=mode)
