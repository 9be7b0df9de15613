"""Key stores for the ground-station and timing-facility nodes, and the
trusted-node one-time-pad relay of satellite key over the last-mile link.

Deleting key material is a ledger state change, not secure erasure.
"""
from __future__ import annotations

import itertools
import threading
from collections import deque
from dataclasses import dataclass, field

import numpy as np

SATELLITE = "satellite"
LASTMILE = "lastmile"
DERIVED = "derived"
ORIGINS = (SATELLITE, LASTMILE, DERIVED)


class KeyStoreError(Exception):
    pass


class DuplicateKeyError(KeyStoreError):
    pass


class KeySyncError(KeyStoreError):
    pass


class InsufficientKeyError(KeyStoreError):
    def __init__(self, node, requested, available, origin=None):
        self.node, self.requested, self.available, self.origin = node, requested, available, origin
        self.shortfall = requested - available
        super().__init__(f"{node}: need {requested} {origin or 'any'} bits, have {available} "
                         f"(short {self.shortfall})")


@dataclass(frozen=True)
class KeyMaterial:
    id: str
    data: bytes  # MSB-first, zero padded in the last byte
    n_bits: int
    origin: str = DERIVED
    created_at: float = 0.0

    def __post_init__(self):
        if self.n_bits <= 0:
            raise ValueError("key must hold at least one bit")
        if len(self.data) != (self.n_bits + 7) // 8:
            raise ValueError("data length does not match n_bits")
        if self.origin not in ORIGINS:
            raise ValueError(f"unknown origin {self.origin!r}")

    @classmethod
    def from_bits(cls, id, bits, origin=DERIVED, created_at=0.0):
        bits = np.asarray(bits, dtype=np.uint8)
        return cls(id, np.packbits(bits).tobytes(), int(bits.size), origin, created_at)

    @classmethod
    def random(cls, id, n_bits, rng, origin=DERIVED, created_at=0.0):
        return cls.from_bits(id, rng.integers(0, 2, n_bits, dtype=np.uint8), origin, created_at)

    def bits(self) -> np.ndarray:
        return np.unpackbits(np.frombuffer(self.data, dtype=np.uint8), count=self.n_bits)


def otp_combine(a: KeyMaterial, b: KeyMaterial) -> bytes:
    """Bitwise XOR of two equally long keys."""
    if a.n_bits != b.n_bits:
        raise ValueError(f"length mismatch: {a.n_bits} vs {b.n_bits} bits")
    x = np.bitwise_xor(np.frombuffer(a.data, np.uint8), np.frombuffer(b.data, np.uint8))
    return x.tobytes()


@dataclass
class LedgerEntry:
    node: str
    key_id: str
    origin: str
    bits: int
    event: str  # deposit | withdraw | destroy
    timestamp: float


@dataclass
class _Segment:
    key_id: str
    origin: str
    bits: np.ndarray
    order: int  # deposit order, for FIFO across origins
    offset: int = 0

    @property
    def remaining(self):
        return self.bits.size - self.offset


@dataclass
class TransferRecord:
    sequence: int
    ogs: str
    ptf: str
    key_id: str
    n_bits: int
    timestamp: float
    ciphertext: bytes = field(repr=False, default=b"")


class KeyStore:
    """FIFO buffer of key bits with an append-only audit ledger.

    Segments are queued per origin; a withdrawal without an origin filter
    takes from whichever queue holds the oldest deposit. Operations on one
    store are serialized by its lock.
    """

    def __init__(self, node: str):
        self.node = node
        self.lock = threading.RLock()
        self.ledger: list[LedgerEntry] = []
        self._queues: dict[str, deque[_Segment]] = {o: deque() for o in ORIGINS}
        self._avail = dict.fromkeys(ORIGINS, 0)
        self._ids: set[str] = set()
        self._order = itertools.count()
        self._seq = itertools.count(1)
        self._relay_seq = itertools.count(1)
        self.deposited = self.withdrawn = self.destroyed = 0

    def available(self, origin=None) -> int:
        with self.lock:
            return self._avail[origin] if origin is not None else sum(self._avail.values())

    @property
    def consumed(self) -> int:
        return self.withdrawn + self.destroyed

    def deposit(self, key: KeyMaterial, at: float = 0.0) -> LedgerEntry:
        with self.lock:
            if key.id in self._ids:
                raise DuplicateKeyError(f"{self.node}: key id {key.id!r} already deposited")
            self._ids.add(key.id)
            self._queues[key.origin].append(_Segment(key.id, key.origin, key.bits().copy(), next(self._order)))
            self._avail[key.origin] += key.n_bits
            self.deposited += key.n_bits
            entry = LedgerEntry(self.node, key.id, key.origin, key.n_bits, "deposit", at)
            self.ledger.append(entry)
            return entry

    def withdraw(self, n_bits: int, origin=None, at: float = 0.0) -> KeyMaterial:
        """Hand out the oldest ``n_bits``; they are gone from the store afterwards."""
        with self.lock:
            bits, src = self._consume(n_bits, origin)
            out = KeyMaterial.from_bits(f"{self.node}:w{next(self._seq)}", bits,
                                        origin or src, at)
            self.withdrawn += n_bits
            self.ledger.append(LedgerEntry(self.node, out.id, out.origin, n_bits, "withdraw", at))
            return out

    def take(self, key_id: str, at: float = 0.0) -> KeyMaterial:
        """Withdraw one deposited key whole; fails if any of it was used."""
        with self.lock:
            for q in self._queues.values():
                for seg in q:
                    if seg.key_id == key_id and seg.offset == 0:
                        q.remove(seg)
                        self._avail[seg.origin] -= seg.bits.size
                        self.withdrawn += seg.bits.size
                        self.ledger.append(LedgerEntry(self.node, key_id, seg.origin, seg.bits.size,
                                                       "withdraw", at))
                        return KeyMaterial.from_bits(key_id, seg.bits, seg.origin, at)
            raise KeyStoreError(f"{self.node}: key {key_id!r} is not available whole")

    def _head_queue(self, origin):
        if origin is not None:
            q = self._queues[origin]
            return q if q else None
        live = [q for q in self._queues.values() if q]
        return min(live, key=lambda q: q[0].order) if live else None

    def head_id(self, origin=None):
        with self.lock:
            q = self._head_queue(origin)
            return None if q is None else (q[0].key_id, q[0].offset)

    def _consume(self, n_bits, origin):
        if n_bits <= 0:
            raise ValueError("n_bits must be positive")
        have = self.available(origin)
        if have < n_bits:
            raise InsufficientKeyError(self.node, n_bits, have, origin)
        parts, need, src = [], n_bits, None
        while need:
            q = self._head_queue(origin)
            seg = q[0]
            k = min(need, seg.remaining)
            parts.append(seg.bits[seg.offset:seg.offset + k])
            seg.offset += k
            self._avail[seg.origin] -= k
            need -= k
            src = src or seg.origin
            if seg.remaining == 0:
                q.popleft()
        return np.concatenate(parts), src

    def _destroy(self, n_bits, origin, at, label):
        bits, _ = self._consume(n_bits, origin)
        self.destroyed += n_bits
        self.ledger.append(LedgerEntry(self.node, label, origin, n_bits, "destroy", at))
        return bits

    def audit(self) -> bool:
        """Conservation holds and no withdrawn key id repeats."""
        ids = [e.key_id for e in self.ledger if e.event == "withdraw"]
        held = sum(s.remaining for q in self._queues.values() for s in q)
        return (self.deposited == held + self.withdrawn + self.destroyed
                and held == self.available() and len(ids) == len(set(ids)))


def relay_satellite_key(ogs: KeyStore, ptf: KeyStore, n_bits: int, at: float = 0.0) -> TransferRecord:
    """Forward ``n_bits`` of satellite key from a ground station to its timing
    facility, one-time padded with last-mile key held at both ends.

    Either everything happens or nothing does. Pads at both ends and the
    forwarded satellite bits at the ground station are destroyed.
    """
    first, second = sorted((ogs, ptf), key=lambda s: s.node)
    with first.lock, second.lock:
        for store, origin in ((ogs, SATELLITE), (ogs, LASTMILE), (ptf, LASTMILE)):
            have = store.available(origin)
            if have < n_bits:
                raise InsufficientKeyError(store.node, n_bits, have, origin)
        if ogs.head_id(LASTMILE) != ptf.head_id(LASTMILE):
            raise KeySyncError(f"last-mile pads out of step: {ogs.head_id(LASTMILE)} vs {ptf.head_id(LASTMILE)}")
        seq = next(ogs._relay_seq)
        key_id = f"{ogs.node}>relay{seq}"
        k_sat = KeyMaterial.from_bits("k", ogs._destroy(n_bits, SATELLITE, at, key_id), SATELLITE)
        pad_a = KeyMaterial.from_bits("a", ogs._destroy(n_bits, LASTMILE, at, key_id), LASTMILE)
        ct = otp_combine(k_sat, pad_a)
        pad_b = KeyMaterial.from_bits("b", ptf._destroy(n_bits, LASTMILE, at, key_id), LASTMILE)
        recovered = otp_combine(KeyMaterial(key_id, ct, n_bits, DERIVED), pad_b)
        ptf.deposit(KeyMaterial(key_id, recovered, n_bits, SATELLITE, at), at)
        return TransferRecord(seq, ogs.node, ptf.node, key_id, n_bits, at, ct)


def lastmile_exchange(ogs: KeyStore, ptf: KeyStore, n_bits: int, rng, key_id: str, at: float = 0.0):
    """Deposit one fresh last-mile QKD key at both ends of the fiber link."""
    key = KeyMaterial.random(key_id, n_bits, rng, LASTMILE, at)
    ogs.deposit(key, at)
    ptf.deposit(key, at)
    return key


def satellite_exchange(stores, n_bits: int, rng, key_id: str, at: float = 0.0):
    """Deposit the same satellite key at every ground station."""
    key = KeyMaterial.random(key_id, n_bits, rng, SATELLITE, at)
    for s in stores:
        s.deposit(key, at)
    return key


@dataclass
class FeasibilityReport:
    supply_bps: float
    demand_bps: float
    horizon_s: float
    initial_buffer: float
    min_buffer: float
    final_buffer: float
    breakeven_bps: float

    @property
    def feasible(self) -> bool:
        return self.min_buffer >= 0


def consumption_feasibility(supply_bps: float, demand_bpm: float, horizon_days: float,
                            initial_buffer: float = 0.0) -> FeasibilityReport:
    """Buffer trajectory under constant supply and demand."""
    if min(supply_bps, demand_bpm, horizon_days, initial_buffer) < 0:
        raise ValueError("inputs must be non-negative")
    demand_bps = demand_bpm / 60.0
    horizon = horizon_days * 86400.0
    net = supply_bps - demand_bps
    final = initial_buffer + net * horizon
    return FeasibilityReport(supply_bps, demand_bps, horizon, initial_buffer,
                             min(initial_buffer, final), final, demand_bps)


def export_ledger(stores, path, iso=None):
    import csv
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node", "key_id", "origin", "bits", "event", "timestamp"])
        for s in stores:
            for e in s.ledger:
                w.writerow([e.node, e.key_id, e.origin, e.bits, e.event,
                            iso(e.timestamp) if iso else e.timestamp])
