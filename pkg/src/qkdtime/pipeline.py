"""Secured clock-data transfer from MA to OP.

A transfer message is a CGGTTS-subset payload followed by a tail::

    <payload>
    <blank line>
    SENT=<ISO 8601 UTC>
    CHECKSUM=<decimal>
    FILE=<name>

The checksum is the sum of the refsv fields (0.1 ns integers) wrapped to a
signed 64-bit integer. It is additive, so compensating edits go unnoticed;
the AES-256-GCM tag of the envelope is what guarantees integrity.

Envelope (big-endian)::

    magic(4) | version(1) | key_epoch(4) | sequence(8) | nonce(12) | ciphertext | tag(16)

The nonce is key_epoch(4) || sequence(8), and the 29 header bytes are the
associated data. Session keys are 256-bit chunks withdrawn from the PTF key
stores on a fixed refresh schedule, identical at both ends.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .cggtts import CggttsError, encode_cggtts_subset, parse_cggtts_subset
from .keymgmt import SATELLITE, InsufficientKeyError, KeyStore
from .orbit import iso_utc, to_posix

MAGIC = b"QTTX"
VERSION = 1
HEADER = struct.Struct(">4sBIQ12s")
TAG_LEN = 16
LENGTH = struct.Struct(">I")  # frame prefix for the file-drop transport


class TransferError(Exception):
    pass


class PayloadError(TransferError):
    pass


class AuthenticationError(TransferError):
    pass


class EnvelopeError(TransferError):
    pass


class KeyEpochError(TransferError):
    pass


class KeyStarvationError(TransferError):
    pass


def wrap_int64(x: int) -> int:
    return (x + 2**63) % 2**64 - 2**63


def refsv_checksum(records) -> int:
    return wrap_int64(sum(r.refsv for r in records))


@dataclass
class TransferMessage:
    payload: bytes
    sent_at: float
    checksum: int
    filename: str
    sequence: int = 0

    def to_bytes(self) -> bytes:
        if "\n" in self.filename:
            raise ValueError("filename must be a single line")
        tail = f"\nSENT={iso_utc(self.sent_at)}\nCHECKSUM={self.checksum}\nFILE={self.filename}\n"
        return self.payload + tail.encode("utf-8")

    @classmethod
    def from_bytes(cls, data: bytes, sequence: int = 0) -> "TransferMessage":
        cut = data.rfind(b"\n\nSENT=")
        if cut < 0:
            raise PayloadError("missing tail message")
        tail = data[cut + 2:].decode("utf-8").split("\n")
        if tail[-1] == "":
            tail.pop()
        keys = [line.partition("=")[0] for line in tail]
        if keys != ["SENT", "CHECKSUM", "FILE"]:
            raise PayloadError(f"malformed tail fields {keys}")
        values = [line.partition("=")[2] for line in tail]
        try:
            return cls(data[:cut + 1], to_posix(values[0]), int(values[1]), values[2], sequence)
        except ValueError as exc:
            raise PayloadError(f"malformed tail: {exc}") from None


def build_transfer_message(payload: bytes, filename: str, now: float, sequence: int = 0) -> TransferMessage:
    try:
        records = parse_cggtts_subset(payload).records
    except CggttsError as exc:
        raise PayloadError(f"payload does not parse: {exc}") from exc
    return TransferMessage(payload, now, refsv_checksum(records), filename, sequence)


@dataclass
class VerifyResult:
    ok: bool
    expected: int  # value carried in the tail
    actual: int | None  # recomputed from the payload, None if unparseable
    reason: str = ""

    @property
    def delta(self):
        return None if self.actual is None else self.actual - self.expected


def verify_message(msg: TransferMessage) -> VerifyResult:
    try:
        records = parse_cggtts_subset(msg.payload).records
    except CggttsError as exc:
        return VerifyResult(False, msg.checksum, None, f"payload does not parse: {exc}")
    actual = refsv_checksum(records)
    ok = actual == msg.checksum
    return VerifyResult(ok, msg.checksum, actual, "" if ok else "checksum mismatch")


@dataclass(frozen=True)
class SessionKeyPolicy:
    key_bits: int = 256
    refresh_interval: float = 120.0

    def __post_init__(self):
        if self.key_bits != 256:
            raise ValueError("AES-256 needs 256-bit keys")
        if self.refresh_interval <= 0:
            raise ValueError("refresh_interval must be positive")


class EncryptionSession:
    """One endpoint's key schedule: epoch k uses the k-th 256-bit key
    withdrawn from ``store``; epoch k starts at start + k * refresh_interval.

    ``advance(now)`` withdraws keys for every epoch that has started. If the
    store runs dry the missing epochs are withdrawn on a later call, so both
    ends stay aligned on the same key stream.
    """

    def __init__(self, store: KeyStore, policy: SessionKeyPolicy = SessionKeyPolicy(), start: float = 0.0,
                 origin: str | None = SATELLITE):
        self.store, self.policy, self.start, self.origin = store, policy, start, origin
        self.epoch = -1
        self.key = None
        self.sequence = 0
        self.withdrawals = 0

    @property
    def next_refresh(self) -> float:
        return self.start + (self.epoch + 1) * self.policy.refresh_interval

    def keys_due(self, now: float) -> int:
        """Number of epochs started by ``now``."""
        if now < self.start:
            return 0
        return int((now - self.start) // self.policy.refresh_interval) + 1

    def advance(self, now: float):
        while self.next_refresh <= now:
            try:
                key = self.store.withdraw(self.policy.key_bits, self.origin, at=self.next_refresh)
            except InsufficientKeyError as exc:
                raise KeyStarvationError(str(exc)) from exc
            self.key, self.epoch = key.data, self.epoch + 1
            self.withdrawals += 1
        if self.key is None:
            raise KeyStarvationError(f"{self.store.node}: no session key before t={now}")

    def encrypt(self, message: TransferMessage, now: float) -> bytes:
        self.advance(now)
        self.sequence += 1
        message.sequence = self.sequence
        nonce = struct.pack(">IQ", self.epoch, self.sequence)
        header = HEADER.pack(MAGIC, VERSION, self.epoch, self.sequence, nonce)
        return header + AESGCM(self.key).encrypt(nonce, message.to_bytes(), header)

    def decrypt(self, envelope: bytes, now: float) -> TransferMessage:
        if len(envelope) < HEADER.size + TAG_LEN:
            raise EnvelopeError("envelope truncated")
        magic, version, epoch, sequence, nonce = HEADER.unpack_from(envelope)
        if magic != MAGIC or version != VERSION:
            raise EnvelopeError("bad magic or version")
        if nonce != struct.pack(">IQ", epoch, sequence):
            raise EnvelopeError("nonce does not match epoch and sequence")
        self.advance(now)
        if epoch != self.epoch:
            raise KeyEpochError(f"envelope key epoch {epoch}, receiver at {self.epoch}")
        header = envelope[:HEADER.size]
        try:
            plain = AESGCM(self.key).decrypt(nonce, envelope[HEADER.size:], header)
        except InvalidTag:
            raise AuthenticationError("authentication tag mismatch") from None
        return TransferMessage.from_bytes(plain, sequence)


def encrypt_message(msg: TransferMessage, session: EncryptionSession, now: float) -> bytes:
    return session.encrypt(msg, now)


def decrypt_message(envelope: bytes, session: EncryptionSession, now: float) -> TransferMessage:
    return session.decrypt(envelope, now)


def write_frame(path, envelope: bytes):
    """File-drop transport: length-prefixed envelope."""
    Path(path).write_bytes(LENGTH.pack(len(envelope)) + envelope)


def read_frame(path) -> bytes:
    data = Path(path).read_bytes()
    if len(data) < LENGTH.size:
        raise EnvelopeError("frame truncated")
    (n,) = LENGTH.unpack_from(data)
    if len(data) != LENGTH.size + n:
        raise EnvelopeError(f"frame length {n} does not match {len(data) - LENGTH.size} bytes")
    return data[LENGTH.size:]


@dataclass
class TransferLogEntry:
    tick: int
    sent_at: float
    bytes: int
    key_epoch: int
    verify_result: str


@dataclass
class TransferOutcome:
    log: list = field(default_factory=list)
    delivered: list = field(default_factory=list)  # (tick, TransferMessage) at OP

    @property
    def successes(self) -> int:
        return sum(e.verify_result == "ok" for e in self.log)


def run_transfer_loop(source, sender: EncryptionSession, receiver: EncryptionSession, n_ticks: int,
                      cadence: float = 1800.0, start: float = 0.0, hook=None,
                      filename=lambda tick, now: f"MA_{tick:05d}.cggtts") -> TransferOutcome:
    """Send one file every ``cadence`` seconds, at start + k * cadence for k = 1..n_ticks.

    ``source(tick, now)`` returns the records to send. ``hook(tick, now)``
    runs before each tick and may alter the stores to inject faults. A
    failing tick is logged with its error class and the loop moves on.
    """
    out = TransferOutcome()
    for tick in range(1, n_ticks + 1):
        now = start + tick * cadence
        if hook is not None:
            hook(tick, now)
        size, epoch = 0, -1
        try:
            payload = encode_cggtts_subset(source(tick, now))
            msg = build_transfer_message(payload, filename(tick, now), now)
            envelope = sender.encrypt(msg, now)
            size, epoch = len(envelope), sender.epoch
            received = receiver.decrypt(envelope, now)
            check = verify_message(received)
            if not check.ok:
                result = f"checksum_mismatch:{check.delta}"
            elif received.payload != payload:
                result = "payload_mismatch"
            else:
                result = "ok"
                out.delivered.append((tick, received))
        except (TransferError, ValueError) as exc:
            result = f"failed:{type(exc).__name__}"
        out.log.append(TransferLogEntry(tick, now, size, epoch, result))
    return out


def write_transfer_log(entries, path, iso=iso_utc):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tick", "sent_at", "bytes", "key_epoch", "verify_result"])
        for e in entries:
            w.writerow([e.tick, iso(e.sent_at), e.bytes, e.key_epoch, e.verify_result])
