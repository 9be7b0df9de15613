import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qkdtime import cggtts, keymgmt, pipeline
from qkdtime.cggtts import CggttsRecord
from qkdtime.keymgmt import SATELLITE, KeyMaterial, KeyStore
from qkdtime.pipeline import (AuthenticationError, EncryptionSession, EnvelopeError, KeyEpochError,
                              KeyStarvationError, PayloadError, SessionKeyPolicy, TransferMessage)

T0 = 1667952000.0  # 2022-11-09T00:00:00Z


def rec(sat="E01", refsv=0):
    return CggttsRecord(sat, 59892, 120, 780, refsv, refsv, 450)


def payload(values):
    return cggtts.encode_cggtts_subset([rec(f"E{i + 1:02d}", v) for i, v in enumerate(values)])


def paired_stores(bits, seed=0):
    a, b = KeyStore("PTF-MA"), KeyStore("PTF-OP")
    if bits:
        keymgmt.satellite_exchange([a, b], bits, np.random.default_rng(seed), "sat0")
    return a, b


def test_checksum_examples():
    assert pipeline.build_transfer_message(payload([10, 20, 30]), "f", T0).checksum == 60
    assert pipeline.build_transfer_message(payload([]), "f", T0).checksum == 0
    with pytest.raises(PayloadError):
        pipeline.build_transfer_message(b"junk", "f", T0)


def test_checksum_fixture():
    from pathlib import Path
    data = (Path(__file__).parent / "fixtures" / "five_sats.cggtts").read_bytes()
    assert pipeline.build_transfer_message(data, "five", T0).checksum == 97604444


def test_checksum_wraps_int64():
    assert pipeline.wrap_int64(2**63) == -(2**63)
    assert pipeline.wrap_int64(-(2**63) - 1) == 2**63 - 1
    assert pipeline.wrap_int64(12345) == 12345


def edit(msg, deltas):
    f = cggtts.parse_cggtts_subset(msg.payload)
    recs = [CggttsRecord(r.sat_id, r.mjd, r.start_time, r.track_length, r.refsv + d, r.refsys, r.elevation)
            for r, d in zip(f.records, deltas)]
    return TransferMessage(cggtts.encode_cggtts_subset(recs, f.header), msg.sent_at, msg.checksum, msg.filename)


def test_verify_examples():
    msg = pipeline.build_transfer_message(payload([10, 20, 30]), "f", T0)
    assert pipeline.verify_message(msg).ok
    one = pipeline.verify_message(edit(msg, [1, 0, 0]))
    assert not one.ok and one.delta == 1 and one.expected == 60 and one.actual == 61
    # additive checksum misses compensating edits
    assert pipeline.verify_message(edit(msg, [5, -5, 0])).ok
    broken = TransferMessage(b"CGGTTS\nno title\n", T0, 0, "f")
    res = pipeline.verify_message(broken)
    assert not res.ok and res.actual is None


def test_tail_layout_and_roundtrip():
    msg = pipeline.build_transfer_message(payload([7]), "MA_00001.cggtts", T0)
    raw = msg.to_bytes()
    assert raw.endswith(b"\n\nSENT=2022-11-09T00:00:00Z\nCHECKSUM=7\nFILE=MA_00001.cggtts\n")
    back = TransferMessage.from_bytes(raw)
    assert (back.payload, back.sent_at, back.checksum, back.filename) == (msg.payload, T0, 7, msg.filename)
    with pytest.raises(PayloadError):
        TransferMessage.from_bytes(msg.payload)
    with pytest.raises(ValueError):
        TransferMessage(b"", T0, 0, "a\nb").to_bytes()


@settings(max_examples=100)
@given(st.lists(st.integers(-(10**9), 10**10), max_size=15))
def test_verify_iff_sum_matches(values):
    msg = pipeline.build_transfer_message(payload(values), "f", T0)
    assert pipeline.verify_message(msg).ok
    msg.checksum += 1
    assert pipeline.verify_message(msg).delta == -1


def test_policy_validation():
    with pytest.raises(ValueError):
        SessionKeyPolicy(key_bits=128)
    with pytest.raises(ValueError):
        SessionKeyPolicy(refresh_interval=0)


def sessions(bits=256 * 200, start=T0):
    a, b = paired_stores(bits)
    return EncryptionSession(a, start=start), EncryptionSession(b, start=start), a, b


def test_encrypt_roundtrip_and_header():
    tx, rx, _, _ = sessions()
    msg = pipeline.build_transfer_message(payload([1, 2]), "f", T0 + 5)
    env = pipeline.encrypt_message(msg, tx, T0 + 5)
    magic, version, epoch, seq, nonce = pipeline.HEADER.unpack_from(env)
    assert (magic, version, epoch, seq) == (b"QTTX", 1, 0, 1)
    assert nonce == struct.pack(">IQ", 0, 1)
    assert len(env) == 29 + len(msg.to_bytes()) + 16
    back = pipeline.decrypt_message(env, rx, T0 + 5)
    assert back.to_bytes() == msg.to_bytes()


def test_every_single_bit_flip_is_caught():
    tx, rx, _, _ = sessions()
    msg = pipeline.build_transfer_message(payload([3]), "f", T0)
    env = tx.encrypt(msg, T0)
    for bit in range(len(env) * 8):
        bad = bytearray(env)
        bad[bit // 8] ^= 1 << (bit % 8)
        with pytest.raises((AuthenticationError, EnvelopeError, KeyEpochError)):
            rx.decrypt(bytes(bad), T0)
    assert rx.decrypt(env, T0).checksum == 3


def test_envelope_errors():
    tx, rx, _, _ = sessions()
    env = tx.encrypt(pipeline.build_transfer_message(payload([]), "f", T0), T0)
    with pytest.raises(EnvelopeError):
        rx.decrypt(env[:20], T0)
    with pytest.raises(KeyEpochError):
        rx.decrypt(env, T0 + 120)


def test_two_hour_session_withdraws_60_keys():
    tx, rx, a, b = sessions()
    for t in np.arange(0, 7200, 60.0):
        tx.advance(T0 + t)
        rx.advance(T0 + t)
    assert tx.withdrawals == rx.withdrawals == 60
    assert a.withdrawn == b.withdrawn == 15360
    assert tx.keys_due(T0 + 7199) == 60


def test_keys_advance_identically_at_both_ends():
    tx, rx, _, _ = sessions()
    tx.advance(T0 + 1000)
    rx.advance(T0 + 1000)
    assert tx.key == rx.key and tx.epoch == rx.epoch == 8


def test_starvation_then_catch_up():
    tx, rx, a, b = sessions(bits=256 * 2)
    tx.advance(T0 + 239)
    with pytest.raises(KeyStarvationError):
        tx.advance(T0 + 240)
    assert tx.epoch == 1
    keymgmt.satellite_exchange([a], 256 * 5, np.random.default_rng(9), "more")
    tx.advance(T0 + 480)
    assert tx.epoch == 4 and tx.withdrawals == 5


def test_session_ignores_lastmile_pads():
    a = KeyStore("PTF-MA")
    a.deposit(KeyMaterial.random("pad", 1024, np.random.default_rng(), keymgmt.LASTMILE))
    with pytest.raises(KeyStarvationError):
        EncryptionSession(a, start=T0).advance(T0)


def test_frame_roundtrip(tmp_path):
    tx, rx, _, _ = sessions()
    env = tx.encrypt(pipeline.build_transfer_message(payload([4]), "f", T0), T0)
    p = tmp_path / "drop.bin"
    pipeline.write_frame(p, env)
    assert pipeline.read_frame(p) == env
    p.write_bytes(p.read_bytes()[:-1])
    with pytest.raises(EnvelopeError):
        pipeline.read_frame(p)


def source(tick, now):
    return [rec(f"E{i + 1:02d}", 1000 * tick + i) for i in range(5)]


def test_three_hour_loop():
    tx, rx, a, b = sessions()
    out = pipeline.run_transfer_loop(source, tx, rx, 6, start=T0)
    assert len(out.log) == 6 and out.successes == 6
    assert [e.sent_at - T0 for e in out.log] == [1800.0 * k for k in range(1, 7)]
    # epochs 0..90 have started by the last tick
    assert tx.withdrawals == rx.withdrawals == 91
    assert a.withdrawn == 256 * 91
    tick, msg = out.delivered[-1]
    assert msg.payload == cggtts.encode_cggtts_subset(source(6, None))


def test_loop_survives_starvation_at_tick_4():
    tx, rx, a, b = sessions(bits=256 * 60)  # epochs 0..59, so tick 4 (t = 7200) starves

    def hook(tick, now):
        if tick == 5:
            keymgmt.satellite_exchange([a, b], 256 * 100, np.random.default_rng(tick), f"resupply{tick}")

    out = pipeline.run_transfer_loop(source, tx, rx, 6, start=T0, hook=hook)
    results = [e.verify_result for e in out.log]
    assert results[:3] == ["ok"] * 3
    assert results[3] == "failed:KeyStarvationError"
    assert results[4:] == ["ok", "ok"]
    assert a.audit() and b.audit()


def test_write_transfer_log(tmp_path):
    tx, rx, _, _ = sessions()
    out = pipeline.run_transfer_loop(source, tx, rx, 2, start=T0)
    p = tmp_path / "log.csv"
    pipeline.write_transfer_log(out.log, p)
    lines = p.read_text().splitlines()
    assert lines[0] == "tick,sent_at,bytes,key_epoch,verify_result"
    assert lines[1].startswith("1,2022-11-09T00:30:00Z,") and lines[1].endswith(",15,ok")
