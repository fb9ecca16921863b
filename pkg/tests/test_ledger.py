import hashlib
import struct
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trustbench.errors import ChainNotVerifiedError
from trustbench.ledger import (
    Block,
    EndorsementPolicy,
    Ledger,
    Transaction,
    TxKind,
    audit_source,
    genesis_block,
    parse_chain,
    serialize_chain,
    verify_chain,
    verify_chain_bytes,
)


def tx(kind=TxKind.VERDICT, n_end=4, t=0, i=0):
    return Transaction(f"x{i}", kind, {"task_id": f"t{i}"}, tuple(f"e{j}" for j in range(n_end)), t)


def test_policy_gate():
    led = Ledger(EndorsementPolicy(4))
    assert led.submit_tx(tx(n_end=4))
    bad = led.submit_tx(tx(n_end=3))
    assert not bad and "requires 4" in bad.reason
    assert not led.submit_tx(Transaction("d", TxKind.VERDICT, {}, ("a", "a", "a", "a")))
    assert led.submit_tx(tx(TxKind.TASK_SUBMITTED, n_end=0))
    assert not led.submit_tx(Transaction("n", TxKind.TASK_SUBMITTED, {"x": float("nan")}))
    assert led.pending == 2


def test_cut_order_and_heights():
    led = Ledger(EndorsementPolicy(1), auto_cut=False)
    led.submit_tx(tx(TxKind.TASK_SUBMITTED, 0, t=5, i=5))
    led.submit_tx(tx(TxKind.TASK_SUBMITTED, 0, t=3, i=3))
    blk = led.cut_block()
    assert blk.height == 1 and blk.prev_hash == led.blocks[0].block_hash
    assert [t.logical_time for t in blk.transactions] == [3, 5]
    assert led.cut_block() is None
    assert led.cut_block(force=True).height == 2


def test_partition_32_32_32_4():
    led = Ledger(EndorsementPolicy(1), block_size=32)
    for i in range(100):
        led.record(TxKind.TASK_SUBMITTED, {"i": i})
    led.flush()
    assert [len(b.tx_bytes) for b in led.blocks[1:]] == [32, 32, 32, 4]
    assert [b.height for b in led.blocks] == list(range(5))


def build_chain(n_blocks, per_block=3, seed=0):
    rng = np.random.default_rng(seed)
    led = Ledger(EndorsementPolicy(2), block_size=per_block)
    for i in range(n_blocks * per_block):
        led.record(TxKind.RESULT_REPORTED, {"task_id": f"t{i}", "reward": [float(rng.normal())], "reporter": f"w{i % 7}"})
    led.flush()
    return led


def test_genesis_only_ok():
    assert verify_chain([genesis_block()]).ok
    assert not verify_chain([]).ok


def test_roundtrip_and_rehash_oracle():
    led = build_chain(10)
    data = led.to_bytes()
    assert serialize_chain(parse_chain(data)) == data
    # independent walk over the documented file layout
    off, prev = 0, bytes(32)
    while off < len(data):
        (n,) = struct.unpack_from("<I", data, off)
        raw = data[off + 4 : off + 4 + n]
        body, h = raw[:-32], raw[-32:]
        assert body[8:40] == prev
        assert hashlib.sha256(body).digest() == h
        prev = h
        off += 4 + n
    assert prev.hex() == led.head_hash == verify_chain_bytes(data).head_hash


def test_byte_flip_in_payload_is_hash_mismatch():
    led = build_chain(6)
    blocks = led.snapshot()
    target = blocks[3]
    raw = bytearray(target.tx_bytes[0])
    raw[10] ^= 0x01
    forged = Block(target.height, target.prev_hash, (bytes(raw),) + target.tx_bytes[1:], target.block_hash)
    st_ = verify_chain(blocks[:3] + [forged] + blocks[4:])
    assert (st_.ok, st_.height, st_.reason) == (False, 3, "hash_mismatch")


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**9), st.integers(0, 7))
def test_any_bit_flip_detected(pos_seed, bit):
    data = bytearray(_CHAIN)
    pos = pos_seed % len(data)
    data[pos] ^= 1 << bit
    assert not verify_chain_bytes(bytes(data)).ok


_CHAIN = build_chain(8).to_bytes()


def test_truncation_detected():
    assert not verify_chain_bytes(_CHAIN[:-1]).ok
    assert verify_chain_bytes(_CHAIN[:0]).reason == "empty_chain"


def test_replay_is_byte_identical():
    assert build_chain(5, seed=3).to_bytes() == build_chain(5, seed=3).to_bytes()


def test_append_only_api():
    led = build_chain(3)
    before = [b.to_bytes() for b in led.blocks]
    led.record(TxKind.TASK_SUBMITTED, {"task_id": "new"})
    led.flush()
    assert [b.to_bytes() for b in led.blocks[: len(before)]] == before
    assert all(b.height == i for i, b in enumerate(led.blocks))


def test_audit_requires_verification():
    led = Ledger(EndorsementPolicy(2))
    led.record(TxKind.RESULT_REPORTED, {"task_id": "t1", "reporter": "a"})
    led.record(TxKind.ENDORSEMENT_RECORDED, {"task_id": "t1", "reporter": "a", "endorsers": ["b", "c"]}, ("b", "c"))
    led.record(TxKind.VERDICT, {"task_id": "t1", "reporter": "a", "verdict": "valid"}, ("b", "c"))
    led.flush()
    with pytest.raises(ChainNotVerifiedError):
        led.audit_source("a")
    assert led.verify().ok
    assert [t.kind for t in led.audit_source("a")] == [TxKind.RESULT_REPORTED, TxKind.ENDORSEMENT_RECORDED, TxKind.VERDICT]
    assert len(led.audit_source("b")) == 2
    assert led.audit_source("nobody") == []
    blocks = led.snapshot()
    with pytest.raises(ChainNotVerifiedError):
        audit_source(blocks, "a", None)
    led.record(TxKind.TASK_SUBMITTED, {"task_id": "t2"})
    led.flush()
    with pytest.raises(ChainNotVerifiedError):
        led.audit_source("a")


def test_participation_reconciles_with_profiles(small_run):
    led = small_run.ledger
    assert led.verify().ok
    counts = Counter()
    for t in led.transactions():
        if t.kind == TxKind.VERDICT:
            counts[t.payload["reporter"]] += 1
            for e in t.endorsements:
                counts[e] += 1
    for sid, prof in small_run.profiles.items():
        assert counts[sid] == prof.n
        hist = led.audit_source(sid)
        assert sum(t.kind == TxKind.VERDICT for t in hist) == prof.n
