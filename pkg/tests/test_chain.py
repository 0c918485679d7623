import dataclasses
import struct

import numpy as np
import pytest

from kfcsim.chain import (
    NO_MINER,
    ZERO_DIGEST,
    Block,
    Ledger,
    MinerState,
    Payload,
    append_block,
    hash_block,
    model_digest,
    pofl_select,
    pos_select,
    pow_select,
    serialize_block,
    validate_ledger,
    verify_claim,
)
from kfcsim.errors import ArgumentError, ConfigError, IntegrityError
from kfcsim.mlcore import Arch, Model, evaluate_accuracy

from conftest import tiny_dataset


def _ledger(n_blocks, seed=0):
    rng = np.random.default_rng(seed)
    ledger = Ledger.create(rng.normal(size=4))
    for t in range(1, n_blocks):
        ledger.append(t, t % 3, rng.normal(size=4), float(rng.uniform()))
    return ledger


def test_serialization_layout():
    payload = Payload(3, 1, bytes(range(32)), 0.5)
    raw = serialize_block(3, ZERO_DIGEST, payload)
    assert raw[:8] == struct.pack("<Q", 3)
    assert raw[8:40] == ZERO_DIGEST
    assert raw[40:44] == struct.pack("<I", 8) and raw[44:52] == struct.pack("<Q", 3)
    assert raw[-12:] == struct.pack("<I", 8) + struct.pack("<d", 0.5)
    assert len(raw) == 8 + 32 + 4 * 4 + 8 + 8 + 32 + 8


def test_hash_deterministic_and_sensitive():
    p = Payload(1, 0, bytes(32), 0.75)
    d = hash_block(1, ZERO_DIGEST, p)
    assert len(d) == 32 and d == hash_block(1, ZERO_DIGEST, p)
    flipped = Payload(1, 0, bytes(31) + b"\x01", 0.75)
    assert hash_block(1, ZERO_DIGEST, flipped) != d


def test_genesis_reproducible():
    a = Ledger.create(np.arange(4.0))
    b = Ledger.create(np.arange(4.0))
    assert a.blocks[0].digest == b.blocks[0].digest
    assert a.blocks[0].prev == ZERO_DIGEST
    assert a.blocks[0].payload.winner_miner_id == NO_MINER


def test_append_links_and_roundtrip():
    ledger = Ledger.create(np.zeros(3))
    params = np.array([1.5, -2.0, 0.25])
    block = ledger.append(1, 2, params, 0.9)
    assert len(ledger) == 2 and block.prev == ledger.blocks[0].digest
    assert ledger.get_model(block.payload.model_digest).tobytes() == params.tobytes()
    again = ledger.append(2, 2, params, 0.9)
    assert again.digest != block.digest
    assert validate_ledger(ledger) is None


def test_append_block_functional_form():
    ledger = Ledger.create(np.zeros(2))
    params = np.ones(2)
    out = append_block(ledger, Payload(1, 0, model_digest(params), 0.5), params)
    assert len(out) == 2 and validate_ledger(out) is None
    with pytest.raises(IntegrityError):
        append_block(ledger, Payload(2, 0, bytes(32), 0.5), params)


def test_append_refuses_invalid_ledger():
    ledger = _ledger(3)
    b = ledger.blocks[1]
    ledger.blocks[1] = dataclasses.replace(b, payload=dataclasses.replace(b.payload, round=99))
    with pytest.raises(IntegrityError):
        ledger.append(3, 0, np.zeros(4), 0.1)


def test_model_store_tamper_detected():
    ledger = _ledger(2)
    d = ledger.blocks[1].payload.model_digest
    ledger.model_store[d] = ledger.model_store[d] + 1.0
    with pytest.raises(IntegrityError):
        ledger.get_model(d)


def test_untampered_validates():
    assert validate_ledger(_ledger(10)) is None


def test_payload_mutation_at_4():
    ledger = _ledger(10)
    b = ledger.blocks[4]
    ledger.blocks[4] = dataclasses.replace(
        b, payload=dataclasses.replace(b.payload, claimed_accuracy=b.payload.claimed_accuracy + 0.1)
    )
    assert validate_ledger(ledger) == 4


def test_splice_with_stale_prev_at_7():
    ledger = _ledger(10)
    foreign = _ledger(10, seed=99).blocks[7]
    ledger.blocks[7] = foreign
    assert validate_ledger(ledger) == 7


def test_rehashed_mutation_caught_at_successor():
    ledger = _ledger(10)
    b = ledger.blocks[4]
    ledger.blocks[4] = Block.make(4, b.prev, dataclasses.replace(b.payload, winner_miner_id=7))
    assert validate_ledger(ledger) == 5


def test_pow_difficulty_zero_and_single_miner():
    miners = [MinerState(i) for i in range(3)]
    assert pow_select(miners, 0, round_seed=123) == 0
    assert pow_select([MinerState(5)], 8, round_seed=1) == 5
    with pytest.raises(ConfigError):
        pow_select([], 4, 0)


def test_pow_deterministic():
    miners = [MinerState(i) for i in range(3)]
    assert pow_select(miners, 6, 42) == pow_select(miners, 6, 42)


def test_pow_roughly_uniform():
    miners = [MinerState(i) for i in range(3)]
    wins = np.bincount([pow_select(miners, 4, s) for s in range(1000)], minlength=3) / 1000
    assert np.all((wins >= 0.25) & (wins <= 0.42)), wins


def test_pos_round_robin_and_weights():
    eq = [MinerState(i, 1.0) for i in range(3)]
    assert [pos_select(eq, r) for r in range(4)] == [0, 1, 2, 0]
    solo = [MinerState(0, 1.0), MinerState(1, 0.0), MinerState(2, 0.0)]
    assert {pos_select(solo, r) for r in range(10)} == {0}
    two = [MinerState(0, 2.0), MinerState(1, 1.0)]
    wins = [pos_select(two, r) for r in range(6)]
    assert wins.count(0) == 4
    with pytest.raises(ConfigError):
        pos_select([MinerState(0, 0.0)], 0)


def test_pos_equal_stakes_visit_each_once_per_cycle():
    for n in (1, 2, 5):
        for stake in (1.0, 2.5, 0.1):
            miners = [MinerState(i, stake) for i in range(n)]
            for start in (0, 3, 17):
                assert sorted(pos_select(miners, r) for r in range(start, start + n)) == list(range(n))


def _val_set():
    X = np.eye(3)[[0, 1, 2, 0, 1, 2, 0, 1, 2, 0]]
    return tiny_dataset(X, [0, 1, 2, 0, 1, 2, 0, 1, 2, 0], 3)


def _model_with_accuracy(correct_classes):
    # logits = W x; class c is predicted correctly iff W[c, c] dominates
    W = np.zeros((3, 3))
    for c in range(3):
        if c in correct_classes:
            W[c, c] = 5.0
        else:
            W[(c + 1) % 3, c] = 5.0
    return np.concatenate([W.ravel(), np.zeros(3)])


def test_pofl_select_tiebreak_and_dominance():
    arch = Arch.softmax_linear(3, 3)
    val = _val_set()
    models = [_model_with_accuracy({0}), _model_with_accuracy({0, 1, 2}), _model_with_accuracy({0, 1, 2})]
    winner, accs = pofl_select(models, val, arch)
    assert winner == 1
    assert all(accs[winner] >= a for a in accs)
    assert pofl_select(models[:1], val, arch)[0] == 0
    with pytest.raises(ArgumentError):
        pofl_select(models, tiny_dataset(np.zeros((0, 3)), [], 3), arch)


def test_verify_claim():
    arch = Arch.softmax_linear(3, 3)
    val = _val_set()
    params = _model_with_accuracy({0, 1})
    acc = evaluate_accuracy(Model(arch, params), val)
    assert verify_claim(params, acc, val, arch)
    assert not verify_claim(params, acc + 0.1, val, arch)
    assert verify_claim(params, 0.0, val, arch, tolerance=1.0)


def test_foreign_genesis_breaks_first_link():
    ledger = _ledger(5)
    ledger.blocks[0] = _ledger(5, seed=3).blocks[0]
    assert validate_ledger(ledger) == 1
