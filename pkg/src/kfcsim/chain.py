"""Hash-chained ledger of winning models and the consensus selectors.

Block hashing uses a fixed binary layout so digests are reproducible
bit-for-bit::

    u64le(index) || prev (32 bytes) || for each payload field in order:
        u32le(len(field)) || field

with payload fields ``round`` (u64le), ``winner_miner_id`` (u64le),
``model_digest`` (32 bytes) and ``claimed_accuracy`` (IEEE-754 f64le).
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .data import Dataset
from .errors import ArgumentError, ConfigError, IntegrityError
from .mlcore import Arch, Model, evaluate_accuracy

logger = logging.getLogger(__name__)

ZERO_DIGEST = bytes(32)
NO_MINER = 2**64 - 1


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def model_digest(params) -> bytes:
    arr = np.ascontiguousarray(np.asarray(params, dtype="<f8"))
    return sha256(arr.tobytes())


@dataclass(frozen=True)
class Payload:
    round: int
    winner_miner_id: int
    model_digest: bytes
    claimed_accuracy: float

    def fields(self) -> list[bytes]:
        return [
            struct.pack("<Q", self.round),
            struct.pack("<Q", self.winner_miner_id),
            bytes(self.model_digest),
            struct.pack("<d", self.claimed_accuracy),
        ]


def serialize_block(index: int, prev: bytes, payload: Payload) -> bytes:
    if len(prev) != 32:
        raise IntegrityError(f"prev digest must be 32 bytes, got {len(prev)}")
    parts = [struct.pack("<Q", index), bytes(prev)]
    for f in payload.fields():
        parts.append(struct.pack("<I", len(f)))
        parts.append(f)
    return b"".join(parts)


def hash_block(index: int, prev: bytes, payload: Payload) -> bytes:
    return sha256(serialize_block(index, prev, payload))


@dataclass(frozen=True)
class Block:
    index: int
    prev: bytes
    payload: Payload
    digest: bytes

    @classmethod
    def make(cls, index: int, prev: bytes, payload: Payload) -> "Block":
        return cls(index, prev, payload, hash_block(index, prev, payload))

    def recompute(self) -> bytes:
        return hash_block(self.index, self.prev, self.payload)


@dataclass
class Ledger:
    """Blocks from genesis onward plus a digest-keyed store of model parameters.

    Single writer: only :meth:`append` mutates the ledger.
    """

    blocks: list[Block] = field(default_factory=list)
    model_store: dict[bytes, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, genesis_params) -> "Ledger":
        ledger = cls()
        digest = ledger._store(genesis_params)
        payload = Payload(0, NO_MINER, digest, 0.0)
        ledger.blocks.append(Block.make(0, ZERO_DIGEST, payload))
        return ledger

    def __len__(self) -> int:
        return len(self.blocks)

    @property
    def head(self) -> Block:
        return self.blocks[-1]

    def _store(self, params) -> bytes:
        arr = np.array(params, dtype=np.float64)
        arr.setflags(write=False)
        digest = model_digest(arr)
        self.model_store[digest] = arr
        return digest

    def append(self, round: int, winner_miner_id: int, params, claimed_accuracy: float) -> Block:
        bad = validate_ledger(self)
        if bad is not None:
            raise IntegrityError(f"refusing to append to a ledger invalid at block {bad}")
        digest = self._store(params)
        payload = Payload(round, winner_miner_id, digest, float(claimed_accuracy))
        block = Block.make(len(self.blocks), self.head.digest, payload)
        self.blocks.append(block)
        return block

    def get_model(self, digest: bytes) -> np.ndarray:
        try:
            arr = self.model_store[digest]
        except KeyError:
            raise IntegrityError(f"no model stored under {digest.hex()}") from None
        if model_digest(arr) != digest:
            raise IntegrityError(f"stored model {digest.hex()} does not match its digest")
        return arr


def append_block(ledger: Ledger, payload: Payload, params) -> Ledger:
    """Functional-style wrapper: store ``params`` and chain a block for ``payload``."""
    if model_digest(params) != payload.model_digest:
        raise IntegrityError("payload digest does not match the supplied parameters")
    ledger.append(payload.round, payload.winner_miner_id, params, payload.claimed_accuracy)
    return ledger


def validate_ledger(ledger: Ledger) -> int | None:
    """``None`` when the chain is intact, else the first offending block index."""
    prev = ZERO_DIGEST
    for pos, block in enumerate(ledger.blocks):
        if block.index != pos or block.prev != prev or block.recompute() != block.digest:
            return pos
        prev = block.digest
    return None


# -- consensus -------------------------------------------------------------


@dataclass(frozen=True)
class MinerState:
    miner_id: int
    stake: float = 1.0
    clients: tuple[int, ...] = ()


def _leading_zero_bits(digest: bytes) -> int:
    value = int.from_bytes(digest, "big")
    return 256 - value.bit_length()


def pow_attempts(miner_id: int, difficulty_bits: int, round_seed: int) -> int:
    """Nonces the miner must try before a digest with enough leading zeros."""
    nonce = 0
    prefix = struct.pack("<QQ", round_seed & (2**64 - 1), miner_id)
    while True:
        nonce += 1
        if _leading_zero_bits(sha256(prefix + struct.pack("<Q", nonce))) >= difficulty_bits:
            return nonce


def pow_select(miners: Sequence[MinerState], difficulty_bits: int, round_seed: int) -> int:
    if not miners:
        raise ConfigError("PoW needs at least one miner")
    if not 0 <= difficulty_bits <= 24:
        raise ConfigError("difficulty_bits must lie in [0, 24]")
    best = None
    for m in sorted(miners, key=lambda m: m.miner_id):
        tries = pow_attempts(m.miner_id, difficulty_bits, round_seed)
        if best is None or tries < best[0]:
            best = (tries, m.miner_id)
    return best[1]


def pos_select(miners: Sequence[MinerState], round: int) -> int:
    """Stake-weighted deterministic rotation.

    The round advances a cursor by the smallest positive stake, modulo the
    total stake; the winner owns the cumulative-stake interval the cursor
    lands in. Equal stakes reduce to round-robin. Exact rational arithmetic
    keeps the interval lookup free of float drift.
    """
    if not miners:
        raise ConfigError("PoS needs at least one miner")
    if any(m.stake < 0 for m in miners):
        raise ConfigError("stakes must be non-negative")
    stakes = [Fraction(m.stake) for m in miners]
    total = sum(stakes)
    if total <= 0:
        raise ConfigError("PoS needs a positive total stake")
    step = min(s for s in stakes if s > 0)
    cursor = (round * step) % total
    acc = Fraction(0)
    for m, s in zip(miners, stakes):
        acc += s
        if cursor < acc:
            return m.miner_id
    raise AssertionError("unreachable: cursor below total stake")


def pofl_select(
    pool_models: Sequence[np.ndarray], validation: Dataset, arch: Arch
) -> tuple[int, list[float]]:
    """Pool whose model scores highest on the shared validation set (lowest index on ties)."""
    if not pool_models:
        raise ArgumentError("PoFL needs at least one pool model")
    if len(validation) == 0:
        raise ArgumentError("empty validation set")
    accs = [evaluate_accuracy(Model(arch, p), validation) for p in pool_models]
    winner = max(range(len(accs)), key=lambda i: (accs[i], -i))
    return winner, accs


def verify_claim(
    params, claimed_accuracy: float, validation: Dataset, arch: Arch, tolerance: float = 1e-9
) -> bool:
    if tolerance >= 1.0:
        logger.warning("verify_claim with tolerance %s accepts every claim", tolerance)
    actual = evaluate_accuracy(Model(arch, params), validation)
    return abs(actual - claimed_accuracy) <= tolerance
