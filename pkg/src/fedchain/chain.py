"""Permissioned ledger: model-update contract, endorsement, blocks, storage.

All hashed structures use one canonical encoding: fields in declaration
order, integers as 8-byte little-endian, byte strings and text prefixed
with their 8-byte little-endian length.  Hashes are SHA-256, signatures
Ed25519 (deterministic, so identical inputs give identical bytes).
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from .nn import BlobDecodeError, decode_blob

GENESIS_PREV = bytes(32)
VALID = "VALID"


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


class MalformedUpdateError(ValueError):
    pass


class EndorsementRefused(Exception):
    def __init__(self, peer_id: str, reason: str, detail: str = ""):
        super().__init__(f"{peer_id} refused: {reason}" + (f" ({detail})" if detail else ""))
        self.peer_id = peer_id
        self.reason = reason


class PolicyUnsatisfied(Exception):
    def __init__(self, have: int, need: int, refusals: list[str]):
        super().__init__(f"endorsement policy needs {need}, got {have}; "
                         f"refusals: {'; '.join(refusals) or 'none'}")
        self.have = have
        self.need = need
        self.refusals = refusals


class BlockRejected(Exception):
    pass


class DecodeError(ValueError):
    pass


# -- canonical encoding -----------------------------------------------------

def _int(n: int) -> bytes:
    return struct.pack("<q", n)


def _bytes(b: bytes) -> bytes:
    return struct.pack("<Q", len(b)) + b


def _str(s: str) -> bytes:
    return _bytes(s.encode("utf-8"))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DecodeError(f"truncated input at offset {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def int(self) -> int:
        return struct.unpack("<q", self.take(8))[0]

    def float(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def bytes(self) -> bytes:
        return self.take(struct.unpack("<Q", self.take(8))[0])

    def str(self) -> str:
        return self.bytes().decode("utf-8")


# -- identities ---------------------------------------------------------------

class KeyPair:
    """Ed25519 keypair derived deterministically from (seed, node_id)."""

    def __init__(self, node_id: str, seed: int):
        self.node_id = node_id
        secret = sha256(f"fedchain-key/{seed}/{node_id}".encode())
        self._private = Ed25519PrivateKey.from_private_bytes(secret)
        self.public = self._private.public_key()

    def sign(self, data: bytes) -> bytes:
        return self._private.sign(data)

    @property
    def public_bytes(self) -> bytes:
        return self.public.public_bytes(serialization.Encoding.Raw,
                                        serialization.PublicFormat.Raw)


class Registry:
    """Membership: node id -> public key, split by role."""

    def __init__(self):
        self.clients: dict[str, Ed25519PublicKey] = {}
        self.peers: dict[str, Ed25519PublicKey] = {}

    def add_client(self, key: KeyPair):
        self.clients[key.node_id] = key.public

    def add_peer(self, key: KeyPair):
        self.peers[key.node_id] = key.public

    @staticmethod
    def _check(keys, node_id, sig, data) -> bool:
        pub = keys.get(node_id)
        if pub is None:
            return False
        try:
            pub.verify(sig, data)
        except InvalidSignature:
            return False
        return True

    def client_signed(self, node_id, sig, data) -> bool:
        return self._check(self.clients, node_id, sig, data)

    def peer_signed(self, node_id, sig, data) -> bool:
        return self._check(self.peers, node_id, sig, data)


# -- ledger payloads ----------------------------------------------------------

@dataclass(frozen=True)
class ModelUpdate:
    federated_id: str
    detector_id: str
    round_number: int
    model_parameters: bytes

    def __post_init__(self):
        if self.round_number < 1:
            raise ValueError("round_number must be >= 1")

    def encode(self) -> bytes:
        return (_str(self.federated_id) + _str(self.detector_id)
                + _int(self.round_number) + _bytes(self.model_parameters))

    @classmethod
    def read(cls, r: _Reader) -> "ModelUpdate":
        return cls(r.str(), r.str(), r.int(), r.bytes())

    @cached_property
    def digest(self) -> bytes:
        return sha256(self.encode())

    @property
    def key(self) -> tuple[str, str, int]:
        return self.federated_id, self.detector_id, self.round_number


@dataclass(frozen=True)
class Proposal:
    client_id: str
    update: ModelUpdate
    signature: bytes

    @property
    def digest(self) -> bytes:
        return self.update.digest

    def encode(self) -> bytes:
        return _str(self.client_id) + _bytes(self.update.encode()) + _bytes(self.signature)

    @classmethod
    def read(cls, r: _Reader) -> "Proposal":
        client = r.str()
        update = ModelUpdate.read(_Reader(r.bytes()))
        return cls(client, update, r.bytes())


@dataclass(frozen=True)
class Endorsement:
    peer_id: str
    proposal_digest: bytes
    signature: bytes

    def encode(self) -> bytes:
        return _str(self.peer_id) + _bytes(self.proposal_digest) + _bytes(self.signature)

    @classmethod
    def read(cls, r: _Reader) -> "Endorsement":
        return cls(r.str(), r.bytes(), r.bytes())


def endorsed_digest(proposal: Proposal, endorsements) -> bytes:
    body = proposal.encode() + _int(len(endorsements))
    for e in endorsements:
        body += e.encode()
    return sha256(body)


@dataclass(frozen=True)
class Transaction:
    proposal: Proposal
    endorsements: tuple[Endorsement, ...]
    signature: bytes

    def encode(self) -> bytes:
        body = _bytes(self.proposal.encode()) + _int(len(self.endorsements))
        for e in self.endorsements:
            body += _bytes(e.encode())
        return body + _bytes(self.signature)

    @classmethod
    def read(cls, r: _Reader) -> "Transaction":
        proposal = Proposal.read(_Reader(r.bytes()))
        ends = tuple(Endorsement.read(_Reader(r.bytes())) for _ in range(r.int()))
        return cls(proposal, ends, r.bytes())

    @cached_property
    def txid(self) -> str:
        return sha256(self.encode()).hex()

    @property
    def update(self) -> ModelUpdate:
        return self.proposal.update


@dataclass(frozen=True)
class Block:
    height: int
    prev_hash: bytes
    txs: tuple[Transaction, ...]
    timestamp: float
    block_hash: bytes

    def content(self) -> bytes:
        return block_content(self.height, self.prev_hash, self.txs, self.timestamp)

    def encode(self) -> bytes:
        return self.content() + _bytes(self.block_hash)

    @classmethod
    def decode(cls, data: bytes) -> "Block":
        r = _Reader(data)
        height = r.int()
        prev = r.bytes()
        ts = r.float()
        txs = tuple(Transaction.read(_Reader(r.bytes())) for _ in range(r.int()))
        bh = r.bytes()
        if r.pos != len(data):
            raise DecodeError(f"trailing bytes at offset {r.pos}")
        return cls(height, prev, txs, ts, bh)


def block_content(height, prev_hash, txs, timestamp) -> bytes:
    body = _int(height) + _bytes(prev_hash) + struct.pack("<d", timestamp) + _int(len(txs))
    for tx in txs:
        body += _bytes(tx.encode())
    return body


def make_block(height: int, prev_hash: bytes, txs, timestamp: float) -> Block:
    txs = tuple(txs)
    return Block(height, prev_hash, txs, float(timestamp),
                 sha256(block_content(height, prev_hash, txs, float(timestamp))))


def genesis_block() -> Block:
    return make_block(0, GENESIS_PREV, (), 0.0)


# -- client side --------------------------------------------------------------

def build_proposal(client_id: str, update: ModelUpdate, key: KeyPair) -> Proposal:
    try:
        decode_blob(update.model_parameters)
    except BlobDecodeError as exc:
        raise MalformedUpdateError(str(exc)) from None
    return Proposal(client_id, update, key.sign(update.digest))


def assemble_tx(proposal: Proposal, endorsements, threshold: int, key: KeyPair,
                registry: Registry) -> Transaction:
    """Keep endorsements that verify, from distinct peers; sign if policy holds."""
    kept: dict[str, Endorsement] = {}
    refusals = []
    for e in endorsements:
        if isinstance(e, EndorsementRefused):
            refusals.append(f"{e.peer_id}: {e.reason}")
            continue
        if e.proposal_digest != proposal.digest:
            refusals.append(f"{e.peer_id}: digest mismatch")
        elif not registry.peer_signed(e.peer_id, e.signature, e.proposal_digest):
            refusals.append(f"{e.peer_id}: bad signature")
        elif e.peer_id not in kept:
            kept[e.peer_id] = e
    if len(kept) < threshold:
        raise PolicyUnsatisfied(len(kept), threshold, refusals)
    ends = tuple(kept[p] for p in sorted(kept))
    return Transaction(proposal, ends, key.sign(endorsed_digest(proposal, ends)))


# -- peer side ------------------------------------------------------------------

@dataclass
class Ledger:
    blocks: list[Block] = field(default_factory=lambda: [genesis_block()])
    codes: list[tuple[str, ...]] = field(default_factory=lambda: [()])
    world_state: dict[tuple[str, str], ModelUpdate] = field(default_factory=dict)
    rounds: dict[tuple[str, int], list[ModelUpdate]] = field(default_factory=dict)

    @property
    def tip(self) -> Block:
        return self.blocks[-1]

    @property
    def height(self) -> int:
        return self.tip.height

    def latest_round(self, federated_id: str, detector_id: str) -> int:
        u = self.world_state.get((federated_id, detector_id))
        return u.round_number if u else 0

    def _apply(self, block: Block, codes: tuple[str, ...]):
        self.blocks.append(block)
        self.codes.append(codes)
        for tx, code in zip(block.txs, codes):
            if code == VALID:
                u = tx.update
                self.world_state[(u.federated_id, u.detector_id)] = u
                self.rounds.setdefault((u.federated_id, u.round_number), []).append(u)

    def export(self, directory) -> None:
        """One canonical binary file per block plus ``index.json``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        index = []
        for block, codes in zip(self.blocks, self.codes):
            (d / f"block_{block.height:06d}.bin").write_bytes(block.encode())
            index.append({"height": block.height, "hash": block.block_hash.hex(),
                          "tx_count": len(block.txs), "codes": list(codes),
                          "committed": [c == VALID for c in codes]})
        (d / "index.json").write_text(json.dumps({"blocks": index}, indent=1) + "\n")

    @classmethod
    def load(cls, directory) -> "Ledger":
        """Rebuild from an export without re-validating (use ``verify_chain``)."""
        d = Path(directory)
        index = json.loads((d / "index.json").read_text())["blocks"]
        ledger = cls(blocks=[], codes=[])
        for entry in index:
            block = Block.decode((d / f"block_{entry['height']:06d}.bin").read_bytes())
            ledger._apply(block, tuple(entry["codes"]))
        return ledger

    def fingerprint(self) -> bytes:
        """Digest of blocks and validation codes; equal across consistent peers."""
        h = hashlib.sha256()
        for block, codes in zip(self.blocks, self.codes):
            h.update(block.block_hash)
            h.update(",".join(codes).encode())
        return h.digest()


def first_bad_height(ledger: Ledger) -> int | None:
    prev = None
    for pos, block in enumerate(ledger.blocks):
        if block.height != pos:
            return pos
        if block.block_hash != sha256(block.content()):
            return pos
        expected_prev = GENESIS_PREV if prev is None else prev.block_hash
        if block.prev_hash != expected_prev:
            return pos
        prev = block
    return None


def verify_chain(ledger: Ledger) -> bool:
    return first_bad_height(ledger) is None


def get_round_updates(ledger: Ledger, federated_id: str, round_number: int) -> list[ModelUpdate]:
    return sorted(ledger.rounds.get((federated_id, round_number), []),
                  key=lambda u: u.detector_id)


def get_latest(ledger: Ledger, federated_id: str, detector_id: str) -> ModelUpdate | None:
    return ledger.world_state.get((federated_id, detector_id))


class Peer:
    """Endorsing and committing peer holding one copy of the ledger."""

    def __init__(self, key: KeyPair, registry: Registry, threshold: int):
        self.key = key
        self.peer_id = key.node_id
        self.registry = registry
        self.threshold = threshold
        self.ledger = Ledger()

    def _round_code(self, update: ModelUpdate, latest: int) -> str:
        if update.round_number <= latest:
            return "duplicate-round"
        if update.round_number > latest + 1:
            return "round-gap"
        return VALID

    def _check_proposal(self, p: Proposal, latest_of) -> str:
        if p.update.detector_id != p.client_id:
            return "identity-mismatch"
        if not self.registry.client_signed(p.client_id, p.signature, p.digest):
            return "bad-signature"
        try:
            decode_blob(p.update.model_parameters)
        except BlobDecodeError:
            return "malformed-update"
        u = p.update
        return self._round_code(u, latest_of(u.federated_id, u.detector_id))

    def endorse(self, proposal: Proposal) -> Endorsement:
        reason = self._check_proposal(proposal, self.ledger.latest_round)
        if reason != VALID:
            raise EndorsementRefused(self.peer_id, reason)
        return Endorsement(self.peer_id, proposal.digest, self.key.sign(proposal.digest))

    def _validate_tx(self, tx: Transaction, latest_of) -> str:
        p = tx.proposal
        if not self.registry.client_signed(p.client_id, tx.signature,
                                           endorsed_digest(p, tx.endorsements)):
            return "bad-tx-signature"
        good = {e.peer_id for e in tx.endorsements
                if e.proposal_digest == p.digest
                and self.registry.peer_signed(e.peer_id, e.signature, e.proposal_digest)}
        if len(good) < self.threshold:
            return "endorsement-policy-failure"
        return self._check_proposal(p, latest_of)

    def validate_and_commit(self, block: Block) -> tuple[str, ...]:
        """Re-check every transaction and append the block.

        Invalid transactions stay in the block and are flagged.  Raises
        ``BlockRejected`` if the block does not extend this peer's chain.
        """
        tip = self.ledger.tip
        if block.height != tip.height + 1 or block.prev_hash != tip.block_hash:
            raise BlockRejected(f"{self.peer_id}: block {block.height} does not extend "
                                f"tip {tip.height}")
        if block.block_hash != sha256(block.content()):
            raise BlockRejected(f"{self.peer_id}: block {block.height} hash mismatch")
        pending: dict[tuple[str, str], int] = {}

        def latest_of(fed, det):
            return pending.get((fed, det), self.ledger.latest_round(fed, det))

        codes = []
        for tx in block.txs:
            code = self._validate_tx(tx, latest_of)
            if code == VALID:
                u = tx.update
                pending[(u.federated_id, u.detector_id)] = u.round_number
            codes.append(code)
        codes = tuple(codes)
        self.ledger._apply(block, codes)
        return codes
