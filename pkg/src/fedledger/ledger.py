"""Append-only hash-chained record of global-model updates.

One orderer appends blocks; a block is only ordered after every peer named by
the endorsement policy has re-run the aggregation itself and arrived at the
same parameter digest the server claims. The chain is stored as JSON Lines,
one block per line, digests as lowercase hex.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .aggregation import ClientUpdate, ServerState, StrategyConfig, StrategyKind, aggregate
from .params import ParameterSet, digest, encode_text, encode_u64

ZERO_HASH = bytes(32)


class ProposalRejected(RuntimeError):
    """The orderer refused to append a proposal."""


class LedgerFormatError(ValueError):
    pass


@dataclass(frozen=True)
class LedgerConfig:
    peer_count: int = 2
    endorsement_policy: int | None = None  # required endorsements; None means all peers

    def __post_init__(self) -> None:
        if self.peer_count < 1:
            raise ValueError("peer_count must be >= 1")
        if self.endorsement_policy is not None and not 1 <= self.endorsement_policy <= self.peer_count:
            raise ValueError("endorsement_policy must lie in [1, peer_count]")

    @property
    def required(self) -> int:
        return self.peer_count if self.endorsement_policy is None else self.endorsement_policy

    @property
    def peer_ids(self) -> list[str]:
        return [f"peer{i}" for i in range(self.peer_count)]


@dataclass(frozen=True)
class Block:
    index: int
    prev_hash: bytes
    round: int
    strategy_kind: str
    params_digest: bytes
    update_digests: tuple[tuple[int, bytes], ...]
    endorsements: tuple[tuple[str, bytes], ...]
    timestamp: int
    block_hash: bytes

    def header_bytes(self) -> bytes:
        return encode_block_fields(self.index, self.prev_hash, self.round, self.strategy_kind,
                                   self.params_digest, self.update_digests, self.endorsements,
                                   self.timestamp)

    def compute_hash(self) -> bytes:
        return hashlib.sha256(self.header_bytes()).digest()

    def to_json(self) -> dict:
        return {
            "index": self.index,
            "prev_hash": self.prev_hash.hex(),
            "round": self.round,
            "strategy_kind": self.strategy_kind,
            "params_digest": self.params_digest.hex(),
            "update_digests": [{"client_id": c, "digest": d.hex()} for c, d in self.update_digests],
            "endorsements": [{"peer_id": p, "digest": d.hex()} for p, d in self.endorsements],
            "timestamp": self.timestamp,
            "block_hash": self.block_hash.hex(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Block":
        try:
            return cls(
                index=_int(obj["index"]),
                prev_hash=_hex32(obj["prev_hash"]),
                round=_int(obj["round"]),
                strategy_kind=str(obj["strategy_kind"]),
                params_digest=_hex32(obj["params_digest"]),
                update_digests=tuple((_int(u["client_id"]), _hex32(u["digest"]))
                                     for u in obj["update_digests"]),
                endorsements=tuple((str(e["peer_id"]), _hex32(e["digest"])) for e in obj["endorsements"]),
                timestamp=_int(obj["timestamp"]),
                block_hash=_hex32(obj["block_hash"]),
            )
        except (KeyError, TypeError) as exc:
            raise LedgerFormatError(f"missing or malformed block field: {exc}") from None


def _int(value) -> int:
    if not isinstance(value, int) or isinstance(value, bool) or value < 0:
        raise LedgerFormatError(f"expected non-negative integer, got {value!r}")
    return value


def _hex32(text) -> bytes:
    if not isinstance(text, str) or len(text) != 64 or text != text.lower():
        raise LedgerFormatError(f"expected 64 lowercase hex characters, got {text!r}")
    try:
        return bytes.fromhex(text)
    except ValueError:
        raise LedgerFormatError(f"invalid hex digest {text!r}") from None


def encode_block_fields(index: int, prev_hash: bytes, round: int, strategy_kind: str,
                        params_digest: bytes, update_digests: Sequence[tuple[int, bytes]],
                        endorsements: Sequence[tuple[str, bytes]], timestamp: int) -> bytes:
    parts = [encode_u64(index), prev_hash, encode_u64(round), encode_text(strategy_kind),
             params_digest, encode_u64(len(update_digests))]
    for client_id, d in update_digests:
        parts += [encode_u64(client_id), d]
    parts.append(encode_u64(len(endorsements)))
    for peer_id, d in endorsements:
        parts += [encode_text(peer_id), d]
    parts.append(encode_u64(timestamp))
    return b"".join(parts)


def make_block(index: int, prev_hash: bytes, round: int, strategy_kind: str, params_digest: bytes,
               update_digests: Iterable[tuple[int, bytes]], endorsements: Iterable[tuple[str, bytes]],
               timestamp: int) -> Block:
    update_digests = tuple(update_digests)
    endorsements = tuple(endorsements)
    raw = encode_block_fields(index, prev_hash, round, strategy_kind, params_digest,
                              update_digests, endorsements, timestamp)
    return Block(index, prev_hash, round, strategy_kind, params_digest, update_digests,
                 endorsements, timestamp, hashlib.sha256(raw).digest())


class LogicalClock:
    """Deterministic millisecond clock: ``start``, ``start + step``, ..."""

    def __init__(self, start: int = 0, step: int = 1):
        self._next = start
        self._step = step

    def __call__(self) -> int:
        now = self._next
        self._next += self._step
        return now


def wall_clock() -> int:
    return time.time_ns() // 1_000_000


@dataclass(frozen=True)
class Proposal:
    round: int
    strategy_kind: str
    update_digests: tuple[tuple[int, bytes], ...]
    claimed_digest: bytes
    prior_global_digest: bytes
    strategy_config: dict


@dataclass(frozen=True)
class Endorsement:
    peer_id: str
    digest: bytes


@dataclass(frozen=True)
class Refusal:
    peer_id: str
    reason: str


def update_digest_list(updates: Sequence[ClientUpdate]) -> tuple[tuple[int, bytes], ...]:
    return tuple((u.client_id, digest(u.params)) for u in sorted(updates, key=lambda u: u.client_id))


def propose(round: int, strategy_kind: StrategyKind | str, updates: Sequence[ClientUpdate],
            claimed_global: ParameterSet, strategy_config: StrategyConfig,
            server_state_before: ServerState) -> Proposal:
    if not updates:
        raise ValueError("a proposal needs at least one client update")
    return Proposal(
        round=round,
        strategy_kind=StrategyKind.parse(strategy_kind).value,
        update_digests=update_digest_list(updates),
        claimed_digest=digest(claimed_global),
        prior_global_digest=digest(server_state_before.global_params),
        strategy_config=strategy_config.to_dict(),
    )


def endorse(peer_id: str, proposal: Proposal, updates: Sequence[ClientUpdate],
            server_state_before: ServerState, strategy_config: StrategyConfig) -> Endorsement | Refusal:
    """Re-run the aggregation and endorse only if it reproduces the claimed digest."""
    if update_digest_list(updates) != proposal.update_digests:
        return Refusal(peer_id, "client update digests differ from proposal")
    if digest(server_state_before.global_params) != proposal.prior_global_digest:
        return Refusal(peer_id, "prior global digest differs from proposal")
    if strategy_config.to_dict() != proposal.strategy_config:
        return Refusal(peer_id, "strategy configuration differs from proposal")
    try:
        result = aggregate(proposal.strategy_kind, server_state_before, updates, strategy_config)
    except ValueError as exc:
        return Refusal(peer_id, f"aggregation failed: {exc}")
    recomputed = digest(result.global_params)
    if recomputed != proposal.claimed_digest:
        return Refusal(peer_id, f"recomputed digest {recomputed.hex()[:16]} != claimed "
                                f"{proposal.claimed_digest.hex()[:16]}")
    return Endorsement(peer_id, recomputed)


@dataclass(frozen=True)
class VerificationReport:
    valid: bool
    length: int
    first_bad_index: int | None = None
    reason: str = ""

    def __str__(self) -> str:
        if self.valid:
            return f"valid, {self.length} blocks"
        return f"invalid at index {self.first_bad_index}: {self.reason}"


def verify_chain(chain: Sequence[Block]) -> VerificationReport:
    """Recompute hashes and linkage; report the first broken block."""
    prev_hash, prev_round = ZERO_HASH, None
    for pos, block in enumerate(chain):
        if block.index != pos:
            return VerificationReport(False, len(chain), pos, f"index {block.index} at position {pos}")
        if block.prev_hash != prev_hash:
            return VerificationReport(False, len(chain), pos, "prev_hash mismatch")
        if block.compute_hash() != block.block_hash:
            return VerificationReport(False, len(chain), pos, "hash mismatch")
        expected_round_ok = block.round == 0 if prev_round is None else block.round > prev_round
        if not expected_round_ok:
            return VerificationReport(False, len(chain), pos, f"round {block.round} not increasing")
        if not block.endorsements or any(d != block.params_digest for _, d in block.endorsements):
            return VerificationReport(False, len(chain), pos, "endorsements disagree with params digest")
        prev_hash, prev_round = block.block_hash, block.round
    return VerificationReport(True, len(chain))


@dataclass
class Ledger:
    """In-process chain with a single orderer and a fixed set of peers."""

    config: LedgerConfig = field(default_factory=LedgerConfig)
    clock: Callable[[], int] = field(default_factory=LogicalClock)
    blocks: list[Block] = field(default_factory=list)

    def __post_init__(self) -> None:
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.blocks)

    @property
    def head(self) -> Block:
        return self.blocks[-1]

    def snapshot(self) -> tuple[Block, ...]:
        with self._lock:
            return tuple(self.blocks)

    def genesis(self, initial_params: ParameterSet, strategy_kind: str = "") -> Block:
        with self._lock:
            if self.blocks:
                raise ProposalRejected("ledger already has a genesis block")
            block = genesis(initial_params, self.config, self.clock(), strategy_kind)
            self.blocks.append(block)
            return block

    def endorse_all(self, proposal: Proposal, updates, server_state_before, strategy_config):
        return [endorse(peer, proposal, updates, server_state_before, strategy_config)
                for peer in self.config.peer_ids]

    def order_and_append(self, proposal: Proposal, endorsements) -> Block:
        with self._lock:
            block = order_and_append(self.blocks, proposal, endorsements, self.config, self.clock())
            self.blocks.append(block)
            return block

    def verify(self) -> VerificationReport:
        return verify_chain(self.snapshot())

    def save(self, path: str | Path) -> None:
        write_jsonl(self.snapshot(), path)


def genesis(initial_params: ParameterSet, config: LedgerConfig | None = None, timestamp: int = 0,
            strategy_kind: str = "") -> Block:
    config = config or LedgerConfig()
    d = digest(initial_params)
    # every peer digests the proposed initial parameters independently
    endorsements = [(peer, digest(initial_params)) for peer in config.peer_ids]
    return make_block(0, ZERO_HASH, 0, strategy_kind, d, (), endorsements, timestamp)


def order_and_append(chain: Sequence[Block], proposal: Proposal,
                     endorsements: Sequence[Endorsement | Refusal],
                     policy: LedgerConfig, timestamp: int) -> Block:
    """Build the next block for ``chain``; raises :class:`ProposalRejected`."""
    if not chain:
        raise ProposalRejected("chain has no genesis block")
    granted = [e for e in endorsements if isinstance(e, Endorsement)]
    refused = [e for e in endorsements if isinstance(e, Refusal)]
    peers = [e.peer_id for e in granted]
    if len(set(peers)) != len(peers) or not set(peers) <= set(policy.peer_ids):
        raise ProposalRejected(f"endorsements from unknown or repeated peers: {peers}")
    if len(granted) < policy.required:
        detail = "; ".join(f"{r.peer_id}: {r.reason}" for r in refused)
        raise ProposalRejected(
            f"round {proposal.round}: {len(granted)} of {policy.required} required endorsements"
            + (f" ({detail})" if detail else "")
        )
    if any(e.digest != proposal.claimed_digest for e in granted):
        raise ProposalRejected(f"round {proposal.round}: endorsement digests disagree")
    last = chain[-1]
    if proposal.round <= last.round:
        raise ProposalRejected(f"round {proposal.round} does not follow round {last.round}")
    return make_block(
        index=last.index + 1,
        prev_hash=last.block_hash,
        round=proposal.round,
        strategy_kind=proposal.strategy_kind,
        params_digest=proposal.claimed_digest,
        update_digests=proposal.update_digests,
        endorsements=sorted((e.peer_id, e.digest) for e in granted),
        timestamp=timestamp,
    )


def write_jsonl(chain: Iterable[Block], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for block in chain:
            fh.write(json.dumps(block.to_json(), separators=(",", ":")) + "\n")


def read_jsonl(path: str | Path) -> list[Block]:
    blocks = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise LedgerFormatError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            try:
                blocks.append(Block.from_json(obj))
            except LedgerFormatError as exc:
                raise LedgerFormatError(f"line {lineno}: {exc}") from None
    return blocks


def verify_file(path: str | Path) -> VerificationReport:
    """Verify a JSON Lines ledger; an unreadable line is reported as the bad block."""
    blocks = []
    with open(path, encoding="utf-8") as fh:
        lines = [line for line in fh if line.strip()]
    for pos, line in enumerate(lines):
        try:
            blocks.append(Block.from_json(json.loads(line)))
        except (json.JSONDecodeError, LedgerFormatError) as exc:
            earlier = verify_chain(blocks)
            if not earlier.valid:
                return VerificationReport(False, len(lines), earlier.first_bad_index, earlier.reason)
            return VerificationReport(False, len(lines), pos, f"malformed block: {exc}")
    return verify_chain(blocks)
