"""Privacy-preserving inductive graph expansion.

Clients upload keyed digests of the items they rated (only the ones not sent
before) together with their current user embedding. The server joins digests
across clients and hands each client, per digest, the embeddings of the other
uploaders. Neither plaintext item ids nor user ids reach the server: item ids
are replaced by HMAC digests and users by random pseudonyms.

Each round the server publishes an *embedding board*: the stored embeddings
in a freshly shuffled order. Mapping entries point at board slots, so a slot
index is a per-round anonymous tag that cannot be linked across rounds.
"""

from __future__ import annotations

import csv
import hashlib
import hmac
import logging
import secrets
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

logger = logging.getLogger(__name__)

DIGEST_BYTES = 16


class ProtocolError(Exception):
    """Raised when a participant sends or receives malformed protocol data."""


class EncryptedItemId(bytes):
    """Fixed-width keyed digest of an item id."""

    def __new__(cls, digest: bytes):
        if not isinstance(digest, bytes) or len(digest) != DIGEST_BYTES:
            raise ProtocolError("digest must be %d raw bytes" % DIGEST_BYTES)
        return super().__new__(cls, digest)

    @property
    def digest(self) -> bytes:
        return bytes(self)

    def __repr__(self) -> str:
        return f"EncryptedItemId({self.hex()[:12]}...)"


def new_shared_key(rng: np.random.Generator | None = None) -> bytes:
    """Key shared by the clients; the server only ever sees digests made with it."""
    if rng is None:
        return secrets.token_bytes(32)
    return rng.bytes(32)


def encrypt_item_ids(items: Iterable[int], key: bytes) -> set[EncryptedItemId]:
    """Deterministic keyed digest (HMAC-SHA256, truncated) of each item id."""
    return {_digest(int(i), key) for i in items}


def _digest(item: int, key: bytes) -> EncryptedItemId:
    mac = hmac.new(key, item.to_bytes(8, "little", signed=True), hashlib.sha256)
    return EncryptedItemId(mac.digest()[:DIGEST_BYTES])


@dataclass
class ExpansionUpload:
    client_tag: bytes
    new_encrypted_ids: list[EncryptedItemId]
    user_embedding: np.ndarray


class MappingDict:
    """Per-client answer from the server.

    ``neighbors[digest]`` holds board slot indices of the *other* clients
    that uploaded ``digest``; ``board`` is the round's shuffled embedding
    matrix. Slot indices are only meaningful within one round.
    """

    def __init__(self, holders: dict[EncryptedItemId, np.ndarray], board: np.ndarray, own_slot: int = -1):
        self._holders = holders
        self._own = own_slot
        self.board = board
        self._neighbors = None

    @property
    def neighbors(self) -> dict[EncryptedItemId, np.ndarray]:
        if self._neighbors is None:
            self._neighbors = {d: s[s != self._own] for d, s in self._holders.items()}
        return self._neighbors

    def embeddings(self, digest: EncryptedItemId) -> np.ndarray:
        return self.board[self.neighbors[digest]]

    def distinct_slots(self) -> np.ndarray:
        """Union of neighbor slots over all digests."""
        if not self._holders:
            return np.empty(0, dtype=np.int64)
        slots = np.unique(np.concatenate(list(self._holders.values())))
        return slots[slots != self._own]

    def __len__(self) -> int:
        return len(self._holders)


class ExpansionClient:
    """Client half of the protocol: remembers which digests it already sent."""

    def __init__(self, items: Iterable[int], key: bytes, tag: bytes):
        self.key = key
        self.tag = tag
        self._digest_of: dict[int, EncryptedItemId] = {}
        self._sent: set[EncryptedItemId] = set()
        self.uploaded_total = 0
        self.set_items(items)

    def set_items(self, items: Iterable[int]) -> None:
        for i in items:
            i = int(i)
            if i not in self._digest_of:
                self._digest_of[i] = _digest(i, self.key)

    @property
    def digests(self) -> set[EncryptedItemId]:
        return set(self._digest_of.values())

    def upload(self, embedding: np.ndarray) -> ExpansionUpload:
        delta = [d for d in self._digest_of.values() if d not in self._sent]
        self._sent.update(delta)
        self.uploaded_total += len(delta)
        return ExpansionUpload(self.tag, delta, np.array(embedding, dtype=np.float64, copy=True))


@dataclass
class ExpansionServer:
    """Server-side store. Keys are digests and pseudonyms only."""

    dim: int
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng())
    _holders: dict[EncryptedItemId, list[int]] = field(default_factory=dict)
    _digests_of: dict[int, list[EncryptedItemId]] = field(default_factory=dict)
    _tag_index: dict[bytes, int] = field(default_factory=dict)
    _embeddings: list[np.ndarray] = field(default_factory=list)
    _board: np.ndarray | None = None
    _slot_of: np.ndarray | None = None
    _holder_arrays: dict[EncryptedItemId, np.ndarray] = field(default_factory=dict)

    def receive(self, uploads: Iterable[ExpansionUpload]) -> None:
        for up in uploads:
            emb = np.asarray(up.user_embedding, dtype=np.float64)
            if emb.shape != (self.dim,):
                raise ProtocolError(f"embedding shape {emb.shape} != ({self.dim},)")
            idx = self._tag_index.get(up.client_tag)
            if idx is None:
                idx = len(self._embeddings)
                self._tag_index[up.client_tag] = idx
                self._embeddings.append(emb)
                self._digests_of[idx] = []
            else:
                self._embeddings[idx] = emb  # latest embedding wins
            known = set(self._digests_of[idx])
            for d in up.new_encrypted_ids:
                if d in known:
                    logger.warning("duplicate digest in upload delta ignored")
                    continue
                known.add(d)
                self._digests_of[idx].append(d)
                self._holders.setdefault(d, []).append(idx)
        self._board = None

    def publish(self) -> None:
        """Freeze this round's board with a new random slot order."""
        n = len(self._embeddings)
        perm = self.rng.permutation(n)
        self._slot_of = np.empty(n, dtype=np.int64)
        self._slot_of[perm] = np.arange(n)
        self._board = np.stack([self._embeddings[i] for i in perm]) if n else np.empty((0, self.dim))
        self._board.setflags(write=False)
        self._holder_arrays = {
            d: self._slot_of[np.asarray(h, dtype=np.int64)] for d, h in self._holders.items()
        }

    def mapping_for(self, client_tag: bytes) -> MappingDict:
        if self._board is None:
            self.publish()
        idx = self._tag_index.get(client_tag)
        if idx is None:
            return MappingDict({}, self._board)
        own = int(self._slot_of[idx])
        return MappingDict({d: self._holder_arrays[d] for d in self._digests_of[idx]}, self._board, own)

    def update_mapping(self, uploads: Iterable[ExpansionUpload]) -> dict[bytes, MappingDict]:
        """Ingest ``uploads``, publish a board, and answer every uploader."""
        uploads = list(uploads)
        self.receive(uploads)
        self.publish()
        return {up.client_tag: self.mapping_for(up.client_tag) for up in uploads}

    @property
    def stored_digest_count(self) -> int:
        return len(self._holders)

    def contents(self) -> dict:
        """Everything the server holds, for inspection."""
        return {
            "digests": list(self._holders),
            "pseudonyms": list(self._tag_index),
            "embeddings": list(self._embeddings),
        }

    def dump_histogram(self, path) -> None:
        """Write ``digest_hex,holders`` rows (debug aid)."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["digest", "holders"])
            for d, h in sorted(self._holders.items(), key=lambda kv: bytes(kv[0])):
                w.writerow([d.hex(), len(h)])


def server_update_mapping(server: ExpansionServer, uploads: Iterable[ExpansionUpload]) -> dict[bytes, MappingDict]:
    return server.update_mapping(uploads)


def neighbor_slots(mapping: MappingDict, cap: int | None = None, rng: np.random.Generator | None = None) -> np.ndarray:
    """Distinct board slots across all digests, optionally subsampled to ``cap``."""
    slots = mapping.distinct_slots()
    if cap is not None and len(slots) > cap:
        if rng is None:
            raise ValueError("subsampling neighbors needs an rng")
        slots = np.sort(rng.choice(slots, size=cap, replace=False))
    return slots


def expand_subgraph(local, mapping: MappingDict, cap: int | None = None, rng: np.random.Generator | None = None):
    """Return ``local`` with neighbor-user nodes from ``mapping`` attached.

    A neighbor co-rating several items is added once. ``local`` is any object
    exposing ``with_neighbors(embeddings)`` and ``dim`` (see ``model.LocalSubgraph``).
    """
    if mapping.board.ndim != 2 or (mapping.board.size and mapping.board.shape[1] != local.dim):
        raise ProtocolError(f"neighbor embeddings must have length {local.dim}")
    slots = neighbor_slots(mapping, cap, rng)
    if len(slots) == 0:
        return local
    return local.with_neighbors(np.array(mapping.board[slots]))
