"""Passive NAM storage: multi-version record blocks addressed through a global dictionary.

A record block is a run of little-endian 64-bit words and fixed-width payloads::

    [lock:1 | cid:63] [payload] ([cid] [payload]) * (slots - 1)

The head slot carries the lock bit; older slots keep their CID in the low
63 bits with the top bit clear, newest first.  Storage nodes never run code:
every operation here is a handful of one-sided verbs issued by a client
:class:`~namdb.fabric.Session`.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field

from .fabric import Fabric, MemoryRegion, RemoteAddress, Session

LOCK_BIT = 1 << 63
CID_MASK = LOCK_BIT - 1
WORD = 8
SLOT_BUDGET = 16 * 1024


class StoreError(Exception):
    pass


class UnknownTable(StoreError, KeyError):
    pass


class StoreFull(StoreError):
    pass


def encode_header(lock: int, cid: int) -> int:
    if lock not in (0, 1):
        raise ValueError("lock must be 0 or 1")
    if not 0 <= cid <= CID_MASK:
        raise ValueError(f"cid {cid} does not fit in 63 bits")
    return (lock << 63) | cid


def decode_header(word: int) -> tuple[int, int]:
    return word >> 63, word & CID_MASK


def block_size(payload_width: int, slots: int = 1) -> int:
    """Bytes in a block holding ``slots`` versions of a ``payload_width``-byte record."""
    if slots < 1:
        raise ValueError("a block needs at least one slot")
    return WORD + payload_width + (slots - 1) * (WORD + payload_width)


def default_slots(record_size: int) -> int:
    """Slot count that keeps a block near 16KiB, never below two."""
    return max(SLOT_BUDGET // record_size, 2)


@dataclass
class RecordBlock:
    lock: int
    cid: int
    payload: bytes
    older: list[tuple[int, bytes]] = field(default_factory=list)

    @property
    def slots(self) -> int:
        return 1 + len(self.older)

    @property
    def header(self) -> int:
        return encode_header(self.lock, self.cid)

    def to_bytes(self) -> bytes:
        width = len(self.payload)
        parts = [self.header.to_bytes(WORD, "little"), self.payload]
        for cid, payload in self.older:
            if len(payload) != width:
                raise ValueError("all slots of a block share one payload width")
            parts.append((cid & CID_MASK).to_bytes(WORD, "little"))
            parts.append(payload)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes, payload_width: int, slots: int = 1) -> "RecordBlock":
        if len(data) != block_size(payload_width, slots):
            raise ValueError(f"expected {block_size(payload_width, slots)} bytes, got {len(data)}")
        lock, cid = decode_header(int.from_bytes(data[:WORD], "little"))
        payload = bytes(data[WORD:WORD + payload_width])
        older = []
        pos = WORD + payload_width
        for _ in range(slots - 1):
            older_cid = int.from_bytes(data[pos:pos + WORD], "little") & CID_MASK
            older.append((older_cid, bytes(data[pos + WORD:pos + WORD + payload_width])))
            pos += WORD + payload_width
        return cls(lock, cid, payload, older)

    @classmethod
    def fresh(cls, payload: bytes, cid: int, slots: int = 1) -> "RecordBlock":
        zero = bytes(len(payload))
        return cls(0, cid, bytes(payload), [(0, zero)] * (slots - 1))

    def installed(self, cid: int, payload: bytes) -> "RecordBlock":
        """New unlocked block with ``payload`` at the head and older versions shifted down."""
        if len(payload) != len(self.payload):
            raise ValueError("payload width mismatch")
        older = ([(self.cid, self.payload)] + self.older)[: len(self.older)]
        return RecordBlock(0, cid, bytes(payload), older)

    def version_at(self, rid: int) -> tuple[int, bytes] | None:
        """Newest version visible at ``rid``, or ``None`` if the block holds none.

        Older slots are only trusted while their CIDs strictly decrease and are
        non-zero, so zero-filled padding is never mistaken for a version.
        """
        if self.cid <= rid:
            return self.cid, self.payload
        newer = self.cid
        for cid, payload in self.older:
            if cid == 0 or cid >= newer:
                return None
            if cid <= rid:
                return cid, payload
            newer = cid
        return None


@dataclass
class TableInfo:
    name: str
    payload_width: int
    slots: int
    capacity: int
    regions: dict[int, MemoryRegion] = field(repr=False)
    counters: dict[int, RemoteAddress] = field(repr=False)

    @property
    def block_size(self) -> int:
        return block_size(self.payload_width, self.slots)


class GlobalDictionary:
    """Maps ``(table, key)`` to the remote address of its record block.

    Keys are partitioned ``key mod S`` over the ``S`` storage nodes with a dense
    per-node local index ``key // S``, so the mapping is deterministic and
    invertible: every local slot on every node corresponds to exactly one key.
    """

    def __init__(self, fabric: Fabric, storage_nodes):
        self.fabric = fabric
        self.storage_nodes = list(storage_nodes)
        if not self.storage_nodes:
            raise ValueError("need at least one storage node")
        self.tables: dict[str, TableInfo] = {}

    def create_table(self, name: str, payload_width: int, capacity: int, slots: int = 1) -> TableInfo:
        """Reserve ``capacity`` blocks per storage node plus a per-node allocation counter."""
        if name in self.tables:
            raise StoreError(f"table {name!r} exists")
        if payload_width <= 0 or capacity <= 0:
            raise ValueError("payload width and capacity must be positive")
        size = block_size(payload_width, slots)
        regions, counters = {}, {}
        for node in self.storage_nodes:
            counters[node] = self.fabric.register_region(node, WORD).address
            regions[node] = self.fabric.register_region(node, capacity * size)
        info = TableInfo(name, payload_width, slots, capacity, regions, counters)
        self.tables[name] = info
        return info

    def table(self, name: str) -> TableInfo:
        try:
            return self.tables[name]
        except KeyError:
            raise UnknownTable(name) from None

    def node_index(self, key: int) -> int:
        return key % len(self.storage_nodes)

    def node_of(self, key: int) -> int:
        return self.storage_nodes[self.node_index(key)]

    def key_for(self, node_index: int, local_index: int) -> int:
        return local_index * len(self.storage_nodes) + node_index

    def locate(self, table: str, key: int) -> RemoteAddress:
        info = self.table(table)
        if key < 0:
            raise StoreError(f"negative key {key}")
        local = key // len(self.storage_nodes)
        if local >= info.capacity:
            raise StoreError(f"key {key} outside the key space of table {table!r}")
        region = info.regions[self.node_of(key)]
        return RemoteAddress(region.node_id, region.base + local * info.block_size)


class Store:
    """Client-side access to record blocks; all state lives in fabric memory."""

    def __init__(self, dictionary: GlobalDictionary):
        self.dictionary = dictionary
        self._rr: dict[tuple[str, str], itertools.count] = {}
        self._rr_lock = threading.Lock()

    @property
    def fabric(self) -> Fabric:
        return self.dictionary.fabric

    def read_block(self, session: Session, table: str, key: int) -> RecordBlock:
        info = self.dictionary.table(table)
        data = session.read(self.dictionary.locate(table, key), info.block_size)
        return RecordBlock.from_bytes(data, info.payload_width, info.slots)

    def write_block(self, session: Session, table: str, key: int, block: RecordBlock,
                    signaled: bool = True) -> None:
        session.write(self.dictionary.locate(table, key), block.to_bytes(), signaled=signaled)

    def _next_node_index(self, session: Session, table: str) -> int:
        with self._rr_lock:
            counter = self._rr.setdefault((session.name, table), itertools.count())
            return next(counter) % len(self.dictionary.storage_nodes)

    def allocate(self, session: Session, table: str, node_index: int | None = None) -> int:
        """Reserve a fresh key on one storage node with a remote FETCH_ADD."""
        info = self.dictionary.table(table)
        if node_index is None:
            node_index = self._next_node_index(session, table)
        node = self.dictionary.storage_nodes[node_index]
        local = session.fetch_add(info.counters[node], 1)
        if local >= info.capacity:
            raise StoreFull(f"table {table!r} is full on node {node}")
        return self.dictionary.key_for(node_index, local)

    def insert_block(self, session: Session, table: str, payload: bytes, cid: int,
                     node_index: int | None = None, signaled: bool = True) -> int:
        info = self.dictionary.table(table)
        if len(payload) != info.payload_width:
            raise ValueError(f"payload must be {info.payload_width} bytes, got {len(payload)}")
        key = self.allocate(session, table, node_index)
        self.write_block(session, table, key, RecordBlock.fresh(payload, cid, info.slots), signaled)
        return key

    def load(self, session: Session, table: str, payloads, cid: int = 0) -> list[int]:
        """Insert records so that the i-th payload receives key ``i``."""
        n = len(self.dictionary.storage_nodes)
        return [self.insert_block(session, table, p, cid, node_index=i % n)
                for i, p in enumerate(payloads)]
