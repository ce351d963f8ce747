import itertools
import threading

import pytest
from hypothesis import given, strategies as st

from namdb.fabric import Fabric, Session, Verb
from namdb.store import (
    LOCK_BIT,
    GlobalDictionary,
    RecordBlock,
    Store,
    StoreError,
    StoreFull,
    UnknownTable,
    block_size,
    decode_header,
    default_slots,
    encode_header,
)


def test_header_examples():
    assert encode_header(0, 20003) == 20003
    assert encode_header(1, 24401) == 2 ** 63 + 24401
    assert encode_header(0, 0) == 0
    with pytest.raises(ValueError):
        encode_header(0, 2 ** 63)
    with pytest.raises(ValueError):
        encode_header(2, 1)


@given(st.integers(0, 1), st.integers(0, 2 ** 63 - 1))
def test_header_round_trip(lock, cid):
    assert decode_header(encode_header(lock, cid)) == (lock, cid)


def test_block_size_formula():
    assert block_size(1024) == 8 + 1024
    assert block_size(1024, 3) == 8 + 1024 + 2 * (8 + 1024)
    assert default_slots(1024) == 16
    assert default_slots(16 * 1024) == 2
    with pytest.raises(ValueError):
        block_size(8, 0)


@given(st.integers(1, 64), st.integers(1, 5), st.data())
def test_block_round_trip(width, slots, data):
    cids = sorted(data.draw(st.lists(st.integers(1, 2 ** 63 - 1), min_size=slots, max_size=slots,
                                     unique=True)), reverse=True)
    payloads = [data.draw(st.binary(min_size=width, max_size=width)) for _ in range(slots)]
    block = RecordBlock(data.draw(st.integers(0, 1)), cids[0], payloads[0], list(zip(cids[1:], payloads[1:])))
    raw = block.to_bytes()
    assert len(raw) == block_size(width, slots)
    assert RecordBlock.from_bytes(raw, width, slots) == block
    assert RecordBlock.from_bytes(raw, width, slots).to_bytes() == raw


def test_install_shifts_versions():
    block = RecordBlock.fresh(b"a" * 4, 20003, slots=3)
    newer = block.installed(30000, b"b" * 4)
    assert (newer.lock, newer.cid, newer.payload) == (0, 30000, b"bbbb")
    assert newer.older == [(20003, b"aaaa"), (0, bytes(4))]
    assert newer.version_at(30000) == (30000, b"bbbb")
    assert newer.version_at(25000) == (20003, b"aaaa")
    assert newer.version_at(100) is None
    single = RecordBlock.fresh(b"a" * 4, 20003).installed(30000, b"b" * 4)
    assert single.older == [] and single.version_at(20003) is None


def _store(nodes=3, capacity=16, width=32, slots=1):
    fabric = Fabric()
    d = GlobalDictionary(fabric, range(nodes))
    d.create_table("t", width, capacity, slots)
    return fabric, Store(d)


def test_locate_partitioning():
    _, store = _store(nodes=3, capacity=4)
    d = store.dictionary
    per_node = {}
    for key in range(9):
        per_node.setdefault(d.node_of(key), []).append(key)
    assert sorted(len(v) for v in per_node.values()) == [3, 3, 3]
    assert d.locate("t", 7) == d.locate("t", 7)
    with pytest.raises(UnknownTable):
        d.locate("missing", 0)
    with pytest.raises(StoreError):
        d.locate("t", 12)


def test_addresses_disjoint():
    _, store = _store(nodes=3, capacity=3334, width=8)
    d = store.dictionary
    size = d.table("t").block_size
    addrs = sorted((a.node_id, a.offset) for a in (d.locate("t", k) for k in range(10_000)))
    for (n0, o0), (n1, o1) in zip(addrs, addrs[1:]):
        assert n0 != n1 or o1 - o0 >= size


def test_insert_and_read_block_verbs():
    fabric, store = _store()
    s = Session(fabric, 50)
    key = store.insert_block(s, "t", b"p" * 32, 20003)
    assert fabric.metrics.verb_count(Verb.FETCH_ADD) == 1
    assert fabric.metrics.verb_count(Verb.WRITE) == 1
    before = fabric.metrics.counters(50).bytes_received
    block = store.read_block(s, "t", key)
    assert fabric.metrics.verb_count(Verb.READ) == 1
    assert fabric.metrics.counters(50).bytes_received - before == block_size(32)
    assert (block.lock, block.cid, block.payload) == (0, 20003, b"p" * 32)
    assert fabric.metrics.server_cycles(range(3)) == 0


def test_locked_header_surfaces():
    fabric, store = _store()
    s = Session(fabric, 50)
    key = store.insert_block(s, "t", bytes(32), 5)
    s.cas(store.dictionary.locate("t", key), 5, LOCK_BIT | 5)
    assert store.read_block(s, "t", key).lock == 1


def test_load_assigns_dense_keys():
    fabric, store = _store(nodes=3)
    keys = store.load(Session(fabric, 50), "t", [bytes([i]) * 32 for i in range(10)])
    assert keys == list(range(10))
    s = Session(fabric, 51)
    assert all(store.read_block(s, "t", k).payload == bytes([k]) * 32 for k in keys)


def test_concurrent_inserts_distinct():
    fabric, store = _store(nodes=2, capacity=400)
    got = []
    lock = threading.Lock()

    def work(i):
        s = Session(fabric, 100 + i)
        mine = [store.insert_block(s, "t", bytes([i]) * 32, 1) for _ in range(100)]
        with lock:
            got.extend(mine)

    threads = [threading.Thread(target=work, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(set(got)) == 400
    addrs = {store.dictionary.locate("t", k) for k in got}
    assert len(addrs) == 400


def test_store_full():
    fabric, store = _store(nodes=1, capacity=2)
    s = Session(fabric, 50)
    store.insert_block(s, "t", bytes(32), 1)
    store.insert_block(s, "t", bytes(32), 1)
    with pytest.raises(StoreFull):
        store.insert_block(s, "t", bytes(32), 1)
    with pytest.raises(ValueError):
        store.insert_block(s, "t", bytes(3), 1)


def test_table_exists():
    _, store = _store()
    with pytest.raises(StoreError):
        store.dictionary.create_table("t", 8, 1)


def test_multislot_consistency():
    width = 1024
    slots = default_slots(width)
    fabric, store = _store(nodes=1, capacity=2, width=width, slots=slots)
    s = Session(fabric, 50)
    key = store.insert_block(s, "t", bytes(width), 1)
    block = store.read_block(s, "t", key)
    for cid in itertools.islice(itertools.count(2), 20):
        block = block.installed(cid, cid.to_bytes(8, "little") * (width // 8))
        store.write_block(s, "t", key, block)
    back = store.read_block(s, "t", key)
    assert len(back.to_bytes()) == store.dictionary.table("t").block_size
    assert [c for c, _ in back.older] == list(range(20, 20 - slots + 1, -1))
