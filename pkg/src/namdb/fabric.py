"""In-process RDMA fabric.

Storage nodes expose registered memory regions; clients reach them through
queue pairs using one-sided verbs (READ, WRITE, CAS, FETCH_ADD) or two-sided
messaging (SEND/RECEIVE).  Verbs execute functionally and thread-safely; time
and CPU cost are *modeled* through :class:`LatencyModel` and accumulated in
:class:`FabricMetrics` rather than measured.

By default a queue pair executes each work request as soon as it is posted.
Constructing a queue pair with ``auto_progress=False`` leaves posted work
requests in its send queue until :meth:`QueuePair.process` is called, which
lets tests drive the processing order explicitly.
"""

from __future__ import annotations

import bisect
import enum
import itertools
import threading
from collections import Counter, defaultdict, deque
from dataclasses import dataclass, field
from typing import Iterable

MiB = 1 << 20
U64_MASK = (1 << 64) - 1


class Verb(enum.Enum):
    READ = "READ"
    WRITE = "WRITE"
    SEND = "SEND"
    RECEIVE = "RECEIVE"
    CAS = "CAS"
    FETCH_ADD = "FETCH_ADD"

    @property
    def one_sided(self) -> bool:
        return self in _ONE_SIDED

    @property
    def atomic(self) -> bool:
        return self in (Verb.CAS, Verb.FETCH_ADD)


_ONE_SIDED = frozenset({Verb.READ, Verb.WRITE, Verb.CAS, Verb.FETCH_ADD})


class Transport(enum.Enum):
    RDMA = "rdma"
    IPOIB = "ipoib"
    IPOETH = "ipoeth"

    @classmethod
    def parse(cls, value: "str | Transport") -> "Transport":
        if isinstance(value, cls):
            return value
        return cls(str(value).strip().lower())


class Status(enum.Enum):
    OK = "OK"
    ACCESS_ERROR = "ACCESS_ERROR"


class FabricError(Exception):
    pass


class RegionOverlap(FabricError):
    pass


class AccessError(FabricError):
    """A verb completed with ``ACCESS_ERROR``."""


class ReceiverNotReady(FabricError):
    """A SEND arrived at a peer with an empty receive queue."""


@dataclass(frozen=True, order=True)
class RemoteAddress:
    node_id: int
    offset: int

    def __add__(self, delta: int) -> "RemoteAddress":
        return RemoteAddress(self.node_id, self.offset + delta)


@dataclass(eq=False)
class MemoryRegion:
    node_id: int
    base: int
    length: int
    buf: bytearray = field(repr=False)
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def end(self) -> int:
        return self.base + self.length

    @property
    def address(self) -> RemoteAddress:
        return RemoteAddress(self.node_id, self.base)

    def contains(self, offset: int, length: int) -> bool:
        return self.base <= offset and offset + length <= self.end

    @property
    def bytes(self) -> bytes:
        with self.lock:
            return bytes(self.buf)


@dataclass
class WorkQueueElement:
    verb: Verb
    seq: int
    signaled: bool
    remote: RemoteAddress | None = None
    payload: bytes = b""
    length: int = 0
    compare: int = 0
    swap: int = 0


@dataclass(frozen=True)
class Completion:
    qp_id: int
    seq: int
    verb: Verb
    result: bytes = b""
    status: Status = Status.OK

    @property
    def ok(self) -> bool:
        return self.status is Status.OK

    @property
    def value(self) -> int:
        """The 64-bit little-endian word carried by an atomic completion."""
        return int.from_bytes(self.result[:8], "little")


# --------------------------------------------------------------------------
# latency / CPU model


# (size bytes, one-way latency seconds); exact at these points, linear between
# them, and extended past the last point with the last segment's slope.
RDMA_INLINE_ANCHORS = ((1, 1e-6), (256, 1e-6), (MiB, 161e-6))
RDMA_READ_ANCHORS = ((1, 2e-6), (256, 2e-6), (MiB, 161e-6))
IPOIB_ANCHORS = ((1, 20e-6), (8, 20e-6), (MiB, 393e-6))
# Only the 8B point is published for 1Gbps Ethernet; the 1MiB point adds the
# serialization time of the remaining bytes at line rate.
IPOETH_ANCHORS = ((1, 30e-6), (8, 30e-6), (MiB, 30e-6 + (MiB - 8) / 1.25e8))

RDMA_CLIENT_CYCLES = 450
TCP_BASE_CYCLES = {Transport.IPOETH: 7544, Transport.IPOIB: 13264}
TCP_WINDOW_BYTES = {Transport.IPOETH: 1488, Transport.IPOIB: 21888}


def _interpolate(anchors, size: float) -> float:
    if size <= anchors[0][0]:
        return anchors[0][1]
    sizes = [a[0] for a in anchors]
    i = bisect.bisect_left(sizes, size)
    if i < len(anchors) and sizes[i] == size:
        return anchors[i][1]
    if i >= len(anchors):
        (s0, l0), (s1, l1) = anchors[-2], anchors[-1]
    else:
        (s0, l0), (s1, l1) = anchors[i - 1], anchors[i]
    return l0 + (l1 - l0) * (size - s0) / (s1 - s0)


@dataclass
class LatencyModel:
    """Modeled one-way latency and per-message CPU cycles for each transport."""

    anchors: dict = field(default_factory=lambda: {
        (Transport.RDMA, "inline"): RDMA_INLINE_ANCHORS,
        (Transport.RDMA, "read"): RDMA_READ_ANCHORS,
        (Transport.IPOIB, "msg"): IPOIB_ANCHORS,
        (Transport.IPOETH, "msg"): IPOETH_ANCHORS,
    })
    rdma_cycles: int = RDMA_CLIENT_CYCLES
    tcp_cycles: dict = field(default_factory=lambda: dict(TCP_BASE_CYCLES))
    tcp_window: dict = field(default_factory=lambda: dict(TCP_WINDOW_BYTES))

    def latency(self, transport: Transport, verb: Verb, size: int) -> float:
        if size < 1:
            raise ValueError("message size must be at least one byte")
        transport = Transport.parse(transport)
        if transport is Transport.RDMA:
            # atomics behave like 8B READs
            if verb in (Verb.READ, Verb.CAS, Verb.FETCH_ADD):
                table = self.anchors[(transport, "read")]
                if verb.atomic:
                    size = 8
            else:
                table = self.anchors[(transport, "inline")]
        else:
            table = self.anchors[(transport, "msg")]
        return _interpolate(table, size)

    def cycles(self, transport: Transport, size: int, side: str, verb: Verb = Verb.SEND) -> float:
        transport = Transport.parse(transport)
        if side not in ("client", "server"):
            raise ValueError(f"side must be 'client' or 'server', not {side!r}")
        if transport is Transport.RDMA:
            if side == "server" and verb is not Verb.RECEIVE:
                return 0
            if side == "client" and verb is Verb.RECEIVE:
                return 0
            return self.rdma_cycles
        base = self.tcp_cycles[transport]
        window = self.tcp_window[transport]
        return base if size <= window else base * size / window


DEFAULT_MODEL = LatencyModel()


def model_latency(transport, verb: Verb, size_bytes: int, model: LatencyModel = DEFAULT_MODEL) -> float:
    return model.latency(Transport.parse(transport), verb, size_bytes)


def model_cpu_cycles(transport, size_bytes: int, side: str, verb: Verb = Verb.SEND,
                     model: LatencyModel = DEFAULT_MODEL) -> float:
    return model.cycles(Transport.parse(transport), size_bytes, side, verb)


# --------------------------------------------------------------------------
# metrics


@dataclass
class NodeCounters:
    verbs: Counter = field(default_factory=Counter)
    bytes_sent: int = 0
    bytes_received: int = 0
    client_cycles: float = 0.0
    server_cycles: float = 0.0


class FabricMetrics:
    """Monotone counters keyed by ``(node_id, transport)``."""

    def __init__(self):
        self._lock = threading.Lock()
        self.nodes: dict[tuple[int, Transport], NodeCounters] = defaultdict(NodeCounters)
        self.session_latency: Counter = Counter()

    def _charge(self, node, transport, *, verb=None, sent=0, received=0, client=0.0, server=0.0):
        c = self.nodes[(node, transport)]
        if verb is not None:
            c.verbs[verb] += 1
        c.bytes_sent += sent
        c.bytes_received += received
        c.client_cycles += client
        c.server_cycles += server

    def record(self, issuer, target, transport, verb, size, *, client_cycles, server_cycles,
               latency, session=None, to_target=True):
        """Charge one verb: issuer pays the client side, target the server side."""
        with self._lock:
            if to_target:
                self._charge(issuer, transport, verb=verb, sent=size, client=client_cycles)
                self._charge(target, transport, received=size, server=server_cycles)
            else:
                self._charge(issuer, transport, verb=verb, received=size, client=client_cycles)
                self._charge(target, transport, sent=size, server=server_cycles)
            if session is not None:
                self.session_latency[session] += latency

    def record_receive(self, node, transport, cycles):
        with self._lock:
            self._charge(node, transport, verb=Verb.RECEIVE, server=cycles)

    def counters(self, node, transport=Transport.RDMA) -> NodeCounters:
        with self._lock:
            c = self.nodes.get((node, Transport.parse(transport)))
            if c is None:
                return NodeCounters()
            return NodeCounters(Counter(c.verbs), c.bytes_sent, c.bytes_received,
                                c.client_cycles, c.server_cycles)

    def verb_count(self, verb: Verb, nodes: Iterable[int] | None = None) -> int:
        with self._lock:
            return sum(c.verbs[verb] for (n, _), c in self.nodes.items()
                       if nodes is None or n in nodes)

    def server_cycles(self, nodes: Iterable[int] | None = None) -> float:
        with self._lock:
            return sum(c.server_cycles for (n, _), c in self.nodes.items()
                       if nodes is None or n in nodes)

    def snapshot(self) -> list[dict]:
        """Flat rows, one per (node, transport), ready for CSV export."""
        rows = []
        with self._lock:
            for (node, transport), c in sorted(self.nodes.items(), key=lambda kv: (kv[0][0], kv[0][1].value)):
                row = {"node": node, "transport": transport.value}
                for verb in Verb:
                    row[verb.value.lower()] = c.verbs[verb]
                row.update(bytes_sent=c.bytes_sent, bytes_received=c.bytes_received,
                           client_cycles=c.client_cycles, server_cycles=c.server_cycles)
                rows.append(row)
        return rows


# --------------------------------------------------------------------------
# queues


class CompletionQueue:
    def __init__(self):
        self._items: deque[Completion] = deque()
        self._lock = threading.Lock()

    def push(self, completion: Completion) -> None:
        with self._lock:
            self._items.append(completion)

    def poll(self, max_entries: int = 16) -> list[Completion]:
        out = []
        with self._lock:
            while self._items and len(out) < max_entries:
                out.append(self._items.popleft())
        return out

    def take(self, qp_id: int, seq: int) -> Completion | None:
        """Remove and return the completion for ``(qp_id, seq)`` if present."""
        with self._lock:
            for i, c in enumerate(self._items):
                if c.qp_id == qp_id and c.seq == seq:
                    del self._items[i]
                    return c
        return None

    def __len__(self) -> int:
        return len(self._items)


class QueuePair:
    """One endpoint of a connection from ``node_id`` to ``remote_node``."""

    def __init__(self, fabric: "Fabric", qp_id: int, node_id: int, remote_node: int,
                 transport: Transport, cq: CompletionQueue, recv_cq: CompletionQueue,
                 auto_progress: bool = True, session: str | None = None):
        self.fabric = fabric
        self.qp_id = qp_id
        self.node_id = node_id
        self.remote_node = remote_node
        self.transport = transport
        self.cq = cq
        self.recv_cq = recv_cq
        self.auto_progress = auto_progress
        self.session = session
        self.peer: QueuePair | None = None
        self.send_queue: deque[WorkQueueElement] = deque()
        self.recv_queue: deque[tuple[int, int]] = deque()
        self._seq = itertools.count(1)
        self._recv_seq = itertools.count(1)
        self._lock = threading.Lock()

    def __repr__(self):
        return f"QueuePair(id={self.qp_id}, {self.node_id}->{self.remote_node}, {self.transport.value})"

    # posting -------------------------------------------------------------

    def _post(self, wqe: WorkQueueElement) -> int:
        if wqe.verb.one_sided and self.transport is not Transport.RDMA:
            raise FabricError(f"{wqe.verb.value} requires the RDMA transport")
        with self._lock:
            self.send_queue.append(wqe)
        if self.auto_progress:
            self.process()
        return wqe.seq

    def _next_seq(self) -> int:
        with self._lock:
            return next(self._seq)

    def post_read(self, remote: RemoteAddress, length: int, signaled: bool = True) -> int:
        return self._post(WorkQueueElement(Verb.READ, self._next_seq(), signaled, remote, length=length))

    def post_write(self, remote: RemoteAddress, payload: bytes, signaled: bool = False) -> int:
        return self._post(WorkQueueElement(Verb.WRITE, self._next_seq(), signaled, remote,
                                           payload=bytes(payload), length=len(payload)))

    def post_cas(self, remote: RemoteAddress, expected: int, swap: int, signaled: bool = True) -> int:
        return self._post(WorkQueueElement(Verb.CAS, self._next_seq(), signaled, remote, length=8,
                                           compare=expected & U64_MASK, swap=swap & U64_MASK))

    def post_fetch_add(self, remote: RemoteAddress, delta: int, signaled: bool = True) -> int:
        return self._post(WorkQueueElement(Verb.FETCH_ADD, self._next_seq(), signaled, remote,
                                           length=8, swap=delta & U64_MASK))

    def post_send(self, payload: bytes, signaled: bool = False) -> int:
        return self._post(WorkQueueElement(Verb.SEND, self._next_seq(), signaled,
                                           payload=bytes(payload), length=len(payload)))

    def post_receive(self, length: int) -> int:
        with self._lock:
            seq = next(self._recv_seq)
            self.recv_queue.append((seq, length))
        return seq

    # processing ------------------------------------------------------------

    @property
    def pending(self) -> int:
        return len(self.send_queue)

    def process(self, n: int | None = None) -> int:
        """Execute up to ``n`` queued work requests in FIFO order."""
        done = 0
        while n is None or done < n:
            with self._lock:
                if not self.send_queue:
                    break
                wqe = self.send_queue.popleft()
            self.fabric._execute(self, wqe)
            done += 1
        return done

    def wait(self, seq: int) -> Completion:
        """Drive this queue pair until the completion for ``seq`` is available."""
        while True:
            c = self.cq.take(self.qp_id, seq)
            if c is not None:
                return c
            if not self.process(1):
                c = self.cq.take(self.qp_id, seq)
                if c is None:
                    raise FabricError(f"no completion will be generated for seq {seq} on {self!r}")
                return c


class Fabric:
    """A set of nodes, their registered memory, and the connections between them."""

    def __init__(self, model: LatencyModel | None = None, clock_hz: float = 2.2e9):
        self.model = model or LatencyModel()
        self.clock_hz = clock_hz
        self.metrics = FabricMetrics()
        self._regions: dict[int, list[MemoryRegion]] = defaultdict(list)
        self._bases: dict[int, list[int]] = defaultdict(list)
        self._next_free: dict[int, int] = defaultdict(int)
        self._lock = threading.Lock()
        self._qp_ids = itertools.count(1)

    # memory ----------------------------------------------------------------

    def register_region(self, node_id: int, length: int, base: int | None = None) -> MemoryRegion:
        if length <= 0:
            raise ValueError("region length must be positive")
        with self._lock:
            regions = self._regions[node_id]
            if base is None:
                base = self._next_free[node_id]
            for r in regions:
                if base < r.end and r.base < base + length:
                    raise RegionOverlap(f"[{base}, {base + length}) overlaps {r.base}..{r.end} on node {node_id}")
            region = MemoryRegion(node_id, base, length, bytearray(length))
            i = bisect.bisect_left(self._bases[node_id], base)
            regions.insert(i, region)
            self._bases[node_id].insert(i, base)
            self._next_free[node_id] = max(self._next_free[node_id], base + length)
            return region

    def resolve(self, remote: RemoteAddress, length: int) -> MemoryRegion | None:
        regions = self._regions.get(remote.node_id, ())
        i = bisect.bisect_right(self._bases.get(remote.node_id, ()), remote.offset) - 1
        if i >= 0 and regions[i].contains(remote.offset, max(length, 1)):
            return regions[i]
        return None

    def regions(self, node_id: int) -> list[MemoryRegion]:
        return list(self._regions.get(node_id, ()))

    # connections ---------------------------------------------------------------

    def create_cq(self) -> CompletionQueue:
        return CompletionQueue()

    def connect(self, node_id: int, remote_node: int, transport=Transport.RDMA, *,
                cq: CompletionQueue | None = None, peer_cq: CompletionQueue | None = None,
                auto_progress: bool = True, session: str | None = None) -> QueuePair:
        """Create a connected queue pair; the remote endpoint is ``qp.peer``."""
        transport = Transport.parse(transport)
        cq = cq if cq is not None else CompletionQueue()
        peer_cq = peer_cq if peer_cq is not None else CompletionQueue()
        local = QueuePair(self, next(self._qp_ids), node_id, remote_node, transport, cq, cq,
                          auto_progress, session)
        remote = QueuePair(self, next(self._qp_ids), remote_node, node_id, transport, peer_cq,
                           peer_cq, auto_progress, session)
        local.peer, remote.peer = remote, local
        return local

    # execution ---------------------------------------------------------------

    def _complete(self, qp: QueuePair, wqe: WorkQueueElement, result=b"", status=Status.OK):
        if wqe.signaled or status is not Status.OK:
            qp.cq.push(Completion(qp.qp_id, wqe.seq, wqe.verb, result, status))

    def _execute(self, qp: QueuePair, wqe: WorkQueueElement) -> None:
        verb = wqe.verb
        if verb is Verb.SEND:
            self._execute_send(qp, wqe)
            return
        size = max(wqe.length, 1)
        latency = self.model.latency(qp.transport, verb, size)
        self.metrics.record(qp.node_id, qp.remote_node, qp.transport, verb, wqe.length,
                            client_cycles=self.model.cycles(qp.transport, size, "client", verb),
                            server_cycles=0, latency=latency, session=qp.session,
                            to_target=verb is not Verb.READ)
        region = self.resolve(wqe.remote, wqe.length) if wqe.remote.node_id == qp.remote_node else None
        if region is None or (verb.atomic and wqe.remote.offset % 8):
            self._complete(qp, wqe, status=Status.ACCESS_ERROR)
            return
        start = wqe.remote.offset - region.base
        with region.lock:
            buf = region.buf
            if verb is Verb.READ:
                result = bytes(buf[start:start + wqe.length])
            elif verb is Verb.WRITE:
                buf[start:start + wqe.length] = wqe.payload
                result = b""
            else:
                old = int.from_bytes(buf[start:start + 8], "little")
                if verb is Verb.CAS:
                    new = wqe.swap if old == wqe.compare else old
                else:
                    new = (old + wqe.swap) & U64_MASK
                buf[start:start + 8] = new.to_bytes(8, "little")
                result = old.to_bytes(8, "little")
        self._complete(qp, wqe, result)

    def _execute_send(self, qp: QueuePair, wqe: WorkQueueElement) -> None:
        peer = qp.peer
        with peer._lock:
            if not peer.recv_queue:
                raise ReceiverNotReady(f"SEND seq {wqe.seq} on {qp!r}: peer has no posted RECEIVE")
            recv_seq, capacity = peer.recv_queue.popleft()
        if wqe.length > capacity:
            raise FabricError(f"SEND of {wqe.length}B exceeds posted receive buffer of {capacity}B")
        size = max(wqe.length, 1)
        model = self.model
        self.metrics.record(qp.node_id, peer.node_id, qp.transport, Verb.SEND, wqe.length,
                            client_cycles=model.cycles(qp.transport, size, "client", Verb.SEND),
                            server_cycles=0,
                            latency=model.latency(qp.transport, Verb.SEND, size), session=qp.session)
        self.metrics.record_receive(peer.node_id, qp.transport,
                                    model.cycles(qp.transport, size, "server", Verb.RECEIVE))
        peer.recv_cq.push(Completion(peer.qp_id, recv_seq, Verb.RECEIVE, wqe.payload))
        self._complete(qp, wqe)


# --------------------------------------------------------------------------
# blocking helpers


def _checked(c: Completion) -> Completion:
    if not c.ok:
        raise AccessError(f"{c.verb.value} seq {c.seq} on qp {c.qp_id} failed: {c.status.value}")
    return c


def rdma_read(qp: QueuePair, remote: RemoteAddress, length: int) -> bytes:
    return _checked(qp.wait(qp.post_read(remote, length, signaled=True))).result


def rdma_write(qp: QueuePair, remote: RemoteAddress, payload: bytes, signaled: bool = True) -> None:
    seq = qp.post_write(remote, payload, signaled=signaled)
    if signaled:
        _checked(qp.wait(seq))


def rdma_cas(qp: QueuePair, remote: RemoteAddress, expected: int, swap: int) -> int:
    return _checked(qp.wait(qp.post_cas(remote, expected, swap))).value


def rdma_fetch_add(qp: QueuePair, remote: RemoteAddress, delta: int) -> int:
    return _checked(qp.wait(qp.post_fetch_add(remote, delta))).value


def post_receive(qp: QueuePair, length: int) -> int:
    return qp.post_receive(length)


def send(qp: QueuePair, payload: bytes, signaled: bool = False) -> int:
    seq = qp.post_send(payload, signaled=signaled)
    if signaled:
        _checked(qp.wait(seq))
    return seq


def poll_completions(cq: CompletionQueue, max_entries: int = 16) -> list[Completion]:
    return cq.poll(max_entries)


def receive(qp: QueuePair, seq: int) -> bytes:
    """Wait for the RECEIVE ``seq`` posted on ``qp`` and return its payload."""
    c = qp.recv_cq.take(qp.qp_id, seq)
    if c is None:
        raise FabricError(f"receive {seq} on {qp!r} has not completed")
    return c.result


class Session:
    """A client's view of the fabric: one queue pair per remote node and a private CQ."""

    def __init__(self, fabric: Fabric, node_id: int, name: str | None = None,
                 transport=Transport.RDMA):
        self.fabric = fabric
        self.node_id = node_id
        self.name = name or f"node{node_id}"
        self.transport = Transport.parse(transport)
        self.cq = fabric.create_cq()
        self._qps: dict[int, QueuePair] = {}

    def qp(self, remote_node: int) -> QueuePair:
        qp = self._qps.get(remote_node)
        if qp is None:
            qp = self.fabric.connect(self.node_id, remote_node, self.transport, cq=self.cq,
                                     session=self.name)
            self._qps[remote_node] = qp
        return qp

    def read(self, remote: RemoteAddress, length: int) -> bytes:
        return rdma_read(self.qp(remote.node_id), remote, length)

    def write(self, remote: RemoteAddress, payload: bytes, signaled: bool = True) -> None:
        rdma_write(self.qp(remote.node_id), remote, payload, signaled)

    def cas(self, remote: RemoteAddress, expected: int, swap: int) -> int:
        return rdma_cas(self.qp(remote.node_id), remote, expected, swap)

    def fetch_add(self, remote: RemoteAddress, delta: int) -> int:
        return rdma_fetch_add(self.qp(remote.node_id), remote, delta)

    @property
    def modeled_latency(self) -> float:
        return self.fabric.metrics.session_latency[self.name]
