"""Bitvector timestamp service.

Commit timestamps are pre-assigned round-robin: with ``C`` clients, client
``c`` (1-based) owns timestamps ``c, c + C, c + 2C, ...``.  A commit is
published by setting its bit; the read timestamp is the longest prefix of
set bits.

Each client's bits live in a private, byte-aligned stripe inside a single
registered region, so a publication is one plain WRITE of the byte holding the
bit and one READ of the whole region recovers every stripe.
"""

from __future__ import annotations

import numpy as np

from .fabric import Fabric, RemoteAddress, Session

DEFAULT_BITS = 60_000


class OracleError(Exception):
    pass


class WouldWrap(OracleError):
    """A client has used every timestamp it owns."""


def highest_consecutive(bits: np.ndarray) -> int:
    """Largest ``t`` with logical bits ``1..t`` all set; ``bits[t-1]`` is bit ``t``."""
    bits = np.asarray(bits, dtype=bool)
    first_clear = int(np.argmin(bits)) if bits.size else 0
    return first_clear if bits.size and not bits[first_clear] else int(bits.size)


class TimestampOracle:
    def __init__(self, fabric: Fabric, node_id: int, num_clients: int, capacity: int = DEFAULT_BITS):
        if num_clients < 1:
            raise ValueError("need at least one client")
        if capacity < num_clients:
            raise ValueError("capacity must cover one timestamp per client")
        self.fabric = fabric
        self.node_id = node_id
        self.num_clients = num_clients
        self.capacity = capacity
        self.slots_per_client = -(-capacity // num_clients)
        self.stripe_bytes = -(-self.slots_per_client // 8)
        self.region = fabric.register_region(node_id, self.stripe_bytes * num_clients)
        # client-private state: only client c touches index c-1
        self._issued = [0] * num_clients
        self._shadow = [bytearray(self.stripe_bytes) for _ in range(num_clients)]

    def owner(self, cid: int) -> int:
        return (cid - 1) % self.num_clients + 1

    def _check_client(self, client: int) -> None:
        if not 1 <= client <= self.num_clients:
            raise OracleError(f"client {client} not in 1..{self.num_clients}")

    def next_cid(self, client: int) -> int:
        """The client's next owned timestamp; purely local, no network traffic."""
        self._check_client(client)
        k = self._issued[client - 1]
        cid = k * self.num_clients + client
        if cid > self.capacity:
            raise WouldWrap(f"client {client} exhausted its timestamps")
        self._issued[client - 1] = k + 1
        return cid

    def publish_commit(self, session: Session, client: int, cid: int) -> None:
        """Set bit ``cid`` with one unsignaled WRITE into the client's stripe."""
        self._check_client(client)
        if cid < 1 or self.owner(cid) != client:
            raise OracleError(f"timestamp {cid} is not owned by client {client}")
        index = (cid - 1) // self.num_clients
        if index >= self._issued[client - 1]:
            raise OracleError(f"timestamp {cid} was never issued to client {client}")
        shadow = self._shadow[client - 1]
        byte = index // 8
        shadow[byte] |= 1 << (index % 8)
        addr = RemoteAddress(self.node_id, self.region.base + (client - 1) * self.stripe_bytes + byte)
        session.write(addr, bytes(shadow[byte:byte + 1]), signaled=False)

    def logical_bits(self, raw: bytes) -> np.ndarray:
        """Reassemble the round-robin bit order from the striped region bytes."""
        stripes = np.frombuffer(raw, dtype=np.uint8).reshape(self.num_clients, self.stripe_bytes)
        per_client = np.unpackbits(stripes, axis=1, bitorder="little")[:, : self.slots_per_client]
        # logical t-1 = k*C + (c-1) -> column-major walk over (k, c)
        return per_client.T.reshape(-1)[: self.capacity]

    def current_rid(self, session: Session) -> int:
        raw = session.read(self.region.address, self.region.length)
        return highest_consecutive(self.logical_bits(raw))
