"""Checkout workload: read 3 products, decrement their stock, insert 1 order and 3 orderlines."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .config import ExperimentConfig

READS_PER_TXN = 3
ORDERLINES_PER_TXN = 3
INITIAL_STOCK = 1_000_000


@dataclass(frozen=True)
class CheckoutTxn:
    client: int
    products: tuple[int, ...]
    quantities: tuple[int, ...]
    order: bytes
    orderlines: tuple[bytes, ...]

    def encode(self) -> bytes:
        head = struct.pack("<I3Q3I", self.client, *self.products, *self.quantities)
        return head + self.order + b"".join(self.orderlines)


def product_payload(key: int, width: int, stock: int = INITIAL_STOCK) -> bytes:
    """Stock counter in the first 8 bytes, filler derived from the key after it."""
    filler = (key.to_bytes(8, "little") * (width // 8 + 1))[: width - 8]
    return stock.to_bytes(8, "little") + filler


def decrement_stock(payload: bytes, quantity: int) -> bytes:
    stock = int.from_bytes(payload[:8], "little")
    return max(stock - quantity, 0).to_bytes(8, "little") + payload[8:]


def _record(width: int, fields_: tuple) -> bytes:
    raw = struct.pack(f"<{len(fields_)}Q", *fields_)
    return (raw + bytes(width))[:width]


def gen_oltp_workload(cfg: ExperimentConfig, client: int, count: int | None = None) -> list[CheckoutTxn]:
    """Deterministic transaction stream for one client (0-based)."""
    count = cfg.txns if count is None else count
    rng = np.random.default_rng([cfg.seed, client])
    domain = cfg.hot_keys or cfg.products
    out = []
    for i in range(count):
        products = tuple(int(k) for k in rng.choice(domain, size=READS_PER_TXN, replace=False))
        quantities = tuple(int(q) for q in rng.integers(1, 5, size=READS_PER_TXN))
        order = _record(cfg.order_bytes, (client, i, sum(quantities)))
        lines = tuple(_record(cfg.order_bytes, (client, i, p, q)) for p, q in zip(products, quantities))
        out.append(CheckoutTxn(client, products, quantities, order, lines))
    return out


def workload_bytes(stream) -> bytes:
    return b"".join(t.encode() for t in stream)
