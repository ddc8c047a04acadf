"""Deterministic in-memory stand-in for HTTPS posts between public URLs.

Every post is signed by the sender and sealed to the endpoint owner's key.
Delivery is quantized to ledger blocks: a post made at block ``b`` reaches
its endpoint at ``b + delay_blocks``. Events (on-chain logs) are never
dropped; posts are dropped with probability ``drop_rate`` drawn from the
transport's seeded generator.
"""

from __future__ import annotations

import logging
import random
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Callable

from . import crypto
from .errors import ProtocolError

log = logging.getLogger(__name__)

Inbox = Callable[[bytes], None]
Subscriber = Callable[[Any], None]


class UrlTaken(ProtocolError):
    pass


class UnknownEndpoint(ProtocolError):
    pass


@dataclass
class Endpoint:
    url: str
    owner_pk: bytes
    inbox: Inbox


@dataclass
class TransportConfig:
    delay_blocks: int = 1
    drop_rate: float = 0.0
    url_delays: dict[str, int] = field(default_factory=dict)

    def delay_for(self, url: str) -> int:
        return self.url_delays.get(url, self.delay_blocks)

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> TransportConfig:
        delay = raw.get("delay_blocks", 1)
        if isinstance(delay, dict):
            return cls(int(raw.get("default_delay", 1)), float(raw.get("drop_rate", 0.0)), {k: int(v) for k, v in delay.items()})
        return cls(int(delay), float(raw.get("drop_rate", 0.0)))


@dataclass(frozen=True)
class Receipt:
    seq: int
    url: str
    sent_block: int
    deliver_block: int
    dropped: bool


@dataclass
class _Pending:
    seq: int
    url: str
    sender: bytes
    sealed: bytes
    payload_hash: bytes


class Transport:
    def __init__(self, rng: random.Random, config: TransportConfig | None = None) -> None:
        self.rng = rng
        self.config = config or TransportConfig()
        self.block = 0
        self.endpoints: dict[str, Endpoint] = {}
        self.subscribers: list[Subscriber] = []
        self.published: dict[str, Any] = {}
        self._queue: dict[int, list[_Pending]] = defaultdict(list)
        self._events: dict[int, list[Any]] = defaultdict(list)
        self._seq = 0
        self.wire: list[bytes] = []
        self.transcript: list[str] = []
        self.dropped: list[Receipt] = []

    # -- routing ----------------------------------------------------------

    def register_endpoint(self, url: str, owner_pk: bytes, inbox: Inbox) -> Endpoint:
        if url in self.endpoints:
            raise UrlTaken(url)
        ep = Endpoint(url, owner_pk, inbox)
        self.endpoints[url] = ep
        return ep

    def publish(self, url: str, document: Any) -> None:
        """Serve a public (unsealed) document, e.g. a buyer's order info."""
        self.published[url] = document

    def fetch(self, url: str) -> Any:
        try:
            return self.published[url]
        except KeyError:
            raise UnknownEndpoint(url) from None

    def subscribe(self, handler: Subscriber) -> None:
        self.subscribers.append(handler)

    # -- sending ----------------------------------------------------------

    def post(self, sender: crypto.SigningKeyPair, url: str, payload: bytes) -> Receipt:
        ep = self.endpoints.get(url)
        if ep is None:
            raise UnknownEndpoint(url)
        sealed = crypto.seal_message(sender, ep.owner_pk, payload, self.rng)
        self.wire.append(sealed)
        deliver = self.block + self.config.delay_for(url)
        seq = self._seq
        self._seq += 1
        dropped = self.config.drop_rate > 0 and self.rng.random() < self.config.drop_rate
        receipt = Receipt(seq, url, self.block, deliver, dropped)
        if dropped:
            self.dropped.append(receipt)
            log.info("dropped message %d to %s", seq, url)
        else:
            self._queue[deliver].append(_Pending(seq, url, sender.address, sealed, crypto.hash(payload)))
        return receipt

    def broadcast_event(self, event: Any) -> None:
        self._events[self.block + self.config.delay_blocks].append(event)

    # -- delivery ---------------------------------------------------------

    def deliver(self, block: int) -> int:
        """Deliver everything due at or before ``block``; returns how many."""
        self.block = block
        count = 0
        for due in sorted(b for b in set(self._events) | set(self._queue) if b <= block):
            for event in self._events.pop(due, []):
                for handler in self.subscribers:
                    handler(event)
                    count += 1
            for msg in self._queue.pop(due, []):
                self.transcript.append(
                    f"{block}\t0x{msg.sender.hex()}\t{msg.url}\t0x{msg.payload_hash.hex()}"
                )
                self.endpoints[msg.url].inbox(msg.sealed)
                count += 1
        return count

    def pending(self) -> int:
        return sum(len(v) for v in self._queue.values()) + sum(len(v) for v in self._events.values())
