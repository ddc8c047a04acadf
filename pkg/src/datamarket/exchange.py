"""Data ontology, audience/data queries, data orders and the order book."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

from . import crypto
from .errors import ProtocolError, SchemaViolation

__all__ = [
    "AlreadyClosed",
    "AudienceQuery",
    "BuyerOrderInfo",
    "Clause",
    "DataOrder",
    "DataQuery",
    "MissingEntity",
    "NotOwner",
    "NotaryOffer",
    "OntologySchema",
    "OrderBook",
    "SellerProfile",
    "SchemaViolation",
    "UnregisteredBuyer",
    "audience_match",
    "decode_payload",
    "encode_payload",
    "extract_requested",
    "record_key",
    "validate_buyer_info",
]

CATEGORICAL = "categorical"
NUMERIC = "numeric"
OPS = ("=", ">=", "<=")


class MissingEntity(ProtocolError):
    pass


class UnregisteredBuyer(ProtocolError):
    pass


class NotOwner(ProtocolError):
    pass


class AlreadyClosed(ProtocolError):
    pass


class UnknownOrder(ProtocolError):
    pass


# ---------------------------------------------------------------------------
# queries


@dataclass(frozen=True)
class Clause:
    attribute: str
    op: str
    value: Any

    def holds(self, actual: Any) -> bool:
        if self.op == "=":
            return actual == self.value
        if self.op == ">=":
            return actual >= self.value
        return actual <= self.value


@dataclass(frozen=True)
class AudienceQuery:
    clauses: tuple[Clause, ...] = ()

    @classmethod
    def parse(cls, raw: Iterable[Sequence[Any]]) -> AudienceQuery:
        """Build from ``[[attribute, op, value], ...]``."""
        return cls(tuple(Clause(a, op, v) for a, op, v in raw))

    def to_list(self) -> list[list[Any]]:
        return [[c.attribute, c.op, c.value] for c in self.clauses]


@dataclass(frozen=True)
class DataQuery:
    entity: str
    params: Mapping[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"entity": self.entity, "params": dict(sorted(self.params.items()))}


@dataclass
class OntologySchema:
    """Declared audience attributes and data entities.

    ``entities`` maps an entity name to its parameter schema
    (``{"start": "int", "days": "int"}``). Windowed entities filter their
    records on the ``day`` field.
    """

    attributes: dict[str, str]
    entities: dict[str, dict[str, str]]

    def __post_init__(self) -> None:
        for name, kind in self.attributes.items():
            if kind not in (CATEGORICAL, NUMERIC):
                raise SchemaViolation(f"attribute {name!r} has unknown kind {kind!r}")

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> OntologySchema:
        return cls(dict(raw.get("attributes", {})), {k: dict(v) for k, v in raw.get("entities", {}).items()})

    def to_dict(self) -> dict[str, Any]:
        return {"attributes": dict(self.attributes), "entities": {k: dict(v) for k, v in self.entities.items()}}

    def validate_audience(self, query: AudienceQuery) -> None:
        for c in query.clauses:
            kind = self.attributes.get(c.attribute)
            if kind is None:
                raise SchemaViolation(f"undeclared attribute {c.attribute!r}")
            if c.op not in OPS:
                raise SchemaViolation(f"unknown operator {c.op!r}")
            if c.op != "=" and kind != NUMERIC:
                raise SchemaViolation(f"{c.op} on categorical attribute {c.attribute!r}")
            if kind == NUMERIC and not _is_number(c.value):
                raise SchemaViolation(f"non-numeric value for {c.attribute!r}")

    def validate_query(self, query: DataQuery) -> None:
        params = self.entities.get(query.entity)
        if params is None:
            raise SchemaViolation(f"undeclared entity {query.entity!r}")
        for name, value in query.params.items():
            kind = params.get(name)
            if kind is None:
                raise SchemaViolation(f"entity {query.entity!r} has no parameter {name!r}")
            if kind == "int" and not (isinstance(value, int) and not isinstance(value, bool)):
                raise SchemaViolation(f"parameter {name!r} must be an int")
            if kind == "str" and not isinstance(value, str):
                raise SchemaViolation(f"parameter {name!r} must be a string")

    def validate_profile(self, attributes: Mapping[str, Any]) -> None:
        for name, value in attributes.items():
            kind = self.attributes.get(name)
            if kind is None:
                raise SchemaViolation(f"undeclared attribute {name!r}")
            if kind == NUMERIC and not _is_number(value):
                raise SchemaViolation(f"attribute {name!r} must be numeric")


def _is_number(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


@dataclass
class SellerProfile:
    attributes: dict[str, Any]
    data_store: dict[str, list[dict[str, Any]]] = field(default_factory=dict)


def audience_match(
    profile: SellerProfile, query: AudienceQuery, schema: OntologySchema | None = None
) -> bool:
    """Conjunction of clauses; a profile lacking an attribute fails that clause."""
    if schema is not None:
        schema.validate_audience(query)
        schema.validate_profile(profile.attributes)
    for clause in query.clauses:
        if clause.attribute not in profile.attributes:
            return False
        if not clause.holds(profile.attributes[clause.attribute]):
            return False
    return True


# ---------------------------------------------------------------------------
# canonical payloads


def _pack_str(s: str) -> bytes:
    raw = s.encode()
    return struct.pack(">I", len(raw)) + raw


def _pack_value(v: Any) -> bytes:
    if isinstance(v, bool):
        raise TypeError("booleans are not record values")
    if isinstance(v, int):
        return b"i" + struct.pack(">q", v)
    if isinstance(v, float):
        return b"f" + struct.pack(">d", v)
    if isinstance(v, str):
        return b"s" + _pack_str(v)
    raise TypeError(f"unsupported record value {v!r}")


def record_key(record: Mapping[str, Any]) -> bytes:
    """Canonical bytes of one record: fields sorted by name."""
    out = [struct.pack(">I", len(record))]
    for name in sorted(record):
        out.append(_pack_str(name))
        out.append(_pack_value(record[name]))
    return b"".join(out)


def encode_payload(sections: Sequence[tuple[str, Sequence[Mapping[str, Any]]]]) -> bytes:
    out = [struct.pack(">I", len(sections))]
    for entity, records in sections:
        out.append(_pack_str(entity))
        out.append(struct.pack(">I", len(records)))
        out.extend(record_key(r) for r in records)
    return b"".join(out)


class _Reader:
    def __init__(self, raw: bytes) -> None:
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise ValueError("truncated payload")
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode()

    def value(self) -> Any:
        tag = self.take(1)
        if tag == b"i":
            return struct.unpack(">q", self.take(8))[0]
        if tag == b"f":
            return struct.unpack(">d", self.take(8))[0]
        if tag == b"s":
            return self.string()
        raise ValueError(f"bad value tag {tag!r}")


def decode_payload(raw: bytes) -> list[tuple[str, list[dict[str, Any]]]]:
    r = _Reader(raw)
    sections = []
    for _ in range(r.u32()):
        entity = r.string()
        records = []
        for _ in range(r.u32()):
            records.append({r.string(): r.value() for _ in range(r.u32())})
        sections.append((entity, records))
    if r.pos != len(raw):
        raise ValueError("trailing bytes in payload")
    return sections


def extract_requested(profile: SellerProfile, requested: Sequence[DataQuery]) -> bytes:
    """Select the records each query asks for and serialize them canonically.

    ``start``/``days`` parameters select ``start <= record["day"] < start + days``.
    """
    sections = []
    for q in requested:
        if q.entity not in profile.data_store:
            raise MissingEntity(q.entity)
        records = profile.data_store[q.entity]
        start = q.params.get("start")
        days = q.params.get("days")
        if start is not None or days is not None:
            lo = start if start is not None else min((r["day"] for r in records), default=0)
            hi = lo + days if days is not None else None
            records = [r for r in records if r["day"] >= lo and (hi is None or r["day"] < hi)]
        sections.append((q.entity, list(records)))
    return encode_payload(sections)


# ---------------------------------------------------------------------------
# orders


@dataclass
class DataOrder:
    id: int
    buyer: bytes
    audience: AudienceQuery
    requested: tuple[DataQuery, ...]
    price: int
    tc_hash: bytes
    buyer_url: str
    created_block: int
    status: str = "open"

    def encode_queries(self) -> bytes:
        """On-chain representation of the audience and requested data."""
        body = {"audience": self.audience.to_list(), "requested": [q.to_dict() for q in self.requested]}
        return json.dumps(body, sort_keys=True, separators=(",", ":")).encode()


@dataclass(frozen=True)
class NotaryOffer:
    notary_id: int
    notary_address: bytes
    notary_pk: bytes
    url: str
    fee: int
    terms: str
    signature: bytes

    @staticmethod
    def signed_bytes(order_id: int, fee: int, terms: str) -> bytes:
        return struct.pack(">QQ", order_id, fee) + terms.encode()

    @classmethod
    def create(
        cls, notary: crypto.SigningKeyPair, notary_id: int, url: str, order_id: int, fee: int, terms: str
    ) -> NotaryOffer:
        sig = crypto.sign(notary.secret, cls.signed_bytes(order_id, fee, terms))
        return cls(notary_id, notary.address, notary.public, url, fee, terms, sig)

    def verify(self, order_id: int) -> bool:
        if crypto.address_of(self.notary_pk) != self.notary_address:
            return False
        return crypto.verify(self.notary_pk, self.signed_bytes(order_id, self.fee, self.terms), self.signature)


@dataclass
class BuyerOrderInfo:
    """What the buyer publishes at the order's URL."""

    buyer_pk: bytes
    name: str
    description: str
    logo: str
    tc_text: str
    intended_use: str
    notaries: list[NotaryOffer]


def validate_buyer_info(info: BuyerOrderInfo, order: DataOrder) -> bool:
    if crypto.hash(info.tc_text.encode()) != order.tc_hash:
        return False
    return all(offer.verify(order.id) for offer in info.notaries)


class OrderBook:
    """Order registry; lives inside the ledger's state machine."""

    def __init__(self, schema: OntologySchema | None = None) -> None:
        self.schema = schema
        self.orders: dict[int, DataOrder] = {}
        self._next_id = 0

    def create(
        self,
        buyer: bytes,
        audience: AudienceQuery,
        requested: Sequence[DataQuery],
        price: int,
        tc_hash: bytes,
        buyer_url: str,
        block: int,
    ) -> DataOrder:
        if price <= 0:
            raise SchemaViolation("price must be positive")
        if len(tc_hash) != crypto.HASH_SIZE:
            raise SchemaViolation("terms hash must be 32 bytes")
        if self.schema is not None:
            self.schema.validate_audience(audience)
            for q in requested:
                self.schema.validate_query(q)
        order = DataOrder(
            self._next_id, buyer, audience, tuple(requested), price, tc_hash, buyer_url, block
        )
        self.orders[order.id] = order
        self._next_id += 1
        return order

    def get(self, order_id: int) -> DataOrder:
        try:
            return self.orders[order_id]
        except KeyError:
            raise UnknownOrder(order_id) from None

    def close(self, caller: bytes, order_id: int) -> None:
        order = self.get(order_id)
        if order.buyer != caller:
            raise NotOwner(f"order {order_id} belongs to another buyer")
        if order.status == "closed":
            raise AlreadyClosed(order_id)
        order.status = "closed"
