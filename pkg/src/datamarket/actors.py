"""Buyer, Seller, Notary, Delegate and Monitor state machines.

Actors never touch each other's state. They talk through the transport
(sealed, signed posts and public documents) and act on the world only by
submitting ledger transactions from their own address. The engine calls
:meth:`Actor.tick` once per block, in a fixed order.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Callable, Iterable, Mapping, Sequence

from . import crypto
from .crypto import Ciphertext, Lock, SigningKeyPair
from .errors import ProtocolError
from .exchange import (
    AudienceQuery,
    BuyerOrderInfo,
    DataOrder,
    DataQuery,
    NotaryOffer,
    SellerProfile,
    audience_match,
    decode_payload,
    encode_payload,
    extract_requested,
    record_key,
    validate_buyer_info,
)
from .ledger import Ledger, PayData, SlotStatus, encode_pay_data, meta_operation
from .net import Transport

NOT_NOTARIZED = "not_notarized"
APPROVED = "approved"
REJECTED = "rejected"

EARTH_RADIUS_KM = 6371.0088


class PayDataMismatch(ProtocolError):
    pass


class UnknownSeller(ProtocolError):
    pass


# ---------------------------------------------------------------------------
# verifiers


def haversine_km(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp = p2 - p1
    dl = math.radians(lon2 - lon1)
    a = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(a)))


def verify_geolocation(
    ground: Sequence[Mapping[str, Any]],
    submitted: Sequence[Mapping[str, Any]],
    max_km: float,
    window: float = 0,
) -> bool:
    """Every temporally matched pair (``|dt| <= window``) must lie within ``max_km``.

    Records carry ``t``, ``lat`` and ``lon``. With no temporal match at all
    the check passes.
    """
    for s in submitted:
        for g in ground:
            if abs(s["t"] - g["t"]) <= window and haversine_km(g["lat"], g["lon"], s["lat"], s["lon"]) > max_km:
                return False
    return True


def geolocation_coverage(ground: Sequence[Mapping[str, Any]], submitted: Sequence[Mapping[str, Any]], window: float = 0) -> int:
    return sum(1 for s in submitted for g in ground if abs(s["t"] - g["t"]) <= window)


def verify_subset(ground: Iterable[Mapping[str, Any]], submitted: Iterable[Mapping[str, Any]]) -> bool:
    known = {record_key(r) for r in ground}
    return all(record_key(r) in known for r in submitted)


@dataclass
class Verifier:
    """Entity-specific check of submitted records against ground truth."""

    kind: str = "subset"
    max_km: float = 5.0
    window: float = 0

    def __call__(self, ground: Sequence[Mapping[str, Any]], submitted: Sequence[Mapping[str, Any]]) -> bool:
        if self.kind == "subset":
            return verify_subset(ground, submitted)
        if self.kind == "geolocation":
            return verify_geolocation(ground, submitted, self.max_km, self.window)
        raise ValueError(f"unknown verifier {self.kind!r}")


# ---------------------------------------------------------------------------
# messages


def _pack(kind: str, **body: Any) -> bytes:
    def enc(v: Any) -> Any:
        if isinstance(v, (bytes, bytearray)):
            return "0x" + bytes(v).hex()
        if isinstance(v, (list, tuple)):
            return [enc(x) for x in v]
        return v

    return json.dumps({"type": kind, **{k: enc(v) for k, v in body.items()}}, sort_keys=True, separators=(",", ":")).encode()


def _unhex(s: str | None) -> bytes | None:
    return None if s is None else bytes.fromhex(s[2:])


@dataclass
class DataResponse:
    order_id: int
    seller_id: int | None
    seller_address: bytes
    notary_address: bytes
    ciphertext: Ciphertext
    needs_buyer_registration: bool

    def to_bytes(self) -> bytes:
        return _pack(
            "data_response",
            order_id=self.order_id,
            seller_id=self.seller_id,
            seller_address=self.seller_address,
            notary_address=self.notary_address,
            ciphertext=self.ciphertext.to_bytes(),
            nbr=self.needs_buyer_registration,
        )

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> DataResponse:
        return cls(
            d["order_id"],
            d["seller_id"],
            _unhex(d["seller_address"]),
            _unhex(d["notary_address"]),
            Ciphertext.from_bytes(_unhex(d["ciphertext"])),
            d["nbr"],
        )


@dataclass
class SellerNotaryMsg:
    order_id: int
    seller_id: int | None
    seller_address: bytes
    ciphertext: Ciphertext
    key: bytes

    def to_bytes(self) -> bytes:
        return _pack(
            "seller_notary",
            order_id=self.order_id,
            seller_id=self.seller_id,
            seller_address=self.seller_address,
            ciphertext=self.ciphertext.to_bytes(),
            key=self.key,
        )

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> SellerNotaryMsg:
        return cls(d["order_id"], d["seller_id"], _unhex(d["seller_address"]), Ciphertext.from_bytes(_unhex(d["ciphertext"])), _unhex(d["key"]))


@dataclass
class NotarizationRequest:
    order_id: int
    callback_url: str
    sellers: list[tuple[int, bytes, bytes]]

    def to_bytes(self) -> bytes:
        return _pack("notarization_request", order_id=self.order_id, callback_url=self.callback_url, sellers=[list(s) for s in self.sellers])

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> NotarizationRequest:
        return cls(d["order_id"], d["callback_url"], [(s[0], _unhex(s[1]), _unhex(s[2])) for s in d["sellers"]])


@dataclass
class SellerResult:
    seller_id: int
    seller_address: bytes
    verdict: str
    encrypted_key: Ciphertext | None


@dataclass
class NotarizationResponse:
    order_id: int
    results: list[SellerResult]
    fee: int
    notarization_percentage: Fraction
    notary_address: bytes
    pay_data_hash: bytes
    lock: Lock
    signature: bytes = b""

    def signed_bytes(self) -> bytes:
        return _pack(
            "notarization_response",
            order_id=self.order_id,
            results=[
                [r.seller_id, r.seller_address, r.verdict, r.encrypted_key.to_bytes() if r.encrypted_key else None]
                for r in self.results
            ],
            fee=self.fee,
            notarization_percentage=str(self.notarization_percentage),
            notary_address=self.notary_address,
            pay_data_hash=self.pay_data_hash,
            lock=self.lock.digest,
        )

    def sign(self, notary: SigningKeyPair) -> None:
        self.signature = crypto.sign(notary.secret, self.signed_bytes())

    def verify(self, notary_pk: bytes) -> bool:
        return crypto.address_of(notary_pk) == self.notary_address and crypto.verify(notary_pk, self.signed_bytes(), self.signature)

    def to_bytes(self) -> bytes:
        body = json.loads(self.signed_bytes())
        body["signature"] = "0x" + self.signature.hex()
        return json.dumps(body, sort_keys=True, separators=(",", ":")).encode()

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> NotarizationResponse:
        results = [
            SellerResult(r[0], _unhex(r[1]), r[2], Ciphertext.from_bytes(_unhex(r[3])) if r[3] else None)
            for r in d["results"]
        ]
        return cls(
            d["order_id"],
            results,
            d["fee"],
            Fraction(d["notarization_percentage"]),
            _unhex(d["notary_address"]),
            _unhex(d["pay_data_hash"]),
            Lock(_unhex(d["lock"])),
            _unhex(d["signature"]),
        )


MESSAGES: dict[str, Callable[[Mapping[str, Any]], Any]] = {
    "data_response": DataResponse.from_dict,
    "seller_notary": SellerNotaryMsg.from_dict,
    "notarization_request": NotarizationRequest.from_dict,
    "notarization_response": NotarizationResponse.from_dict,
}


def parse_message(payload: bytes) -> Any:
    d = json.loads(payload)
    return MESSAGES[d["type"]](d)


def paid_ids(results: Iterable[SellerResult]) -> list[int]:
    return sorted(r.seller_id for r in results if r.verdict != REJECTED)


def pay_data_hash_for(ids: Sequence[int]) -> bytes:
    if not ids:
        return crypto.hash(b"")
    return crypto.hash(encode_pay_data(ids).to_bytes())


# ---------------------------------------------------------------------------
# actors


class Actor:
    role = "actor"

    def __init__(self, name: str, keys: SigningKeyPair, ledger: Ledger, transport: Transport, rng: random.Random, journal: list[dict[str, Any]]) -> None:
        self.name = name
        self.keys = keys
        self.ledger = ledger
        self.transport = transport
        self.rng = rng
        self.journal = journal
        self.inbox: list[tuple[Any, bytes]] = []
        self.faults: list[str] = []
        self._account_id: int | None = None

    @property
    def address(self) -> bytes:
        return self.keys.address

    @property
    def account_id(self) -> int | None:
        # registration is permanent, so a found id can be cached
        if self._account_id is None:
            self._account_id = self.ledger.id_of(self.address)
        return self._account_id

    def note(self, message: str, **extra: Any) -> None:
        self.journal.append({"block": self.ledger.block, "actor": self.name, "msg": message, **extra})

    def submit(self, method: str, *args: Any) -> Any:
        """Send one ledger transaction; failures are journaled and return None."""
        try:
            return getattr(self.ledger, method)(*args, sender=self.address)
        except ProtocolError as exc:
            self.note(f"{method} failed: {type(exc).__name__}")
            return None

    def receive(self, sealed: bytes) -> None:
        try:
            payload, sender_pk = crypto.open_message(self.keys, sealed)
            self.inbox.append((parse_message(payload), sender_pk))
        except (crypto.CryptoError, ValueError, KeyError) as exc:
            self.note(f"discarded message: {type(exc).__name__}")

    def on_event(self, event: Any) -> None:
        pass

    def tick(self, block: int) -> None:
        pass

    def setup(self, deposit: int = 0) -> None:
        """Register on BatPay and move ``deposit`` of the held tokens in."""
        if self.account_id is None:
            self.ledger.register(self.address, self.keys.public, sender=self.address)
        if deposit:
            self.ledger.deposit(self.account_id, deposit, sender=self.address)


@dataclass
class OrderPlan:
    at: int
    audience: AudienceQuery
    requested: list[DataQuery]
    price: int
    tc_text: str
    notaries: list[str]
    response_window: int = 2
    max_sellers: int | None = None
    intended_use: str = "research"


@dataclass
class _BuyerOrder:
    order: DataOrder
    info: BuyerOrderInfo
    plan: OrderPlan
    offers: dict[bytes, NotaryOffer]
    responses: list[tuple[DataResponse, bytes]] = field(default_factory=list)
    selected: dict[bytes, DataResponse] = field(default_factory=dict)
    requests: dict[bytes, NotarizationRequest] = field(default_factory=dict)
    notarized: dict[bytes, NotarizationResponse] = field(default_factory=dict)
    payments: dict[int, bytes] = field(default_factory=dict)
    recovered: dict[bytes, bytes] = field(default_factory=dict)
    recovery_failed: dict[bytes, str] = field(default_factory=dict)
    refunded: list[int] = field(default_factory=list)
    recovery_done: set[int] = field(default_factory=set)
    rejected_responses: int = 0
    closed: bool = False


class Buyer(Actor):
    role = "buyer"

    def __init__(self, *args: Any, plans: Sequence[OrderPlan] = (), info: Mapping[str, str] | None = None, notaries: Mapping[str, Notary] | None = None, **kwargs: Any) -> None:
        super().__init__(*args, **kwargs)
        self.plans = sorted(plans, key=lambda p: p.at)
        self.profile_info = dict(info or {})
        self.notary_directory = dict(notaries or {})
        self.orders: dict[int, _BuyerOrder] = {}
        self._url_orders: dict[str, int] = {}

    # order publication
    def buyer_create_order(self, plan: OrderPlan) -> int | None:
        url_base = f"{self.name}/orders/{len(self.orders)}"
        tc_hash = crypto.hash(plan.tc_text.encode())
        order = self.submit("create_order", plan.audience, plan.requested, plan.price, tc_hash, url_base)
        if order is None:
            return None
        offers = [self.notary_directory[n].offer_for(order.id) for n in plan.notaries]
        info = BuyerOrderInfo(
            buyer_pk=self.keys.public,
            name=self.profile_info.get("name", self.name),
            description=self.profile_info.get("description", ""),
            logo=self.profile_info.get("logo", ""),
            tc_text=plan.tc_text,
            intended_use=plan.intended_use,
            notaries=offers,
        )
        self.transport.publish(url_base, info)
        self.transport.register_endpoint(url_base, self.keys.public, self.receive)
        self.transport.register_endpoint(url_base + "/notarized", self.keys.public, self.receive)
        self.orders[order.id] = _BuyerOrder(order, info, plan, {o.notary_address: o for o in offers})
        self.note("order created", order=order.id)
        return order.id

    def _handle(self, msg: Any, sender_pk: bytes) -> None:
        if isinstance(msg, DataResponse):
            bo = self.orders.get(msg.order_id)
            if bo is None or bo.closed:
                self.note("response for closed or unknown order", order=msg.order_id)
                return
            if crypto.address_of(sender_pk) != msg.seller_address or msg.notary_address not in bo.offers:
                bo.rejected_responses += 1
                self.note("response discarded", order=msg.order_id)
                return
            bo.responses.append((msg, sender_pk))
        elif isinstance(msg, NotarizationResponse):
            self.buyer_register_payment(msg)

    # choosing sellers and asking notaries
    def buyer_select(self, bo: _BuyerOrder) -> list[NotarizationRequest]:
        acct = self.ledger.account(self.account_id)
        price = bo.order.price
        chosen: list[tuple[DataResponse, bytes]] = []
        seen: set[bytes] = set()
        fees: set[bytes] = set()
        budget = acct.balance
        for resp, pk in bo.responses:
            if resp.seller_address in seen:
                continue
            if bo.plan.max_sellers is not None and len(chosen) >= bo.plan.max_sellers:
                break
            extra_fee = 0 if resp.notary_address in fees else bo.offers[resp.notary_address].fee
            if budget < price + extra_fee:
                continue
            budget -= price + extra_fee
            fees.add(resp.notary_address)
            seen.add(resp.seller_address)
            chosen.append((resp, pk))
        by_notary: dict[bytes, list[tuple[int, bytes, bytes]]] = {}
        for resp, pk in chosen:
            sid = resp.seller_id
            if resp.needs_buyer_registration:
                sid = self.ledger.id_of(resp.seller_address)
                if sid is None:
                    sid = self.submit("register", resp.seller_address, pk)
                    if sid is None:
                        continue
            elif sid is None or self.ledger.account(sid).address != resp.seller_address:
                self.note("response with inconsistent seller id dropped", order=bo.order.id)
                continue
            bo.selected[resp.seller_address] = resp
            h_s = crypto.hash(resp.ciphertext.to_bytes())
            by_notary.setdefault(resp.notary_address, []).append((sid, resp.seller_address, h_s))
        requests = []
        for notary_address, sellers in by_notary.items():
            req = NotarizationRequest(bo.order.id, bo.order.buyer_url + "/notarized", sellers)
            bo.requests[notary_address] = req
            self.transport.post(self.keys, bo.offers[notary_address].url, req.to_bytes())
            requests.append(req)
        self.note("selected sellers", order=bo.order.id, count=len(bo.selected), notaries=len(requests))
        return requests

    # escrowing the payment
    def buyer_register_payment(self, resp: NotarizationResponse) -> int | None:
        bo = self.orders.get(resp.order_id)
        if bo is None or resp.notary_address not in bo.requests or resp.notary_address in bo.notarized:
            self.note("unexpected notarization response", order=resp.order_id)
            return None
        offer = bo.offers[resp.notary_address]
        if not resp.verify(offer.notary_pk):
            self.note("notarization response signature invalid", order=resp.order_id)
            return None
        ids = paid_ids(resp.results)
        requested = {sid for sid, _, _ in bo.requests[resp.notary_address].sellers}
        if not set(ids) <= requested or resp.fee > offer.fee:
            self.note("notarization response inconsistent with request", order=resp.order_id)
            return None
        if pay_data_hash_for(ids) != resp.pay_data_hash:
            self.note("PayDataMismatch", order=resp.order_id)
            return None
        bo.notarized[resp.notary_address] = resp
        if not ids:
            self.note("nothing to pay", order=resp.order_id)
            return None
        pay_index = self.submit(
            "register_payment",
            self.account_id,
            bo.order.price,
            encode_pay_data(ids),
            resp.lock,
            resp.fee,
            resp.notary_address,
            bo.order.id,
        )
        if pay_index is not None:
            bo.payments[pay_index] = resp.notary_address
            self.note("payment registered", order=bo.order.id, pay_index=pay_index, payees=len(ids))
        return pay_index

    # decryption once the key is public
    def buyer_recover_data(self, bo: _BuyerOrder, pay_index: int) -> dict[bytes, bytes]:
        p = self.ledger.payment(pay_index)
        notary_address = bo.payments[pay_index]
        resp = bo.notarized[notary_address]
        offer = bo.offers[notary_address]
        out: dict[bytes, bytes] = {}
        if p.master_key is None or not crypto.verify_lock(resp.lock, offer.notary_id, p.master_key):
            for r in resp.results:
                if r.verdict != REJECTED:
                    bo.recovery_failed[r.seller_address] = "BadKey"
            self.faults.append(f"order {bo.order.id}: published master key fails the lock")
            return out
        for r in resp.results:
            if r.verdict == REJECTED:
                continue
            dr = bo.selected[r.seller_address]
            try:
                k = crypto.sym_decrypt(p.master_key, r.encrypted_key)
                out[r.seller_address] = crypto.sym_decrypt(k, dr.ciphertext)
            except (crypto.AuthenticationFailure, ValueError, AttributeError) as exc:
                bo.recovery_failed[r.seller_address] = type(exc).__name__
                self.faults.append(f"order {bo.order.id}: notary {notary_address.hex()} sent an unusable key")
        bo.recovered.update(out)
        return out

    def tick(self, block: int) -> None:
        inbox, self.inbox = self.inbox, []
        for msg, pk in inbox:
            self._handle(msg, pk)
        while self.plans and self.plans[0].at <= block:
            self.buyer_create_order(self.plans.pop(0))
        timeout = self.ledger.params.unlock_timeout_blocks
        for bo in self.orders.values():
            if not bo.closed and block >= bo.order.created_block + bo.plan.response_window:
                bo.closed = True
                self.submit("close_order", bo.order.id)
                self.buyer_select(bo)
            for pay_index in bo.payments:
                p = self.ledger.payment(pay_index)
                if p.unlocked and pay_index not in bo.recovery_done:
                    bo.recovery_done.add(pay_index)
                    self.buyer_recover_data(bo, pay_index)
                elif not p.unlocked and not p.refunded and block > p.block + timeout:
                    self.submit("refund_locked_payment", pay_index)
                    if p.refunded:
                        bo.refunded.append(pay_index)
                        self.note("payment refunded", pay_index=pay_index)

    def _payees_of(self, bo: _BuyerOrder, pay_index: int) -> list[bytes]:
        resp = bo.notarized[bo.payments[pay_index]]
        return [r.seller_address for r in resp.results if r.verdict != REJECTED]


@dataclass
class _PendingBatch:
    order_id: int
    master_key: bytes
    lock: Lock
    fee: int
    unlocked: bool = False


class Notary(Actor):
    role = "notary"

    def __init__(
        self,
        *args: Any,
        fee: int = 0,
        terms: str = "",
        percentage: Fraction = Fraction(1),
        verifiers: Mapping[str, Verifier] | None = None,
        ground_truth: Mapping[bytes, Mapping[str, list[dict[str, Any]]]] | None = None,
        behaviors: Iterable[str] = (),
        **kwargs: Any,
    ) -> None:
        super().__init__(*args, **kwargs)
        self.fee = fee
        self.terms = terms
        self.percentage = Fraction(percentage)
        self.verifiers = dict(verifiers or {})
        self.ground_truth = dict(ground_truth or {})
        self.behaviors = set(behaviors)
        self.url = f"{self.name}/inbox"
        self.seller_msgs: dict[tuple[int, bytes], SellerNotaryMsg] = {}
        self.pending: dict[bytes, _PendingBatch] = {}
        self._seen_payments = 0
        self.processed: list[NotarizationResponse] = []
        self.transport.register_endpoint(self.url, self.keys.public, self.receive)

    def offer_for(self, order_id: int) -> NotaryOffer:
        return NotaryOffer.create(self.keys, self.account_id, self.url, order_id, self.fee, self.terms)

    def _check(self, msg: SellerNotaryMsg) -> bool:
        try:
            plaintext = crypto.sym_decrypt(msg.key, msg.ciphertext)
            sections = decode_payload(plaintext)
        except (crypto.AuthenticationFailure, ValueError):
            return False
        truth = self.ground_truth.get(msg.seller_address, {})
        for entity, records in sections:
            verifier = self.verifiers.get(entity, Verifier())
            if not verifier(truth.get(entity, []), records):
                return False
        return True

    # audit and key wrapping
    def notary_process(self, req: NotarizationRequest) -> NotarizationResponse:
        master_key = crypto.new_sym_key(self.rng)
        n = len(req.sellers)
        k = math.ceil(self.percentage * n)
        audited = set(self.rng.sample(range(n), k)) if k else set()
        results = []
        for i, (sid, addr, h_s) in enumerate(req.sellers):
            msg = self.seller_msgs.get((req.order_id, addr))
            if msg is None or crypto.hash(msg.ciphertext.to_bytes()) != h_s:
                verdict = REJECTED
            elif i in audited:
                verdict = APPROVED if self._check(msg) else REJECTED
            else:
                verdict = NOT_NOTARIZED
            enc = None
            if verdict != REJECTED:
                key = msg.key if "garbage_key_notary" not in self.behaviors else crypto.new_sym_key(self.rng)
                enc = crypto.sym_encrypt(master_key, key, self.rng)
            results.append(SellerResult(sid, addr, verdict, enc))
        lock = crypto.make_lock(self.account_id, master_key)
        resp = NotarizationResponse(
            req.order_id,
            results,
            self.fee,
            self.percentage,
            self.address,
            pay_data_hash_for(paid_ids(results)),
            lock,
        )
        resp.sign(self.keys)
        self.pending[lock.digest] = _PendingBatch(req.order_id, master_key, lock, self.fee)
        self.transport.post(self.keys, req.callback_url, resp.to_bytes())
        self.processed.append(resp)
        self.note("notarized", order=req.order_id, approved=sum(r.verdict == APPROVED for r in results), rejected=sum(r.verdict == REJECTED for r in results))
        return resp

    def notary_unlock(self, pay_index: int) -> None:
        p = self.ledger.payment(pay_index)
        batch = self.pending[p.lock.digest]
        if self.submit("unlock_payment", pay_index, self.account_id, batch.master_key) is not None or p.unlocked:
            batch.unlocked = p.unlocked
            self.note("unlocked", pay_index=pay_index)

    def tick(self, block: int) -> None:
        inbox, self.inbox = self.inbox, []
        requests = []
        for msg, pk in inbox:
            if isinstance(msg, SellerNotaryMsg):
                if crypto.address_of(pk) == msg.seller_address:
                    self.seller_msgs[(msg.order_id, msg.seller_address)] = msg
            elif isinstance(msg, NotarizationRequest):
                requests.append(msg)
        for req in requests:
            self.notary_process(req)
        payments = self.ledger.payments
        for p in payments[self._seen_payments :]:
            batch = self.pending.get(p.lock.digest)
            if batch is None or p.notary_address != self.address:
                continue
            if "silent_notary" in self.behaviors:
                self.note("withholding master key", pay_index=p.pay_index)
                continue
            self.notary_unlock(p.pay_index)
        self._seen_payments = len(payments)


class Seller(Actor):
    role = "seller"
    RELAY_PATIENCE = 3

    def __init__(
        self,
        *args: Any,
        profile: SellerProfile,
        price_floor: int = 0,
        trusted: Iterable[bytes] = (),
        accept_tc: bool = True,
        threshold: int = 1,
        delegate: Delegate | None = None,
        delegate_fee_limit: int = 0,
        behaviors: Iterable[str] = (),
        **kwargs: Any,
    ) -> None:
        super().__init__(*args, **kwargs)
        self.profile = profile
        self.price_floor = price_floor
        self.trusted = set(trusted)
        self.accept_tc = accept_tc
        self.threshold = threshold
        self.delegate = delegate
        self.delegate_fee_limit = delegate_fee_limit
        self.behaviors = set(behaviors)
        self.configured = frozenset(self.behaviors)
        self.pending_orders: list[int] = []
        self.responses: dict[int, bytes] = {}
        self.keys_used: dict[int, bytes] = {}
        self.claims: list[CollectPlan] = []
        self.withdraw_requested = 0
        self._last_slot: int | None = None
        self._in_flight: tuple[int, int] | None = None
        self._idle_at: int | None = None
        self.caught = False

    def on_event(self, event: Any) -> None:
        kind, order_id = event
        if kind == "OrderCreated":
            self.pending_orders.append(order_id)

    # deciding whether to answer
    def seller_evaluate_order(self, order: DataOrder, info: BuyerOrderInfo) -> NotaryOffer | None:
        if order.status != "open" or not validate_buyer_info(info, order):
            return None
        if not audience_match(self.profile, order.audience):
            return None
        if order.price < self.price_floor or not self.accept_tc:
            return None
        if any(q.entity not in self.profile.data_store for q in order.requested):
            return None
        candidates = [o for o in info.notaries if o.notary_address in self.trusted]
        if not candidates:
            return None
        return min(candidates, key=lambda o: (o.fee, o.notary_id))

    def _payload(self, order: DataOrder) -> bytes:
        data = extract_requested(self.profile, order.requested)
        if "fabricating_seller" not in self.behaviors:
            return data
        sections = decode_payload(data)
        if not sections:
            sections = [("fabricated", [])]
        entity, records = sections[0]
        fake = dict(records[0]) if records else {"day": 0}
        fake["fabricated"] = len(records) + 1
        sections[0] = (entity, records + [fake])
        return encode_payload(sections)

    # answering an order
    def seller_respond(self, order: DataOrder, offer: NotaryOffer) -> DataResponse:
        key = crypto.new_sym_key(self.rng)
        payload = self._payload(order)
        ct = crypto.sym_encrypt(key, payload, self.rng)
        sid = self.account_id
        dr = DataResponse(order.id, sid, self.address, offer.notary_address, ct, sid is None)
        msg = SellerNotaryMsg(order.id, sid, self.address, ct, key)
        self.transport.post(self.keys, order.buyer_url, dr.to_bytes())
        self.transport.post(self.keys, offer.url, msg.to_bytes())
        self.responses[order.id] = payload
        self.keys_used[order.id] = key
        return dr

    # settlement
    def inclusions(self, from_index: int, to_index: int) -> list[int]:
        sid = self.account_id
        return [
            p.pay_index
            for p in self.ledger.payments[from_index : to_index + 1]
            if p.unlocked and sid in self.ledger.payee_set(p.pay_index)
        ]

    def _settle_range(self) -> tuple[int, int] | None:
        acct = self.ledger.account(self.account_id)
        start = acct.last_collected_pay_index + 1
        end = len(self.ledger.payments) - 1
        sid = acct.id
        for p in self.ledger.payments[start:]:
            if not (p.unlocked or p.refunded) and sid in self.ledger.payee_set(p.pay_index):
                end = p.pay_index - 1
                break
        if end < start:
            return None
        return start, end

    def _fee(self) -> int:
        return self.delegate.fee if self.delegate is not None else 0

    # collect, finalize, and a list plus a proof if challenged
    FEE_RESERVE = 4

    def _send(self, op: str, *args: Any) -> bool:
        """Submit directly or hand to the delegate; False only on a direct failure."""
        if self.delegate is None:
            return self.submit(op, *args) is not None
        sid = self.account_id
        nonce = self.ledger.nonces.get(sid, 0)
        meta = meta_operation(sid, op, args, nonce, self.delegate_fee_limit)
        envelope = crypto.make_envelope(self.keys, meta)
        self.transport.post(self.keys, self.delegate.url, envelope.encode())
        self._in_flight = (nonce, self.ledger.block)
        return True

    def _waiting(self, block: int) -> bool:
        if self._in_flight is None:
            return False
        nonce, sent = self._in_flight
        if self.ledger.nonces.get(self.account_id, 0) > nonce or block > sent + self.RELAY_PATIENCE:
            self._in_flight = None
            return False
        return True

    def seller_settle(self) -> CollectPlan | None:
        window = self._settle_range()
        if window is None:
            return None
        start, end = window
        included = self.inclusions(start, end)
        if len(included) < self.threshold:
            return None
        honest = sum(self.ledger.payments[i].per_destination_amount for i in included)
        declared = honest
        if "greedy_collector" in self.behaviors:
            # the ledger refuses claims beyond free escrow, so only pad when there is room
            if self.ledger.uncommitted_escrow() > honest:
                declared = honest + 1
            else:
                self.note("no escrow headroom to over-declare")
        acct = self.ledger.account(self.account_id)
        stake = self.ledger.params.collect_stake
        need = stake + self.FEE_RESERVE * self._fee() - acct.balance
        if need > 0:
            if self.ledger.token_balance(self.address) >= need:
                self.submit("deposit", acct.id, need)
            if acct.balance < stake + self.FEE_RESERVE * self._fee():
                self.note("cannot fund collect stake")
                return None
        if not self._send("collect", acct.id, end, declared, stake):
            return None
        plan = CollectPlan(start, end, honest, declared, included)
        self.claims.append(plan)
        self.note("collect", declared=declared, honest=honest, payments=len(included))
        return plan

    def _drive_slot(self, slot: Any, block: int) -> None:
        if slot.status == SlotStatus.OPEN and block > slot.deadline:
            self._send("finalize_collect", slot.id)
        elif slot.status == SlotStatus.CHALLENGED:
            self._send("challenge_respond_list", slot.id, self.inclusions(slot.from_index, slot.to_index))
        elif slot.status == SlotStatus.AWAITING_PROOF:
            self._send("challenge_prove_inclusion", slot.id, self.ledger.calldata[slot.picked])
        elif slot.status == SlotStatus.AWAITING_PICK and block > slot.phase_deadline:
            self.submit("timeout_resolve", slot.id)

    def _after_slot(self, slot: Any) -> None:
        self.note("slot settled", slot=slot.id, status=slot.status.value)
        if slot.status == SlotStatus.SETTLED_FRAUD and "greedy_collector" in self.behaviors:
            self.behaviors.discard("greedy_collector")
            self.caught = True
            self.note("caught over-declaring; collecting honestly from now on")
        acct = self.ledger.account(self.account_id)
        amount = acct.balance - self._fee()
        if slot.status == SlotStatus.SETTLED_OK and amount > 0:
            self._send("withdraw", acct.id, amount, self.address)
            self.withdraw_requested += amount

    def tick(self, block: int) -> None:
        orders, self.pending_orders = self.pending_orders, []
        for order_id in orders:
            order = self.ledger.orders.get(order_id)
            try:
                info = self.transport.fetch(order.buyer_url)
            except ProtocolError:
                continue
            offer = self.seller_evaluate_order(order, info)
            if offer is None:
                self.note("declined", order=order_id)
            else:
                self.seller_respond(order, offer)
        sid = self.account_id
        if sid is None or self._waiting(block):
            return
        slot_id = self.ledger.open_slot.get(sid)
        if slot_id is None and self._last_slot is not None:
            last = self.ledger.slot(self._last_slot)
            self._last_slot = None
            self._after_slot(last)
            return
        if slot_id is not None:
            self._last_slot = slot_id
            self._drive_slot(self.ledger.slot(slot_id), block)
            return
        if self._idle_at == len(self.ledger.log):
            return  # nothing on the ledger changed since the last look
        if self.seller_settle() is None:
            self._idle_at = len(self.ledger.log)
        else:
            self._idle_at = None


@dataclass
class CollectPlan:
    from_index: int
    to_index: int
    honest: int
    declared: int
    included: list[int]


class Delegate(Actor):
    """Submits users' signed operations and pays the gas, for a token fee."""

    role = "delegate"

    def __init__(self, *args: Any, fee: int = 0, **kwargs: Any) -> None:
        super().__init__(*args, **kwargs)
        self.fee = fee
        self.url = f"{self.name}/relay"
        self.relayed = 0
        self.transport.register_endpoint(self.url, self.keys.public, self.receive)

    def receive(self, sealed: bytes) -> None:
        try:
            payload, _ = crypto.open_message(self.keys, sealed)
            self.inbox.append((crypto.Envelope.decode(payload), b""))
        except crypto.CryptoError as exc:
            self.note(f"discarded message: {type(exc).__name__}")

    def relay(self, signed_op: crypto.Envelope) -> Any:
        try:
            result = self.ledger.submit_delegated(self.account_id, signed_op, self.fee, sender=self.address)
        except ProtocolError as exc:
            self.note(f"relay failed: {type(exc).__name__}")
            return None
        self.relayed += 1
        return result

    def tick(self, block: int) -> None:
        inbox, self.inbox = self.inbox, []
        for envelope, _ in inbox:
            self.relay(envelope)


class Monitor(Actor):
    """Generic challenger watching collect slots.

    An honest monitor challenges a slot only when the declared amount
    differs from what the ledger owes, and picks a listed payment that
    cannot be proven if one exists. A spurious one challenges every slot.
    """

    role = "monitor"

    def __init__(self, *args: Any, behaviors: Iterable[str] = (), **kwargs: Any) -> None:
        super().__init__(*args, **kwargs)
        self.behaviors = set(behaviors)
        self.challenged: set[int] = set()
        self.outcomes: list[dict[str, Any]] = []

    def _bad_listing(self, slot: Any, pay_index: int) -> bool:
        p = self.ledger.payments[pay_index]
        return not (p.unlocked and slot.from_index <= pay_index <= slot.to_index and slot.account in self.ledger.payee_set(pay_index))

    def tick(self, block: int) -> None:
        spurious = "spurious_challenger" in self.behaviors
        for slot in list(self.ledger.slots.values()):
            if slot.status == SlotStatus.OPEN and slot.id not in self.challenged and block <= slot.deadline:
                honest = self.ledger.honest_amount(slot.account, slot.from_index, slot.to_index)
                if spurious or slot.declared_amount != honest:
                    if self.submit("challenge_open", slot.id) is not None or slot.status == SlotStatus.CHALLENGED:
                        self.challenged.add(slot.id)
                        self.note("challenged", slot=slot.id, declared=slot.declared_amount, honest=honest)
            elif slot.status == SlotStatus.AWAITING_PICK and slot.challenger == self.address:
                bad = [i for i in slot.response if self._bad_listing(slot, i)]
                pick = bad[0] if bad and not spurious else slot.response[0]
                self.submit("challenge_pick", slot.id, pick)
            if slot.phase_deadline is not None and block > slot.phase_deadline and slot.id in self.challenged:
                self.submit("timeout_resolve", slot.id)
