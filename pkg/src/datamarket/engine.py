"""Scenario loading, the deterministic run loop, audits and reports.

A scenario is a JSON document. ``kind`` is ``"protocol"`` (actors play the
full exchange over a simulated ledger and transport) or
``"challenge_matrix"`` (exhaustive enumeration of the collect game).
Amounts are written in tokens and converted exactly to base units.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Mapping

from . import crypto
from .actors import (
    APPROVED,
    NOT_NOTARIZED,
    REJECTED,
    Buyer,
    Delegate,
    Monitor,
    Notary,
    OrderPlan,
    Seller,
    Verifier,
)
from .errors import SchemaViolation
from .exchange import AudienceQuery, DataQuery, OntologySchema, OrderBook, SellerProfile
from .ledger import TOKEN, TOTAL_SUPPLY, InvariantViolation, Ledger, LedgerParams, SlotStatus
from .matrix import run_matrix
from .net import Transport, TransportConfig

FORMAT_VERSION = 1
KINDS = ("protocol", "challenge_matrix")
TOP_LEVEL = {
    "name", "kind", "seed", "blocks", "ontology", "ledger", "transport", "notaries", "delegates",
    "monitors", "buyers", "sellers", "seller_groups", "matrix", "description", "curve",
}
SCENARIO_DIR = Path(__file__).parent / "scenarios"


class ScenarioParseError(ValueError):
    def __init__(self, location: str, message: str) -> None:
        super().__init__(f"{location}: {message}")
        self.location = location
        self.message = message


# ---------------------------------------------------------------------------
# scenario model


def tokens(value: Any, where: str) -> int:
    """Exact token amount in base units."""
    if isinstance(value, bool):
        raise ScenarioParseError(where, "amount must be a number")
    try:
        base = Decimal(str(value)) * TOKEN
    except InvalidOperation:
        raise ScenarioParseError(where, f"bad amount {value!r}") from None
    if base != base.to_integral_value() or base < 0:
        raise ScenarioParseError(where, f"amount {value!r} is not a whole number of base units")
    return int(base)


@dataclass
class NotarySpec:
    name: str
    fee: int
    terms: str = "standard notarization"
    percentage: Fraction = Fraction(1)
    verifiers: dict[str, Verifier] = field(default_factory=dict)
    behaviors: list[str] = field(default_factory=list)
    tokens: int = 0


@dataclass
class DelegateSpec:
    name: str
    fee: int
    tokens: int = 0


@dataclass
class MonitorSpec:
    name: str
    tokens: int
    deposit: int
    behaviors: list[str] = field(default_factory=list)


@dataclass
class BuyerSpec:
    name: str
    tokens: int
    deposit: int
    orders: list[OrderPlan]
    info: dict[str, str] = field(default_factory=dict)


@dataclass
class SellerSpec:
    name: str
    attributes: dict[str, Any]
    data: dict[str, list[dict[str, Any]]]
    ground_truth: dict[str, list[dict[str, Any]]]
    trusted: list[str]
    price_floor: int = 0
    threshold: int = 1
    registered: bool = True
    delegate: str | None = None
    delegate_fee_limit: int = 0
    behaviors: list[str] = field(default_factory=list)
    tokens: int = 0
    where: str = "$.sellers"


@dataclass
class Scenario:
    name: str
    kind: str
    seed: int
    blocks: int
    schema: OntologySchema
    params: LedgerParams
    transport: TransportConfig
    notaries: list[NotarySpec] = field(default_factory=list)
    delegates: list[DelegateSpec] = field(default_factory=list)
    monitors: list[MonitorSpec] = field(default_factory=list)
    buyers: list[BuyerSpec] = field(default_factory=list)
    sellers: list[SellerSpec] = field(default_factory=list)
    matrix: dict[str, int] = field(default_factory=dict)
    curve: str = crypto.DEFAULT_CURVE


SELLER_BEHAVIORS = {"fabricating_seller", "greedy_collector"}
NOTARY_BEHAVIORS = {"silent_notary", "garbage_key_notary"}
MONITOR_BEHAVIORS = {"spurious_challenger"}


def _require(raw: Mapping[str, Any], key: str, where: str) -> Any:
    if key not in raw:
        raise ScenarioParseError(where, f"missing field {key!r}")
    return raw[key]


def _behaviors(raw: Any, allowed: set[str], where: str) -> list[str]:
    out = list(raw or [])
    for b in out:
        if b not in allowed:
            raise ScenarioParseError(where, f"unknown behavior {b!r}")
    return out


def _template(value: Any, i: int) -> Any:
    if isinstance(value, str):
        return value.replace("{i}", str(i))
    if isinstance(value, dict):
        if set(value) == {"cycle"}:
            return _template(value["cycle"][i % len(value["cycle"])], i)
        return {k: _template(v, i) for k, v in value.items()}
    if isinstance(value, list):
        return [_template(v, i) for v in value]
    return value


MERCHANTS = ("grocer", "pharmacy", "fuel", "cafe", "books", "transit")


def _generate(spec: Mapping[str, Any], rng: random.Random, where: str) -> list[dict[str, Any]]:
    kind = spec.get("generate")
    days = int(spec.get("days", 7))
    per_day = int(spec.get("per_day", 1))
    out: list[dict[str, Any]] = []
    if kind == "purchases":
        for day in range(days):
            for k in range(per_day):
                out.append({"day": day, "seq": k, "amount": rng.randrange(100, 20_000), "merchant": rng.choice(MERCHANTS)})
    elif kind == "location":
        lat0, lon0 = spec.get("center", [-34.6, -58.4])
        for day in range(days):
            for k in range(per_day):
                out.append({
                    "day": day,
                    "t": day * 86_400 + k * 3_600,
                    "lat": round(lat0 + rng.uniform(-0.05, 0.05), 6),
                    "lon": round(lon0 + rng.uniform(-0.05, 0.05), 6),
                })
    else:
        raise ScenarioParseError(where, f"unknown generator {kind!r}")
    return out


def _store(raw: Mapping[str, Any], rng: random.Random, where: str) -> dict[str, list[dict[str, Any]]]:
    store = {}
    for entity, records in raw.items():
        if isinstance(records, dict):
            store[entity] = _generate(records, rng, f"{where}.{entity}")
        else:
            store[entity] = [dict(r) for r in records]
    return store


def _seller(raw: Mapping[str, Any], seed: int, where: str) -> SellerSpec:
    name = _require(raw, "name", where)
    rng = random.Random(f"{seed}:data:{name}")
    data = _store(raw.get("data", {}), rng, f"{where}.data")
    truth = _store(raw["ground_truth"], rng, f"{where}.ground_truth") if "ground_truth" in raw else data
    return SellerSpec(
        name=name,
        attributes=dict(raw.get("attributes", {})),
        data=data,
        ground_truth=truth,
        trusted=list(_require(raw, "trusted", where)),
        price_floor=tokens(raw.get("price_floor", 0), f"{where}.price_floor"),
        threshold=int(raw.get("threshold", 1)),
        registered=bool(raw.get("registered", True)),
        delegate=raw.get("delegate"),
        delegate_fee_limit=tokens(raw.get("delegate_fee_limit", 0), f"{where}.delegate_fee_limit"),
        behaviors=_behaviors(raw.get("behaviors"), SELLER_BEHAVIORS, f"{where}.behaviors"),
        tokens=tokens(raw.get("tokens", 0), f"{where}.tokens"),
        where=where,
    )


def _order(raw: Mapping[str, Any], where: str) -> OrderPlan:
    try:
        audience = AudienceQuery.parse(raw.get("audience", []))
    except (TypeError, ValueError):
        raise ScenarioParseError(f"{where}.audience", "clauses are [attribute, op, value]") from None
    requested = []
    for k, q in enumerate(_require(raw, "requested", where)):
        requested.append(DataQuery(_require(q, "entity", f"{where}.requested[{k}]"), dict(q.get("params", {}))))
    return OrderPlan(
        at=int(raw.get("at", 1)),
        audience=audience,
        requested=requested,
        price=tokens(_require(raw, "price", where), f"{where}.price"),
        tc_text=raw.get("tc_text", "data may be used for the stated purpose only"),
        notaries=list(_require(raw, "notaries", where)),
        response_window=int(raw.get("response_window", 3)),
        max_sellers=raw.get("max_sellers"),
        intended_use=raw.get("intended_use", "research"),
    )


def parse_scenario(raw: Mapping[str, Any], seed: int | None = None) -> Scenario:
    """Build and validate a scenario; errors carry a JSON-path-like location."""
    if not isinstance(raw, Mapping):
        raise ScenarioParseError("$", "scenario must be a JSON object")
    for key in raw:
        if key not in TOP_LEVEL:
            raise ScenarioParseError(f"$.{key}", "unknown field")
    kind = raw.get("kind", "protocol")
    if kind not in KINDS:
        raise ScenarioParseError("$.kind", f"unknown kind {kind!r}")
    seed = int(raw.get("seed", 0)) if seed is None else seed
    if not 0 <= seed < 2**64:
        raise ScenarioParseError("$.seed", "seed must fit in 64 bits")
    try:
        params = LedgerParams.from_dict(raw.get("ledger", {}))
    except (ValueError, TypeError) as exc:
        raise ScenarioParseError("$.ledger", str(exc)) from None
    try:
        schema = OntologySchema.from_dict(raw.get("ontology", {}))
    except SchemaViolation as exc:
        raise ScenarioParseError("$.ontology", str(exc)) from None
    sc = Scenario(
        name=raw.get("name", "scenario"),
        kind=kind,
        seed=seed,
        blocks=int(raw.get("blocks", 400)),
        schema=schema,
        params=params,
        transport=TransportConfig.from_dict(raw.get("transport", {})),
        matrix={k: int(v) for k, v in raw.get("matrix", {}).items()},
        curve=raw.get("curve", crypto.DEFAULT_CURVE),
    )
    if sc.curve not in crypto.CURVES:
        raise ScenarioParseError("$.curve", f"unsupported curve {sc.curve!r}")
    if kind == "challenge_matrix":
        return sc

    for k, n in enumerate(raw.get("notaries", [])):
        where = f"$.notaries[{k}]"
        verifiers = {}
        for entity, v in n.get("verifiers", {}).items():
            if entity not in schema.entities:
                raise ScenarioParseError(f"{where}.verifiers", f"undeclared entity {entity!r}")
            verifiers[entity] = Verifier(v.get("kind", "subset"), float(v.get("max_km", 5.0)), float(v.get("window", 0)))
        pct = Fraction(str(n.get("percentage", 1)))
        if not 0 <= pct <= 1:
            raise ScenarioParseError(f"{where}.percentage", "must lie in [0, 1]")
        sc.notaries.append(NotarySpec(
            _require(n, "name", where),
            tokens(n.get("fee", 0), f"{where}.fee"),
            n.get("terms", "standard notarization"),
            pct,
            verifiers,
            _behaviors(n.get("behaviors"), NOTARY_BEHAVIORS, f"{where}.behaviors"),
            tokens(n.get("tokens", 0), f"{where}.tokens"),
        ))
    for k, d in enumerate(raw.get("delegates", [])):
        where = f"$.delegates[{k}]"
        sc.delegates.append(DelegateSpec(_require(d, "name", where), tokens(d.get("fee", 0), f"{where}.fee"), tokens(d.get("tokens", 0), f"{where}.tokens")))
    for k, m in enumerate(raw.get("monitors", [])):
        where = f"$.monitors[{k}]"
        sc.monitors.append(MonitorSpec(
            _require(m, "name", where),
            tokens(m.get("tokens", 0), f"{where}.tokens"),
            tokens(m.get("deposit", 0), f"{where}.deposit"),
            _behaviors(m.get("behaviors"), MONITOR_BEHAVIORS, f"{where}.behaviors"),
        ))
    for k, b in enumerate(raw.get("buyers", [])):
        where = f"$.buyers[{k}]"
        orders = [_order(o, f"{where}.orders[{j}]") for j, o in enumerate(b.get("orders", []))]
        sc.buyers.append(BuyerSpec(
            _require(b, "name", where),
            tokens(b.get("tokens", 0), f"{where}.tokens"),
            tokens(b.get("deposit", 0), f"{where}.deposit"),
            orders,
            dict(b.get("info", {})),
        ))
    for k, s in enumerate(raw.get("sellers", [])):
        sc.sellers.append(_seller(s, seed, f"$.sellers[{k}]"))
    for k, g in enumerate(raw.get("seller_groups", [])):
        where = f"$.seller_groups[{k}]"
        count = int(_require(g, "count", where))
        body = {key: v for key, v in g.items() if key != "count"}
        for i in range(count):
            sc.sellers.append(_seller(_template(body, i), seed, f"{where}[{i}]"))
    _check_references(sc)
    return sc


def _check_references(sc: Scenario) -> None:
    names: dict[str, str] = {}
    for role, items in (("notaries", sc.notaries), ("delegates", sc.delegates), ("monitors", sc.monitors), ("buyers", sc.buyers), ("sellers", sc.sellers)):
        for k, item in enumerate(items):
            if item.name in names:
                raise ScenarioParseError(f"$.{role}[{k}].name", f"duplicate actor name {item.name!r}")
            names[item.name] = role
    notaries = {n.name for n in sc.notaries}
    delegates = {d.name for d in sc.delegates}
    for k, b in enumerate(sc.buyers):
        for j, plan in enumerate(b.orders):
            where = f"$.buyers[{k}].orders[{j}]"
            for n in plan.notaries:
                if n not in notaries:
                    raise ScenarioParseError(f"{where}.notaries", f"dangling notary reference {n!r}")
            try:
                sc.schema.validate_audience(plan.audience)
            except SchemaViolation as exc:
                raise ScenarioParseError(f"{where}.audience", str(exc)) from None
            for q in plan.requested:
                try:
                    sc.schema.validate_query(q)
                except SchemaViolation as exc:
                    raise ScenarioParseError(f"{where}.requested", str(exc)) from None
            if plan.response_window < 2:
                raise ScenarioParseError(f"{where}.response_window", "responses need at least 2 blocks to arrive")
    for s in sc.sellers:
        where = s.where
        for n in s.trusted:
            if n not in notaries:
                raise ScenarioParseError(f"{where}.trusted", f"dangling notary reference {n!r} (seller {s.name})")
        if s.delegate is not None and s.delegate not in delegates:
            raise ScenarioParseError(f"{where}.delegate", f"dangling delegate reference {s.delegate!r} (seller {s.name})")
        try:
            sc.schema.validate_profile(s.attributes)
        except SchemaViolation as exc:
            raise ScenarioParseError(f"{where}.attributes", f"{exc} (seller {s.name})") from None
        for entity in s.data:
            if entity not in sc.schema.entities:
                raise ScenarioParseError(f"{where}.data", f"undeclared entity {entity!r} (seller {s.name})")


def load_scenario(path: str | Path, seed: int | None = None) -> Scenario:
    return parse_scenario(read_scenario(path), seed)


def resolve_path(path: str | Path) -> Path:
    """A file path, or the name of a bundled scenario."""
    p = Path(path)
    if p.exists():
        return p
    bundled = SCENARIO_DIR / (p.name if p.suffix == ".json" else p.name + ".json")
    if bundled.exists():
        return bundled
    raise ScenarioParseError(str(path), "no such scenario file")


def read_scenario(path: str | Path) -> dict[str, Any]:
    p = resolve_path(path)
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioParseError(f"{p.name}:{exc.lineno}:{exc.colno}", exc.msg) from None


def bundled_scenarios() -> list[str]:
    return sorted(p.stem for p in SCENARIO_DIR.glob("*.json"))


# ---------------------------------------------------------------------------
# engine


@dataclass
class RunResult:
    report: dict[str, Any]
    trace: list[str]
    ok: bool

    def report_json(self) -> str:
        return json.dumps(self.report, indent=2, sort_keys=True) + "\n"

    def trace_text(self) -> str:
        return "".join(line + "\n" for line in self.trace)


class Engine:
    """Builds the world for a protocol scenario and runs it block by block."""

    TREASURY = b"\xee" * crypto.ADDRESS_SIZE

    def __init__(self, sc: Scenario) -> None:
        self.sc = sc
        self.journal: list[dict[str, Any]] = []
        self.ledger = Ledger(sc.params, treasury=self.TREASURY, orders=OrderBook(sc.schema), check_every_tx=True)
        self.transport = Transport(self._rng("transport"), sc.transport)
        key_rng = self._rng("keys")
        actor_args = lambda name: (name, crypto.SigningKeyPair.generate(key_rng), self.ledger, self.transport, self._rng(f"actor:{name}"), self.journal)  # noqa: E731

        self.notaries: dict[str, Notary] = {}
        for n in sc.notaries:
            self.notaries[n.name] = Notary(*actor_args(n.name), fee=n.fee, terms=n.terms, percentage=n.percentage, verifiers=n.verifiers, behaviors=n.behaviors)
        self.delegates = {d.name: Delegate(*actor_args(d.name), fee=d.fee) for d in sc.delegates}
        self.monitors = [Monitor(*actor_args(m.name), behaviors=m.behaviors) for m in sc.monitors]
        self.buyers = [Buyer(*actor_args(b.name), plans=b.orders, info=b.info, notaries=self.notaries) for b in sc.buyers]
        self.sellers: list[Seller] = []
        for s in sc.sellers:
            seller = Seller(
                *actor_args(s.name),
                profile=SellerProfile(s.attributes, s.data),
                price_floor=s.price_floor,
                trusted=[self.notaries[t].address for t in s.trusted],
                threshold=s.threshold,
                delegate=self.delegates.get(s.delegate) if s.delegate else None,
                delegate_fee_limit=s.delegate_fee_limit,
                behaviors=s.behaviors,
            )
            self.sellers.append(seller)
            self.transport.subscribe(seller.on_event)
        truth = {seller.address: spec.ground_truth for seller, spec in zip(self.sellers, sc.sellers)}
        for notary in self.notaries.values():
            notary.ground_truth = truth
        self.start_balances: dict[str, dict[str, int]] = {}
        self.violations: list[str] = []
        self.blocks_run = 0
        self._events_sent = 0

    def _rng(self, purpose: str) -> random.Random:
        return random.Random(f"{self.sc.seed}:{purpose}")

    @property
    def actors(self) -> list[Any]:
        return [*self.buyers, *self.notaries.values(), *self.sellers, *self.delegates.values(), *self.monitors]

    # -- lifecycle --------------------------------------------------------

    def setup(self) -> None:
        sc = self.sc
        funding: list[tuple[Any, int, int]] = []
        funding += [(self.notaries[n.name], n.tokens, 0) for n in sc.notaries]
        funding += [(self.delegates[d.name], d.tokens, 0) for d in sc.delegates]
        funding += [(m, spec.tokens, spec.deposit) for m, spec in zip(self.monitors, sc.monitors)]
        funding += [(b, spec.tokens, spec.deposit) for b, spec in zip(self.buyers, sc.buyers)]
        funding += [(s, spec.tokens, 0) for s, spec in zip(self.sellers, sc.sellers)]
        for actor, amount, _ in funding:
            if amount:
                self.ledger.transfer(actor.address, amount, sender=self.TREASURY)
        registered = {s.name for s in sc.sellers if not s.registered}
        for actor, _, deposit in funding:
            if actor.name in registered:
                continue
            actor.setup(deposit)
        self.start_balances = self.balances()

    def _busy(self) -> bool:
        led = self.ledger
        if self.transport.pending() or len(led.events) > self._events_sent:
            return True
        if any(b.plans or any(not bo.closed for bo in b.orders.values()) for b in self.buyers):
            return True
        if any(s.status in (SlotStatus.OPEN, SlotStatus.CHALLENGED, SlotStatus.AWAITING_PICK, SlotStatus.AWAITING_PROOF) for s in led.slots.values()):
            return True
        if any(not (p.unlocked or p.refunded) for p in led.payments):
            return True
        return any(s._in_flight is not None or s._last_slot is not None or s.pending_orders for s in self.sellers)

    def step(self, block: int) -> None:
        self.ledger.advance_block(block - self.ledger.block)
        self.transport.deliver(block)
        for actor in self.actors:
            actor.tick(block)
        events = self.ledger.events
        for event in events[self._events_sent :]:
            self.transport.broadcast_event(event)
        self._events_sent = len(events)
        self.ledger.assert_invariants()

    def run(self) -> RunResult:
        try:
            self.setup()
            idle = 0
            for block in range(1, self.sc.blocks + 1):
                self.step(block)
                self.blocks_run = block
                idle = 0 if self._busy() else idle + 1
                if idle >= 2:
                    break
        except InvariantViolation as exc:
            self.violations.append(f"InvariantViolation: {exc}")
        report = self.report()
        return RunResult(report, self.trace(), report["ok"])

    # -- reporting --------------------------------------------------------

    def balances(self) -> dict[str, dict[str, int]]:
        out = {}
        for actor in self.actors:
            sid = actor.account_id
            out[actor.name] = {
                "token": self.ledger.token_balance(actor.address),
                "batpay": self.ledger.balance(sid) if sid is not None else 0,
            }
        return out

    def report(self) -> dict[str, Any]:
        led = self.ledger
        end = self.balances()
        audit = Audit(self)
        checks = audit.run()
        violations = list(self.violations) + [v for c in checks.values() for v in c["violations"]]
        gas = led.gas_report()
        model = led.params.gas
        gas["model"] = {"reg_payment_fixed": model.reg_payment_fixed, "reg_payment_per_id": model.reg_payment_per_id, "collect": model.fixed["collect"]}
        return {
            "format_version": FORMAT_VERSION,
            "scenario": self.sc.name,
            "kind": "protocol",
            "seed": self.sc.seed,
            "blocks_run": self.blocks_run,
            "transactions": len(led.log),
            "failed_transactions": sum(1 for r in led.log if r.outcome != "ok"),
            "messages": {"sent": len(self.transport.wire), "dropped": len(self.transport.dropped)},
            "balances": {
                name: {"role": actor.role, "address": "0x" + actor.address.hex(), "start": self.start_balances.get(name, {"token": 0, "batpay": 0}), "end": end[name]}
                for name, actor in ((a.name, a) for a in self.actors)
            },
            "supply": {"total": TOTAL_SUPPLY, "accounted": led.total_accounted(), "escrow": led.escrow()},
            "gas": gas,
            "orders": audit.order_outcomes(),
            "challenges": audit.challenge_outcomes(),
            "invariants": checks,
            "faults": sorted({f for a in self.actors for f in a.faults}),
            "violations": violations,
            "ok": not violations,
        }

    def trace(self) -> list[str]:
        lines = [json.dumps({"type": "tx", **rec.to_dict()}, sort_keys=True) for rec in self.ledger.log]
        for line in self.transport.transcript:
            block, sender, url, digest = line.split("\t")
            lines.append(json.dumps({"type": "delivery", "block": int(block), "sender": sender, "url": url, "payload_hash": digest}, sort_keys=True))
        for entry in self.journal:
            lines.append(json.dumps({"type": "decision", **entry}, sort_keys=True, default=_jsonable))
        return lines


def _jsonable(v: Any) -> Any:
    if isinstance(v, (bytes, bytearray)):
        return "0x" + bytes(v).hex()
    return str(v)


class Audit:
    """Post-run checks of the exchange properties over the final state."""

    def __init__(self, engine: Engine) -> None:
        self.e = engine
        self.led = engine.ledger
        self.by_address = {a.address: a for a in engine.actors}

    def _check(self, name: str, checked: int, violations: list[str]) -> dict[str, Any]:
        return {"checked": checked, "violations": violations, "ok": not violations}

    def run(self) -> dict[str, dict[str, Any]]:
        return {
            "conservation": self.conservation(),
            "atomicity": self.atomicity(),
            "rejected_excluded": self.rejected_excluded(),
            "fabricators_rejected": self.fabricators_rejected(),
            "greedy_settled_fraud": self.greedy_settled_fraud(),
            "honest_collects_credited": self.honest_collects(),
        }

    def conservation(self) -> dict[str, Any]:
        total = self.led.total_accounted()
        bad = [] if total == TOTAL_SUPPLY else [f"accounted {total} != supply {TOTAL_SUPPLY}"]
        return self._check("conservation", len(self.led.log), bad)

    def _batches(self) -> Iterable[tuple[Buyer, Any, int, Any]]:
        for buyer in self.e.buyers:
            for bo in buyer.orders.values():
                for pay_index, notary_address in bo.payments.items():
                    yield buyer, bo, pay_index, bo.notarized[notary_address]

    def atomicity(self) -> dict[str, Any]:
        bad = []
        checked = 0
        published = [p.master_key for p in self.led.payments if p.master_key is not None]
        for buyer, bo, pay_index, resp in self._batches():
            checked += 1
            p = self.led.payment(pay_index)
            paid = [r for r in resp.results if r.verdict != REJECTED]
            if p.unlocked:
                if p.master_key is None:
                    bad.append(f"payment {pay_index}: unlocked without a published key")
                notary_fault = any(r.seller_address in bo.recovery_failed for r in paid)
                for r in paid:
                    seller = self.by_address.get(r.seller_address)
                    got = bo.recovered.get(r.seller_address)
                    if got is None and not notary_fault:
                        bad.append(f"payment {pay_index}: seller {r.seller_id} paid but data not recovered")
                    if got is not None and seller is not None and got != seller.responses.get(bo.order.id):
                        bad.append(f"payment {pay_index}: recovered data differs from seller {r.seller_id}'s payload")
                if notary_fault and not buyer.faults:
                    bad.append(f"payment {pay_index}: unusable key not attributed to the notary")
            else:
                if any(r.seller_address in bo.recovered for r in paid):
                    bad.append(f"payment {pay_index}: data recovered without unlock")
                for r in paid:
                    for key in published:
                        try:
                            crypto.sym_decrypt(key, r.encrypted_key)
                        except crypto.AuthenticationFailure:
                            continue
                        bad.append(f"payment {pay_index}: seller key recoverable without its master key")
                expired = self.led.block > p.block + self.led.params.unlock_timeout_blocks
                if expired and not p.refunded:
                    bad.append(f"payment {pay_index}: locked past timeout and not refunded")
                for sid in self.led.payee_set(pay_index):
                    for slot in self.led.slots.values():
                        if slot.account == sid and slot.status == SlotStatus.SETTLED_OK and slot.from_index <= pay_index <= slot.to_index and slot.declared_amount > self.led.honest_amount(sid, slot.from_index, slot.to_index):
                            bad.append(f"payment {pay_index}: seller {sid} credited for a locked payment")
        return self._check("atomicity", checked, bad)

    def rejected_excluded(self) -> dict[str, Any]:
        bad = []
        checked = 0
        for _, _, pay_index, resp in self._batches():
            payees = self.led.payee_set(pay_index)
            for r in resp.results:
                if r.verdict == REJECTED:
                    checked += 1
                    if r.seller_id in payees:
                        bad.append(f"payment {pay_index}: rejected seller {r.seller_id} in payData")
        return self._check("rejected_excluded", checked, bad)

    def fabricators_rejected(self) -> dict[str, Any]:
        bad = []
        checked = 0
        for notary in self.e.notaries.values():
            for resp in notary.processed:
                for r in resp.results:
                    seller = self.by_address.get(r.seller_address)
                    if seller is None or "fabricating_seller" not in seller.configured:
                        continue
                    if r.verdict == APPROVED:
                        bad.append(f"order {resp.order_id}: fabricating seller {seller.name} approved")
                    if r.verdict != NOT_NOTARIZED:
                        checked += 1
        return self._check("fabricators_rejected", checked, bad)

    def greedy_settled_fraud(self) -> dict[str, Any]:
        """Every over-declared collect must end settled_fraud when someone honest watches."""
        honest_watch = any("spurious_challenger" not in m.behaviors for m in self.e.monitors)
        bad = []
        checked = 0
        for slot in self.led.slots.values():
            honest = self.led.honest_amount(slot.account, slot.from_index, slot.to_index)
            if slot.declared_amount <= honest:
                continue
            checked += 1
            if honest_watch and slot.status == SlotStatus.SETTLED_OK:
                bad.append(f"slot {slot.id}: declared {slot.declared_amount} over {honest} and settled ok")
        return self._check("greedy_settled_fraud", checked, bad)

    def honest_collects(self) -> dict[str, Any]:
        bad = []
        checked = 0
        slots_of: dict[int, list[Any]] = {}
        for slot in self.led.slots.values():
            slots_of.setdefault(slot.account, []).append(slot)
        for seller in self.e.sellers:
            if "greedy_collector" in seller.configured or seller.account_id is None:
                continue
            for slot in slots_of.get(seller.account_id, []):
                checked += 1
                honest = self.led.honest_amount(slot.account, slot.from_index, slot.to_index)
                if slot.declared_amount != honest:
                    bad.append(f"slot {slot.id}: honest seller {seller.name} declared {slot.declared_amount} != {honest}")
                if slot.status == SlotStatus.SETTLED_FRAUD:
                    bad.append(f"slot {slot.id}: honest seller {seller.name} lost its stake")
        return self._check("honest_collects_credited", checked, bad)

    def order_outcomes(self) -> list[dict[str, Any]]:
        out = []
        for buyer in self.e.buyers:
            for bo in buyer.orders.values():
                verdicts = [r.verdict for resp in bo.notarized.values() for r in resp.results]
                verified = sum(
                    1
                    for addr, data in bo.recovered.items()
                    if self.by_address.get(addr) is not None and data == self.by_address[addr].responses.get(bo.order.id)
                )
                out.append({
                    "order": bo.order.id,
                    "buyer": buyer.name,
                    "price": bo.order.price,
                    "responses": len(bo.responses),
                    "discarded_responses": bo.rejected_responses,
                    "selected": len(bo.selected),
                    "approved": verdicts.count(APPROVED),
                    "not_notarized": verdicts.count(NOT_NOTARIZED),
                    "rejected": verdicts.count(REJECTED),
                    "payments": sorted(bo.payments),
                    "recovered": len(bo.recovered),
                    "recovered_verified": verified,
                    "recovery_failed": len(bo.recovery_failed),
                    "refunded": sorted(bo.refunded),
                })
        return out

    def challenge_outcomes(self) -> list[dict[str, Any]]:
        out = []
        for slot in self.led.slots.values():
            owner = self.by_address.get(self.led.account(slot.account).address)
            rounds = [(block, challenger, winner, reason) for block, challenger, winner, reason in slot.history]
            if slot.challenger is not None and slot.status != SlotStatus.SETTLED_FRAUD:
                rounds.append((None, "0x" + slot.challenger.hex(), None, "pending"))
            for block, challenger, winner, reason in rounds:
                out.append({
                    "slot": slot.id,
                    "seller": owner.name if owner else slot.account,
                    "declared": slot.declared_amount,
                    "honest": self.led.honest_amount(slot.account, slot.from_index, slot.to_index),
                    "challenger": challenger,
                    "winner": winner,
                    "reason": reason,
                    "resolved_block": block,
                    "status": slot.status.value,
                })
        return out


def run_scenario(sc: Scenario) -> RunResult:
    if sc.kind == "challenge_matrix":
        return _run_matrix(sc)
    with crypto.use_curve(sc.curve):
        return Engine(sc).run()


def _run_matrix(sc: Scenario) -> RunResult:
    summary = run_matrix(sc.matrix.get("max_payments", 6), sc.matrix.get("max_sellers", 4), sc.params)
    body = summary.to_dict()
    failures = [
        {"payments": len(f.config.included), "included": list(f.config.included), "unlocked": list(f.config.unlocked),
         "declared": f.declared, "honest": f.config.honest, "strategy": f.strategy, "status": f.status}
        for f in summary.failures
    ]
    violations = [f"{f['strategy']} declared {f['declared']} (honest {f['honest']}) ended {f['status']}" for f in failures]
    report = {
        "format_version": FORMAT_VERSION,
        "scenario": sc.name,
        "kind": "challenge_matrix",
        "seed": sc.seed,
        "matrix": body,
        "failures": failures,
        "violations": violations,
        "ok": not violations,
    }
    trace = [json.dumps({"type": "matrix", **body}, sort_keys=True)]
    return RunResult(report, trace, not violations)


def run_file(path: str | Path, seed: int | None = None) -> RunResult:
    return run_scenario(load_scenario(path, seed))


def summary_table(report: Mapping[str, Any]) -> str:
    """Human-readable digest of a report."""
    rows: list[tuple[str, str]] = [("scenario", str(report["scenario"])), ("seed", str(report["seed"]))]
    if report["kind"] == "challenge_matrix":
        m = report["matrix"]
        rows += [
            ("configurations", str(m["configs"])),
            ("cases", str(m["cases"])),
            ("honest settled_ok", f"{m['honest_settled_ok_pct']:.1f}%"),
            ("fraud settled_fraud", f"{m['fraud_settled_fraud_pct']:.1f}%"),
        ]
    else:
        pp = report["gas"]["per_payment"]
        rows += [
            ("blocks", str(report["blocks_run"])),
            ("transactions", f"{report['transactions']} ({report['failed_transactions']} failed)"),
            ("total gas", f"{report['gas']['total_gas']:,}"),
            ("gas/payment register", f"{pp['register']:,}"),
            ("gas/payment collect", f"{pp['collect']:,}"),
            ("gas/payment combined", f"{pp['combined']:,}"),
            ("USD/payment", f"${pp['usd']:.5f}"),
        ]
        for o in report["orders"]:
            rows.append((f"order {o['order']}", f"{o['selected']} selected, {o['approved']} approved, {o['not_notarized']} not notarized, {o['rejected']} rejected, {o['recovered_verified']} recovered"))
        for name, check in report["invariants"].items():
            rows.append((name, f"{'ok' if check['ok'] else 'VIOLATED'} ({check['checked']} checked)"))
    rows.append(("result", "ok" if report["ok"] else f"{len(report['violations'])} violation(s)"))
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)


__all__ = [
    "Engine",
    "RunResult",
    "Scenario",
    "ScenarioParseError",
    "bundled_scenarios",
    "load_scenario",
    "parse_scenario",
    "read_scenario",
    "resolve_path",
    "run_file",
    "run_scenario",
    "summary_table",
    "tokens",
]
