"""Orders, audience matching, buyer info validation and data extraction."""

from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from datamarket import crypto
from datamarket.errors import SchemaViolation
from datamarket.exchange import (
    AlreadyClosed,
    AudienceQuery,
    BuyerOrderInfo,
    DataQuery,
    MissingEntity,
    NotaryOffer,
    NotOwner,
    OntologySchema,
    OrderBook,
    SellerProfile,
    UnregisteredBuyer,
    audience_match,
    decode_payload,
    encode_payload,
    extract_requested,
    validate_buyer_info,
)
from datamarket.ledger import Ledger

from oracles import audience_oracle

SCHEMA = OntologySchema(
    {"Gender": "categorical", "Age": "numeric", "Income": "numeric", "Residency": "categorical"},
    {"browsing": {"start": "int", "days": "int"}, "location": {}},
)
EXAMPLE_QUERY = AudienceQuery.parse([["Gender", "=", "Women"], ["Age", ">=", 40], ["Income", ">=", 200_000], ["Residency", "=", "Spain"]])
TC = "Data is used for aggregate research only."


def _profile(**attrs: object) -> SellerProfile:
    base = {"Gender": "Women", "Age": 45, "Income": 250_000, "Residency": "Spain"}
    base.update(attrs)
    return SellerProfile(base, {"browsing": [{"day": d, "url": f"site{d}.example"} for d in range(10)]})


class TestAudienceMatch:
    def test_example_profile_matches(self) -> None:
        assert audience_match(_profile(), EXAMPLE_QUERY, SCHEMA)

    def test_age_boundary(self) -> None:
        assert not audience_match(_profile(Age=39), EXAMPLE_QUERY, SCHEMA)
        assert audience_match(_profile(Age=40), EXAMPLE_QUERY, SCHEMA)

    def test_empty_query(self) -> None:
        assert audience_match(SellerProfile({}), AudienceQuery())

    def test_missing_attribute_fails_clause(self) -> None:
        assert not audience_match(SellerProfile({"Age": 50}), AudienceQuery.parse([["Gender", "=", "Women"]]))

    def test_undeclared_attribute(self) -> None:
        with pytest.raises(SchemaViolation):
            audience_match(_profile(), AudienceQuery.parse([["EyeColor", "=", "green"]]), SCHEMA)

    def test_order_op_on_categorical(self) -> None:
        with pytest.raises(SchemaViolation):
            SCHEMA.validate_audience(AudienceQuery.parse([["Gender", ">=", "A"]]))

    def test_unknown_operator(self) -> None:
        with pytest.raises(SchemaViolation):
            SCHEMA.validate_audience(AudienceQuery.parse([["Age", "!=", 3]]))

    def test_non_numeric_profile_value(self) -> None:
        with pytest.raises(SchemaViolation):
            SCHEMA.validate_profile({"Age": "old"})

    def test_bad_attribute_kind(self) -> None:
        with pytest.raises(SchemaViolation):
            OntologySchema({"x": "ordinal"}, {})

    def test_brute_force_agreement(self) -> None:
        """10^4 random schemas of up to six attributes, profiles and queries."""
        rng = random.Random(99)
        for _ in range(10_000):
            names = [f"a{i}" for i in range(rng.randint(1, 6))]
            kinds = {n: rng.choice(["numeric", "categorical"]) for n in names}
            schema = OntologySchema(kinds, {})
            attrs = {n: (rng.randint(0, 5) if k == "numeric" else rng.choice("xyz")) for n, k in kinds.items() if rng.random() < 0.9}
            clauses = []
            for _ in range(rng.randint(0, 4)):
                n = rng.choice(names)
                if kinds[n] == "numeric":
                    clauses.append([n, rng.choice(["=", ">=", "<="]), rng.randint(0, 5)])
                else:
                    clauses.append([n, "=", rng.choice("xyz")])
            query = AudienceQuery.parse(clauses)
            assert audience_match(SellerProfile(attrs), query, schema) == audience_oracle(attrs, clauses)

    @given(st.dictionaries(st.sampled_from("abcdef"), st.integers(-3, 3)), st.lists(st.tuples(st.sampled_from("abcdef"), st.sampled_from(["=", ">=", "<="]), st.integers(-3, 3)), max_size=5))
    def test_brute_force_property(self, attrs: dict[str, int], clauses: list[tuple[str, str, int]]) -> None:
        assert audience_match(SellerProfile(attrs), AudienceQuery.parse(clauses)) == audience_oracle(attrs, clauses)


class TestOrderBook:
    def _ledger(self) -> tuple[Ledger, bytes]:
        led = Ledger(orders=OrderBook(SCHEMA))
        buyer = b"\x01" * 20
        led.register(buyer, sender=buyer)
        return led, buyer

    def test_sequential_ids_and_events(self) -> None:
        led, buyer = self._ledger()
        a = led.create_order(EXAMPLE_QUERY, [], 10, crypto.hash(TC.encode()), "b/0", sender=buyer)
        b = led.create_order(EXAMPLE_QUERY, [], 10, crypto.hash(TC.encode()), "b/1", sender=buyer)
        assert (a.id, b.id) == (0, 1)
        assert led.events == [("OrderCreated", 0), ("OrderCreated", 1)]

    def test_undeclared_attribute(self) -> None:
        led, buyer = self._ledger()
        with pytest.raises(SchemaViolation):
            led.create_order(AudienceQuery.parse([["EyeColor", "=", "green"]]), [], 10, bytes(32), "b/0", sender=buyer)

    def test_empty_requested_is_valid(self) -> None:
        led, buyer = self._ledger()
        assert led.create_order(EXAMPLE_QUERY, [], 10, bytes(32), "b/0", sender=buyer).requested == ()

    def test_unregistered_buyer(self) -> None:
        led, _ = self._ledger()
        with pytest.raises(UnregisteredBuyer):
            led.create_order(EXAMPLE_QUERY, [], 10, bytes(32), "b/0", sender=b"\x09" * 20)

    def test_price_positive(self) -> None:
        led, buyer = self._ledger()
        with pytest.raises(SchemaViolation):
            led.create_order(EXAMPLE_QUERY, [], 0, bytes(32), "b/0", sender=buyer)

    def test_bad_query_param(self) -> None:
        led, buyer = self._ledger()
        with pytest.raises(SchemaViolation):
            led.create_order(EXAMPLE_QUERY, [DataQuery("browsing", {"start": "monday"})], 10, bytes(32), "b/0", sender=buyer)

    def test_close(self) -> None:
        led, buyer = self._ledger()
        o = led.create_order(EXAMPLE_QUERY, [], 10, bytes(32), "b/0", sender=buyer)
        led.close_order(o.id, sender=buyer)
        assert o.status == "closed"
        with pytest.raises(AlreadyClosed):
            led.close_order(o.id, sender=buyer)

    def test_close_by_stranger(self) -> None:
        led, buyer = self._ledger()
        o = led.create_order(EXAMPLE_QUERY, [], 10, bytes(32), "b/0", sender=buyer)
        with pytest.raises(NotOwner):
            led.close_order(o.id, sender=b"\x02" * 20)

    def test_query_encoding_is_canonical(self) -> None:
        led, buyer = self._ledger()
        o = led.create_order(EXAMPLE_QUERY, [DataQuery("browsing", {"days": 2, "start": 3})], 10, bytes(32), "b/0", sender=buyer)
        assert o.encode_queries() == o.encode_queries()
        assert b'"params":{"days":2,"start":3}' in o.encode_queries()


class TestBuyerInfo:
    def _setup(self, rng: random.Random) -> tuple[BuyerOrderInfo, object]:
        book = OrderBook()
        order = book.create(b"\x01" * 20, EXAMPLE_QUERY, [], 10, crypto.hash(TC.encode()), "b/0", 0)
        notary = crypto.SigningKeyPair.generate(rng)
        offer = NotaryOffer.create(notary, 4, "n/inbox", order.id, 2, "standard")
        info = BuyerOrderInfo(b"", "buyer", "", "", TC, "research", [offer])
        return info, order

    def test_consistent(self, rng: random.Random) -> None:
        info, order = self._setup(rng)
        assert validate_buyer_info(info, order)

    def test_any_changed_byte_fails(self, rng: random.Random) -> None:
        info, order = self._setup(rng)
        raw = TC.encode()
        for i in range(len(raw)):
            altered = raw[:i] + bytes([raw[i] ^ 0x20]) + raw[i + 1 :]
            info.tc_text = altered.decode("latin-1")
            assert not validate_buyer_info(info, order)

    def test_forged_notary_signature(self, rng: random.Random) -> None:
        info, order = self._setup(rng)
        o = info.notaries[0]
        info.notaries[0] = NotaryOffer(o.notary_id, o.notary_address, o.notary_pk, o.url, o.fee + 1, o.terms, o.signature)
        assert not validate_buyer_info(info, order)

    def test_offer_for_other_order(self, rng: random.Random) -> None:
        info, _ = self._setup(rng)
        assert not info.notaries[0].verify(1)


class TestExtraction:
    def test_window(self) -> None:
        data = extract_requested(_profile(), [DataQuery("browsing", {"start": 4, "days": 2})])
        [(entity, records)] = decode_payload(data)
        assert entity == "browsing" and [r["day"] for r in records] == [4, 5]

    def test_missing_entity(self) -> None:
        with pytest.raises(MissingEntity):
            extract_requested(_profile(), [DataQuery("location")])

    def test_empty_request(self) -> None:
        assert decode_payload(extract_requested(_profile(), [])) == []

    def test_deterministic(self) -> None:
        q = [DataQuery("browsing", {"start": 0, "days": 10})]
        assert extract_requested(_profile(), q) == extract_requested(_profile(), q)

    def test_boolean_values_refused(self) -> None:
        with pytest.raises(TypeError):
            encode_payload([("e", [{"flag": True}])])

    @settings(max_examples=200)
    @given(st.lists(st.tuples(st.text(max_size=8), st.lists(st.dictionaries(st.text(max_size=5), st.one_of(st.integers(-2**40, 2**40), st.text(max_size=10), st.floats(allow_nan=False)), max_size=4), max_size=4)), max_size=3))
    def test_payload_round_trip(self, sections: list) -> None:
        raw = encode_payload(sections)
        assert decode_payload(raw) == [(e, [dict(sorted(r.items())) for r in recs]) for e, recs in sections]
