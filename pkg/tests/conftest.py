"""Shared fixtures: seeded randomness and a small funded ledger."""

from __future__ import annotations

import random
from dataclasses import dataclass

import pytest

from datamarket import crypto
from datamarket.ledger import TOKEN, Ledger, LedgerParams, encode_pay_data

TREASURY = b"\xaa" * 20
MASTER = bytes(range(32))


@dataclass
class World:
    ledger: Ledger
    buyer: crypto.SigningKeyPair
    notary: crypto.SigningKeyPair
    sellers: list[crypto.SigningKeyPair]
    challenger: crypto.SigningKeyPair

    def id(self, keys: crypto.SigningKeyPair) -> int:
        return self.ledger.id_of(keys.address)

    def pay(self, amount: int, payees: list[int], fee: int = 1, unlock: bool = True, key: bytes = MASTER) -> int:
        led = self.ledger
        lock = crypto.make_lock(self.id(self.notary), key)
        idx = led.register_payment(self.id(self.buyer), amount, encode_pay_data(payees), lock, fee, self.notary.address, sender=self.buyer.address)
        if unlock:
            led.unlock_payment(idx, self.id(self.notary), key, sender=self.notary.address)
        return idx


def make_world(n_sellers: int = 3, params: LedgerParams | None = None, seed: int = 1) -> World:
    rng = random.Random(seed)
    keys = [crypto.SigningKeyPair.generate(rng) for _ in range(n_sellers + 3)]
    buyer, notary, challenger, sellers = keys[0], keys[1], keys[2], keys[3:]
    led = Ledger(params or LedgerParams(), treasury=TREASURY, check_every_tx=True)
    for k in keys:
        led.register(k.address, k.public, sender=k.address)
    for k, amount in [(buyer, 1000 * TOKEN), (challenger, 100 * TOKEN), *[(s, 100 * TOKEN) for s in sellers]]:
        led.transfer(k.address, amount, sender=TREASURY)
        led.deposit(led.id_of(k.address), amount // 2, sender=k.address)
    return World(led, buyer, notary, sellers, challenger)


@pytest.fixture
def rng() -> random.Random:
    return random.Random(2024)


@pytest.fixture
def world() -> World:
    return make_world()


def scenario_dict(n_sellers: int = 4, **top: object) -> dict:
    """A small valid protocol scenario; keyword arguments replace top-level fields."""
    raw = {
        "name": "fixture",
        "seed": 5,
        "blocks": 300,
        "ontology": {"attributes": {"age": "numeric", "country": "categorical"}, "entities": {"purchases": {"start": "int", "days": "int"}}},
        "notaries": [{"name": "notary0", "fee": 2, "percentage": 1, "verifiers": {"purchases": {"kind": "subset"}}, "tokens": 10}],
        "buyers": [{
            "name": "buyer0", "tokens": 1000, "deposit": 500,
            "orders": [{"at": 1, "audience": [["age", ">=", 18]], "requested": [{"entity": "purchases", "params": {"start": 0, "days": 3}}], "price": 10, "notaries": ["notary0"]}],
        }],
        "seller_groups": [{
            "count": n_sellers, "name": "seller{i}", "attributes": {"age": 30, "country": "AR"},
            "data": {"purchases": {"generate": "purchases", "days": 5}}, "trusted": ["notary0"], "tokens": 20,
        }],
    }
    raw.update(top)
    return raw


# acceptance verdicts, one line each at the end of the session
VERDICTS: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config) -> None:  # noqa: ANN001
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[n])
