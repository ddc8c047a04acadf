"""Exhaustive small-scale enumeration of the collect/challenge game.

Every configuration of up to ``max_payments`` payments is built, where each
payment either includes the collecting seller or not and is either
unlocked or left locked. Amounts alternate 2 and 3 base units, so no
honest sub-list can sum to ``honest - 1``. For each configuration:

* an honest collect is run unchallenged, against a challenger that goes
  silent, and against a challenger picking each listed payment;
* each over/under-declared collect (``honest - 1``, ``honest + 1``,
  ``honest + amount``) is run against an honest challenger, with the seller
  staying silent, answering its true list, or answering any list of
  payments that sums to the declared amount.
"""

from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass, field
from typing import Iterator

from . import crypto
from .ledger import Ledger, LedgerParams, SlotStatus, TOKEN, encode_pay_data

SELLER = 0
MASTER_KEY = bytes(range(32))


@dataclass
class Config:
    n_sellers: int
    included: tuple[bool, ...]
    unlocked: tuple[bool, ...]

    @property
    def amounts(self) -> list[int]:
        return [2 if i % 2 == 0 else 3 for i in range(len(self.included))]

    @property
    def honest(self) -> int:
        return sum(a for a, inc, unl in zip(self.amounts, self.included, self.unlocked) if inc and unl)


@dataclass
class Outcome:
    config: Config
    declared: int
    strategy: str
    status: str
    seller_credit: int
    seller_stake_kept: bool
    ok: bool


@dataclass
class MatrixSummary:
    cases: int = 0
    honest_cases: int = 0
    fraud_cases: int = 0
    failures: list[Outcome] = field(default_factory=list)
    configs: int = 0

    def to_dict(self) -> dict:
        return {
            "configs": self.configs,
            "cases": self.cases,
            "honest_cases": self.honest_cases,
            "fraud_cases": self.fraud_cases,
            "failures": len(self.failures),
            "fraud_settled_fraud_pct": 100.0 * (self.fraud_cases - sum(1 for f in self.failures if f.declared != f.config.honest)) / self.fraud_cases if self.fraud_cases else 100.0,
            "honest_settled_ok_pct": 100.0 * (self.honest_cases - sum(1 for f in self.failures if f.declared == f.config.honest)) / self.honest_cases if self.honest_cases else 100.0,
        }


def configs(max_payments: int = 6, max_sellers: int = 4) -> Iterator[Config]:
    k = 0
    for n in range(1, max_payments + 1):
        for included in itertools.product((False, True), repeat=n):
            for unlocked in itertools.product((False, True), repeat=n):
                yield Config(2 + k % (max_sellers - 1), included, unlocked)
                k += 1


@functools.lru_cache(maxsize=None)
def _addresses(n: int) -> tuple[bytes, ...]:
    return tuple(crypto.SigningKeyPair.from_scalar(i + 1).address for i in range(n))


class _World:
    """A ledger populated for one configuration, ready for a collect."""

    def __init__(self, cfg: Config, params: LedgerParams) -> None:
        keys = _addresses(cfg.n_sellers + 3)
        self.sellers = keys[: cfg.n_sellers]
        self.buyer, self.notary, self.challenger = keys[cfg.n_sellers :]
        treasury = b"\xff" * 20
        led = Ledger(params, treasury=treasury, check_every_tx=True)
        for addr in keys:
            led.register(addr, sender=addr)
        stake = params.collect_stake
        led.transfer(self.buyer, 1000 * TOKEN, sender=treasury)
        led.deposit(led.id_of(self.buyer), 1000 * TOKEN, sender=self.buyer)
        for addr in (self.sellers[SELLER], self.challenger):
            led.transfer(addr, stake * 4, sender=treasury)
            led.deposit(led.id_of(addr), stake * 4, sender=addr)
        notary_id = led.id_of(self.notary)
        lock = crypto.make_lock(notary_id, MASTER_KEY)
        others = list(range(1, cfg.n_sellers))
        for i, (amount, inc, unl) in enumerate(zip(cfg.amounts, cfg.included, cfg.unlocked)):
            payees = {others[i % len(others)]} | ({SELLER} if inc else set())
            idx = led.register_payment(led.id_of(self.buyer), amount, encode_pay_data(payees), lock, 1, self.notary, sender=self.buyer)
            if unl:
                led.unlock_payment(idx, notary_id, MASTER_KEY, sender=self.notary)
        self.ledger = led
        self.seller = self.sellers[SELLER]
        self.base = led.snapshot()


def _valid(led: Ledger, slot, i: int) -> bool:
    p = led.payments[i]
    return p.unlocked and slot.from_index <= i <= slot.to_index and slot.account in led.payee_set(i)


def _play(base: _World, declared: int, seller_list: list[int] | None, challenge: bool, pick: int | str | None) -> tuple[str, int, bool]:
    """Run one collect. ``seller_list`` None means the seller never answers.

    ``pick`` is an index to pick, ``"honest"`` (a failing entry if any,
    else the first), or None for a challenger who goes silent.
    """
    w = base
    led = w.ledger
    led.restore(w.base)
    sid = led.id_of(w.seller)
    before = led.balance(sid)
    stake = led.params.collect_stake
    slot = led.collect(sid, len(led.payments) - 1, declared, stake, sender=w.seller)
    if challenge:
        led.challenge_open(slot.id, sender=w.challenger)
        if seller_list is None:
            led.advance_block(led.params.response_timeout_blocks + 1)
            led.timeout_resolve(slot.id, sender=w.challenger)
        else:
            led.challenge_respond_list(slot.id, seller_list, sender=w.seller)
            if slot.status == SlotStatus.AWAITING_PICK:
                choice = pick
                if choice == "honest":
                    bad = [i for i in slot.response if not _valid(led, slot, i)]
                    choice = bad[0] if bad else (slot.response[0] if slot.response else None)
                if choice is None:
                    led.advance_block(led.params.response_timeout_blocks + 1)
                    led.timeout_resolve(slot.id, sender=w.seller)
                else:
                    led.challenge_pick(slot.id, choice, sender=w.challenger)
                    led.challenge_prove_inclusion(slot.id, led.calldata[choice], sender=w.seller)
    if slot.status == SlotStatus.OPEN:
        led.advance_block(slot.deadline - led.block + 1)
        led.finalize_collect(slot.id, sender=w.seller)
    led.assert_invariants()
    after = led.balance(sid)
    if slot.status == SlotStatus.SETTLED_OK:
        challenger_lost = challenge and slot.reason in ("inclusion_proven", "challenger_timeout")
        won = led.params.challenge_stake if challenger_lost else 0
        return slot.status.value, after - before - won, True
    # the stake is gone; whatever remains above -stake was credited
    return slot.status.value, after - before + stake, False


def run_matrix(max_payments: int = 6, max_sellers: int = 4, params: LedgerParams | None = None) -> MatrixSummary:
    params = params or LedgerParams()
    summary = MatrixSummary()
    for cfg in configs(max_payments, max_sellers):
        summary.configs += 1
        world = _World(cfg, params)
        honest = cfg.honest
        n = len(cfg.included)
        true_list = [i for i in range(n) if cfg.included[i] and cfg.unlocked[i]]

        honest_runs: list[tuple[str, bool, int | str | None]] = [("unchallenged", False, None), ("challenger_silent", True, None)]
        honest_runs += [(f"pick_{i}", True, i) for i in true_list]
        for name, challenge, pick in honest_runs:
            status, credit, kept = _play(world, honest, true_list, challenge, pick)
            ok = status == "settled_ok" and credit == honest and kept
            summary.honest_cases += 1
            summary.cases += 1
            if not ok:
                summary.failures.append(Outcome(cfg, honest, name, status, credit, kept, ok))

        frauds = {honest + 1, honest + cfg.amounts[0]}
        if honest >= 1:
            frauds.add(honest - 1)
        for declared in sorted(frauds):
            lists: list[tuple[str, list[int] | None]] = [("silent", None), ("true_list", true_list)]
            for r in range(1, n + 1):
                for combo in itertools.combinations(range(n), r):
                    if sum(cfg.amounts[i] for i in combo) == declared:
                        lists.append((f"list_{'_'.join(map(str, combo))}", list(combo)))
            for name, listed in lists:
                status, credit, kept = _play(world, declared, listed, True, "honest")
                ok = status == "settled_fraud" and credit == 0 and not kept
                summary.fraud_cases += 1
                summary.cases += 1
                if not ok:
                    summary.failures.append(Outcome(cfg, declared, name, status, credit, kept, ok))
    return summary
