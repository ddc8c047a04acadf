"""Simulated on-chain state: token, batch payments, challenge game, gas.

The ledger is a single-writer state machine. Every public mutating method
is one transaction: it either completes and is logged with its gas charge,
or raises a :class:`~datamarket.errors.ProtocolError` subclass, is logged
with that error as outcome and zero gas, and leaves state untouched.

All amounts are integers in base units (``TOKEN`` base units per token).
Each transaction takes a keyword ``sender`` (the address submitting it).
"""

from __future__ import annotations

import copy
import enum
import functools
import json
import math
import operator
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Callable, Iterable, Sequence

from . import crypto
from .crypto import Lock
from .errors import ProtocolError
from .exchange import AudienceQuery, DataOrder, DataQuery, OrderBook, UnregisteredBuyer

TOKEN = 10**9
TOTAL_SUPPLY = 9_000_000_000 * TOKEN
MAX_ID = 2**32

USD_PER_PAYMENT = Fraction(44, 100_000)
PAYMENT_GAS = 397
DEFAULT_USD_PER_GAS = USD_PER_PAYMENT / PAYMENT_GAS


class LedgerError(ProtocolError):
    pass


class AlreadyRegistered(LedgerError):
    pass


class UnknownAccount(LedgerError):
    pass


class Unauthorized(LedgerError):
    pass


class InsufficientTokenBalance(LedgerError):
    pass


class InsufficientBatPayBalance(LedgerError):
    pass


class DuplicateId(LedgerError):
    pass


class EmptyList(LedgerError):
    pass


class MalformedPayData(LedgerError):
    pass


class UnknownPayment(LedgerError):
    pass


class BadKey(LedgerError):
    pass


class AlreadyUnlocked(LedgerError):
    pass


class UnlockWindowExpired(LedgerError):
    pass


class NotExpired(LedgerError):
    pass


class AlreadyRefunded(LedgerError):
    pass


class SlotAlreadyOpen(LedgerError):
    pass


class InsufficientStake(LedgerError):
    pass


class BadRange(LedgerError):
    pass


class ExceedsEscrow(LedgerError):
    pass


class UnknownSlot(LedgerError):
    pass


class NotOpen(LedgerError):
    pass


SlotNotOpen = NotOpen


class TooLate(LedgerError):
    pass


class WrongPhase(LedgerError):
    pass


class NotInList(LedgerError):
    pass


class NoTimeoutPending(LedgerError):
    pass


class BadSignature(LedgerError):
    pass


class FeeExceedsLimit(LedgerError):
    pass


class StaleNonce(LedgerError):
    pass


class InvariantViolation(AssertionError):
    pass


# ---------------------------------------------------------------------------
# payData codec


@dataclass(frozen=True)
class PayData:
    bytes_per_id: int
    ids: tuple[int, ...]

    def to_bytes(self) -> bytes:
        d = self.bytes_per_id
        return bytes([d]) + b"".join(i.to_bytes(d, "big") for i in self.ids)

    @classmethod
    def from_bytes(cls, raw: bytes) -> PayData:
        if len(raw) < 2:
            raise MalformedPayData("payData needs a header and at least one id")
        d = raw[0]
        body = raw[1:]
        if d not in (1, 2, 3, 4) or len(body) % d:
            raise MalformedPayData(f"bad id width {d} for {len(body)} body bytes")
        ids = tuple(int.from_bytes(body[k : k + d], "big") for k in range(0, len(body), d))
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise MalformedPayData("ids must be strictly ascending")
        return cls(d, ids)


def encode_pay_data(ids: Iterable[int]) -> PayData:
    ordered = sorted(ids)
    if not ordered:
        raise EmptyList("payData needs at least one payee")
    if any(b == a for a, b in zip(ordered, ordered[1:])):
        raise DuplicateId("payee listed twice")
    if ordered[0] < 0 or ordered[-1] >= MAX_ID:
        raise MalformedPayData("ids are 32-bit unsigned")
    width = max(1, (ordered[-1].bit_length() + 7) // 8)
    return PayData(width, tuple(ordered))


def decode_pay_data(pay_data: PayData | bytes) -> list[int]:
    if isinstance(pay_data, (bytes, bytearray)):
        pay_data = PayData.from_bytes(bytes(pay_data))
    return list(pay_data.ids)


# ---------------------------------------------------------------------------
# state records


@dataclass
class BatPayAccount:
    id: int
    address: bytes
    public_key: bytes | None = None
    balance: int = 0
    last_collected_pay_index: int = -1


@dataclass
class RegisteredPayment:
    pay_index: int
    from_id: int
    per_destination_amount: int
    pay_data_hash: bytes
    n_payees: int
    lock: Lock
    notary_fee: int
    notary_address: bytes
    block: int
    unlocked: bool = False
    refunded: bool = False
    master_key: bytes | None = None
    order_id: int | None = None

    @property
    def escrow(self) -> int:
        return self.per_destination_amount * self.n_payees + self.notary_fee


class SlotStatus(str, enum.Enum):
    OPEN = "open"
    CHALLENGED = "challenged"
    AWAITING_PICK = "awaiting_pick"
    AWAITING_PROOF = "awaiting_proof"
    SETTLED_OK = "settled_ok"
    SETTLED_FRAUD = "settled_fraud"


PENDING = (SlotStatus.OPEN, SlotStatus.CHALLENGED, SlotStatus.AWAITING_PICK, SlotStatus.AWAITING_PROOF)


@dataclass
class CollectSlot:
    id: int
    account: int
    from_index: int
    to_index: int
    declared_amount: int
    stake: int
    deadline: int
    status: SlotStatus = SlotStatus.OPEN
    challenger: bytes | None = None
    challenge_stake: int = 0
    response: list[int] | None = None
    picked: int | None = None
    phase_deadline: int | None = None
    reason: str | None = None
    history: list[tuple[int, str, str, str]] = field(default_factory=list)

    @property
    def payments_in_range(self) -> int:
        return self.to_index - self.from_index + 1


@dataclass
class GasModel:
    """Affine gas schedule. Only registerPayment depends on its size."""

    reg_payment_fixed: int = 36_255
    reg_payment_per_id: int = 192
    fixed: dict[str, int] = field(
        default_factory=lambda: {
            "transfer": 51_000,
            "register": 68_000,
            "deposit": 52_000,
            "collect": 167_440,
            "finalize_collect": 41_000,
            "unlock_payment": 48_000,
            "refund_locked_payment": 36_000,
            "challenge_open": 62_000,
            "challenge_respond_list": 58_000,
            "challenge_pick": 34_000,
            "challenge_prove_inclusion": 71_000,
            "timeout_resolve": 39_000,
            "withdraw": 46_000,
            "create_order": 180_000,
            "close_order": 27_000,
        }
    )

    def register_payment(self, n: int) -> int:
        return self.reg_payment_fixed + self.reg_payment_per_id * n

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> GasModel:
        model = cls()
        model.reg_payment_fixed = int(raw.get("reg_payment_fixed", model.reg_payment_fixed))
        model.reg_payment_per_id = int(raw.get("reg_payment_per_id", model.reg_payment_per_id))
        model.fixed.update({k: int(v) for k, v in raw.get("fixed", {}).items()})
        return model


@dataclass
class LedgerParams:
    challenge_period_blocks: int = 40
    response_timeout_blocks: int = 20
    unlock_timeout_blocks: int = 100
    collect_stake: int = 10 * TOKEN
    challenge_stake: int = 10 * TOKEN
    usd_per_gas: Fraction = DEFAULT_USD_PER_GAS
    gas: GasModel = field(default_factory=GasModel)

    def __post_init__(self) -> None:
        for name in (
            "challenge_period_blocks",
            "response_timeout_blocks",
            "unlock_timeout_blocks",
            "collect_stake",
            "challenge_stake",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.usd_per_gas <= 0:
            raise ValueError("usd_per_gas must be positive")

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> LedgerParams:
        kwargs: dict[str, Any] = {}
        for name in (
            "challenge_period_blocks",
            "response_timeout_blocks",
            "unlock_timeout_blocks",
            "collect_stake",
            "challenge_stake",
        ):
            if name in raw:
                kwargs[name] = int(raw[name])
        if "usd_per_gas" in raw:
            kwargs["usd_per_gas"] = Fraction(str(raw["usd_per_gas"]))
        if "gas" in raw:
            kwargs["gas"] = GasModel.from_dict(raw["gas"])
        return cls(**kwargs)


@dataclass
class TxRecord:
    seq: int
    block: int
    kind: str
    sender: str
    gas: int
    outcome: str
    payments: int = 0
    origin: str | None = None

    def to_dict(self) -> dict[str, Any]:
        out = {
            "seq": self.seq,
            "block": self.block,
            "kind": self.kind,
            "sender": self.sender,
            "gas": self.gas,
            "outcome": self.outcome,
            "payments": self.payments,
        }
        if self.origin is not None:
            out["origin"] = self.origin
        return out


def gas_report(log: Sequence[TxRecord], usd_per_gas: Fraction = DEFAULT_USD_PER_GAS) -> dict[str, Any]:
    """Gas totals and per-payment amortization, recomputed from ``log``.

    ``register_per_payment`` spreads registerPayment gas over every payee
    it carried. A collect costs the same whatever its range, so
    ``collect_per_payment`` amortizes one collect over a batch the size of
    the mean registerPayment. Per-payment figures round up.
    """
    per_kind: dict[str, dict[str, int]] = {}
    per_sender: dict[str, int] = {}
    total = 0
    for rec in log:
        if rec.outcome != "ok":
            continue
        k = per_kind.setdefault(rec.kind, {"count": 0, "gas": 0, "payments": 0})
        k["count"] += 1
        k["gas"] += rec.gas
        k["payments"] += rec.payments
        per_sender[rec.sender] = per_sender.get(rec.sender, 0) + rec.gas
        total += rec.gas

    reg = per_kind.get("register_payment", {"count": 0, "gas": 0, "payments": 0})
    col = per_kind.get("collect", {"count": 0, "gas": 0, "payments": 0})
    reg_pp = math.ceil(Fraction(reg["gas"], reg["payments"])) if reg["payments"] else 0
    batch = Fraction(reg["payments"], reg["count"]) if reg["count"] else Fraction(0)
    col_pp = math.ceil(Fraction(col["gas"], col["count"]) / batch) if col["count"] and batch else 0
    slot_pp = math.ceil(Fraction(col["gas"], col["payments"])) if col["payments"] else 0
    combined = reg_pp + col_pp
    usd = combined * usd_per_gas
    return {
        "total_gas": total,
        "total_usd": float(total * usd_per_gas),
        "per_kind": dict(sorted(per_kind.items())),
        "per_sender": dict(sorted(per_sender.items())),
        "per_payment": {
            "register": reg_pp,
            "collect": col_pp,
            "combined": combined,
            "usd": float(usd),
            "batch_size": float(batch),
            "collect_per_collected_payment": slot_pp,
        },
        "usd_per_gas": str(usd_per_gas),
    }


# ---------------------------------------------------------------------------
# ledger


def _hex(addr: bytes | None) -> str:
    return "0x" + addr.hex() if addr else "-"


def _transaction(kind: str) -> Callable:
    def decorate(fn: Callable) -> Callable:
        @functools.wraps(fn)
        def wrapper(self: Ledger, *args: Any, sender: bytes, **kwargs: Any) -> Any:
            self._gas_due = self.params.gas.fixed.get(kind, 0)
            self._payments_due = 0
            try:
                result = fn(self, *args, sender=sender, **kwargs)
            except ProtocolError as exc:
                self._record(kind, sender, 0, type(exc).__name__)
                raise
            self._record(kind, sender, self._gas_due, "ok", self._payments_due)
            if self.check_every_tx:
                self.assert_invariants()
            return result

        wrapper.tx_kind = kind  # type: ignore[attr-defined]
        return wrapper

    return decorate


_balance_of = operator.attrgetter("balance")


def _copy_slot(slot: CollectSlot) -> CollectSlot:
    out = copy.copy(slot)
    if slot.response is not None:
        out.response = list(slot.response)
    out.history = list(slot.history)
    return out


def _copy_state(state: dict[str, Any]) -> dict[str, Any]:
    out = dict(state)
    for k in ("token_balances", "by_address", "calldata", "open_slot", "nonces"):
        out[k] = dict(state[k])
    out["accounts"] = [copy.copy(a) for a in state["accounts"]]
    out["payments"] = [copy.copy(p) for p in state["payments"]]
    out["slots"] = {k: _copy_slot(s) for k, s in state["slots"].items()}
    return out


class Ledger:
    def __init__(
        self,
        params: LedgerParams | None = None,
        treasury: bytes = b"\x00" * crypto.ADDRESS_SIZE,
        orders: OrderBook | None = None,
        check_every_tx: bool = False,
    ) -> None:
        self.params = params or LedgerParams()
        self.block = 0
        self.treasury = treasury
        self.token_balances: dict[bytes, int] = {treasury: TOTAL_SUPPLY}
        self.accounts: list[BatPayAccount] = []
        self.by_address: dict[bytes, int] = {}
        self.payments: list[RegisteredPayment] = []
        self.calldata: dict[int, bytes] = {}
        self.slots: dict[int, CollectSlot] = {}
        self.open_slot: dict[int, int] = {}
        self.payment_pool = 0
        self.stake_pool = 0
        self.nonces: dict[int, int] = {}
        self.orders = orders or OrderBook()
        self.events: list[tuple[str, Any]] = []
        self.log: list[TxRecord] = []
        self.check_every_tx = check_every_tx
        self._gas_due = 0
        self._payments_due = 0
        self._relayer: bytes | None = None
        self._payee_cache: dict[int, frozenset[int]] = {}

    # -- bookkeeping ------------------------------------------------------

    def _record(self, kind: str, sender: bytes, gas: int, outcome: str, payments: int = 0) -> None:
        if self._relayer is not None:
            rec = TxRecord(len(self.log), self.block, kind, _hex(self._relayer), gas, outcome, payments, _hex(sender))
        else:
            rec = TxRecord(len(self.log), self.block, kind, _hex(sender), gas, outcome, payments)
        self.log.append(rec)

    _STATE = ("block", "token_balances", "accounts", "by_address", "payments", "calldata", "slots",
              "open_slot", "payment_pool", "stake_pool", "nonces")

    def snapshot(self) -> dict[str, Any]:
        """Capture mutable state cheaply; the order book is not included."""
        state = _copy_state({k: getattr(self, k) for k in self._STATE})
        state["n_log"], state["n_events"] = len(self.log), len(self.events)
        return state

    def restore(self, snap: dict[str, Any]) -> None:
        """Roll back to ``snap``; the snapshot stays reusable."""
        for k, v in _copy_state(snap).items():
            if k in self._STATE:
                setattr(self, k, v)
        del self.log[snap["n_log"] :]
        del self.events[snap["n_events"] :]
        self._payee_cache = {}

    def advance_block(self, n: int = 1) -> int:
        if n < 1:
            raise ValueError("advance by at least one block")
        self.block += n
        return self.block

    def account(self, account_id: int) -> BatPayAccount:
        if not 0 <= account_id < len(self.accounts):
            raise UnknownAccount(account_id)
        return self.accounts[account_id]

    def id_of(self, address: bytes) -> int | None:
        return self.by_address.get(address)

    def token_balance(self, address: bytes) -> int:
        return self.token_balances.get(address, 0)

    def balance(self, account_id: int) -> int:
        return self.account(account_id).balance

    def payment(self, pay_index: int) -> RegisteredPayment:
        if not 0 <= pay_index < len(self.payments):
            raise UnknownPayment(pay_index)
        return self.payments[pay_index]

    def slot(self, slot_id: int) -> CollectSlot:
        try:
            return self.slots[slot_id]
        except KeyError:
            raise UnknownSlot(slot_id) from None

    def _own(self, account_id: int, sender: bytes) -> BatPayAccount:
        acct = self.account(account_id)
        if acct.address != sender:
            raise Unauthorized(f"account {account_id} is not controlled by sender")
        return acct

    def escrow(self) -> int:
        return self.payment_pool + self.stake_pool

    def total_accounted(self) -> int:
        return (
            sum(self.token_balances.values())
            + sum(map(_balance_of, self.accounts))
            + self.escrow()
        )

    def assert_invariants(self) -> None:
        total = self.total_accounted()
        if total != TOTAL_SUPPLY:
            raise InvariantViolation(
                f"conservation broken at block {self.block}, tx {len(self.log) - 1}: {total} != {TOTAL_SUPPLY}"
            )
        if self.payment_pool < 0 or self.stake_pool < 0:
            raise InvariantViolation(f"negative escrow at block {self.block}")
        if min(self.token_balances.values(), default=0) < 0 or min(map(_balance_of, self.accounts), default=0) < 0:
            raise InvariantViolation(f"negative balance at block {self.block}")

    # -- token ------------------------------------------------------------

    @_transaction("transfer")
    def transfer(self, to: bytes, amount: int, *, sender: bytes) -> None:
        if amount < 0:
            raise ValueError("negative amount")
        if self.token_balance(sender) < amount:
            raise InsufficientTokenBalance(f"{self.token_balance(sender)} < {amount}")
        self.token_balances[sender] -= amount
        self.token_balances[to] = self.token_balance(to) + amount

    # -- accounts ---------------------------------------------------------

    @_transaction("register")
    def register(self, address: bytes, public_key: bytes | None = None, *, sender: bytes) -> int:
        if address in self.by_address:
            raise AlreadyRegistered(_hex(address))
        if public_key is not None and crypto.address_of(public_key) != address:
            raise BadSignature("public key does not match address")
        new_id = len(self.accounts)
        if new_id >= MAX_ID:
            raise LedgerError("account id space exhausted")
        self.accounts.append(BatPayAccount(new_id, address, public_key))
        self.by_address[address] = new_id
        return new_id

    @_transaction("deposit")
    def deposit(self, account_id: int, amount: int, *, sender: bytes) -> None:
        acct = self.account(account_id)
        if amount < 0:
            raise ValueError("negative amount")
        if self.token_balance(acct.address) < amount:
            raise InsufficientTokenBalance(f"{self.token_balance(acct.address)} < {amount}")
        if amount == 0:
            return
        self.token_balances[acct.address] -= amount
        acct.balance += amount

    @_transaction("withdraw")
    def withdraw(self, account_id: int, amount: int, to_address: bytes, *, sender: bytes) -> None:
        acct = self._own(account_id, sender)
        if amount < 0:
            raise ValueError("negative amount")
        if acct.balance < amount:
            raise InsufficientBatPayBalance(f"{acct.balance} < {amount}")
        acct.balance -= amount
        self.token_balances[to_address] = self.token_balance(to_address) + amount

    # -- payments ---------------------------------------------------------

    @_transaction("register_payment")
    def register_payment(
        self,
        from_id: int,
        per_destination_amount: int,
        pay_data: PayData | bytes,
        lock: Lock,
        notary_fee: int,
        notary_address: bytes,
        order_id: int | None = None,
        *,
        sender: bytes,
    ) -> int:
        payer = self._own(from_id, sender)
        raw = pay_data.to_bytes() if isinstance(pay_data, PayData) else bytes(pay_data)
        ids = PayData.from_bytes(raw).ids
        if ids[-1] >= len(self.accounts):
            raise UnknownAccount(f"payee {ids[-1]} is not registered")
        if notary_address not in self.by_address:
            raise UnknownAccount("notary is not registered")
        if per_destination_amount < 0 or notary_fee < 0:
            raise ValueError("negative amount")
        n = len(ids)
        total = per_destination_amount * n + notary_fee
        if payer.balance < total:
            raise InsufficientBatPayBalance(f"{payer.balance} < {total}")
        payer.balance -= total
        self.payment_pool += total
        index = len(self.payments)
        self.payments.append(
            RegisteredPayment(
                pay_index=index,
                from_id=from_id,
                per_destination_amount=per_destination_amount,
                pay_data_hash=crypto.hash(raw),
                n_payees=n,
                lock=lock,
                notary_fee=notary_fee,
                notary_address=notary_address,
                block=self.block,
                order_id=order_id,
            )
        )
        self.calldata[index] = raw
        self._gas_due = self.params.gas.register_payment(n)
        self._payments_due = n
        return index

    @_transaction("unlock_payment")
    def unlock_payment(self, pay_index: int, notary_id: int, master_key: bytes, *, sender: bytes) -> None:
        p = self.payment(pay_index)
        if p.unlocked:
            raise AlreadyUnlocked(pay_index)
        if p.refunded or self.block > p.block + self.params.unlock_timeout_blocks:
            raise UnlockWindowExpired(pay_index)
        if not crypto.verify_lock(p.lock, notary_id, master_key):
            raise BadKey(f"master key does not open payment {pay_index}")
        notary = self.account(self.by_address[p.notary_address])
        p.unlocked = True
        p.master_key = bytes(master_key)
        self.payment_pool -= p.notary_fee
        notary.balance += p.notary_fee

    @_transaction("refund_locked_payment")
    def refund_locked_payment(self, pay_index: int, *, sender: bytes) -> None:
        p = self.payment(pay_index)
        if p.unlocked:
            raise AlreadyUnlocked(pay_index)
        if p.refunded:
            raise AlreadyRefunded(pay_index)
        if self.block <= p.block + self.params.unlock_timeout_blocks:
            raise NotExpired(f"unlock window open until block {p.block + self.params.unlock_timeout_blocks}")
        if self.payment_pool < p.escrow:
            raise ExceedsEscrow("escrow pool cannot cover refund")
        p.refunded = True
        self.payment_pool -= p.escrow
        self.accounts[p.from_id].balance += p.escrow

    def payees(self, pay_index: int) -> list[int]:
        return decode_pay_data(self.calldata[pay_index])

    def payee_set(self, pay_index: int) -> frozenset[int]:
        cached = self._payee_cache.get(pay_index)
        if cached is None:
            cached = self._payee_cache[pay_index] = frozenset(self.payees(pay_index))
        return cached

    def honest_amount(self, account_id: int, from_index: int, to_index: int) -> int:
        """Sum owed to ``account_id`` over unlocked payments in the range."""
        total = 0
        for p in self.payments[max(from_index, 0) : to_index + 1]:
            if p.unlocked and account_id in self.payee_set(p.pay_index):
                total += p.per_destination_amount
        return total

    # -- collect & challenge ----------------------------------------------

    def _pending_declared(self) -> int:
        # open_slot holds exactly the pending slots, one per account
        return sum(self.slots[i].declared_amount for i in self.open_slot.values())

    def uncommitted_escrow(self) -> int:
        """Payment escrow not yet claimed by a pending collect."""
        return self.payment_pool - self._pending_declared()

    @_transaction("collect")
    def collect(self, account_id: int, to_index: int, declared_amount: int, stake: int, *, sender: bytes) -> CollectSlot:
        acct = self._own(account_id, sender)
        if account_id in self.open_slot:
            raise SlotAlreadyOpen(f"slot {self.open_slot[account_id]} still pending")
        from_index = acct.last_collected_pay_index + 1
        if to_index >= len(self.payments) or to_index < from_index:
            raise BadRange(f"[{from_index}, {to_index}] with {len(self.payments)} payments")
        if declared_amount < 0:
            raise ValueError("negative amount")
        if stake < self.params.collect_stake or acct.balance < stake:
            raise InsufficientStake(f"stake {stake}, balance {acct.balance}, required {self.params.collect_stake}")
        if declared_amount > self.uncommitted_escrow():
            raise ExceedsEscrow("declared amount exceeds uncommitted escrow")
        acct.balance -= stake
        self.stake_pool += stake
        slot = CollectSlot(
            id=len(self.slots),
            account=account_id,
            from_index=from_index,
            to_index=to_index,
            declared_amount=declared_amount,
            stake=stake,
            deadline=self.block + self.params.challenge_period_blocks,
        )
        self.slots[slot.id] = slot
        self.open_slot[account_id] = slot.id
        self._payments_due = slot.payments_in_range
        return slot

    @_transaction("finalize_collect")
    def finalize_collect(self, slot_id: int, *, sender: bytes) -> None:
        slot = self.slot(slot_id)
        if slot.status != SlotStatus.OPEN:
            raise NotOpen(f"slot {slot_id} is {slot.status.value}")
        if self.block <= slot.deadline:
            raise NotExpired(f"challenge period runs to block {slot.deadline}")
        acct = self.accounts[slot.account]
        self.stake_pool -= slot.stake
        self.payment_pool -= slot.declared_amount
        acct.balance += slot.stake + slot.declared_amount
        acct.last_collected_pay_index = slot.to_index
        slot.status = SlotStatus.SETTLED_OK
        del self.open_slot[slot.account]

    @_transaction("challenge_open")
    def challenge_open(self, slot_id: int, *, sender: bytes) -> None:
        slot = self.slot(slot_id)
        if slot.status != SlotStatus.OPEN:
            raise NotOpen(f"slot {slot_id} is {slot.status.value}")
        if self.block > slot.deadline:
            raise TooLate(f"challenge period ended at block {slot.deadline}")
        cid = self.by_address.get(sender)
        stake = self.params.challenge_stake
        if cid is None or self.accounts[cid].balance < stake:
            raise InsufficientStake("challenger cannot post the challenge stake")
        self.accounts[cid].balance -= stake
        self.stake_pool += stake
        slot.status = SlotStatus.CHALLENGED
        slot.challenger = sender
        slot.challenge_stake = stake
        slot.phase_deadline = self.block + self.params.response_timeout_blocks

    def _check_phase(self, slot: CollectSlot, status: SlotStatus) -> None:
        if slot.status != status:
            raise WrongPhase(f"slot {slot.id} is {slot.status.value}, expected {status.value}")

    def _seller_loses(self, slot: CollectSlot, reason: str) -> str:
        challenger = self.accounts[self.by_address[slot.challenger]]
        self.stake_pool -= slot.stake + slot.challenge_stake
        challenger.balance += slot.stake + slot.challenge_stake
        slot.history.append((self.block, _hex(slot.challenger), "challenger", reason))
        slot.status = SlotStatus.SETTLED_FRAUD
        slot.reason = reason
        slot.phase_deadline = None
        del self.open_slot[slot.account]
        return "challenger_won"

    def _challenger_loses(self, slot: CollectSlot, reason: str) -> str:
        self.stake_pool -= slot.challenge_stake
        self.accounts[slot.account].balance += slot.challenge_stake
        slot.history.append((self.block, _hex(slot.challenger), "seller", reason))
        slot.status = SlotStatus.OPEN
        slot.challenger = None
        slot.challenge_stake = 0
        slot.response = None
        slot.picked = None
        slot.phase_deadline = None
        slot.reason = reason
        slot.deadline = self.block + self.params.challenge_period_blocks
        return "seller_won"

    @_transaction("challenge_respond_list")
    def challenge_respond_list(self, slot_id: int, pay_indexes: Sequence[int], *, sender: bytes) -> str:
        """Seller's itemized answer. Returns ``"pending"`` or, on a sum mismatch, ``"challenger_won"``."""
        slot = self.slot(slot_id)
        self._own(slot.account, sender)
        self._check_phase(slot, SlotStatus.CHALLENGED)
        if self.block > slot.phase_deadline:
            raise TooLate("response window elapsed")
        listed = list(pay_indexes)
        if len(set(listed)) != len(listed) or any(not 0 <= i < len(self.payments) for i in listed):
            return self._seller_loses(slot, "malformed_list")
        if sum(self.payments[i].per_destination_amount for i in listed) != slot.declared_amount:
            return self._seller_loses(slot, "sum_mismatch")
        slot.response = listed
        slot.status = SlotStatus.AWAITING_PICK
        slot.phase_deadline = self.block + self.params.response_timeout_blocks
        return "pending"

    @_transaction("challenge_pick")
    def challenge_pick(self, slot_id: int, pay_index: int, *, sender: bytes) -> None:
        slot = self.slot(slot_id)
        self._check_phase(slot, SlotStatus.AWAITING_PICK)
        if sender != slot.challenger:
            raise Unauthorized("only the challenger picks")
        if self.block > slot.phase_deadline:
            raise TooLate("pick window elapsed")
        if pay_index not in slot.response:
            raise NotInList(pay_index)
        slot.picked = pay_index
        slot.status = SlotStatus.AWAITING_PROOF
        slot.phase_deadline = self.block + self.params.response_timeout_blocks

    @_transaction("challenge_prove_inclusion")
    def challenge_prove_inclusion(self, slot_id: int, pay_data: PayData | bytes, *, sender: bytes) -> str:
        slot = self.slot(slot_id)
        self._own(slot.account, sender)
        self._check_phase(slot, SlotStatus.AWAITING_PROOF)
        if self.block > slot.phase_deadline:
            raise TooLate("proof window elapsed")
        raw = pay_data.to_bytes() if isinstance(pay_data, PayData) else bytes(pay_data)
        p = self.payments[slot.picked]
        try:
            included = slot.account in PayData.from_bytes(raw).ids
        except MalformedPayData:
            included = False
        ok = (
            crypto.hash(raw) == p.pay_data_hash
            and included
            and p.unlocked
            and slot.from_index <= p.pay_index <= slot.to_index
        )
        if ok:
            return self._challenger_loses(slot, "inclusion_proven")
        return self._seller_loses(slot, "bad_proof")

    @_transaction("timeout_resolve")
    def timeout_resolve(self, slot_id: int, *, sender: bytes) -> str:
        slot = self.slot(slot_id)
        if slot.phase_deadline is None or self.block <= slot.phase_deadline:
            raise NoTimeoutPending(slot_id)
        if slot.status in (SlotStatus.CHALLENGED, SlotStatus.AWAITING_PROOF):
            return self._seller_loses(slot, "seller_timeout")
        if slot.status == SlotStatus.AWAITING_PICK:
            return self._challenger_loses(slot, "challenger_timeout")
        raise NoTimeoutPending(slot_id)

    # -- delegation -------------------------------------------------------

    DELEGABLE = (
        "collect",
        "finalize_collect",
        "withdraw",
        "challenge_respond_list",
        "challenge_prove_inclusion",
    )

    def submit_delegated(self, delegate_id: int, signed_op: crypto.Envelope, fee: int, *, sender: bytes) -> Any:
        """Run an operation signed by another account, paid for by ``sender``.

        The signed payload is a :func:`meta_operation` JSON document. The fee
        moves from the originator to the delegate only if the inner
        operation succeeds.
        """
        self._relayer = sender
        try:
            try:
                delegate = self._own(delegate_id, sender)
                if not signed_op.is_valid():
                    raise BadSignature("meta-transaction signature")
                op = json.loads(signed_op.payload)
                origin = self.account(int(op["account"]))
                if crypto.address_of(signed_op.sender_pk) != origin.address:
                    raise BadSignature("signer does not control the account")
                if fee > int(op["fee_limit"]):
                    raise FeeExceedsLimit(f"{fee} > {op['fee_limit']}")
                if int(op["nonce"]) != self.nonces.get(origin.id, 0):
                    raise StaleNonce(f"expected nonce {self.nonces.get(origin.id, 0)}")
                if op["op"] not in self.DELEGABLE:
                    raise BadSignature(f"operation {op['op']!r} cannot be delegated")
                if origin.balance < fee:
                    raise InsufficientBatPayBalance("originator cannot pay the delegate fee")
            except ProtocolError as exc:
                self._record("delegated", sender, 0, type(exc).__name__)
                raise
            args = _decode_args(op["args"])
            origin.balance -= fee
            delegate.balance += fee
            try:
                result = getattr(self, op["op"])(*args, sender=origin.address)
            except ProtocolError:
                origin.balance += fee
                delegate.balance -= fee
                raise
            self.nonces[origin.id] = self.nonces.get(origin.id, 0) + 1
            return result
        finally:
            self._relayer = None

    # -- orders -----------------------------------------------------------

    @_transaction("create_order")
    def create_order(
        self,
        audience: AudienceQuery,
        requested: Sequence[DataQuery],
        price: int,
        tc_hash: bytes,
        buyer_url: str,
        *,
        sender: bytes,
    ) -> DataOrder:
        if sender not in self.by_address:
            raise UnregisteredBuyer(_hex(sender))
        order = self.orders.create(sender, audience, requested, price, tc_hash, buyer_url, self.block)
        self.events.append(("OrderCreated", order.id))
        return order

    @_transaction("close_order")
    def close_order(self, order_id: int, *, sender: bytes) -> None:
        self.orders.close(sender, order_id)
        self.events.append(("OrderClosed", order_id))

    # -- reporting --------------------------------------------------------

    def gas_report(self) -> dict[str, Any]:
        return gas_report(self.log, self.params.usd_per_gas)

    def tx_lines(self) -> Iterable[str]:
        for rec in self.log:
            yield json.dumps(rec.to_dict(), sort_keys=True)


def _encode_arg(v: Any) -> Any:
    if isinstance(v, (bytes, bytearray)):
        return {"hex": bytes(v).hex()}
    if isinstance(v, PayData):
        return {"hex": v.to_bytes().hex()}
    if isinstance(v, (list, tuple)):
        return [_encode_arg(x) for x in v]
    return v


def _decode_args(args: list[Any]) -> list[Any]:
    def dec(v: Any) -> Any:
        if isinstance(v, dict) and set(v) == {"hex"}:
            return bytes.fromhex(v["hex"])
        if isinstance(v, list):
            return [dec(x) for x in v]
        return v

    return [dec(a) for a in args]


def meta_operation(account_id: int, op: str, args: Sequence[Any], nonce: int, fee_limit: int) -> bytes:
    """Canonical payload a user signs to have a delegate submit ``op``."""
    body = {
        "account": account_id,
        "op": op,
        "args": [_encode_arg(a) for a in args],
        "nonce": nonce,
        "fee_limit": fee_limit,
    }
    return json.dumps(body, sort_keys=True, separators=(",", ":")).encode()
