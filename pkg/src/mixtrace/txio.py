"""Raw transaction records, grouping by hash, and purification.

A mixing interaction shows up on chain as one external transaction and/or a
handful of internal message calls sharing its hash. ``purify`` reduces each
group to a single (account, mixer contract, direction, time) record and drops
the relayer/proxy legs.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .errors import ClassificationError, IntegrityError, ParseError, SchemaError, ValidationError

ADDRESS_RE = re.compile(r"^0x[0-9a-f]{40}$")
HASH_RE = re.compile(r"^0x[0-9a-f]{64}$")

RAW_KEYS = frozenset(
    {"tx_hash", "block", "timestamp", "from", "to", "value_wei", "gas_price_wei", "kind", "pool"})
PURIFIED_KEYS = ("account", "contract", "direction", "timestamp", "value_wei", "gas_price_wei", "pool")


class Kind(enum.Enum):
    EXTERNAL = "external"
    INTERNAL = "internal"


class Pool(enum.Enum):
    P01 = "0.1"
    P1 = "1"
    P10 = "10"
    P100 = "100"

    @property
    def eth(self) -> float:
        return float(self.value)


POOLS = tuple(Pool)


class Direction(enum.Enum):
    DEPOSIT = "deposit"
    WITHDRAWAL = "withdrawal"


@dataclass(frozen=True)
class RawTransaction:
    tx_hash: str
    block: int
    timestamp: int
    sender: str
    receiver: str
    value: int
    gas_price: int
    kind: Kind
    pool: Pool | None

    def to_json(self) -> dict:
        return {
            "tx_hash": self.tx_hash, "block": self.block, "timestamp": self.timestamp,
            "from": self.sender, "to": self.receiver, "value_wei": self.value,
            "gas_price_wei": self.gas_price, "kind": self.kind.value,
            "pool": self.pool.value if self.pool else None,
        }


@dataclass
class TxGroup:
    tx_hash: str
    externals: list = field(default_factory=list)
    internals: list = field(default_factory=list)

    @property
    def external(self) -> RawTransaction | None:
        return self.externals[0] if self.externals else None


@dataclass(frozen=True)
class PurifiedTransaction:
    account: str
    contract: str
    direction: Direction
    timestamp: int
    value: int
    gas_price: int
    pool: Pool | None

    def to_json(self) -> dict:
        return {
            "account": self.account, "contract": self.contract,
            "direction": self.direction.value, "timestamp": self.timestamp,
            "value_wei": self.value, "gas_price_wei": self.gas_price,
            "pool": self.pool.value if self.pool else None,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "PurifiedTransaction":
        pool = obj.get("pool")
        return cls(
            account=obj["account"], contract=obj["contract"],
            direction=Direction(obj["direction"]), timestamp=int(obj["timestamp"]),
            value=int(obj["value_wei"]), gas_price=int(obj["gas_price_wei"]),
            pool=Pool(pool) if pool is not None else None,
        )


# ------------------------------------------------------------------ parsing

def _address(line_no: int, name: str, value) -> str:
    if not isinstance(value, str) or not ADDRESS_RE.match(value.lower()):
        raise ParseError(line_no, name, f"expected 0x-prefixed 40-hex address, got {value!r}")
    return value.lower()


def _uint(line_no: int, name: str, value) -> int:
    # big wei amounts may arrive as decimal strings
    if isinstance(value, bool):
        raise ParseError(line_no, name, "expected unsigned integer")
    if isinstance(value, str) and value.isdigit():
        value = int(value)
    if not isinstance(value, int) or value < 0:
        raise ParseError(line_no, name, f"expected unsigned integer, got {value!r}")
    return value


def parse_record(obj: Mapping, line_no: int = 1, require_pool: bool = False) -> RawTransaction:
    if not isinstance(obj, Mapping):
        raise ParseError(line_no, "<record>", "expected a JSON object")
    keys = set(obj)
    if keys != RAW_KEYS:
        missing, extra = sorted(RAW_KEYS - keys), sorted(keys - RAW_KEYS)
        name = (missing or extra)[0]
        raise ParseError(line_no, name, f"missing keys {missing}, unexpected keys {extra}")
    tx_hash = obj["tx_hash"]
    if not isinstance(tx_hash, str) or not HASH_RE.match(tx_hash.lower()):
        raise ParseError(line_no, "tx_hash", f"expected 0x-prefixed 64-hex hash, got {tx_hash!r}")
    timestamp = _uint(line_no, "timestamp", obj["timestamp"])
    if timestamp <= 0:
        raise ParseError(line_no, "timestamp", "must be positive")
    try:
        kind = Kind(obj["kind"])
    except ValueError:
        raise ParseError(line_no, "kind", f"expected 'external' or 'internal', got {obj['kind']!r}")
    pool_raw = obj["pool"]
    if pool_raw is None:
        if require_pool:
            raise SchemaError(f"line {line_no}: pool required but missing")
        pool = None
    else:
        try:
            pool = Pool(str(pool_raw))
        except ValueError:
            raise ParseError(line_no, "pool", f"unknown pool {pool_raw!r}")
    return RawTransaction(
        tx_hash=tx_hash.lower(),
        block=_uint(line_no, "block", obj["block"]),
        timestamp=timestamp,
        sender=_address(line_no, "sender", obj["from"]),
        receiver=_address(line_no, "receiver", obj["to"]),
        value=_uint(line_no, "value_wei", obj["value_wei"]),
        gas_price=_uint(line_no, "gas_price_wei", obj["gas_price_wei"]),
        kind=kind,
        pool=pool,
    )


def parse_records(lines: Iterable[str], require_pool: bool = False) -> list:
    """One RawTransaction per non-blank line of JSON."""
    out = []
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(line_no, "<json>", str(exc)) from exc
        out.append(parse_record(obj, line_no, require_pool=require_pool))
    return out


def group_by_hash(txs: Iterable[RawTransaction]) -> list:
    groups: dict[str, TxGroup] = {}
    for tx in txs:
        group = groups.get(tx.tx_hash)
        if group is None:
            group = groups[tx.tx_hash] = TxGroup(tx.tx_hash)
        if tx.kind is Kind.EXTERNAL:
            if group.externals:
                raise IntegrityError(f"{tx.tx_hash}: more than one external transaction")
            group.externals.append(tx)
        else:
            group.internals.append(tx)
    return list(groups.values())


# -------------------------------------------------------------- purification

def _pool_of(record: RawTransaction, contract: str, pools: Mapping[str, Pool] | None) -> Pool | None:
    if pools and contract in pools:
        return pools[contract]
    return record.pool


def purify(group: TxGroup, mixer_addresses, service_addresses=(),
           pools: Mapping[str, Pool] | None = None) -> PurifiedTransaction | None:
    """Reduce one hash group to a purified record, or ``None`` for non-mixer noise.

    ``service_addresses`` holds the relayer and proxy addresses; ``pools``
    optionally maps mixer addresses to their denomination.
    """
    mixers = set(mixer_addresses)
    services = set(service_addresses)
    ext = group.external
    internals = group.internals

    into_mixer = [t for t in internals if t.receiver in mixers and t.sender not in mixers]
    out_of_mixer = [t for t in internals if t.sender in mixers]

    if ext is not None:
        if not internals:
            if ext.receiver not in mixers:
                return None
            # direct deposit: the external call itself is the deposit
            return _emit(ext.sender, ext.receiver, Direction.DEPOSIT, ext, ext, pools, group)
        if into_mixer and not out_of_mixer:
            # deposit through a proxy: account from the external leg, pool from the internal leg
            contracts = {t.receiver for t in into_mixer}
            if len(contracts) != 1:
                raise ClassificationError(group.tx_hash, "deposit reaches several mixer contracts")
            leg = into_mixer[0]
            return _emit(ext.sender, leg.receiver, Direction.DEPOSIT, ext, leg, pools, group)
        if not out_of_mixer and ext.receiver not in mixers:
            return None
        if len(internals) != 2:
            raise ClassificationError(
                group.tx_hash, f"withdrawal with external tx needs exactly two internals, got {len(internals)}")
        return _withdrawal(group, internals, mixers, services, ext, pools)

    if not out_of_mixer:
        return None
    return _withdrawal(group, internals, mixers, services, None, pools)


def _withdrawal(group, internals, mixers, services, ext, pools):
    candidates = [t for t in internals if t.receiver not in mixers and t.receiver not in services]
    accounts = {t.receiver for t in candidates}
    if len(accounts) != 1:
        what = "no" if not accounts else "two or more"
        raise ClassificationError(group.tx_hash, f"{what} candidate withdrawal accounts")
    leg = candidates[0]
    if leg.sender in mixers:
        contract = leg.sender
    elif ext is not None and ext.receiver in mixers:
        contract = ext.receiver
    else:
        senders = {t.sender for t in internals if t.sender in mixers}
        if len(senders) != 1:
            raise ClassificationError(group.tx_hash, "cannot identify the mixer contract")
        contract = senders.pop()
    timed = ext if ext is not None else min(internals, key=lambda t: t.timestamp)
    return _emit(leg.receiver, contract, Direction.WITHDRAWAL, timed, leg, pools, group,
                 gas_source=ext if ext is not None else leg)


def _emit(account, contract, direction, timed, leg, pools, group, gas_source=None):
    if account == contract:
        raise ClassificationError(group.tx_hash, "account equals mixer contract")
    gas_source = gas_source or timed
    return PurifiedTransaction(
        account=account,
        contract=contract,
        direction=direction,
        timestamp=timed.timestamp,
        value=leg.value,
        gas_price=gas_source.gas_price,
        pool=_pool_of(leg, contract, pools),
    )


def purify_all(txs: Iterable[RawTransaction], mixer_addresses, service_addresses=(),
               pools: Mapping[str, Pool] | None = None) -> list:
    """Purify every group; output sorted by tx hash."""
    groups = sorted(group_by_hash(txs), key=lambda g: g.tx_hash)
    out = []
    for g in groups:
        rec = purify(g, mixer_addresses, service_addresses, pools)
        if rec is not None:
            out.append(rec)
    return out


def normalize_times(txs: list) -> list:
    """Pair each record with ``(t - t_min) / (t_max - t_min)``; all zeros when the span is empty."""
    if not txs:
        raise ValidationError("normalize_times needs at least one transaction")
    times = [t.timestamp for t in txs]
    lo, hi = min(times), max(times)
    span = hi - lo
    return [(t, (t.timestamp - lo) / span if span else 0.0) for t in txs]


# ------------------------------------------------------------------- files

def dump_lines(objs: Iterable[Mapping]) -> str:
    return "".join(json.dumps(o, sort_keys=True, separators=(",", ":")) + "\n" for o in objs)


def read_purified(lines: Iterable[str]) -> list:
    out = []
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        obj = json.loads(line)
        if set(obj) != set(PURIFIED_KEYS):
            raise SchemaError(f"line {line_no}: purified record keys {sorted(obj)}")
        out.append(PurifiedTransaction.from_json(obj))
    return out


def load_address_map(text: str) -> dict:
    """Mixer/service address file: a JSON list of addresses or an object
    mapping address to pool denomination (or to any label)."""
    obj = json.loads(text)
    if isinstance(obj, list):
        return {a.lower(): None for a in obj}
    if isinstance(obj, dict):
        return {a.lower(): v for a, v in obj.items()}
    raise SchemaError("address file must be a JSON list or object")
