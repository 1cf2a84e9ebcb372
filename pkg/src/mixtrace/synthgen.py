"""Seeded synthetic mixing worlds with planted same-entity account pairs.

An entity deposits from one account and withdraws to another account of the
same pool after a log-normal delay; with probability ``signature_strength``
both legs share a non-round sub-gwei gas-price suffix. Background accounts
make one deposit or withdrawal at a uniform time. Every interaction is
emitted through one of the six on-chain workflows the purifier understands.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .txio import POOLS, Kind, Pool, RawTransaction

GWEI = 10 ** 9
WEI = 10 ** 18
BLOCK_TIME = 12
GENESIS_BLOCK = 10_000_000


class Workflow(enum.Enum):
    DEPOSIT_PROXY = "deposit-proxy"
    DEPOSIT_DIRECT = "deposit-direct"
    WITHDRAW_RELAYER = "withdraw-relayer"          # ext relayer -> mixer, fee leg to relayer
    WITHDRAW_RELAYER_PROXY = "withdraw-relayer-proxy"  # ext relayer -> proxy, fee leg to relayer
    WITHDRAW_INTERNAL_FEE = "withdraw-internal-fee"  # no external, fee leg to relayer
    WITHDRAW_INTERNAL = "withdraw-internal"        # no external, single leg


DEPOSIT_WORKFLOWS = (Workflow.DEPOSIT_PROXY, Workflow.DEPOSIT_DIRECT)
WITHDRAW_WORKFLOWS = (Workflow.WITHDRAW_RELAYER, Workflow.WITHDRAW_RELAYER_PROXY,
                      Workflow.WITHDRAW_INTERNAL_FEE, Workflow.WITHDRAW_INTERNAL)


@dataclass(frozen=True)
class SynthConfig:
    num_entities: int = 200
    accounts_per_entity: int = 2
    num_background_accounts: int = 1600
    num_pools: int = 4
    time_horizon: int = 50 * 86400  # seconds
    start_time: int = 1_600_000_000
    gap_mu: float = math.log(3600.0)
    gap_sigma: float = 1.0
    signature_strength: float = 0.8
    background_signature_rate: float = 0.1
    num_relayers: int = 3
    num_noise_groups: int = 50
    seed: int = 7

    def validate(self) -> "SynthConfig":
        for name in ("num_entities", "accounts_per_entity", "num_background_accounts", "num_pools",
                     "time_horizon", "num_relayers"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.accounts_per_entity < 2:
            raise ValidationError("accounts_per_entity must be >= 2 to plant a pair")
        if self.num_pools > len(POOLS):
            raise ValidationError(f"num_pools must be <= {len(POOLS)}")
        if not 0.0 <= self.signature_strength <= 1.0:
            raise ValidationError("signature_strength must be in [0, 1]")
        if self.gap_sigma < 0 or self.num_noise_groups < 0:
            raise ValidationError("gap_sigma and num_noise_groups must be >= 0")
        return self


@dataclass
class SynthWorld:
    transactions: list              # RawTransaction, grouped by hash, time ordered
    labels: list                    # {addr_a, addr_b, source, time}
    mixers: dict                    # address -> pool denomination string
    relayers: list                  # relayer and proxy addresses
    workflows: dict = field(default_factory=dict)  # tx hash -> Workflow (mixer groups only)
    entities: list = field(default_factory=list)   # per entity: list of addresses
    background: list = field(default_factory=list)


class _Gen:
    def __init__(self, cfg: SynthConfig):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.used: set = set()
        self.txs: list = []
        self.workflows: dict = {}

    def _hex(self, nbytes: int) -> str:
        while True:
            h = "0x" + self.rng.bytes(nbytes).hex()
            if h not in self.used:
                self.used.add(h)
                return h

    def address(self) -> str:
        return self._hex(20)

    def gas(self, suffix: int | None) -> int:
        base = int(self.rng.integers(20, 121)) * GWEI
        return base + (suffix or 0)

    def suffix(self) -> int:
        return int(self.rng.integers(1, GWEI))

    def _tx(self, h, ts, sender, receiver, value, gas, kind, pool):
        block = GENESIS_BLOCK + (ts - self.cfg.start_time) // BLOCK_TIME
        self.txs.append(RawTransaction(h, int(block), int(ts), sender, receiver, int(value),
                                       int(gas), kind, pool))

    def deposit(self, wf, account, mixer, pool: Pool, ts, gas):
        h = self._hex(32)
        value = int(round(pool.eth * WEI))
        if wf is Workflow.DEPOSIT_DIRECT:
            self._tx(h, ts, account, mixer, value, gas, Kind.EXTERNAL, pool)
        else:
            self._tx(h, ts, account, self.proxy, value, gas, Kind.EXTERNAL, pool)
            self._tx(h, ts, self.proxy, mixer, value, gas, Kind.INTERNAL, pool)
        self.workflows[h] = wf

    def withdraw(self, wf, account, mixer, pool: Pool, ts, gas):
        h = self._hex(32)
        denom = int(round(pool.eth * WEI))
        relayer = self.relayers[int(self.rng.integers(len(self.relayers)))]
        fee = int(denom * self.rng.uniform(0.001, 0.005))
        if wf is Workflow.WITHDRAW_INTERNAL:
            self._tx(h, ts, mixer, account, denom, gas, Kind.INTERNAL, pool)
        else:
            if wf is Workflow.WITHDRAW_RELAYER:
                self._tx(h, ts, relayer, mixer, 0, gas, Kind.EXTERNAL, pool)
            elif wf is Workflow.WITHDRAW_RELAYER_PROXY:
                self._tx(h, ts, relayer, self.proxy, 0, gas, Kind.EXTERNAL, pool)
            self._tx(h, ts, mixer, account, denom - fee, gas, Kind.INTERNAL, pool)
            self._tx(h, ts, mixer, relayer, fee, gas, Kind.INTERNAL, pool)
        self.workflows[h] = wf

    def noise(self, ts):
        h = self._hex(32)
        a, b = self.address(), self.address()
        self._tx(h, ts, a, b, int(self.rng.integers(1, 10 ** 17)), self.gas(None), Kind.EXTERNAL, None)


def generate(cfg: SynthConfig = SynthConfig()) -> SynthWorld:
    cfg.validate()
    g = _Gen(cfg)
    pools = list(POOLS[:cfg.num_pools])
    mixers = {g.address(): p for p in pools}
    pool_mixer = {p: a for a, p in mixers.items()}
    g.proxy = g.address()
    g.relayers = [g.address() for _ in range(cfg.num_relayers)]
    t0, horizon = cfg.start_time, cfg.time_horizon
    rng = g.rng
    events = []  # (ts, kind, payload) realized after all draws so hashes follow time order

    entities, labels = [], []
    for _ in range(cfg.num_entities):
        accounts = [g.address() for _ in range(cfg.accounts_per_entity)]
        entities.append(accounts)
        pool = pools[int(rng.integers(len(pools)))]
        shared = g.suffix() if rng.random() < cfg.signature_strength else None

        def own_suffix():
            if shared is not None:
                return shared
            return g.suffix() if rng.random() < cfg.background_signature_rate else None

        dep_ts = t0 + int(rng.uniform(0, horizon * 0.95))
        events.append((dep_ts, "d", (DEPOSIT_WORKFLOWS[int(rng.integers(2))], accounts[0], pool,
                                     g.gas(own_suffix()))))
        for acct in accounts[1:]:
            gap = float(np.exp(rng.normal(cfg.gap_mu, cfg.gap_sigma)))
            wd_ts = min(dep_ts + max(int(gap), BLOCK_TIME), t0 + horizon)
            events.append((wd_ts, "w", (WITHDRAW_WORKFLOWS[int(rng.integers(4))], acct, pool,
                                        g.gas(own_suffix()))))
            labels.append({"addr_a": accounts[0], "addr_b": acct, "source": "txheur", "time": wd_ts})

    background = []
    for _ in range(cfg.num_background_accounts):
        acct = g.address()
        background.append(acct)
        pool = pools[int(rng.integers(len(pools)))]
        ts = t0 + int(rng.uniform(0, horizon))
        sfx = g.suffix() if rng.random() < cfg.background_signature_rate else None
        if rng.random() < 0.5:
            events.append((ts, "d", (DEPOSIT_WORKFLOWS[int(rng.integers(2))], acct, pool, g.gas(sfx))))
        else:
            events.append((ts, "w", (WITHDRAW_WORKFLOWS[int(rng.integers(4))], acct, pool, g.gas(sfx))))
    for _ in range(cfg.num_noise_groups):
        events.append((t0 + int(rng.uniform(0, horizon)), "n", None))

    # stable sort keeps draw order for equal timestamps
    for ts, kind, payload in sorted(events, key=lambda e: e[0]):
        if kind == "n":
            g.noise(ts)
            continue
        wf, acct, pool, gas = payload
        (g.deposit if kind == "d" else g.withdraw)(wf, acct, pool_mixer[pool], pool, ts, gas)

    return SynthWorld(
        transactions=g.txs,
        labels=labels,
        mixers={a: p.value for a, p in mixers.items()},
        relayers=[g.proxy] + g.relayers,
        workflows=g.workflows,
        entities=entities,
        background=background,
    )
