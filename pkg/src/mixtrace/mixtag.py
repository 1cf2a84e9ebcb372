"""Heterogeneous dynamic account graph built from purified mixer transactions.

Nodes are EOAs (accounts) and CAs (mixer pools). Every purified record becomes
one transaction edge account -> pool; labelled same-entity pairs used for
composition become association edges. The graph is cut into time slices and
each slice carries the supervision pairs anchored to it.
"""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import SchemaError, ValidationError
from .txio import POOLS, Direction, PurifiedTransaction, normalize_times

log = logging.getLogger(__name__)

EDGE_DIM = 14
SUB_GWEI = 10 ** 9
WEI_PER_ETH = 10 ** 18
DAY = 86400.0
WEEK = 7 * DAY


class NodeType(enum.Enum):
    EOA = "EOA"
    CA = "CA"


class EdgeType(enum.IntEnum):
    TRANSACTION = 0
    ASSOCIATION = 1


class Strategy(enum.Enum):
    EQUAL_TIME = "equal-time"
    EQUAL_COUNT = "equal-count"


@dataclass
class Edge:
    src: int
    dst: int
    etype: EdgeType
    features: np.ndarray
    time: float


@dataclass(frozen=True)
class Label:
    i: int
    j: int
    y: int = 1
    time: float | None = None
    source: str = "txheur"

    @property
    def key(self) -> frozenset:
        return frozenset((self.i, self.j))


@dataclass
class MixTag:
    addresses: list
    node_types: list
    edges: list
    labels: list
    # transaction edges occupy edges[:len(transactions)], aligned with the
    # purified records; association edges follow
    transactions: list = field(default_factory=list)
    node_features: np.ndarray | None = None
    composition: list = field(default_factory=list)
    dropped_labels: int = 0

    @property
    def num_nodes(self) -> int:
        return len(self.addresses)

    @property
    def eoas(self) -> np.ndarray:
        return np.array([k for k, t in enumerate(self.node_types) if t is NodeType.EOA], dtype=np.int64)

    def index_of(self, address: str) -> int:
        return self._index[address]

    def __post_init__(self):
        self._index = {a: k for k, a in enumerate(self.addresses)}

    def transaction_edges(self) -> list:
        return [k for k, e in enumerate(self.edges) if e.etype is EdgeType.TRANSACTION]

    def association_edges(self) -> list:
        return [k for k, e in enumerate(self.edges) if e.etype is EdgeType.ASSOCIATION]

    def positive_keys(self) -> set:
        return {lab.key for lab in self.labels} | {lab.key for lab in self.composition}


@dataclass
class TimeSlice:
    index: int
    edges: list
    supervision: list
    # EOAs touched by this slice's transaction edges; the negative-sampling pool
    active_eoas: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def transaction_edges(self, graph: MixTag) -> list:
        return [k for k in self.edges if graph.edges[k].etype is EdgeType.TRANSACTION]

    def association_edges(self, graph: MixTag) -> list:
        return [k for k in self.edges if graph.edges[k].etype is EdgeType.ASSOCIATION]


# ------------------------------------------------------------ edge features

def edge_features(tx: PurifiedTransaction, norm_time: float) -> np.ndarray:
    """The 14 transaction-edge features.

    0-1 direction one-hot, 2 normalized time, 3-4 time-of-day phase,
    5-6 day-of-week phase, 7 log value, 8 log gas price, 9 sub-gwei gas
    fraction, 10 non-round gas flag, 11-12 sub-gwei gas phase,
    13 last-six-digit gas fraction.
    """
    value_eth = tx.value / WEI_PER_ETH
    gwei = tx.gas_price / SUB_GWEI
    low = tx.gas_price % SUB_GWEI
    frac = low / SUB_GWEI
    day = 2 * math.pi * (tx.timestamp % DAY) / DAY
    week = 2 * math.pi * (tx.timestamp % WEEK) / WEEK
    return np.array([
        1.0 if tx.direction is Direction.DEPOSIT else 0.0,
        1.0 if tx.direction is Direction.WITHDRAWAL else 0.0,
        norm_time,
        math.sin(day), math.cos(day),
        math.sin(week), math.cos(week),
        math.log10(value_eth + 1e-3) / 2.0,
        math.log10(gwei + 1.0) / 3.0,
        frac,
        1.0 if low else 0.0,
        math.sin(2 * math.pi * frac), math.cos(2 * math.pi * frac),
        (tx.gas_price % 10 ** 6) / 10 ** 6,
    ])


# ------------------------------------------------------------- construction

def resolve_labels(raw_labels, addresses: dict) -> tuple:
    """Map label records ``{addr_a, addr_b, source, time}`` onto node indices.

    Labels naming an unknown address, a self pair or a repeated pair are dropped.
    """
    out, dropped, seen = [], 0, set()
    for obj in raw_labels:
        a, b = obj["addr_a"].lower(), obj["addr_b"].lower()
        if a not in addresses or b not in addresses or a == b:
            dropped += 1
            continue
        lab = Label(addresses[a], addresses[b], 1, obj.get("time"), obj.get("source", "txheur"))
        if lab.key in seen:
            dropped += 1
            continue
        seen.add(lab.key)
        out.append(lab)
    return out, dropped


def build_graph(purified: list, labels: list, composition: list = ()) -> MixTag:
    """``labels`` / ``composition`` are label records (dicts) or :class:`Label`
    objects already indexed against this purified set."""
    if not purified:
        raise ValidationError("no purified transactions")
    accounts = sorted({t.account for t in purified})
    contracts = sorted({t.contract for t in purified})
    overlap = set(accounts) & set(contracts)
    if overlap:
        raise SchemaError(f"address used as both account and mixer: {sorted(overlap)[0]}")
    addresses = accounts + contracts
    index = {a: k for k, a in enumerate(addresses)}
    node_types = [NodeType.EOA] * len(accounts) + [NodeType.CA] * len(contracts)

    normed = normalize_times(list(purified))
    edges = []
    for tx, t in normed:
        edges.append(Edge(index[tx.account], index[tx.contract], EdgeType.TRANSACTION,
                          edge_features(tx, t), t))

    def _resolve(items):
        items = list(items)
        if items and isinstance(items[0], Label):
            return items, 0
        return resolve_labels(items, {a: index[a] for a in accounts})

    sup, dropped_a = _resolve(labels)
    comp, dropped_b = _resolve(composition)
    if dropped_a + dropped_b:
        log.warning("dropped %d labels referencing unknown addresses", dropped_a + dropped_b)

    graph = MixTag(addresses, node_types, edges, sup, transactions=list(purified),
                   composition=comp, dropped_labels=dropped_a + dropped_b)
    anchor = pair_anchor_times(graph)
    for lab in comp:
        graph.edges.append(Edge(lab.i, lab.j, EdgeType.ASSOCIATION, np.zeros(EDGE_DIM),
                                anchor(lab.i, lab.j)[0]))
    return graph


def first_withdrawals(graph: MixTag) -> dict:
    """EOA index -> (normalized time, edge index) of its earliest withdrawal."""
    out = {}
    for k, e in enumerate(graph.edges):
        if e.etype is not EdgeType.TRANSACTION or graph.transactions[k].direction is not Direction.WITHDRAWAL:
            continue
        cur = out.get(e.src)
        if cur is None or (e.time, k) < cur:
            out[e.src] = (e.time, k)
    return out


def pair_anchor_times(graph: MixTag, anchor: str = "later"):
    """Return ``f(i, j) -> (time, edge index | None)`` choosing which account's
    first withdrawal anchors an association pair."""
    firsts = first_withdrawals(graph)
    pick = max if anchor == "later" else min

    def f(i, j):
        cands = [firsts[a] for a in (i, j) if a in firsts]
        if not cands:
            return 1.0, None
        return pick(cands)

    return f


# ------------------------------------------------------------------ slicing

def _assign_transaction_slices(graph: MixTag, strategy: Strategy, num_slices: int) -> dict:
    tx = graph.transaction_edges()
    if not tx:
        raise ValidationError("graph has no transaction edges")
    out = {}
    if strategy is Strategy.EQUAL_TIME:
        for k in tx:
            out[k] = min(int(graph.edges[k].time * num_slices), num_slices - 1)
    else:
        order = sorted(tx, key=lambda k: (graph.edges[k].time, k))
        per = math.ceil(len(order) / num_slices)
        for pos, k in enumerate(order):
            out[k] = pos // per
    return out


def slice_graph(graph: MixTag, strategy: Strategy | str, num_slices: int,
                anchor: str = "later") -> list:
    if num_slices < 1:
        raise ValidationError(f"num_slices must be >= 1, got {num_slices}")
    strategy = Strategy(strategy)
    where = _assign_transaction_slices(graph, strategy, num_slices)
    anchor_of = pair_anchor_times(graph, anchor)

    def pair_slice(lab: Label) -> int:
        _, edge = anchor_of(lab.i, lab.j)
        return where[edge] if edge is not None else num_slices - 1

    slices = [TimeSlice(k, [], []) for k in range(num_slices)]
    for k, s in sorted(where.items()):
        slices[s].edges.append(k)
    comp_slice = {lab.key: pair_slice(lab) for lab in graph.composition}
    for k, e in enumerate(graph.edges):
        if e.etype is EdgeType.ASSOCIATION:
            slices[comp_slice[frozenset((e.src, e.dst))]].edges.append(k)
    for n, lab in enumerate(graph.labels):
        slices[pair_slice(lab)].supervision.append(n)
    eoa = np.array([t is NodeType.EOA for t in graph.node_types])
    for s in slices:
        s.edges.sort()
        touched = {graph.edges[k].src for k in s.edges if graph.edges[k].etype is EdgeType.TRANSACTION}
        s.active_eoas = np.array(sorted(a for a in touched if eoa[a]), dtype=np.int64)
    return slices


def density(num_nodes: int, num_edges: int) -> float:
    if num_nodes < 2:
        raise ValidationError(f"density needs at least 2 nodes, got {num_nodes}")
    if num_edges == 0:
        return 0.0
    return num_edges / (num_nodes * (num_nodes - 1))


def slice_density(graph: MixTag, s: TimeSlice, include_association: bool = True) -> float:
    edges = s.edges if include_association else s.transaction_edges(graph)
    return density(graph.num_nodes, len(edges))


# ------------------------------------------------------------------- labels

def split_labels(labels: list, composition_ratio: float, seed: int) -> tuple:
    """Disjoint random split into (composition, supervision), input order kept."""
    if not 0.0 <= composition_ratio <= 1.0:
        raise ValidationError(f"composition_ratio must be in [0, 1], got {composition_ratio}")
    n = len(labels)
    n_comp = int(round(composition_ratio * n))
    rng = np.random.default_rng(seed)
    chosen = set(rng.permutation(n)[:n_comp].tolist())
    comp = [lab for k, lab in enumerate(labels) if k in chosen]
    sup = [lab for k, lab in enumerate(labels) if k not in chosen]
    return comp, sup


def sample_negatives(candidates: np.ndarray, num_positives: int, ratio: float, seed,
                     exclude: set) -> list:
    """Uniform distinct unordered pairs from ``candidates`` avoiding ``exclude``.

    Returns ``ceil(ratio * num_positives)`` pairs, or every admissible pair
    when fewer exist.
    """
    if ratio <= 0:
        raise ValidationError(f"negative ratio must be > 0, got {ratio}")
    want = math.ceil(ratio * num_positives)
    cand = np.asarray(candidates, dtype=np.int64)
    n = cand.size
    if want == 0 or n < 2:
        return []
    rng = np.random.default_rng(seed)
    total = n * (n - 1) // 2
    if total <= 4 * want + 16:
        pool = [(int(cand[a]), int(cand[b])) for a in range(n) for b in range(a + 1, n)
                if frozenset((int(cand[a]), int(cand[b]))) not in exclude]
        if len(pool) <= want:
            return [(i, j, 0) for i, j in pool]
        pick = rng.choice(len(pool), size=want, replace=False)
        return [(pool[p][0], pool[p][1], 0) for p in sorted(pick.tolist())]
    out, seen = [], set()
    while len(out) < want:
        a, b = rng.integers(0, n, size=2)
        if a == b:
            continue
        i, j = int(cand[a]), int(cand[b])
        key = frozenset((i, j))
        if key in exclude or key in seen:
            continue
        seen.add(key)
        out.append((i, j, 0))
    return out


def sample_slice_negatives(s: TimeSlice, graph: MixTag, ratio: float, seed,
                           positives: list | None = None) -> list:
    pos = s.supervision if positives is None else positives
    cands = s.active_eoas if s.active_eoas.size >= 2 else graph.eoas
    return sample_negatives(cands, len(pos), ratio, seed, graph.positive_keys())


# ------------------------------------------------------------------- bundle

def to_bundle(graph: MixTag, slices: list, meta: dict | None = None) -> dict:
    def lab(l: Label):
        return {"i": l.i, "j": l.j, "time": l.time, "source": l.source}

    edges = []
    for k, e in enumerate(graph.edges):
        obj = {"src": e.src, "dst": e.dst, "type": e.etype.name.lower(), "time": e.time,
               "features": [float(v) for v in e.features]}
        if e.etype is EdgeType.TRANSACTION:
            obj["tx"] = graph.transactions[k].to_json()
        edges.append(obj)
    return {
        "meta": dict(meta or {}),
        "nodes": [{"address": a, "type": t.value} for a, t in zip(graph.addresses, graph.node_types)],
        "edges": edges,
        "labels": [lab(l) for l in graph.labels],
        "composition": [lab(l) for l in graph.composition],
        "slices": [{"index": s.index, "edges": s.edges, "supervision": s.supervision,
                    "active_eoas": s.active_eoas.tolist()} for s in slices],
        "dropped_labels": graph.dropped_labels,
    }


def from_bundle(bundle: dict) -> tuple:
    try:
        addresses = [n["address"] for n in bundle["nodes"]]
        node_types = [NodeType(n["type"]) for n in bundle["nodes"]]
        edges, txs = [], []
        for e in bundle["edges"]:
            etype = EdgeType[e["type"].upper()]
            edges.append(Edge(e["src"], e["dst"], etype, np.asarray(e["features"], dtype=float), e["time"]))
            if etype is EdgeType.TRANSACTION:
                txs.append(PurifiedTransaction.from_json(e["tx"]))
        labels = [Label(l["i"], l["j"], 1, l["time"], l["source"]) for l in bundle["labels"]]
        comp = [Label(l["i"], l["j"], 1, l["time"], l["source"]) for l in bundle["composition"]]
        graph = MixTag(addresses, node_types, edges, labels, transactions=txs,
                       composition=comp, dropped_labels=bundle.get("dropped_labels", 0))
        slices = [TimeSlice(s["index"], list(s["edges"]), list(s["supervision"]),
                            np.asarray(s["active_eoas"], dtype=np.int64)) for s in bundle["slices"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed graph bundle: {exc}") from exc
    n = len(addresses)
    for e in edges:
        if not (0 <= e.src < n and 0 <= e.dst < n):
            raise SchemaError("graph bundle edge endpoint out of range")
    return graph, slices


def dump_bundle(bundle: dict) -> str:
    return json.dumps(bundle, sort_keys=True, separators=(",", ":"))
