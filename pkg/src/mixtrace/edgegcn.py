"""Edge-aware heterogeneous message passing and the link-prediction head.

For an edge i -> j of type k with raw features e::

    m_ij = sigmoid(W_m^k e + b_m^k) * x_i + (W_e^k e + b_e^k) + x_j
    M_j  = sum_k sum_{i in N_k(j)} m_ij
    x_j' = W_n (M_j / (||M_j|| + eps)) + b_n

Edges are traversed in both directions. After ``L`` rounds the embeddings go
through one more linear map ``W_r``. Pairs are scored by a two-layer
perceptron over the concatenated endpoint embeddings.

Computation is restricted to the nodes a slice touches (edge endpoints plus
queried pairs); nodes outside that set cannot influence any output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ndcore as nd
from .errors import DimensionError
from .mixtag import EDGE_DIM, EdgeType

EDGE_TYPES = (EdgeType.TRANSACTION, EdgeType.ASSOCIATION)


@dataclass(frozen=True)
class EncoderDims:
    node: int = 544
    hidden: int = 256
    out: int = 64
    layers: int = 2
    head_hidden: int = 64
    edge: int = EDGE_DIM

    def layer_in(self, layer: int) -> int:
        return self.node if layer == 0 else self.hidden


@dataclass(frozen=True)
class EncoderOptions:
    edge_aware: bool = True
    dropout: float = 0.0
    eps: float = nd.NORM_EPS
    tied_head: bool = False


def _glorot(rng, fan_in, fan_out):
    return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))


def init_params(dims: EncoderDims, seed, tied_head: bool = False) -> nd.ParamSet:
    rng = np.random.default_rng(seed)
    p = {}
    for layer in range(dims.layers):
        d_in = dims.layer_in(layer)
        for et in EDGE_TYPES:
            tag = f"gcn{layer}.{et.name.lower()}"
            p[f"{tag}.W_e"] = _glorot(rng, dims.edge, d_in)
            p[f"{tag}.b_e"] = np.zeros(d_in)
            p[f"{tag}.W_m"] = _glorot(rng, dims.edge, d_in)
            p[f"{tag}.b_m"] = np.zeros(d_in)
        p[f"gcn{layer}.W_n"] = _glorot(rng, d_in, dims.hidden)
        p[f"gcn{layer}.b_n"] = np.zeros(dims.hidden)
    p["gcn.W_r"] = _glorot(rng, dims.hidden, dims.out)
    head_in = dims.out if tied_head else 2 * dims.out
    p["head.W1"] = _glorot(rng, head_in, dims.head_hidden)
    p["head.b1"] = np.zeros(dims.head_hidden)
    p["head.W2"] = _glorot(rng, dims.head_hidden, 1)
    p["head.b2"] = np.zeros(1)
    return p


# ------------------------------------------------------------- single steps

def project_edge(e, params, tag: str):
    W = params[f"{tag}.W_e"]
    W_val = W.value if isinstance(W, nd.Var) else W
    e_val = e.value if isinstance(e, nd.Var) else np.asarray(e)
    if e_val.shape[-1] != W_val.shape[0]:
        raise DimensionError(f"project_edge: edge dim {e_val.shape[-1]} != {W_val.shape[0]}")
    return nd.add(nd.matmul(e, W), params[f"{tag}.b_e"])


def message(x_src, x_dst, e, params, tag: str, edge_aware: bool = True):
    if not edge_aware:
        return nd.add(x_src, x_dst)
    gate = nd.sigmoid(nd.add(nd.matmul(e, params[f"{tag}.W_m"]), params[f"{tag}.b_m"]))
    return nd.add(nd.add(nd.mul(gate, x_src), project_edge(e, params, tag)), x_dst)


def update_node(M, params, layer: int, eps: float = nd.NORM_EPS):
    return nd.add(nd.matmul(nd.l2_normalize(M, eps), params[f"gcn{layer}.W_n"]),
                  params[f"gcn{layer}.b_n"])


def link_logits(h, pairs: np.ndarray, params, tied: bool = False):
    """Logits of shape (P, 1) for row-index pairs into ``h``."""
    hi, hj = nd.gather(h, pairs[:, 0]), nd.gather(h, pairs[:, 1])
    if tied:
        z = nd.matmul(nd.add(hi, hj), params["head.W1"])
    else:
        z = nd.matmul(nd.concat([hi, hj]), params["head.W1"])
    hidden = nd.sigmoid(nd.add(z, params["head.b1"]))
    return nd.add(nd.matmul(hidden, params["head.W2"]), params["head.b2"])


# ------------------------------------------------------------- slice batches

@dataclass
class SliceBatch:
    """Compact view of one slice for encoding.

    ``nodes`` maps compact rows to global node ids. ``messages[k]`` holds
    (src, dst, features) per edge type, both directions, sorted by (dst, src).
    """
    nodes: np.ndarray
    x: np.ndarray
    messages: dict
    pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    def compact(self, global_pairs) -> np.ndarray:
        """Global node-index pairs mapped to compact rows."""
        gp = np.asarray(global_pairs, dtype=np.int64).reshape(-1, 2)
        rows = np.searchsorted(self.nodes, gp)
        ok = (rows < len(self.nodes)) & (self.nodes[np.minimum(rows, len(self.nodes) - 1)] == gp)
        if not ok.all():
            raise DimensionError("pair references a node outside the slice batch")
        return rows

    def with_pairs(self, global_pairs, labels) -> "SliceBatch":
        return SliceBatch(self.nodes, self.x, self.messages, self.compact(global_pairs),
                          np.asarray(labels, dtype=float))


def make_batch(graph, edge_ids, features: np.ndarray, pairs=(), labels=(),
               include=None, extra_nodes=()) -> SliceBatch:
    """Build a :class:`SliceBatch` from edge indices of ``graph`` plus query pairs.

    ``include`` restricts the edge types used for message passing;
    ``extra_nodes`` are kept in the compact set even when no edge touches them.
    """
    include = set(EDGE_TYPES if include is None else include)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    chosen = [graph.edges[k] for k in edge_ids if graph.edges[k].etype in include]
    touched = {e.src for e in chosen} | {e.dst for e in chosen} | set(pairs.reshape(-1).tolist())
    touched |= {int(v) for v in extra_nodes}
    nodes = np.array(sorted(touched), dtype=np.int64)
    where = {g: c for c, g in enumerate(nodes.tolist())}
    messages = {}
    for et in EDGE_TYPES:
        rows = [(where[e.dst], where[e.src], e.features) for e in chosen if e.etype is et]
        rows += [(where[e.src], where[e.dst], e.features) for e in chosen if e.etype is et]
        if not rows:
            continue
        order = sorted(range(len(rows)), key=lambda r: (rows[r][0], rows[r][1], tuple(rows[r][2])))
        dst = np.array([rows[r][0] for r in order], dtype=np.int64)
        src = np.array([rows[r][1] for r in order], dtype=np.int64)
        feats = np.array([rows[r][2] for r in order], dtype=float).reshape(len(order), -1)
        messages[et] = (src, dst, feats)
    cpairs = np.array([[where[i], where[j]] for i, j in pairs.tolist()], dtype=np.int64).reshape(-1, 2)
    return SliceBatch(nodes, features[nodes], messages, cpairs, np.asarray(labels, dtype=float))


def encode(params, batch: SliceBatch, dims: EncoderDims, opts: EncoderOptions = EncoderOptions(),
           dropout_masks=None):
    """Node embeddings (compact rows) after ``dims.layers`` rounds and ``W_r``.

    ``dropout_masks`` is a list of pre-scaled keep masks, one per gap between
    layers, or ``None`` to disable dropout.
    """
    x = nd.as_var(batch.x)
    n = batch.num_nodes
    for layer in range(dims.layers):
        M = None
        for et, (src, dst, feats) in batch.messages.items():
            tag = f"gcn{layer}.{et.name.lower()}"
            m = message(nd.gather(x, src), nd.gather(x, dst), feats, params, tag, opts.edge_aware)
            part = nd.segment_sum(m, dst, n)
            M = part if M is None else nd.add(M, part)
        if M is None:
            M = np.zeros((n, dims.layer_in(layer)))
        x = update_node(M, params, layer, opts.eps)
        if dropout_masks is not None and layer < dims.layers - 1:
            x = nd.mul(x, dropout_masks[layer])
    return nd.matmul(x, params["gcn.W_r"])


def draw_dropout_masks(n: int, dims: EncoderDims, rate: float, rng) -> list | None:
    if rate <= 0:
        return None
    return [(rng.random((n, dims.hidden)) >= rate) / (1.0 - rate) for _ in range(dims.layers - 1)]


def slice_loss(params, batch: SliceBatch, dims: EncoderDims, opts: EncoderOptions = EncoderOptions(),
               dropout_masks=None):
    """Summed binary cross-entropy over the batch's labelled pairs, or ``None``
    when the batch has no pairs."""
    if len(batch.pairs) == 0:
        return None
    h = encode(params, batch, dims, opts, dropout_masks)
    return nd.bce_with_logits(link_logits(h, batch.pairs, params, opts.tied_head), batch.labels)


def pair_probabilities(params, batch: SliceBatch, dims: EncoderDims,
                       opts: EncoderOptions = EncoderOptions()) -> tuple:
    """(probabilities from the head, compact embeddings) for the batch pairs."""
    h = encode(params, batch, dims, opts)
    if len(batch.pairs) == 0:
        return np.zeros(0), h.value
    logits = link_logits(h, batch.pairs, params, opts.tied_head).value[:, 0]
    return nd.sigmoid_array(logits), h.value
