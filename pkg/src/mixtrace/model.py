"""End-to-end differentiable objective: transaction mapping, account
aggregation, per-slice encoding and link classification in one tape.

The production pipeline freezes the mapping after pretraining and feeds a
fixed feature matrix to the encoder. This joint form keeps every parameter
on the same tape so gradients can be checked through the whole chain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import edgegcn, txmap
from . import ndcore as nd


@dataclass
class JointProblem:
    feats: txmap.TxFeatures
    owners: np.ndarray        # node index per (transaction, endpoint) row
    rows: np.ndarray          # transaction row per owners entry
    num_nodes: int
    batches: list             # SliceBatch per slice; their ``x`` is ignored
    noise: np.ndarray | None = None
    recon_weight: float = 1.0


def joint_init(map_dims: txmap.MapDims, enc_dims: edgegcn.EncoderDims, seed,
               tied_head: bool = False) -> nd.ParamSet:
    ss = np.random.SeedSequence(seed if isinstance(seed, (list, tuple)) else [seed])
    a, b = ss.spawn(2)
    return {**txmap.init_params(map_dims, a), **edgegcn.init_params(enc_dims, b, tied_head)}


def mean_by_owner(H, owners: np.ndarray, rows: np.ndarray, num_nodes: int):
    """Row means of ``H[rows]`` grouped by ``owners``; unowned nodes get zeros."""
    counts = np.bincount(owners, minlength=num_nodes).astype(float)
    inv = (1.0 / np.maximum(counts, 1.0))[:, None]
    sums = nd.segment_sum(nd.gather(H, rows), owners, num_nodes)
    width = H.value.shape[1]
    return nd.mul(sums, np.broadcast_to(inv, (num_nodes, width)).copy())


def joint_loss(params, problem: JointProblem, map_dims: txmap.MapDims, enc_dims: edgegcn.EncoderDims,
               opts: edgegcn.EncoderOptions = edgegcn.EncoderOptions()):
    H = txmap.transaction_repr(problem.feats, params, map_dims, problem.noise)
    X = mean_by_owner(H, problem.owners, problem.rows, problem.num_nodes)
    total = nd.scale(txmap.reconstruction_loss(H, problem.feats, params, map_dims), problem.recon_weight)
    for batch in problem.batches:
        local = edgegcn.SliceBatch(batch.nodes, nd.gather(X, batch.nodes), batch.messages,
                                   batch.pairs, batch.labels)
        loss = edgegcn.slice_loss(params, local, enc_dims, opts)
        if loss is not None:
            total = nd.add(total, loss)
    return total


TINY_MAP = txmap.MapDims(value=2, category=2, noise=1, time=2, position=1, max_positions=4)
TINY_ENCODER = edgegcn.EncoderDims(node=TINY_MAP.total, hidden=3, out=2, layers=2, head_hidden=2, edge=3)


def tiny_problem(seed, num_eoas: int = 8, num_pools: int = 2, num_edges: int = 12, num_slices: int = 2,
                 map_dims: txmap.MapDims = TINY_MAP, edge_dim: int = TINY_ENCODER.edge,
                 sigma: float = 0.0) -> tuple:
    """A small random world for gradient checks: ``num_eoas + num_pools`` nodes,
    ``num_edges`` edges (one association edge per slice, the rest transactions),
    ``num_slices`` slices with one positive and one negative pair each.
    Returns (problem, map_dims)."""
    from .mixtag import Edge, EdgeType
    from .txio import POOLS

    rng = np.random.default_rng(seed)
    n = num_eoas + num_pools
    m = num_edges - num_slices  # transaction edges
    src = rng.integers(0, num_eoas, size=m)
    dst = num_eoas + rng.integers(0, num_pools, size=m)
    times = np.sort(rng.random(m))
    direction = rng.integers(0, 2, size=m)
    pool = rng.integers(0, len(POOLS), size=m)
    a = rng.normal(size=(m, txmap.NUMERIC_DIM))
    c = np.zeros((m, txmap.CATEGORY_DIM))
    c[np.arange(m), direction] = 1.0
    c[np.arange(m), txmap.NUM_DIRECTIONS + pool] = 1.0
    p = np.zeros(m, dtype=np.int64)
    seen: dict = {}
    for k in range(m):
        p[k] = min(seen.get(int(src[k]), 0), map_dims.max_positions - 1)
        seen[int(src[k])] = seen.get(int(src[k]), 0) + 1
    feats = txmap.TxFeatures(a, c, times, p, direction, pool)

    class _G:  # minimal graph view for make_batch
        edges = [Edge(int(src[k]), int(dst[k]), EdgeType.TRANSACTION, rng.normal(size=edge_dim), float(times[k]))
                 for k in range(m)]

    bounds = np.array_split(np.arange(m), num_slices)
    batches = []
    for ids in bounds:
        i, j, k2, l2, u, v = rng.choice(num_eoas, size=6, replace=False)
        _G.edges.append(Edge(int(u), int(v), EdgeType.ASSOCIATION, np.zeros(edge_dim), 0.0))
        ids = ids.tolist() + [len(_G.edges) - 1]
        batches.append(edgegcn.make_batch(_G, ids, np.zeros((n, map_dims.total)),
                                          pairs=[(i, j), (k2, l2)], labels=[1.0, 0.0]))
    owners = np.concatenate([src, dst])
    rows = np.concatenate([np.arange(m), np.arange(m)])
    noise = txmap.draw_noise(m, map_dims, sigma, rng.integers(1 << 31))
    return JointProblem(feats, owners, rows, n, batches, noise), map_dims
