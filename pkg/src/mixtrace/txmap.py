"""Transaction-to-account feature mapping.

Each purified transaction is encoded as ``NE || TE || PE``: a noisy linear
numeric/categorical encoder, a fixed sinusoidal time code and a learned
position embedding. A small decoder reconstructs the raw inputs from that
representation; after pretraining on the reconstruction loss the encoders
are frozen and account features are the mean over each account's
transactions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import ndcore as nd
from .errors import DimensionError, ValidationError
from .txio import POOLS, Direction

log = logging.getLogger(__name__)

NUMERIC_DIM = 2  # log value, log gas price
NUM_DIRECTIONS = 2
NUM_POOL_CLASSES = len(POOLS) + 1  # last class: unknown pool
CATEGORY_DIM = NUM_DIRECTIONS + len(POOLS)


@dataclass(frozen=True)
class MapDims:
    value: int = 128
    category: int = 128
    noise: int = 256
    time: int = 16
    position: int = 16
    max_positions: int = 512

    @property
    def numeric_block(self) -> int:
        return self.value + self.category + self.noise

    @property
    def total(self) -> int:
        return self.numeric_block + self.time + self.position


@dataclass
class TxFeatures:
    """Column arrays for a batch of transactions."""
    a: np.ndarray          # (N, NUMERIC_DIM)
    c: np.ndarray          # (N, CATEGORY_DIM) one-hots
    t: np.ndarray          # (N,) normalized time
    p: np.ndarray          # (N,) position in the account's history
    direction: np.ndarray  # (N,) class index
    pool: np.ndarray       # (N,) class index, len(POOLS) = unknown

    def __len__(self):
        return len(self.t)

    def take(self, idx) -> "TxFeatures":
        return TxFeatures(self.a[idx], self.c[idx], self.t[idx], self.p[idx],
                          self.direction[idx], self.pool[idx])


def tx_features(transactions: list, norm_times, max_positions: int = 512) -> TxFeatures:
    """Raw per-transaction inputs; positions count each account's history in
    time order and are clipped to ``max_positions - 1``."""
    n = len(transactions)
    a = np.zeros((n, NUMERIC_DIM))
    c = np.zeros((n, CATEGORY_DIM))
    direction = np.zeros(n, dtype=np.int64)
    pool = np.full(n, len(POOLS), dtype=np.int64)
    for k, tx in enumerate(transactions):
        a[k, 0] = np.log10(tx.value / 1e18 + 1e-3) / 2.0
        a[k, 1] = np.log10(tx.gas_price / 1e9 + 1.0) / 3.0
        direction[k] = 0 if tx.direction is Direction.DEPOSIT else 1
        c[k, direction[k]] = 1.0
        if tx.pool is not None:
            pool[k] = POOLS.index(tx.pool)
            c[k, NUM_DIRECTIONS + pool[k]] = 1.0
    order = sorted(range(n), key=lambda k: (transactions[k].account, transactions[k].timestamp, k))
    p = np.zeros(n, dtype=np.int64)
    prev, run = None, 0
    for k in order:
        acct = transactions[k].account
        run = run + 1 if acct == prev else 0
        prev = acct
        p[k] = min(run, max_positions - 1)
    return TxFeatures(a, c, np.asarray(norm_times, dtype=float), p, direction, pool)


def _glorot(rng, fan_in, fan_out):
    return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))


def init_params(dims: MapDims, seed) -> nd.ParamSet:
    rng = np.random.default_rng(seed)
    d = dims.total
    return {
        "map.W_a": _glorot(rng, NUMERIC_DIM, dims.value),
        "map.b1": np.zeros(dims.value),
        "map.W_c": _glorot(rng, CATEGORY_DIM, dims.category),
        "map.b2": np.zeros(dims.category),
        "map.W_p": rng.normal(0.0, 0.1, size=(dims.max_positions, dims.position)),
        "dec.direction.W": _glorot(rng, d, NUM_DIRECTIONS),
        "dec.direction.b": np.zeros(NUM_DIRECTIONS),
        "dec.pool.W": _glorot(rng, d, NUM_POOL_CLASSES),
        "dec.pool.b": np.zeros(NUM_POOL_CLASSES),
        "dec.value.W": _glorot(rng, d, NUMERIC_DIM),
        "dec.value.b": np.zeros(NUMERIC_DIM),
        "dec.time.W": _glorot(rng, d, 1),
        "dec.time.b": np.zeros(1),
        "dec.position.W": _glorot(rng, d, 1),
        "dec.position.b": np.zeros(1),
    }


def time_encode(t, d: int) -> np.ndarray:
    """Sinusoidal code; 1-based dimension z: odd -> cos(t / 10000^((z-1)/d)),
    even -> sin(t / 10000^(z/d)). Accepts a scalar or a 1-D array of times."""
    if d < 2 or d % 2:
        raise ValidationError(f"time encoding dimension must be even and >= 2, got {d}")
    z = np.arange(1, d + 1)
    expo = np.where(z % 2 == 1, z - 1, z) / d
    angle = np.multiply.outer(np.asarray(t, dtype=float), 1.0 / 10000.0 ** expo)
    return np.where(z % 2 == 1, np.cos(angle), np.sin(angle))


def position_encode(p: int, params: nd.ParamSet) -> np.ndarray:
    W_p = params["map.W_p"]
    if not 0 <= p < W_p.shape[0]:
        raise ValidationError(f"position {p} outside [0, {W_p.shape[0]})")
    return W_p[p]


def numeric_encode(feats: TxFeatures, params, dims: MapDims, noise: np.ndarray | None = None):
    """NE block as a tape Var of shape (N, dims.numeric_block).

    ``noise`` is a pre-drawn Gaussian sample of the same shape (or ``None`` for
    the noise-free encoder used at inference).
    """
    if feats.a.shape[1] != params["map.W_a"].shape[0] or feats.c.shape[1] != params["map.W_c"].shape[0]:
        raise DimensionError(
            f"numeric_encode: inputs {feats.a.shape}/{feats.c.shape} vs weights "
            f"{params['map.W_a'].shape}/{params['map.W_c'].shape}")
    v = nd.add(nd.matmul(feats.a, params["map.W_a"]), params["map.b1"])
    c = nd.add(nd.matmul(feats.c, params["map.W_c"]), params["map.b2"])
    block = nd.concat([v, c, np.zeros((len(feats), dims.noise))])
    if noise is not None:
        block = nd.add(block, noise)
    return block


def draw_noise(n: int, dims: MapDims, sigma: float, seed) -> np.ndarray | None:
    if sigma <= 0:
        return None
    return np.random.default_rng(seed).normal(0.0, sigma, size=(n, dims.numeric_block))


def transaction_repr(feats: TxFeatures, params, dims: MapDims, noise=None):
    """H = NE || TE || PE, shape (N, dims.total)."""
    ne = numeric_encode(feats, params, dims, noise)
    te = time_encode(feats.t, dims.time)
    pe = nd.gather(params["map.W_p"], feats.p)
    return nd.concat([ne, te, pe])


def reconstruction_loss(H, feats: TxFeatures, params, dims: MapDims):
    """CE(direction) + CE(pool) + MSE(numeric) + MSE(time) + MSE(position / T_max)."""
    def head(name):
        return nd.add(nd.matmul(H, params[f"dec.{name}.W"]), params[f"dec.{name}.b"])

    terms = [
        nd.softmax_cross_entropy(head("direction"), feats.direction),
        nd.softmax_cross_entropy(head("pool"), feats.pool),
        nd.mse(head("value"), feats.a),
        nd.mse(head("time"), feats.t[:, None]),
        nd.mse(head("position"), (feats.p / dims.max_positions)[:, None]),
    ]
    out = terms[0]
    for t in terms[1:]:
        out = nd.add(out, t)
    return out


def _recon_objective(params, feats, dims, noise):
    return reconstruction_loss(transaction_repr(feats, params, dims, noise), feats, params, dims)


def pretrain(params: nd.ParamSet, feats: TxFeatures, dims: MapDims, *, epochs: int = 5,
             lr: float = 0.02, batch_size: int = 128, sigma: float = 0.1, seed=0) -> tuple:
    """Minibatch SGD on the reconstruction loss. Returns (params, per-step losses)."""
    params = nd.copy_params(params)
    ss = np.random.SeedSequence(seed if isinstance(seed, (list, tuple)) else [seed])
    order_rng, noise_rng = [np.random.default_rng(s) for s in ss.spawn(2)]
    losses = []
    n = len(feats)
    for _ in range(epochs):
        perm = order_rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            batch = feats.take(idx)
            noise = noise_rng.normal(0.0, sigma, size=(len(idx), dims.numeric_block)) if sigma > 0 else None
            loss, grads = nd.value_and_grad(_recon_objective, params, batch, dims, noise)
            params = nd.axpy(-lr, grads, params)
            losses.append(loss)
    return params, losses


def account_init(owner: np.ndarray, H: np.ndarray, num_nodes: int) -> np.ndarray:
    """Mean of transaction representations per owning node; nodes owning no
    transaction get a zero row (logged)."""
    owner = np.asarray(owner, dtype=np.int64)
    sums = np.zeros((num_nodes, H.shape[1]))
    np.add.at(sums, owner, H)
    counts = np.bincount(owner, minlength=num_nodes).astype(float)
    empty = int((counts == 0).sum())
    if empty:
        log.warning("%d nodes have no transactions; using zero features", empty)
    return sums / np.maximum(counts, 1.0)[:, None]


def account_features(graph, params: nd.ParamSet, dims: MapDims) -> np.ndarray:
    """Node feature matrix for ``graph``: EOAs average their own transactions,
    pool contracts average the transactions they receive."""
    m = len(graph.transactions)
    times = [graph.edges[k].time for k in range(m)]
    feats = tx_features(graph.transactions, times, dims.max_positions)
    H = transaction_repr(feats, params, dims).value
    owners = np.concatenate([[graph.edges[k].src for k in range(m)],
                             [graph.edges[k].dst for k in range(m)]])
    return account_init(owners, np.concatenate([H, H]), graph.num_nodes)
