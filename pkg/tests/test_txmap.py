from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixtrace import ndcore as nd
from mixtrace import txmap
from mixtrace.errors import ValidationError
from mixtrace.txio import Direction, Pool, PurifiedTransaction
from mixtrace.txmap import CATEGORY_DIM, NUMERIC_DIM, MapDims

SMALL = MapDims(value=3, category=3, noise=2, time=4, position=2, max_positions=8)


def fixture(n=5, seed=0, dims=SMALL):
    rng = np.random.default_rng(seed)
    txs = [PurifiedTransaction("0x" + f"{int(rng.integers(3)):040x}", "0x" + "1" * 40,
                               Direction.DEPOSIT if rng.random() < 0.5 else Direction.WITHDRAWAL,
                               1000 + k, int(rng.integers(1, 10**18)) * 10, int(rng.integers(1, 10**11)),
                               Pool.P10 if rng.random() < 0.7 else None) for k in range(n)]
    return txmap.tx_features(txs, np.sort(rng.random(n)), dims.max_positions)


def test_default_dims_total_544():
    assert MapDims().total == 544
    assert MapDims().numeric_block == 128 + 128 + 256


def test_numeric_encode_zero_input_gives_biases():
    f = fixture()
    f.a[:] = 0
    f.c[:] = 0
    p = txmap.init_params(SMALL, 1)
    p["map.b1"] = np.array([1.0, 2.0, 3.0])
    p["map.b2"] = np.array([-1.0, 0.5, 4.0])
    out = txmap.numeric_encode(f, p, SMALL).value
    want = np.concatenate([p["map.b1"], p["map.b2"], np.zeros(2)])
    assert np.array_equal(out, np.tile(want, (len(f), 1)))


def test_numeric_encode_identity():
    dims = MapDims(value=NUMERIC_DIM, category=CATEGORY_DIM, noise=0, time=2, position=1, max_positions=8)
    f = fixture(dims=dims)
    p = txmap.init_params(dims, 1)
    p["map.W_a"], p["map.W_c"] = np.eye(NUMERIC_DIM), np.eye(CATEGORY_DIM)
    p["map.b1"], p["map.b2"] = np.zeros(NUMERIC_DIM), np.zeros(CATEGORY_DIM)
    out = txmap.numeric_encode(f, p, dims).value
    assert np.array_equal(out, np.concatenate([f.a, f.c], axis=1))


def test_seeded_noise_reproducible():
    a = txmap.draw_noise(4, SMALL, 0.1, 9)
    b = txmap.draw_noise(4, SMALL, 0.1, 9)
    assert np.array_equal(a, b)
    assert txmap.draw_noise(4, SMALL, 0.0, 9) is None
    f, p = fixture(), txmap.init_params(SMALL, 2)
    h1 = txmap.transaction_repr(f, p, SMALL, txmap.draw_noise(len(f), SMALL, 0.1, 3)).value
    h2 = txmap.transaction_repr(f, p, SMALL, txmap.draw_noise(len(f), SMALL, 0.1, 3)).value
    assert np.array_equal(h1, h2)


def test_time_encode_examples():
    z0 = txmap.time_encode(0.0, 16)
    assert np.array_equal(z0[0::2], np.ones(8))   # z = 1, 3, ... are cosines
    assert np.array_equal(z0[1::2], np.zeros(8))
    assert txmap.time_encode(1.0, 4)[0] == pytest.approx(math.cos(1.0))
    assert math.cos(1.0) == pytest.approx(0.5403, abs=1e-4)


def test_time_encode_hand_values():
    d, t = 4, 0.3
    want = [math.cos(t), math.sin(t / 10000 ** (2 / d)), math.cos(t / 10000 ** (2 / d)),
            math.sin(t / 10000 ** (4 / d))]
    assert np.allclose(txmap.time_encode(t, d), want, rtol=0, atol=1e-15)


def test_time_encode_odd_dimension_rejected():
    with pytest.raises(ValidationError):
        txmap.time_encode(0.5, 5)


@settings(max_examples=200, deadline=None)
@given(st.floats(-1e6, 1e6), st.sampled_from([2, 4, 16]))
def test_time_encode_bounded_and_deterministic(t, d):
    a = txmap.time_encode(t, d)
    assert ((a >= -1) & (a <= 1)).all()
    assert np.array_equal(a, txmap.time_encode(t, d))


def test_position_encode_examples():
    p = txmap.init_params(SMALL, 4)
    assert np.array_equal(txmap.position_encode(0, p), p["map.W_p"][0])
    zero = dict(p, **{"map.W_p": np.zeros_like(p["map.W_p"])})
    assert not txmap.position_encode(3, zero).any()
    rows = [tuple(txmap.position_encode(k, p)) for k in range(SMALL.max_positions)]
    assert len(set(rows)) == SMALL.max_positions
    with pytest.raises(ValidationError):
        txmap.position_encode(SMALL.max_positions, p)


def test_transaction_repr_layout():
    f = fixture()
    p = {k: np.zeros_like(v) for k, v in txmap.init_params(SMALL, 0).items()}
    f.t[:] = 0.0
    H = txmap.transaction_repr(f, p, SMALL).value
    assert H.shape == (len(f), SMALL.total)
    assert not H[:, :SMALL.numeric_block].any()
    te = H[:, SMALL.numeric_block:SMALL.numeric_block + SMALL.time]
    assert np.array_equal(te, np.tile([1.0, 0.0, 1.0, 0.0], (len(f), 1)))
    assert not H[:, -SMALL.position:].any()


def test_positions_count_account_history():
    txs = [PurifiedTransaction("0x" + "a" * 40, "0x" + "1" * 40, Direction.DEPOSIT, ts, 1, 1, None)
           for ts in (300, 100, 200)]
    f = txmap.tx_features(txs, [1.0, 0.0, 0.5], max_positions=2)
    assert f.p.tolist() == [1, 0, 1]  # clipped at max_positions - 1


def test_reconstruction_loss_gradient_check():
    worst = 0.0
    for seed in range(5):
        f = fixture(4, seed)
        p = txmap.init_params(SMALL, seed)
        noise = txmap.draw_noise(len(f), SMALL, 0.1, seed)
        errs = nd.gradient_check(txmap._recon_objective, p, f, SMALL, noise)
        worst = max(worst, max(errs.values()))
    assert worst <= 1e-4


def test_pretraining_descends_on_fifty_fixtures():
    f = fixture(50, 3)
    p0 = txmap.init_params(SMALL, 3)
    start = nd.loss_value(txmap._recon_objective, p0, f, SMALL, None)
    p1, losses = txmap.pretrain(p0, f, SMALL, epochs=100, batch_size=50, sigma=0.0, lr=0.05)
    assert len(losses) == 100
    assert nd.loss_value(txmap._recon_objective, p1, f, SMALL, None) < start
    assert min(losses) >= 0.0


def test_saturated_reconstruction_near_zero():
    # decode straight from the categorical block with huge logits
    dims = MapDims(value=NUMERIC_DIM, category=CATEGORY_DIM, noise=0, time=2, position=1, max_positions=4)
    f = fixture(6, 1, dims)
    f.a[:] = 0.0
    f.t[:] = 0.0
    f.p[:] = 0
    f.pool[:] = 0
    f.c[:, 2:] = 0.0
    f.c[:, 2] = 1.0
    p = {k: np.zeros_like(v) for k, v in txmap.init_params(dims, 0).items()}
    p["map.W_c"] = np.eye(CATEGORY_DIM)
    off = NUMERIC_DIM
    big = 200.0
    W = np.zeros((dims.total, 2))
    W[off + 0, 0] = W[off + 1, 1] = big
    p["dec.direction.W"] = W
    Wp = np.zeros((dims.total, txmap.NUM_POOL_CLASSES))
    Wp[off + 2, 0] = big
    p["dec.pool.W"] = Wp
    H = txmap.transaction_repr(f, p, dims)
    assert nd.loss_value(lambda q: txmap.reconstruction_loss(H, f, q, dims), p) < 1e-12


def test_account_init_examples():
    H = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 3.0], [2.0, 3.0]])
    X = txmap.account_init(np.array([0, 0, 1, 1]), H, 3)
    assert np.array_equal(X[0], [0.5, 0.5])
    assert np.array_equal(X[1], [2.0, 3.0])
    assert np.array_equal(X[2], [0.0, 0.0])
    single = txmap.account_init(np.array([0]), H[:1], 1)
    assert np.array_equal(single[0], H[0])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_account_init_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    # dyadic values keep float sums exact under any order
    H = rng.integers(-64, 64, size=(12, 3)) / 8.0
    owner = rng.integers(0, 4, size=12)
    perm = rng.permutation(12)
    assert np.array_equal(txmap.account_init(owner, H, 4), txmap.account_init(owner[perm], H[perm], 4))
