from __future__ import annotations

import json

import numpy as np
import pytest

from mixtrace import synthgen, txio
from mixtrace.errors import ValidationError
from mixtrace.synthgen import SynthConfig, Workflow
from mixtrace.txio import Direction, Kind

SMALL = SynthConfig(num_entities=30, num_background_accounts=120, num_noise_groups=10, seed=3)


@pytest.fixture(scope="module")
def world():
    return synthgen.generate(SMALL)


def classify(group, mixers, relayers, proxy):
    """Structural workflow match written independently of the purifier."""
    ext, ints = group.external, group.internals
    matches = []
    if ext and not ints and ext.receiver in mixers:
        matches.append(Workflow.DEPOSIT_DIRECT)
    if ext and len(ints) == 1 and ext.receiver == proxy and ints[0].sender == proxy and ints[0].receiver in mixers:
        matches.append(Workflow.DEPOSIT_PROXY)
    two_legs = (len(ints) == 2 and all(t.sender in mixers for t in ints)
                and sum(t.receiver in relayers for t in ints) == 1)
    if ext and two_legs and ext.sender in relayers and ext.receiver in mixers:
        matches.append(Workflow.WITHDRAW_RELAYER)
    if ext and two_legs and ext.sender in relayers and ext.receiver == proxy:
        matches.append(Workflow.WITHDRAW_RELAYER_PROXY)
    if not ext and two_legs:
        matches.append(Workflow.WITHDRAW_INTERNAL_FEE)
    if not ext and len(ints) == 1 and ints[0].sender in mixers and ints[0].receiver not in relayers:
        matches.append(Workflow.WITHDRAW_INTERNAL)
    return matches


def test_every_mixer_group_matches_one_workflow(world):
    proxy, relayers = world.relayers[0], set(world.relayers[1:])
    seen = set()
    for g in txio.group_by_hash(world.transactions):
        matches = classify(g, world.mixers, relayers, proxy)
        if g.tx_hash not in world.workflows:
            assert matches == []
            continue
        assert matches == [world.workflows[g.tx_hash]]
        seen.add(matches[0])
    assert seen == set(Workflow)


def test_round_trip_through_purifier(world):
    lines = [json.dumps(t.to_json()) for t in world.transactions]
    txs = txio.parse_records(lines)
    pools = {a: txio.Pool(p) for a, p in world.mixers.items()}
    purified = txio.purify_all(txs, world.mixers, world.relayers, pools)
    assert len(purified) == len(world.workflows)
    by_account = {}
    for p in purified:
        by_account.setdefault(p.account, []).append(p)
    for accounts in world.entities:
        (dep,) = by_account[accounts[0]]
        assert dep.direction is Direction.DEPOSIT
        for acct in accounts[1:]:
            (wd,) = by_account[acct]
            assert wd.direction is Direction.WITHDRAWAL
            assert wd.contract == dep.contract
            assert wd.timestamp >= dep.timestamp


def test_labels_reference_generated_entity_accounts(world):
    entity_accounts = {a for acc in world.entities for a in acc}
    touched = {t.sender for t in world.transactions} | {t.receiver for t in world.transactions}
    assert len(world.labels) == SMALL.num_entities * (SMALL.accounts_per_entity - 1)
    for lab in world.labels:
        assert lab["addr_a"] in entity_accounts and lab["addr_b"] in entity_accounts
        assert lab["addr_a"] in touched and lab["addr_b"] in touched
    assert not entity_accounts & set(world.background)


def test_generation_is_deterministic(world):
    again = synthgen.generate(SMALL)
    assert [t.to_json() for t in again.transactions] == [t.to_json() for t in world.transactions]
    assert again.labels == world.labels


def test_records_are_schema_valid_and_time_ordered(world):
    stamps = [t.timestamp for t in world.transactions]
    assert stamps == sorted(stamps)
    for t in world.transactions:
        txio.parse_record(t.to_json())
    assert sum(t.kind is Kind.EXTERNAL for t in world.transactions) > 0


def _shared_suffix_rate(cfg):
    w = synthgen.generate(cfg)
    gas = {}
    pools = {a: txio.Pool(p) for a, p in w.mixers.items()}
    for p in txio.purify_all(w.transactions, w.mixers, w.relayers, pools):
        gas[p.account] = p.gas_price % synthgen.GWEI
    shared = [gas[a] == gas[b] and gas[a] != 0 for a, b in ((l["addr_a"], l["addr_b"]) for l in w.labels)]
    return float(np.mean(shared))


def test_signature_strength_limits():
    assert _shared_suffix_rate(SynthConfig(num_entities=60, num_background_accounts=10, signature_strength=0.0)) == 0.0
    assert _shared_suffix_rate(SynthConfig(num_entities=60, num_background_accounts=10, signature_strength=1.0)) == 1.0


def test_default_world_scale():
    cfg = SynthConfig()
    assert (cfg.num_entities, cfg.accounts_per_entity, cfg.num_background_accounts, cfg.num_pools) == (200, 2, 1600, 4)
    assert cfg.gap_mu == pytest.approx(np.log(3600.0)) and cfg.gap_sigma == 1.0


def test_invalid_config():
    with pytest.raises(ValidationError):
        synthgen.generate(SynthConfig(num_entities=0))
    with pytest.raises(ValidationError):
        synthgen.generate(SynthConfig(signature_strength=1.5))
