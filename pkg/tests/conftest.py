from __future__ import annotations

import json

import pytest

from mixtrace import pipeline, synthgen
from mixtrace.config import RunConfig

SMALL_WORLD = synthgen.SynthConfig(num_entities=60, num_background_accounts=200, num_noise_groups=10, seed=5)

SMALL_RUN = dict(value_dim=8, category_dim=8, noise_dim=8, time_dim=4, position_dim=4, node_dim=32,
                 hidden_dim=16, out_dim=8, head_hidden=8, num_slices=10, window=3, epochs=6,
                 pretrain_epochs=1, mrr_candidates=20)

# PASS/FAIL lines from the acceptance suite, echoed in the terminal summary
ACCEPTANCE: dict = {}


def small_config(**kw) -> RunConfig:
    return RunConfig(**{**SMALL_RUN, **kw}).validate()


def small_config_text(**kw) -> str:
    return "".join(f"{k} = {v}\n" for k, v in {**SMALL_RUN, **kw}.items())


@pytest.fixture(scope="session")
def small_world():
    return synthgen.generate(SMALL_WORLD)


@pytest.fixture(scope="session")
def small_graph(small_world):
    w = small_world
    purified = pipeline.purify_stage([json.dumps(t.to_json()) for t in w.transactions], w.mixers, w.relayers)
    return pipeline.build_stage(purified, w.labels, small_config())


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
