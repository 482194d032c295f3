import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from iam.mapping import (
    ConfigurationError,
    ConsistencyReport,
    HeadId,
    IamConfig,
    LayerSelectionStrategy,
    MappingTable,
    consistency_step,
    establish_mapping,
    n_mapped_layers,
    select_layers,
    subblock_partition,
)
from iam.model import ModelConfig

BACKEND = LayerSelectionStrategy("backend")
CL = ModelConfig(4, 2, 1, 4, 8)
CS = ModelConfig(2, 2, 1, 4, 8)


def test_backend_qwen_scale():
    assert select_layers(BACKEND, 0.5, 80) == list(range(79, 39, -1))


def test_frontend_and_zero_ratio():
    assert select_layers(LayerSelectionStrategy("frontend"), 0.25, 8) == [0, 1]
    assert select_layers(BACKEND, 0.0, 80) == []
    assert select_layers(BACKEND, 1.0, 5) == [4, 3, 2, 1, 0]


def test_two_region_example():
    s = LayerSelectionStrategy("two_region", (64, 80), (16, 40))
    got = select_layers(s, 0.25, 80)
    assert got == list(range(79, 63, -1)) + [16, 17, 18, 19]
    s_desc = LayerSelectionStrategy("two_region", (64, 80), (16, 40), region2_descending=True)
    assert select_layers(s_desc, 0.25, 80)[16:] == [39, 38, 37, 36]
    assert LayerSelectionStrategy.qwen2_default(80) == s


def test_two_region_errors():
    with pytest.raises(ValueError):
        LayerSelectionStrategy("two_region", (10, 30), (20, 40))
    s = LayerSelectionStrategy("two_region", (6, 8), (0, 2))
    with pytest.raises(ConfigurationError):
        select_layers(s, 1.0, 8)


def test_most_similar_picks_best_layers_with_tie_to_lower():
    sim = np.array([[0.5], [0.5], [0.9], [0.9], [0.5], [0.5], [0.7], [0.7]])  # 4 layers x 2 heads
    assert select_layers(LayerSelectionStrategy("most_similar"), 0.5, 4, sim) == [1, 3]
    sim[:] = 0.3
    assert select_layers(LayerSelectionStrategy("most_similar"), 0.5, 4, sim) == [0, 1]
    with pytest.raises(ConfigurationError):
        select_layers(LayerSelectionStrategy("most_similar"), 0.5, 4)


def test_round_half_up():
    assert n_mapped_layers(0.5, 5) == 3
    assert n_mapped_layers(0.25, 6) == 2
    assert n_mapped_layers(0.125, 4) == 1


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.integers(1, 100),
       st.sampled_from(["backend", "frontend"]))
def test_selection_size_and_range(ratio, n, kind):
    got = select_layers(LayerSelectionStrategy(kind), ratio, n)
    assert len(got) == n_mapped_layers(ratio, n)
    assert len(set(got)) == len(got)
    assert all(0 <= x < n for x in got)


def test_subblock_partition():
    assert subblock_partition(80, 8) == [range(i * 10, i * 10 + 10) for i in range(8)]
    assert [len(r) for r in subblock_partition(10, 3)] == [4, 3, 3]
    with pytest.raises(ConfigurationError):
        subblock_partition(4, 5)
    with pytest.raises(ConfigurationError):
        subblock_partition(4, 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 200), st.data())
def test_subblock_partition_covers(n, data):
    b = data.draw(st.integers(1, n))
    blocks = subblock_partition(n, b)
    assert [x for r in blocks for x in r] == list(range(n))
    assert max(map(len, blocks)) - min(map(len, blocks)) <= 1


def test_establish_argmax_and_ties():
    sim = np.zeros((8, 4))
    sim[6] = [0.1, 0.9, 0.2, 0.3]  # layer 3 head 0 -> small flat 1
    sim[7] = [0.4, 0.4, 0.4, 0.4]  # tie -> small flat 0
    table = establish_mapping(sim, [3], CL, CS, established_at=20)
    assert table.entries[HeadId(3, 0)] == (HeadId(0, 1), 0.9)
    assert table.entries[HeadId(3, 1)] == (HeadId(0, 0), 0.4)
    assert table.layers() == [3]
    with pytest.raises(ConfigurationError):
        establish_mapping(sim[:5], [3], CL, CS)
    with pytest.raises(ConfigurationError):
        establish_mapping(sim, [4], CL, CS)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_establish_maximizes(seed):
    sim = np.random.default_rng(seed).random((8, 4))
    table = establish_mapping(sim, [0, 1, 2, 3], CL, CS)
    for large, (small, s) in table.entries.items():
        assert s == sim[large.flat(2)].max()
        assert sim[large.flat(2), small.flat(2)] == s


def test_table_json_round_trip():
    sim = np.random.default_rng(1).random((8, 4))
    t = establish_mapping(sim, [2, 3], CL, CS, 33)
    t.scales[HeadId(2, 1)] = 1.5
    back = MappingTable.from_json(t.to_json())
    assert back == t


def test_consistency_step_counts():
    sim = np.eye(8, 4)
    table = establish_mapping(sim, [0, 1], CL, CS)
    before = dict(table.entries)
    flags, rep = consistency_step(table, sim, CL, CS)
    assert all(flags.values()) and rep.overall_rate() == 1.0
    changed = sim.copy()
    changed[0] = [0, 1, 0, 0]
    flags, rep = consistency_step(table, changed, CL, CS, rep)
    assert flags[HeadId(0, 0)] is False
    assert rep.head_rate(HeadId(0, 0)) == 0.5
    assert rep.overall_rate() == pytest.approx(7 / 8)
    assert rep.layer_rates() == {0: 0.75, 1: 1.0}
    assert table.entries == before
    # mapped rows only, in sorted head order
    flags2, _ = consistency_step(table, changed[:4], CL, CS)
    assert flags2 == flags


def test_empty_report_rate():
    assert ConsistencyReport().overall_rate() == 1.0


def test_iam_config_validation():
    with pytest.raises(ValueError):
        IamConfig(ratio=1.5)
    with pytest.raises(ValueError):
        IamConfig(tau_e=0)
    with pytest.raises(ValueError):
        IamConfig(repetition_penalty=0.5)
    d = IamConfig().to_dict()
    assert d["metric"] == "cosine" and d["tau_t"] == 100 and d["max_tokens"] == 512
