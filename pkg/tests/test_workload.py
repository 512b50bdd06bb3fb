#!/usr/bin/env python3
"""
Workload tests - arrivals, tool latencies, scenarios and pre-sampled instances
"""

from pathlib import Path

import numpy as np
import pytest

from src.agent_graph import TOOL_CLASS_CENTERS_MS, DistributionSpec
from src.workload import (
    ConfigError,
    Scenario,
    UnknownToolClassError,
    build_code_writer,
    build_deep_research,
    deep_merge,
    generate_workload,
    load_scenario,
    sample_arrivals,
    sample_tool_latency,
    scenario_from_dict,
    stream_rng,
)

SCENARIO_DIR = Path(__file__).resolve().parent.parent / 'config' / 'scenarios'


class TestArrivals:
    def test_count_concentrates(self):
        for seed in range(1, 6):
            count = len(sample_arrivals(1.0, 100.0, seed))
            assert 70 <= count <= 130

    def test_same_seed_same_timestamps(self):
        assert sample_arrivals(0.5, 60.0, 9) == sample_arrivals(0.5, 60.0, 9)

    def test_different_seeds_differ(self):
        assert sample_arrivals(0.5, 60.0, 1) != sample_arrivals(0.5, 60.0, 2)

    def test_zero_duration(self):
        assert sample_arrivals(1.0, 0.0, 1) == []

    def test_increasing_and_bounded(self):
        arrivals = sample_arrivals(2.0, 30.0, 4)
        assert all(a < b for a, b in zip(arrivals, arrivals[1:]))
        assert all(0 <= a < 30000.0 for a in arrivals)

    def test_bad_rate(self):
        with pytest.raises(ValueError):
            sample_arrivals(0.0, 10.0, 1)


class TestToolLatency:
    @pytest.mark.parametrize('tool_class', sorted(TOOL_CLASS_CENTERS_MS))
    def test_default_centers(self, tool_class):
        rng = stream_rng(1, 'tool-test')
        draws = np.array([sample_tool_latency(tool_class, rng) for _ in range(100000)])
        assert draws.mean() == pytest.approx(TOOL_CLASS_CENTERS_MS[tool_class], rel=0.05)

    def test_constant_override(self):
        rng = stream_rng(1, 'tool-test')
        overrides = {'db': DistributionSpec.constant(250)}
        assert {sample_tool_latency('db', rng, overrides) for _ in range(100)} == {250.0}

    def test_unknown_class(self):
        with pytest.raises(UnknownToolClassError):
            sample_tool_latency('teleport', stream_rng(1, 'x'))


class TestGraphs:
    def test_code_writer_shape(self):
        graph = build_code_writer()
        assert len(graph.nodes) >= 8
        assert {'programmer', 'reviewer', 'tester'} <= set(graph.agent_types())
        short = {'short_fs', 'short_git', 'short_search'}
        assert any(n.tool_class in short for n in graph.func_nodes())

    def test_deep_research_shape(self):
        graph = build_deep_research()
        assert {'planner', 'searcher', 'summarizer'} <= set(graph.agent_types())
        assert any(graph.in_degree(n) >= 2 for n in graph.node_ids())
        assert any(n.tool_class in ('medium_search', 'ai_generation') for n in graph.func_nodes())


class TestScenarios:
    def test_deep_merge(self):
        merged = deep_merge({'a': {'x': 1, 'y': 2}, 'b': 1}, {'a': {'y': 3}})
        assert merged == {'a': {'x': 1, 'y': 3}, 'b': 1}

    def test_scenario_overrides_merge(self, base_config):
        scenario = load_scenario(SCENARIO_DIR / 'code_writer.yaml', base_config)
        assert scenario.config['memory']['total_device_blocks'] == 320
        assert scenario.config['memory']['roundtrip_ms_per_4096_blocks'] == 60.0
        assert base_config['memory']['total_device_blocks'] == 2048

    def test_missing_scenario_file(self, base_config, tmp_path):
        with pytest.raises(FileNotFoundError) as exc:
            load_scenario(tmp_path / 'nope.yaml', base_config)
        assert 'nope.yaml' in str(exc.value)

    def test_missing_key(self, base_config):
        with pytest.raises(ConfigError):
            scenario_from_dict({'app': 'code_writer', 'qps': 1.0}, base_config)

    def test_bad_qps(self):
        with pytest.raises(ConfigError):
            Scenario('s', 'code_writer', qps=0.0, duration_s=10)

    def test_with_params(self, base_config):
        scenario = scenario_from_dict({'app': 'code_writer', 'qps': 1.0, 'duration_s': 10}, base_config)
        other = scenario.with_params(qps=0.25, seed=7)
        assert (other.qps, other.seed, other.duration_s) == (0.25, 7, 10)
        assert scenario.qps == 1.0


class TestGenerateWorkload:
    @pytest.fixture
    def scenario(self, base_config):
        return scenario_from_dict({'app': 'code_writer', 'qps': 0.5, 'duration_s': 60, 'seed': 3}, base_config)

    def test_deterministic(self, scenario):
        a = generate_workload(scenario)
        b = generate_workload(scenario)
        assert [p.arrival_ms for p in a] == [p.arrival_ms for p in b]
        assert [p.samples for p in a] == [p.samples for p in b]

    def test_every_node_sampled(self, scenario):
        graph = scenario.graph()
        plans = generate_workload(scenario, graph)
        assert plans
        for plan in plans:
            assert set(plan.samples) == set(graph.node_ids())
            for nid, sample in plan.samples.items():
                node = graph.node(nid)
                assert sample.prompt_tokens >= 1
                if node.is_func:
                    assert len(sample.call_latencies) == len(node.stages)
                    assert sample.output_tokens >= len(node.stages) + 1
                else:
                    assert sample.call_latencies == ()

    def test_app_ids(self, scenario):
        plans = generate_workload(scenario)
        assert plans[0].app_id == 'app00000'
        assert len({p.app_id for p in plans}) == len(plans)

    def test_arrival_stream_independent_of_lengths(self, base_config):
        cfg = deep_merge(base_config, {'workload': {'lengths': {'default': {'prompt': 64}}}})
        a = scenario_from_dict({'app': 'code_writer', 'qps': 0.5, 'duration_s': 60, 'seed': 3}, base_config)
        b = scenario_from_dict({'app': 'code_writer', 'qps': 0.5, 'duration_s': 60, 'seed': 3}, cfg)
        assert [p.arrival_ms for p in generate_workload(a)] == [p.arrival_ms for p in generate_workload(b)]

    def test_constant_lengths(self, base_config):
        cfg = {'workload': {'lengths': {'default': {'prompt': 100, 'output': 50}}}}
        scenario = scenario_from_dict({'app': 'code_writer', 'qps': 0.5, 'duration_s': 30,
                                       'overrides': cfg}, base_config)
        for plan in generate_workload(scenario):
            for sample in plan.samples.values():
                assert sample.prompt_tokens == 100
