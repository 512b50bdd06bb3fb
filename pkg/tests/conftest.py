"""
Shared fixtures for the simulator tests
"""

import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT))

from src.agent_graph import AgentNode, AppGraph, DistributionSpec, FuncNode, validate_graph  # noqa: E402
from src.block_memory import BlockPool, TransferCostModel  # noqa: E402
from src.workload import load_config  # noqa: E402
from loguru import logger  # noqa: E402

logger.remove()
logger.add(sys.stderr, level="WARNING")


def make_graph(nodes, edges, name='test', validate=True):
    graph = AppGraph(name, nodes, edges)
    if validate:
        report = validate_graph(graph)
        assert report.ok, report.kinds()
    return graph


@pytest.fixture
def chain_graph():
    return make_graph(
        [AgentNode('A', 'planner'), AgentNode('B', 'worker'), AgentNode('C', 'writer')],
        [('A', 'B'), ('B', 'C')],
    )


@pytest.fixture
def diamond_graph():
    return make_graph(
        [AgentNode('A', 'planner'), AgentNode('B', 'worker'), AgentNode('C', 'worker'), AgentNode('D', 'writer')],
        [('A', 'B'), ('A', 'C'), ('B', 'D'), ('C', 'D')],
    )


@pytest.fixture
def cost_model():
    return TransferCostModel()


@pytest.fixture
def pool(cost_model):
    return BlockPool(total_device_blocks=100, total_host_blocks=200, cost_model=cost_model)


@pytest.fixture
def base_config():
    return load_config(ROOT / 'config' / 'tokencake_sim.yaml')


@pytest.fixture
def func_node():
    return FuncNode('tool', 'coder', stages=('query',), predict_time_hint=1000.0,
                    latency_dist=DistributionSpec.constant(1000.0))
