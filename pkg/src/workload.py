#!/usr/bin/env python3
"""
Workload - Benchmark graphs, scenarios and seeded sampling

Randomness comes from one scenario seed split into named sub-streams
(arrivals, per-app lengths, per-app tool latencies), each a numpy Generator
seeded with [seed, crc32(stream name), ...]. Adding a stream never shifts
the draws of another one, and every application instance is pre-sampled
at generation time so all policies see the same workload.
"""

import copy
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import yaml
from loguru import logger

from src.agent_graph import (
    TOOL_CLASS_CENTERS_MS,
    AppGraph,
    DistributionSpec,
    FuncNode,
    GraphError,
    load_graph,
)


CONFIG_DIR = Path(__file__).resolve().parent.parent / 'config'
GRAPH_DIR = CONFIG_DIR / 'graphs'
BUILTIN_APPS = ('code_writer', 'deep_research')

DEFAULT_PROMPT_DIST = DistributionSpec.lognormal(512, 0.5)
DEFAULT_OUTPUT_DIST = DistributionSpec.lognormal(256, 0.5)
MIN_LATENCY_MS = 0.01


class UnknownToolClassError(KeyError):
    """Raised for a tool class with no latency center"""


class ConfigError(ValueError):
    """Raised for an invalid configuration or scenario value"""


# ----------------------------------------------------------------------
# Random streams
# ----------------------------------------------------------------------

def stream_rng(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Independent generator for a named sub-stream of a seed"""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode('utf-8'))] + [int(k) for k in keys])


def sample_distribution(spec: DistributionSpec, rng: np.random.Generator) -> float:
    """One draw from a DistributionSpec"""
    if spec.kind == 'constant':
        return spec.param('value')
    if spec.kind == 'exponential':
        return float(rng.exponential(spec.param('mean')))
    if spec.kind == 'poisson':
        return float(rng.poisson(spec.param('mean')))
    if spec.kind == 'uniform':
        return float(rng.uniform(spec.param('low'), spec.param('high')))
    if spec.kind == 'lognormal':
        return float(rng.lognormal(np.log(spec.param('median')), spec.param('sigma')))
    raise GraphError(f"Unknown distribution kind '{spec.kind}'")


def sample_tokens(spec: DistributionSpec, rng: np.random.Generator, maximum: Optional[int] = None) -> int:
    tokens = max(1, int(round(sample_distribution(spec, rng))))
    return min(tokens, maximum) if maximum else tokens


def sample_arrivals(rate: float, duration: float, seed: int) -> List[float]:
    """
    Poisson arrivals

    Args:
        rate: applications per second (> 0)
        duration: seconds
        seed: scenario seed

    Returns:
        arrival timestamps in ms, increasing, all < duration
    """
    if not rate > 0:
        raise ValueError(f"rate must be > 0 (got {rate})")
    rng = stream_rng(seed, 'arrivals')
    horizon = duration * 1000.0
    mean_gap = 1000.0 / rate
    arrivals = []
    t = float(rng.exponential(mean_gap))
    while t < horizon:
        arrivals.append(t)
        t += float(rng.exponential(mean_gap))
    return arrivals


def tool_latency_spec(tool_class: str, overrides: Optional[Dict[str, DistributionSpec]] = None) -> DistributionSpec:
    if overrides and tool_class in overrides:
        return overrides[tool_class]
    if tool_class not in TOOL_CLASS_CENTERS_MS:
        raise UnknownToolClassError(tool_class)
    return DistributionSpec.exponential(TOOL_CLASS_CENTERS_MS[tool_class])


def sample_tool_latency(tool_class: str, seed_stream: np.random.Generator,
                        overrides: Optional[Dict[str, DistributionSpec]] = None) -> float:
    """
    One call latency (ms) for a tool class

    Raises:
        UnknownToolClassError: class has neither a default center nor an override
    """
    spec = tool_latency_spec(tool_class, overrides)
    return max(MIN_LATENCY_MS, sample_distribution(spec, seed_stream))


# ----------------------------------------------------------------------
# Graphs
# ----------------------------------------------------------------------

def build_code_writer() -> AppGraph:
    """Programmer / reviewer / tester pipeline with frequent short tool calls"""
    return load_graph(GRAPH_DIR / 'code_writer.yaml')


def build_deep_research() -> AppGraph:
    """Planner / searcher / summarizer graph with joins and long tool calls"""
    return load_graph(GRAPH_DIR / 'deep_research.yaml')


def resolve_app(app: str, base_dir: Optional[Path] = None) -> AppGraph:
    """Builtin app name or path to a graph file"""
    if app == 'code_writer':
        return build_code_writer()
    if app == 'deep_research':
        return build_deep_research()
    path = Path(app)
    if not path.is_absolute() and base_dir is not None and not path.exists():
        path = base_dir / path
    if not path.exists():
        raise FileNotFoundError(f"Graph file not found: {path}")
    return load_graph(path)


# ----------------------------------------------------------------------
# Scenarios
# ----------------------------------------------------------------------

def deep_merge(base: dict, overrides: dict) -> dict:
    """Recursively merge overrides into a copy of base"""
    merged = copy.deepcopy(base)
    for key, value in (overrides or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def load_config(path: Union[str, Path]) -> dict:
    with open(path, 'r') as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must hold a mapping")
    return data


@dataclass
class Scenario:
    name: str
    app: str
    qps: float
    duration_s: float
    seed: int = 1
    overrides: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    base_dir: Optional[Path] = None

    def __post_init__(self):
        if not self.qps > 0:
            raise ConfigError(f"scenario '{self.name}': qps must be > 0 (got {self.qps})")
        if not self.duration_s > 0:
            raise ConfigError(f"scenario '{self.name}': duration_s must be > 0 (got {self.duration_s})")

    def with_params(self, qps: Optional[float] = None, seed: Optional[int] = None) -> 'Scenario':
        return Scenario(self.name, self.app,
                        qps=self.qps if qps is None else qps,
                        duration_s=self.duration_s,
                        seed=self.seed if seed is None else seed,
                        overrides=self.overrides, config=self.config, base_dir=self.base_dir)

    def graph(self) -> AppGraph:
        return resolve_app(self.app, self.base_dir)


def scenario_from_dict(data: dict, base_config: dict, name: str = 'scenario',
                       base_dir: Optional[Path] = None) -> Scenario:
    if not isinstance(data, dict):
        raise ConfigError(f"Scenario '{name}' must be a mapping")
    for key in ('app', 'qps', 'duration_s'):
        if key not in data:
            raise ConfigError(f"Scenario '{name}' is missing '{key}'")
    try:
        qps = float(data['qps'])
        duration = float(data['duration_s'])
        seed = int(data.get('seed', 1))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Scenario '{name}': {e}")
    overrides = data.get('overrides') or {}
    return Scenario(
        name=str(data.get('name', name)),
        app=str(data['app']),
        qps=qps,
        duration_s=duration,
        seed=seed,
        overrides=overrides,
        config=deep_merge(base_config, overrides),
        base_dir=base_dir,
    )


def load_scenario(path: Union[str, Path], base_config: dict) -> Scenario:
    """
    Load a scenario file and merge its overrides over the base config

    Raises:
        FileNotFoundError: missing file
        ConfigError: malformed scenario
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Scenario file not found: {path}")
    try:
        data = load_config(path)
    except yaml.YAMLError as e:
        raise ConfigError(f"Scenario file {path} is not valid YAML: {e}")
    scenario = scenario_from_dict(data, base_config, name=path.stem, base_dir=path.parent)
    logger.info(f"Scenario '{scenario.name}': app={scenario.app} qps={scenario.qps} "
                f"duration={scenario.duration_s}s seed={scenario.seed}")
    return scenario


# ----------------------------------------------------------------------
# Pre-sampled application instances
# ----------------------------------------------------------------------

@dataclass
class NodeSample:
    prompt_tokens: int
    output_tokens: int
    call_latencies: Tuple[float, ...] = ()


@dataclass
class AppInstancePlan:
    app_id: str
    arrival_ms: float
    samples: Dict[str, NodeSample]


def _length_spec(node, lengths: dict, which: str, default: DistributionSpec) -> DistributionSpec:
    own = node.prompt_tokens_dist if which == 'prompt' else node.output_tokens_dist
    if own is not None:
        return own
    per_type = lengths.get(node.agent_type, {}) or {}
    spec = DistributionSpec.from_config(per_type.get(which))
    if spec is None:
        spec = DistributionSpec.from_config((lengths.get('default', {}) or {}).get(which))
    return spec or default


def tool_overrides(config: dict) -> Dict[str, DistributionSpec]:
    raw = config.get('workload', {}).get('tool_latency', {}) or {}
    return {cls: DistributionSpec.from_config(spec) for cls, spec in raw.items()}


def expected_output_tokens(node, config: dict) -> float:
    lengths = config.get('workload', {}).get('lengths', {}) or {}
    return _length_spec(node, lengths, 'output', DEFAULT_OUTPUT_DIST).mean()


def sample_node(node, config: dict, length_rng: np.random.Generator,
                tool_rng: np.random.Generator) -> NodeSample:
    workload = config.get('workload', {})
    lengths = workload.get('lengths', {}) or {}
    max_prompt = workload.get('max_prompt_tokens')
    max_output = workload.get('max_output_tokens')

    prompt = sample_tokens(_length_spec(node, lengths, 'prompt', DEFAULT_PROMPT_DIST), length_rng, max_prompt)
    output = sample_tokens(_length_spec(node, lengths, 'output', DEFAULT_OUTPUT_DIST), length_rng, max_output)

    latencies: Tuple[float, ...] = ()
    if isinstance(node, FuncNode):
        # one LLM segment before each call plus one after the last
        output = max(output, len(node.stages) + 1)
        if node.latency_dist is not None:
            draws = [max(MIN_LATENCY_MS, sample_distribution(node.latency_dist, tool_rng)) for _ in node.stages]
        else:
            draws = [sample_tool_latency(node.tool_class or 'short_fs', tool_rng, tool_overrides(config))
                     for _ in node.stages]
        latencies = tuple(draws)
    return NodeSample(prompt, output, latencies)


def generate_workload(scenario: Scenario, graph: Optional[AppGraph] = None) -> List[AppInstancePlan]:
    """Arrivals plus every node's lengths and call latencies, per application instance"""
    graph = graph or scenario.graph()
    arrivals = sample_arrivals(scenario.qps, scenario.duration_s, scenario.seed)
    plans = []
    for index, arrival in enumerate(arrivals):
        length_rng = stream_rng(scenario.seed, 'lengths', index)
        tool_rng = stream_rng(scenario.seed, 'tools', index)
        samples = {nid: sample_node(graph.node(nid), scenario.config, length_rng, tool_rng)
                   for nid in graph.node_ids()}
        plans.append(AppInstancePlan(f"app{index:05d}", arrival, samples))
    logger.debug(f"Generated {len(plans)} app instances for '{scenario.name}' "
                 f"(qps={scenario.qps}, seed={scenario.seed})")
    return plans
