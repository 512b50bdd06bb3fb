#!/usr/bin/env python3
"""
Agent Graph - Multi-agent application DAG with function-call nodes

An application is described declaratively (config/graphs/*.yaml) and loaded
into an AppGraph:
- AgentNode: an LLM agent, one request per application instance
- FuncNode: an agent that stops generating to make external calls, one call
  per stage (LLM segment -> call -> LLM segment ...)
- Edges carry data dependencies; a node runs once all predecessors are done

Structural priority (static part of the hybrid priority):
    score = w_static x node_depth x node_out_degree
with entry depth = 1 and depth = longest path from any entry node.

Graphs are immutable once validate_graph() accepted them. Every downstream
operation refuses a graph that has not passed validation.
"""

import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import yaml
from loguru import logger


class GraphError(ValueError):
    """Raised when an operation receives an invalid or unvalidated graph"""


class UnknownNodeError(KeyError):
    """Raised for a node id that is not part of the graph"""


class UnknownAgentTypeError(KeyError):
    """Raised for an agent type with no node in the graph"""


# Latency centers (ms) for common external tools, per tool class.
# file/git/search short = 100 ms, database = 500 ms, medium search = 3 s,
# AI generation = midpoint of 5-30 s.
TOOL_CLASS_CENTERS_MS: Dict[str, float] = {
    'short_fs': 100.0,
    'short_git': 100.0,
    'short_search': 100.0,
    'db': 500.0,
    'medium_search': 3000.0,
    'ai_generation': 15000.0,
}

# Pre-built FuncNode kinds and the tool class whose latency they follow
FUNC_NODE_CATALOGUE: Dict[str, str] = {
    'FileReadNode': 'short_fs',
    'FileWriteNode': 'short_fs',
    'SearchNode': 'medium_search',
    'FileQueryNode': 'short_search',
    'DataAnalysisNode': 'ai_generation',
    'UserConfirmNode': 'medium_search',
    'ExternalTestNode': 'medium_search',
}

DISTRIBUTION_KINDS = ('constant', 'poisson', 'exponential', 'uniform', 'lognormal')


@dataclass(frozen=True)
class DistributionSpec:
    """
    Distribution identifier + parameters

    kinds and params:
        constant:    value
        poisson:     mean
        exponential: mean
        uniform:     low, high
        lognormal:   median, sigma
    """
    kind: str
    params: Tuple[Tuple[str, float], ...] = ()

    @classmethod
    def from_config(cls, data: Union[dict, float, int, None]) -> Optional['DistributionSpec']:
        """
        Build from a YAML mapping like {kind: exponential, mean: 3000}

        A bare number is shorthand for a constant distribution.
        """
        if data is None:
            return None
        if isinstance(data, (int, float)):
            return cls('constant', (('value', float(data)),))
        kind = str(data.get('kind', 'constant'))
        params = tuple(sorted((k, float(v)) for k, v in data.items() if k != 'kind'))
        return cls(kind, params)

    @classmethod
    def constant(cls, value: float) -> 'DistributionSpec':
        return cls('constant', (('value', float(value)),))

    @classmethod
    def exponential(cls, mean: float) -> 'DistributionSpec':
        return cls('exponential', (('mean', float(mean)),))

    @classmethod
    def lognormal(cls, median: float, sigma: float) -> 'DistributionSpec':
        return cls('lognormal', (('median', float(median)), ('sigma', float(sigma))))

    def param(self, name: str, default: Optional[float] = None) -> float:
        for key, value in self.params:
            if key == name:
                return value
        if default is None:
            raise GraphError(f"Distribution '{self.kind}' missing parameter '{name}'")
        return default

    def problems(self) -> List[str]:
        """List what is wrong with this spec (empty when valid)"""
        if self.kind not in DISTRIBUTION_KINDS:
            return [f"unknown distribution kind '{self.kind}'"]
        required = {
            'constant': ('value',),
            'poisson': ('mean',),
            'exponential': ('mean',),
            'uniform': ('low', 'high'),
            'lognormal': ('median', 'sigma'),
        }[self.kind]
        names = dict(self.params)
        issues = [f"missing parameter '{r}'" for r in required if r not in names]
        issues += [f"parameter '{k}'={v} not > 0" for k, v in self.params if not v > 0]
        if self.kind == 'uniform' and not issues and names['low'] > names['high']:
            issues.append("uniform low > high")
        return issues

    def mean(self) -> float:
        """Expected value of the distribution"""
        if self.kind == 'constant':
            return self.param('value')
        if self.kind in ('poisson', 'exponential'):
            return self.param('mean')
        if self.kind == 'uniform':
            return (self.param('low') + self.param('high')) / 2.0
        if self.kind == 'lognormal':
            sigma = self.param('sigma')
            return self.param('median') * math.exp(sigma * sigma / 2.0)
        raise GraphError(f"Unknown distribution kind '{self.kind}'")

    def to_config(self) -> dict:
        out = {'kind': self.kind}
        out.update(dict(self.params))
        return out


@dataclass(frozen=True)
class AgentNode:
    """An LLM agent node"""
    id: str
    agent_type: str
    prompt_tokens_dist: Optional[DistributionSpec] = None
    output_tokens_dist: Optional[DistributionSpec] = None
    model_hint: str = ''

    @property
    def is_func(self) -> bool:
        return False


@dataclass(frozen=True)
class FuncNode:
    """An agent node that makes one external call per stage"""
    id: str
    agent_type: str
    stages: Tuple[str, ...] = ()
    predict_time_hint: Optional[float] = None  # ms
    latency_dist: Optional[DistributionSpec] = None  # ms
    tool_class: Optional[str] = None
    prompt_tokens_dist: Optional[DistributionSpec] = None
    output_tokens_dist: Optional[DistributionSpec] = None
    model_hint: str = ''

    @property
    def is_func(self) -> bool:
        return True

    def call_latency_dist(self) -> DistributionSpec:
        """Latency distribution of this node's calls (tool-class default if unset)"""
        if self.latency_dist is not None:
            return self.latency_dist
        center = TOOL_CLASS_CENTERS_MS.get(self.tool_class or 'short_fs', TOOL_CLASS_CENTERS_MS['short_fs'])
        return DistributionSpec.exponential(center)


Node = Union[AgentNode, FuncNode]


@dataclass
class Violation:
    kind: str
    detail: str


@dataclass
class ValidationReport:
    ok: bool
    violations: List[Violation] = field(default_factory=list)

    def kinds(self) -> List[str]:
        return [v.kind for v in self.violations]


@dataclass(frozen=True)
class StaticPriorityRecord:
    node_id: str
    node_depth: int
    node_out_degree: int
    w_static: float
    score: float


class AppGraph:
    """Application DAG: nodes in declaration order plus (from, to) edges"""

    def __init__(self, name: str, nodes: List[Node], edges: List[Tuple[str, str]]):
        self.name = name
        self.nodes: Tuple[Node, ...] = tuple(nodes)
        self.edges: Tuple[Tuple[str, str], ...] = tuple((str(a), str(b)) for a, b in edges)
        self._index: Dict[str, Node] = {}
        for node in self.nodes:
            self._index.setdefault(node.id, node)
        self._succ: Dict[str, List[str]] = {n.id: [] for n in self.nodes}
        self._pred: Dict[str, List[str]] = {n.id: [] for n in self.nodes}
        for src, dst in self.edges:
            if src in self._succ and dst in self._pred:
                self._succ[src].append(dst)
                self._pred[dst].append(src)
        self.validated = False
        self._depths: Optional[Dict[str, int]] = None

    def __repr__(self):
        return f"AppGraph({self.name!r}, nodes={len(self.nodes)}, edges={len(self.edges)})"

    def node(self, node_id: str) -> Node:
        try:
            return self._index[node_id]
        except KeyError:
            raise UnknownNodeError(node_id) from None

    def has_node(self, node_id: str) -> bool:
        return node_id in self._index

    def node_ids(self) -> List[str]:
        return [n.id for n in self.nodes]

    def successors(self, node_id: str) -> List[str]:
        self.node(node_id)
        return list(self._succ[node_id])

    def predecessors(self, node_id: str) -> List[str]:
        self.node(node_id)
        return list(self._pred[node_id])

    def out_degree(self, node_id: str) -> int:
        return len(self.successors(node_id))

    def in_degree(self, node_id: str) -> int:
        return len(self.predecessors(node_id))

    @property
    def entry_ids(self) -> List[str]:
        return [n.id for n in self.nodes if not self._pred[n.id]]

    def agent_types(self) -> List[str]:
        return sorted({n.agent_type for n in self.nodes})

    def nodes_of_type(self, agent_type: str) -> List[Node]:
        return [n for n in self.nodes if n.agent_type == agent_type]

    def func_nodes(self) -> List[FuncNode]:
        return [n for n in self.nodes if n.is_func]


def validate_graph(graph: AppGraph) -> ValidationReport:
    """
    Validate graph structure and node invariants

    Args:
        graph: AppGraph to check

    Returns:
        ValidationReport; ok=True marks the graph as validated
    """
    violations: List[Violation] = []

    if not graph.nodes:
        violations.append(Violation('empty graph', 'graph has no nodes'))

    seen = set()
    for node in graph.nodes:
        if node.id in seen:
            violations.append(Violation('duplicate id', node.id))
        seen.add(node.id)

        for label, dist in (('prompt_tokens_dist', node.prompt_tokens_dist),
                            ('output_tokens_dist', node.output_tokens_dist)):
            if dist is not None:
                for issue in dist.problems():
                    violations.append(Violation('non-positive distribution', f"{node.id}.{label}: {issue}"))

        if node.is_func:
            if not node.stages:
                violations.append(Violation('empty stages', node.id))
            elif len(set(node.stages)) != len(node.stages):
                violations.append(Violation('duplicate stage', node.id))
            if node.predict_time_hint is not None and not node.predict_time_hint > 0:
                violations.append(Violation('non-positive hint', f"{node.id}: {node.predict_time_hint}"))
            if node.latency_dist is not None:
                for issue in node.latency_dist.problems():
                    violations.append(Violation('non-positive distribution', f"{node.id}.latency_dist: {issue}"))
            if node.tool_class is not None and node.tool_class not in TOOL_CLASS_CENTERS_MS:
                violations.append(Violation('unknown tool class', f"{node.id}: {node.tool_class}"))

    for src, dst in graph.edges:
        if src not in seen or dst not in seen:
            violations.append(Violation('dangling edge', f"{src} -> {dst}"))

    order = _topological_order(graph)
    if len(order) < len(graph._index):
        stuck = sorted(set(graph._index) - set(order))
        violations.append(Violation('cycle', ', '.join(stuck)))
    else:
        reachable = _reachable_from_entries(graph)
        for node in graph.nodes:
            if node.id not in reachable:
                violations.append(Violation('unreachable', node.id))

    report = ValidationReport(ok=not violations, violations=violations)
    graph.validated = report.ok
    if report.ok:
        logger.debug(f"Graph '{graph.name}' valid ({len(graph.nodes)} nodes, {len(graph.edges)} edges)")
    else:
        logger.warning(f"Graph '{graph.name}' invalid: {', '.join(report.kinds())}")
    return report


def _topological_order(graph: AppGraph) -> List[str]:
    """Kahn's algorithm, ties resolved by declaration order"""
    in_deg = {nid: len(graph._pred[nid]) for nid in graph._index}
    # self-loops are kept in _pred so they never reach zero
    ready = deque(n.id for n in graph.nodes if in_deg.get(n.id, 0) == 0 and n.id in in_deg)
    order: List[str] = []
    emitted = set()
    while ready:
        nid = ready.popleft()
        if nid in emitted:
            continue
        emitted.add(nid)
        order.append(nid)
        for succ in graph._succ[nid]:
            in_deg[succ] -= 1
            if in_deg[succ] == 0:
                ready.append(succ)
    return order


def _reachable_from_entries(graph: AppGraph) -> set:
    seen = set(graph.entry_ids)
    stack = list(seen)
    while stack:
        nid = stack.pop()
        for succ in graph._succ[nid]:
            if succ not in seen:
                seen.add(succ)
                stack.append(succ)
    return seen


def _require_valid(graph: AppGraph):
    if not graph.validated:
        raise GraphError(f"Graph '{graph.name}' has not passed validation")


def compute_depths(graph: AppGraph) -> Dict[str, int]:
    """
    Longest-path depth of every node (entry nodes have depth 1)

    Returns:
        dict node_id -> depth, in topological order
    """
    _require_valid(graph)
    if graph._depths is None:
        depths: Dict[str, int] = {}
        for nid in _topological_order(graph):
            preds = graph._pred[nid]
            depths[nid] = 1 + max((depths[p] for p in preds), default=0)
        graph._depths = depths
    return dict(graph._depths)


def static_priority(graph: AppGraph, node_id: str, w_static: float) -> float:
    """
    Structural importance of a node: w_static x depth x out_degree

    Raises:
        UnknownNodeError: node not in graph
        ValueError: w_static not > 0
    """
    _require_valid(graph)
    if not w_static > 0:
        raise ValueError(f"w_static must be > 0 (got {w_static})")
    graph.node(node_id)
    depth = compute_depths(graph)[node_id]
    return float(w_static * depth * graph.out_degree(node_id))


def static_priority_records(graph: AppGraph, w_static: float) -> List[StaticPriorityRecord]:
    depths = compute_depths(graph)
    return [
        StaticPriorityRecord(
            node_id=nid,
            node_depth=depths[nid],
            node_out_degree=graph.out_degree(nid),
            w_static=w_static,
            score=static_priority(graph, nid, w_static),
        )
        for nid in graph.node_ids()
    ]


def agent_type_static_score(graph: AppGraph, agent_type: str, w_static: float) -> float:
    """Max static priority over the nodes of an agent type"""
    _require_valid(graph)
    nodes = graph.nodes_of_type(agent_type)
    if not nodes:
        raise UnknownAgentTypeError(agent_type)
    return max(static_priority(graph, n.id, w_static) for n in nodes)


def find_fc_patterns(graph: AppGraph) -> List[Tuple[str, str, str]]:
    """
    Find LLM -> function call -> LLM patterns

    Returns:
        (predecessor agent id, func node id, successor agent id) triples
    """
    _require_valid(graph)
    patterns = []
    for node in graph.func_nodes():
        for pred in graph.predecessors(node.id):
            if graph.node(pred).is_func:
                continue
            for succ in graph.successors(node.id):
                if not graph.node(succ).is_func:
                    patterns.append((pred, node.id, succ))
    return patterns


def graph_from_dict(data: dict, name: str = 'app') -> AppGraph:
    """
    Build an AppGraph from the graph file structure

    Expected keys: nodes (list of {id, kind, agent_type, ...}) and edges
    (list of [from, to]). The result still has to pass validate_graph().
    """
    if not isinstance(data, dict) or 'nodes' not in data:
        raise GraphError(f"Graph '{name}' needs a 'nodes' list")

    nodes: List[Node] = []
    for raw in data.get('nodes') or []:
        if not isinstance(raw, dict) or 'id' not in raw:
            raise GraphError(f"Graph '{name}' has a node without an id: {raw!r}")
        kind = raw.get('kind', 'agent')
        common = dict(
            id=str(raw['id']),
            agent_type=str(raw.get('agent_type', raw['id'])),
            prompt_tokens_dist=DistributionSpec.from_config(raw.get('prompt_tokens_dist')),
            output_tokens_dist=DistributionSpec.from_config(raw.get('output_tokens_dist')),
            model_hint=str(raw.get('model_hint', '')),
        )
        if kind == 'func':
            tool_class = raw.get('tool_class')
            if tool_class is None and raw.get('node_type') in FUNC_NODE_CATALOGUE:
                tool_class = FUNC_NODE_CATALOGUE[raw['node_type']]
            hint = raw.get('predict_time_ms')
            nodes.append(FuncNode(
                stages=tuple(str(s) for s in raw.get('stages') or ()),
                predict_time_hint=float(hint) if hint is not None else None,
                latency_dist=DistributionSpec.from_config(raw.get('latency_dist')),
                tool_class=tool_class,
                **common,
            ))
        elif kind == 'agent':
            nodes.append(AgentNode(**common))
        else:
            raise GraphError(f"Node '{raw.get('id')}' has unknown kind '{kind}'")

    edges = []
    for edge in data.get('edges') or []:
        if len(edge) != 2:
            raise GraphError(f"Edge {edge!r} must be [from, to]")
        edges.append((str(edge[0]), str(edge[1])))

    return AppGraph(str(data.get('name', name)), nodes, edges)


def load_graph(path: Union[str, Path]) -> AppGraph:
    """Load a graph file (YAML) and validate it"""
    path = Path(path)
    with open(path, 'r') as f:
        data = yaml.safe_load(f)
    graph = graph_from_dict(data, name=path.stem)
    report = validate_graph(graph)
    if not report.ok:
        details = '; '.join(f"{v.kind}: {v.detail}" for v in report.violations)
        raise GraphError(f"Graph file {path} is invalid ({details})")
    logger.info(f"Loaded graph '{graph.name}' from {path} ({len(graph.nodes)} nodes)")
    return graph
