#!/usr/bin/env python3
"""
Metrics - Trace events, aggregation, comparison tables and plot data

Everything here is a pure function of the trace: a saved trace.jsonl
aggregates to exactly the report produced at the end of the run.

Trace: JSON lines, one TraceEvent per line
    {t_ms, kind, request_id, app_id, agent_type, blocks, extra}
The first event of every run is 'run_meta' (scenario, app, policy, qps,
seed, total_blocks) so a trace file is self-describing.
"""

import csv
import gzip
import hashlib
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
from dataclasses_json import dataclass_json
from loguru import logger


ABNORMAL_FACTOR = 1.5


class ScenarioMismatchError(ValueError):
    """Raised when reports from different scenarios are compared"""


@dataclass_json
@dataclass
class TraceEvent:
    t_ms: float
    kind: str
    request_id: str = ''
    app_id: str = ''
    agent_type: str = ''
    blocks: int = 0
    extra: Dict[str, Any] = field(default_factory=dict)


@dataclass_json
@dataclass
class MetricsReport:
    scenario: str = ''
    app: str = ''
    policy: str = ''
    qps: float = 0.0
    seed: int = 0
    arrived_apps: int = 0
    completed_apps: int = 0
    avg_e2e_latency_ms: float = 0.0
    p95_e2e_latency_ms: float = 0.0
    per_type_latency_ms: Dict[str, float] = field(default_factory=dict)
    gpu_utilization_mean: float = 0.0
    effective_utilization_mean: float = 0.0
    stalled_fraction_mean: float = 0.0
    stalled_fraction_peak: float = 0.0
    abnormal_agent_count: int = 0
    preemption_count: int = 0
    critical_inversion_count: int = 0
    offload_count: int = 0
    upload_stall_count: int = 0
    tokens_per_second: float = 0.0
    makespan_ms: float = 0.0
    partial: bool = False
    gpu_utilization_timeline: List[List[float]] = field(default_factory=list)
    effective_utilization_timeline: List[List[float]] = field(default_factory=list)
    stalled_fraction_timeline: List[List[float]] = field(default_factory=list)


# Columns written to report.csv (timelines only go to JSONL)
REPORT_CSV_FIELDS = [f.name for f in fields(MetricsReport) if not f.name.endswith('_timeline')]


def percentile_nearest_rank(values: Sequence[float], pct: float) -> float:
    """Nearest-rank percentile of a list (0 for an empty list)"""
    if not values:
        return 0.0
    ordered = sorted(values)
    rank = max(1, int(math.ceil(pct / 100.0 * len(ordered))))
    return float(ordered[rank - 1])


def time_weighted_mean(samples: Sequence[Sequence[float]], end_t: float) -> float:
    """Mean of a step function given (t, value) samples, held until end_t"""
    if not samples:
        return 0.0
    times = np.array([s[0] for s in samples] + [max(end_t, samples[-1][0])], dtype=float)
    values = np.array([s[1] for s in samples], dtype=float)
    widths = np.diff(times)
    span = widths.sum()
    if span <= 0:
        return float(values.mean())
    return float((values * widths).sum() / span)


def count_abnormal(durations_by_type: Dict[str, List[float]], factor: float = ABNORMAL_FACTOR) -> int:
    """Instances whose execution time exceeds factor x the mean of their type"""
    count = 0
    for durations in durations_by_type.values():
        if not durations:
            continue
        mean = float(np.mean(durations))
        count += sum(1 for d in durations if d > factor * mean)
    return count


def aggregate(trace: Iterable[TraceEvent]) -> MetricsReport:
    """
    Aggregate a run's trace into a MetricsReport

    Returns:
        MetricsReport (partial=True when the run was truncated)
    """
    report = MetricsReport()
    app_arrival: Dict[str, float] = {}
    app_done: Dict[str, float] = {}
    durations: Dict[str, List[float]] = defaultdict(list)
    util, effective, stalled = [], [], []
    tokens = 0
    first_t: Optional[float] = None
    last_t = 0.0

    for ev in trace:
        last_t = max(last_t, ev.t_ms)
        kind = ev.kind
        if kind == 'run_meta':
            report.scenario = str(ev.extra.get('scenario', ''))
            report.app = str(ev.extra.get('app', ''))
            report.policy = str(ev.extra.get('policy', ''))
            report.qps = float(ev.extra.get('qps', 0.0))
            report.seed = int(ev.extra.get('seed', 0))
        elif kind == 'app_arrival':
            app_arrival[ev.app_id] = ev.t_ms
            first_t = ev.t_ms if first_t is None else min(first_t, ev.t_ms)
        elif kind == 'app_done':
            app_done[ev.app_id] = ev.t_ms
        elif kind == 'request_done':
            durations[ev.agent_type].append(float(ev.extra.get('exec_ms', 0.0)))
            tokens += int(ev.extra.get('output_tokens', 0))
        elif kind == 'util':
            total = float(ev.extra.get('total', 0)) or 1.0
            util.append([ev.t_ms, ev.extra.get('used', 0) / total])
            effective.append([ev.t_ms, ev.extra.get('active', 0) / total])
            stalled.append([ev.t_ms, ev.extra.get('stalled', 0) / total])
        elif kind == 'eviction':
            report.preemption_count += 1
        elif kind == 'critical_inversion':
            report.critical_inversion_count += 1
        elif kind == 'offload_started':
            report.offload_count += 1
        elif kind == 'upload_stall':
            report.upload_stall_count += 1
        elif kind == 'truncated':
            report.partial = True

    latencies = [app_done[a] - app_arrival[a] for a in app_done if a in app_arrival]
    report.arrived_apps = len(app_arrival)
    report.completed_apps = len(latencies)
    if latencies:
        report.avg_e2e_latency_ms = float(np.mean(latencies))
        report.p95_e2e_latency_ms = percentile_nearest_rank(latencies, 95)
    report.per_type_latency_ms = {t: float(np.mean(d)) for t, d in sorted(durations.items()) if d}
    report.abnormal_agent_count = count_abnormal(durations)

    report.gpu_utilization_timeline = util
    report.effective_utilization_timeline = effective
    report.stalled_fraction_timeline = stalled
    report.gpu_utilization_mean = time_weighted_mean(util, last_t)
    report.effective_utilization_mean = time_weighted_mean(effective, last_t)
    report.stalled_fraction_mean = time_weighted_mean(stalled, last_t)
    report.stalled_fraction_peak = max((s[1] for s in stalled), default=0.0)

    if first_t is not None:
        report.makespan_ms = last_t - first_t
        if report.makespan_ms > 0:
            report.tokens_per_second = tokens * 1000.0 / report.makespan_ms
    return report


# ----------------------------------------------------------------------
# Comparison
# ----------------------------------------------------------------------

@dataclass_json
@dataclass
class ComparisonRow:
    qps: float
    label: str
    baseline: str
    runs: int
    avg_e2e_latency_ms: float
    baseline_latency_ms: float
    latency_ratio: float
    latency_delta_ms: float
    p95_ratio: float
    effective_utilization: float
    effective_utilization_delta: float
    gpu_utilization_delta: float
    abnormal_agent_delta: float
    critical_inversion_delta: float


def _ratio(value: float, base: float) -> float:
    if base == 0:
        return 1.0 if value == 0 else float('inf')
    return value / base


@dataclass
class ComparisonTable:
    rows: List[ComparisonRow]

    def to_text(self) -> str:
        header = f"{'qps':>6} {'policy':<12} {'vs':<10} {'avg_ms':>10} {'ratio':>7} {'p95_ratio':>9} " \
                 f"{'eff_util':>8} {'d_util':>7} {'d_abn':>6} {'d_inv':>6}"
        lines = [header, '-' * len(header)]
        for r in self.rows:
            lines.append(f"{r.qps:>6.2f} {r.label:<12} {r.baseline:<10} {r.avg_e2e_latency_ms:>10.1f} "
                         f"{r.latency_ratio:>7.3f} {r.p95_ratio:>9.3f} {r.effective_utilization:>8.3f} "
                         f"{r.effective_utilization_delta:>+7.3f} {r.abnormal_agent_delta:>+6.1f} "
                         f"{r.critical_inversion_delta:>+6.1f}")
        return '\n'.join(lines)


def compare(reports: Sequence[MetricsReport], labels: Sequence[str]) -> ComparisonTable:
    """
    Compare labelled reports against the first label, per QPS point

    Reports sharing (label, qps) are averaged over seeds.

    Raises:
        ValueError: fewer than 2 reports or label count mismatch
        ScenarioMismatchError: reports from different scenarios/apps, or a
            QPS point without a baseline run
    """
    if len(reports) < 2:
        raise ValueError("compare needs at least 2 reports")
    if len(labels) != len(reports):
        raise ValueError(f"{len(labels)} labels for {len(reports)} reports")
    scenarios = {(r.scenario, r.app) for r in reports}
    if len(scenarios) > 1:
        raise ScenarioMismatchError(f"Reports come from different scenarios: {sorted(scenarios)}")

    groups: Dict[tuple, List[MetricsReport]] = defaultdict(list)
    for report, label in zip(reports, labels):
        groups[(report.qps, label)].append(report)

    def mean(group, attr):
        return float(np.mean([getattr(r, attr) for r in group]))

    baseline = labels[0]
    order = list(dict.fromkeys(labels))
    rows = []
    for qps in sorted({r.qps for r in reports}):
        base = groups.get((qps, baseline))
        if not base:
            raise ScenarioMismatchError(f"No '{baseline}' run at qps={qps}")
        for label in order:
            group = groups.get((qps, label))
            if not group or (label == baseline and len(order) > 1):
                continue
            latency = mean(group, 'avg_e2e_latency_ms')
            base_latency = mean(base, 'avg_e2e_latency_ms')
            eff = mean(group, 'effective_utilization_mean')
            rows.append(ComparisonRow(
                qps=qps,
                label=label,
                baseline=baseline,
                runs=len(group),
                avg_e2e_latency_ms=latency,
                baseline_latency_ms=base_latency,
                latency_ratio=_ratio(latency, base_latency),
                latency_delta_ms=latency - base_latency,
                p95_ratio=_ratio(mean(group, 'p95_e2e_latency_ms'), mean(base, 'p95_e2e_latency_ms')),
                effective_utilization=eff,
                effective_utilization_delta=eff - mean(base, 'effective_utilization_mean'),
                gpu_utilization_delta=mean(group, 'gpu_utilization_mean') - mean(base, 'gpu_utilization_mean'),
                abnormal_agent_delta=mean(group, 'abnormal_agent_count') - mean(base, 'abnormal_agent_count'),
                critical_inversion_delta=(mean(group, 'critical_inversion_count')
                                          - mean(base, 'critical_inversion_count')),
            ))
    return ComparisonTable(rows)


# ----------------------------------------------------------------------
# Serialization
# ----------------------------------------------------------------------

def _open_text(path: Path, mode: str):
    if path.suffix == '.gz':
        return gzip.open(path, mode + 't', encoding='utf-8')
    return open(path, mode, encoding='utf-8', newline='' if 'w' in mode else None)


def _dump_line(obj) -> str:
    return json.dumps(obj.to_dict(), sort_keys=True, separators=(',', ':'))


def trace_digest(events: Iterable[TraceEvent]) -> str:
    """sha256 over the JSONL serialization of a trace"""
    digest = hashlib.sha256()
    for ev in events:
        digest.update((_dump_line(ev) + '\n').encode('utf-8'))
    return digest.hexdigest()


def write_trace_jsonl(events: Iterable[TraceEvent], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with _open_text(path, 'w') as f:
        for ev in events:
            f.write(_dump_line(ev) + '\n')
    return path


def read_trace_jsonl(path: Union[str, Path]) -> List[TraceEvent]:
    path = Path(path)
    events = []
    with _open_text(path, 'r') as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                events.append(TraceEvent.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise ValueError(f"{path}:{line_no}: malformed trace event ({e})")
    return events


def write_reports_jsonl(reports: Iterable[MetricsReport], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with _open_text(path, 'w') as f:
        for report in reports:
            f.write(_dump_line(report) + '\n')
    return path


def read_reports_jsonl(path: Union[str, Path]) -> List[MetricsReport]:
    with _open_text(Path(path), 'r') as f:
        return [MetricsReport.from_dict(json.loads(line)) for line in f if line.strip()]


def report_to_row(report: MetricsReport) -> Dict[str, str]:
    row = {}
    data = report.to_dict()
    for name in REPORT_CSV_FIELDS:
        value = data[name]
        if isinstance(value, dict):
            row[name] = json.dumps(value, sort_keys=True)
        elif isinstance(value, float):
            row[name] = repr(value)
        else:
            row[name] = str(value)
    return row


def report_from_row(row: Dict[str, str]) -> MetricsReport:
    data: Dict[str, Any] = {}
    for f in fields(MetricsReport):
        if f.name not in row:
            continue
        raw = row[f.name]
        if f.type in (float, 'float'):
            data[f.name] = float(raw)
        elif f.type in (int, 'int'):
            data[f.name] = int(raw)
        elif f.type in (bool, 'bool'):
            data[f.name] = raw == 'True'
        elif f.name == 'per_type_latency_ms':
            data[f.name] = json.loads(raw)
        else:
            data[f.name] = raw
    return MetricsReport.from_dict(data)


def write_reports_csv(reports: Iterable[MetricsReport], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.DictWriter(f, fieldnames=REPORT_CSV_FIELDS, lineterminator='\n')
        writer.writeheader()
        for report in reports:
            writer.writerow(report_to_row(report))
    return path


def read_reports_csv(path: Union[str, Path]) -> List[MetricsReport]:
    with open(path, 'r', newline='', encoding='utf-8') as f:
        return [report_from_row(row) for row in csv.DictReader(f)]


def write_comparison_csv(table: ComparisonTable, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = [f.name for f in fields(ComparisonRow)]
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.DictWriter(f, fieldnames=names, lineterminator='\n')
        writer.writeheader()
        for row in table.rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.to_dict().items()})
    return path


# ----------------------------------------------------------------------
# Plot data (gnuplot)
# ----------------------------------------------------------------------

PLOT_FILES = ('latency_vs_qps.dat', 'utilization_timeline.dat', 'abnormal_agents.dat')

GNUPLOT_SCRIPT = """# gnuplot -p plots.gp
set terminal pngcairo size 900,600
set key outside

set output 'latency_vs_qps.png'
set xlabel 'QPS'; set ylabel 'avg end-to-end latency (ms)'
plot for [i=2:{n_policies}+1] 'latency_vs_qps.dat' using 1:i with linespoints title columnheader(i)

set output 'utilization_timeline.png'
set xlabel 'time (s)'; set ylabel 'fraction of device blocks'
plot for [i=0:{n_runs}-1] 'utilization_timeline.dat' index i using 1:3 with lines title columnheader(1)

set output 'abnormal_agents.png'
set style data histograms; set style fill solid 0.6
set xlabel 'policy'; set ylabel 'abnormal agents (mean per run)'
plot 'abnormal_agents.dat' using 2:xtic(1) title 'abnormal'
"""


def write_plot_data(reports: Sequence[MetricsReport], out_dir: Union[str, Path]) -> List[Path]:
    """
    One data file per figure kind plus a gnuplot script

    Returns:
        paths written (the three .dat files, then plots.gp)
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    policies = list(dict.fromkeys(r.policy for r in reports))
    by_point: Dict[tuple, List[MetricsReport]] = defaultdict(list)
    for r in reports:
        by_point[(r.qps, r.policy)].append(r)

    latency = out_dir / 'latency_vs_qps.dat'
    with open(latency, 'w') as f:
        f.write('qps ' + ' '.join(policies) + '\n')
        for qps in sorted({r.qps for r in reports}):
            cells = []
            for p in policies:
                group = by_point.get((qps, p))
                cells.append(f"{np.mean([g.avg_e2e_latency_ms for g in group]):.3f}" if group else 'NaN')
            f.write(f"{qps:g} " + ' '.join(cells) + '\n')

    # timelines of the highest-QPS run of each policy (lowest seed)
    timeline = out_dir / 'utilization_timeline.dat'
    top_qps = max((r.qps for r in reports), default=0.0)
    blocks = []
    for p in policies:
        candidates = sorted((r for r in reports if r.policy == p and r.qps == top_qps), key=lambda r: r.seed)
        if not candidates:
            continue
        r = candidates[0]
        lines = [f"{p} used effective stalled"]
        for (t, used), (_, eff), (_, st) in zip(r.gpu_utilization_timeline, r.effective_utilization_timeline,
                                                r.stalled_fraction_timeline):
            lines.append(f"{t / 1000.0:.3f} {used:.4f} {eff:.4f} {st:.4f}")
        blocks.append('\n'.join(lines))
    with open(timeline, 'w') as f:
        f.write('\n\n\n'.join(blocks) + ('\n' if blocks else ''))

    abnormal = out_dir / 'abnormal_agents.dat'
    with open(abnormal, 'w') as f:
        f.write('policy abnormal inversions\n')
        for p in policies:
            group = [r for r in reports if r.policy == p]
            f.write(f"{p} {np.mean([g.abnormal_agent_count for g in group]):.2f} "
                    f"{np.mean([g.critical_inversion_count for g in group]):.2f}\n")

    script = out_dir / 'plots.gp'
    script.write_text(GNUPLOT_SCRIPT.format(n_policies=len(policies), n_runs=len(blocks)))
    logger.info(f"Plot data written to {out_dir}")
    return [latency, timeline, abnormal, script]
