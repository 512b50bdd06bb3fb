#!/usr/bin/env python3
"""
Metrics tests - aggregation, comparison, serialization and plot data
"""

import pytest

from src.metrics import (
    PLOT_FILES,
    REPORT_CSV_FIELDS,
    MetricsReport,
    ScenarioMismatchError,
    TraceEvent,
    aggregate,
    compare,
    count_abnormal,
    percentile_nearest_rank,
    read_reports_csv,
    read_reports_jsonl,
    read_trace_jsonl,
    time_weighted_mean,
    trace_digest,
    write_comparison_csv,
    write_plot_data,
    write_reports_csv,
    write_reports_jsonl,
    write_trace_jsonl,
)


def sample_trace(truncated=False):
    events = [
        TraceEvent(0.0, 'run_meta', extra={'scenario': 'cw', 'app': 'code_writer', 'policy': 'tokencake',
                                           'qps': 0.5, 'seed': 3, 'total_blocks': 100}),
        TraceEvent(0.0, 'app_arrival', app_id='app00000'),
        TraceEvent(0.0, 'util', extra={'used': 50, 'active': 40, 'stalled': 10, 'total': 100}),
        TraceEvent(100.0, 'app_arrival', app_id='app00001'),
        TraceEvent(500.0, 'request_done', 'app00000/a', 'app00000', 'coder', extra={'exec_ms': 400.0,
                                                                                   'output_tokens': 30}),
        TraceEvent(500.0, 'util', extra={'used': 100, 'active': 100, 'stalled': 0, 'total': 100}),
        TraceEvent(600.0, 'offload_started', 'app00001/a', 'app00001', 'coder', blocks=8),
        TraceEvent(700.0, 'eviction', 'app00001/a', 'app00001', 'coder', blocks=8),
        TraceEvent(700.0, 'critical_inversion', 'app00001/a', 'app00001', 'coder'),
        TraceEvent(800.0, 'upload_stall', 'app00001/a', 'app00001', 'coder', blocks=8),
        TraceEvent(1000.0, 'app_done', app_id='app00000'),
    ]
    if truncated:
        events.append(TraceEvent(1000.0, 'truncated'))
    else:
        events.append(TraceEvent(1100.0, 'app_done', app_id='app00001'))
    return events


def report(policy='retain', qps=0.5, seed=1, latency=1000.0, scenario='cw', **kw):
    return MetricsReport(scenario=scenario, app='code_writer', policy=policy, qps=qps, seed=seed,
                         avg_e2e_latency_ms=latency, p95_e2e_latency_ms=latency * 1.5,
                         effective_utilization_mean=0.5, gpu_utilization_mean=0.6, **kw)


class TestHelpers:
    def test_nearest_rank(self):
        values = [float(v) for v in range(1, 21)]
        assert percentile_nearest_rank(values, 95) == 19.0
        assert percentile_nearest_rank([5.0], 95) == 5.0
        assert percentile_nearest_rank([], 95) == 0.0

    def test_time_weighted_mean(self):
        assert time_weighted_mean([[0.0, 0.5], [500.0, 1.0]], 1000.0) == pytest.approx(0.75)
        assert time_weighted_mean([], 10.0) == 0.0

    def test_abnormal_identical(self):
        assert count_abnormal({'coder': [100.0] * 10}) == 0

    def test_abnormal_outlier(self):
        assert count_abnormal({'coder': [100.0] * 9 + [1000.0]}) >= 1

    def test_abnormal_per_type_mean(self):
        # 300 is normal for 'slow' but the 'fast' mean is 100
        assert count_abnormal({'fast': [100.0] * 5, 'slow': [300.0] * 5}) == 0


class TestAggregate:
    def test_aggregate(self):
        r = aggregate(sample_trace())
        assert (r.scenario, r.policy, r.qps, r.seed) == ('cw', 'tokencake', 0.5, 3)
        assert r.arrived_apps == 2
        assert r.completed_apps == 2
        assert r.avg_e2e_latency_ms == pytest.approx(1000.0)
        assert r.p95_e2e_latency_ms == 1000.0
        assert r.per_type_latency_ms == {'coder': 400.0}
        assert (r.preemption_count, r.critical_inversion_count) == (1, 1)
        assert (r.offload_count, r.upload_stall_count) == (1, 1)
        assert r.makespan_ms == 1100.0
        assert r.tokens_per_second == pytest.approx(30 * 1000.0 / 1100.0)
        assert r.stalled_fraction_peak == pytest.approx(0.1)
        assert not r.partial

    def test_utilization_in_unit_range(self):
        r = aggregate(sample_trace())
        for timeline in (r.gpu_utilization_timeline, r.effective_utilization_timeline,
                         r.stalled_fraction_timeline):
            assert all(0.0 <= v <= 1.0 for _, v in timeline)

    def test_truncated_is_partial(self):
        r = aggregate(sample_trace(truncated=True))
        assert r.partial
        assert r.completed_apps == 1

    def test_empty_trace(self):
        r = aggregate([])
        assert r.arrived_apps == 0
        assert r.avg_e2e_latency_ms == 0.0

    def test_saved_trace_reaggregates_identically(self, tmp_path):
        trace = sample_trace()
        path = write_trace_jsonl(trace, tmp_path / 'trace.jsonl')
        loaded = read_trace_jsonl(path)
        assert trace_digest(loaded) == trace_digest(trace)
        assert aggregate(loaded).to_dict() == aggregate(trace).to_dict()

    def test_gzip_trace(self, tmp_path):
        path = write_trace_jsonl(sample_trace(), tmp_path / 'trace.jsonl.gz')
        assert len(read_trace_jsonl(path)) == len(sample_trace())

    def test_malformed_trace(self, tmp_path):
        path = tmp_path / 'bad.jsonl'
        path.write_text('{"t_ms": 0, "kind": "run_meta"}\nnot json\n')
        with pytest.raises(ValueError):
            read_trace_jsonl(path)


class TestCompare:
    def test_identical_reports(self):
        table = compare([report('retain'), report('tokencake')], ['retain', 'tokencake'])
        assert len(table.rows) == 1
        row = table.rows[0]
        assert row.latency_ratio == 1.0
        assert row.p95_ratio == 1.0
        assert row.effective_utilization_delta == 0.0

    def test_ratio_and_seed_average(self):
        reports = [report('retain', seed=1, latency=1000.0), report('retain', seed=2, latency=3000.0),
                   report('tokencake', seed=1, latency=500.0), report('tokencake', seed=2, latency=1500.0)]
        table = compare(reports, [r.policy for r in reports])
        row = table.rows[0]
        assert row.runs == 2
        assert row.baseline_latency_ms == 2000.0
        assert row.latency_ratio == pytest.approx(0.5)
        assert 'eff_util' in table.to_text()

    def test_utilization_column(self, tmp_path):
        table = compare([report('retain'), report('evict')], ['retain', 'evict'])
        path = write_comparison_csv(table, tmp_path / 'compare.csv')
        header = path.read_text().splitlines()[0].split(',')
        assert 'effective_utilization_delta' in header

    def test_scenario_mismatch(self):
        with pytest.raises(ScenarioMismatchError):
            compare([report('retain'), report('tokencake', scenario='other')], ['retain', 'tokencake'])

    def test_missing_baseline_point(self):
        with pytest.raises(ScenarioMismatchError):
            compare([report('retain', qps=0.5), report('tokencake', qps=1.0)], ['retain', 'tokencake'])

    def test_too_few_reports(self):
        with pytest.raises(ValueError):
            compare([report()], ['retain'])


class TestSerialization:
    def test_csv_round_trip_is_identity(self, tmp_path):
        reports = [aggregate(sample_trace()), report('evict', per_type_latency_ms={'a': 1.25, 'b': 3.0})]
        first = write_reports_csv(reports, tmp_path / 'a.csv')
        second = write_reports_csv(read_reports_csv(first), tmp_path / 'b.csv')
        assert first.read_bytes() == second.read_bytes()
        assert first.read_text().splitlines()[0].split(',') == REPORT_CSV_FIELDS

    def test_jsonl_round_trip_is_identity(self, tmp_path):
        reports = [aggregate(sample_trace()), report('evict')]
        first = write_reports_jsonl(reports, tmp_path / 'a.jsonl')
        second = write_reports_jsonl(read_reports_jsonl(first), tmp_path / 'b.jsonl')
        assert first.read_bytes() == second.read_bytes()


class TestPlotData:
    def test_one_file_per_figure(self, tmp_path):
        reports = [report(p, qps=q) for p in ('retain', 'tokencake') for q in (0.25, 1.0)]
        reports[0].gpu_utilization_timeline = [[0.0, 0.5]]
        reports[0].effective_utilization_timeline = [[0.0, 0.4]]
        reports[0].stalled_fraction_timeline = [[0.0, 0.1]]
        paths = write_plot_data(reports, tmp_path / 'plots')
        assert [p.name for p in paths] == list(PLOT_FILES) + ['plots.gp']
        assert all(p.exists() for p in paths)
        latency = (tmp_path / 'plots' / 'latency_vs_qps.dat').read_text().splitlines()
        assert latency[0] == 'qps retain tokencake'
        assert len(latency) == 3
