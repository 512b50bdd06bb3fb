#!/usr/bin/env python3
"""
Command-line tests - exit codes and output files
"""

import asyncio
import csv
from pathlib import Path

import yaml

import main as cli

CONFIG = str(Path(__file__).resolve().parent.parent / 'config' / 'tokencake_sim.yaml')


def write_scenario(path: Path) -> Path:
    path.write_text(yaml.safe_dump({
        'name': 'cli_small',
        'app': 'code_writer',
        'qps': 0.5,
        'duration_s': 10,
        'seed': 2,
        'overrides': {'memory': {'total_device_blocks': 256},
                      'workload': {'lengths': {'default': {'prompt': 64, 'output': 16}}}},
    }))
    return path


def invoke(*argv) -> int:
    return asyncio.run(cli.main(['--config', CONFIG, *argv]))


def test_missing_scenario_exits_2(tmp_path):
    assert invoke('run', '--scenario', str(tmp_path / 'missing.yaml'), '--out', str(tmp_path)) == 2


def test_missing_config_exits_2(tmp_path):
    code = asyncio.run(cli.main(['--config', str(tmp_path / 'nope.yaml'), 'calibrate']))
    assert code == 2


def test_malformed_scenario_exits_2(tmp_path):
    bad = tmp_path / 'bad.yaml'
    bad.write_text('app: code_writer\nqps: -1\nduration_s: 10\n')
    assert invoke('run', '--scenario', str(bad), '--out', str(tmp_path)) == 2


def test_run_writes_trace_and_report(tmp_path):
    scenario = write_scenario(tmp_path / 'scenario.yaml')
    out = tmp_path / 'out'
    assert invoke('run', '--scenario', str(scenario), '--policy', 'retain', '--out', str(out)) == 0
    assert (out / 'trace.jsonl').exists()
    with open(out / 'report.csv') as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 1
    assert rows[0]['policy'] == 'retain'


def test_report_reproduces_run(tmp_path):
    scenario = write_scenario(tmp_path / 'scenario.yaml')
    run_dir, report_dir = tmp_path / 'run', tmp_path / 'report'
    assert invoke('run', '--scenario', str(scenario), '--out', str(run_dir), '--format', 'jsonl') == 0
    assert invoke('report', str(run_dir / 'trace.jsonl'), '--out', str(report_dir), '--format', 'jsonl') == 0
    assert (run_dir / 'report.jsonl').read_bytes() == (report_dir / 'report.jsonl').read_bytes()


def test_sweep_and_plot(tmp_path):
    scenario = write_scenario(tmp_path / 'scenario.yaml')
    out = tmp_path / 'sweep'
    assert invoke('sweep', '--scenario', str(scenario), '--policies', 'retain,tokencake',
                  '--qps-grid', '0.25,0.5', '--seeds', '1', '--out', str(out)) == 0
    with open(out / 'report.csv') as f:
        assert len(list(csv.DictReader(f))) == 4
    assert (out / 'compare.csv').exists()
    assert invoke('plot', '--reports', str(out / 'reports.jsonl')) == 0
    for name in ('latency_vs_qps.dat', 'utilization_timeline.dat', 'abnormal_agents.dat', 'plots.gp'):
        assert (out / 'plots' / name).exists()


def test_calibrate(tmp_path):
    assert invoke('calibrate', '--out', str(tmp_path)) == 0
    assert (tmp_path / 'calibration.jsonl').exists()


def test_graph_node_without_id_exits_2(tmp_path):
    graph = tmp_path / 'broken_graph.yaml'
    graph.write_text(yaml.safe_dump({'nodes': [{'kind': 'agent', 'agent_type': 'coder'}], 'edges': []}))
    scenario = tmp_path / 'scenario.yaml'
    scenario.write_text(yaml.safe_dump({'name': 'broken', 'app': str(graph), 'qps': 0.5, 'duration_s': 10}))
    assert invoke('run', '--scenario', str(scenario), '--out', str(tmp_path / 'out')) == 2


def test_graph_string_node_exits_2(tmp_path):
    graph = tmp_path / 'broken_graph.yaml'
    graph.write_text(yaml.safe_dump({'nodes': ['plan'], 'edges': []}))
    scenario = tmp_path / 'scenario.yaml'
    scenario.write_text(yaml.safe_dump({'name': 'broken', 'app': str(graph), 'qps': 0.5, 'duration_s': 10}))
    assert invoke('run', '--scenario', str(scenario), '--out', str(tmp_path / 'out')) == 2
