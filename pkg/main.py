#!/usr/bin/env python3
"""
Tokencake Sim - Command-line entry point

Subcommands:
- run:        one scenario under one policy -> trace.jsonl + report
- sweep:      QPS grid x policies x seeds -> reports + comparison table
- report:     aggregate saved traces again
- plot:       line-chart data files + gnuplot script from saved reports
- calibrate:  transfer vs recompute cost table
- microbench: offload/upload cycles, host buffer and gradual reservation on/off

Exit status: 0 ok, 2 bad input (missing/malformed file or value), 1 anything else.

Usage:
    python main.py run --scenario config/scenarios/code_writer.yaml --policy tokencake --seed 3
    python main.py sweep --scenario config/scenarios/code_writer.yaml --workers 4 --out results/cw
"""

import asyncio
import os
import sys
from pathlib import Path

import yaml
from dotenv import load_dotenv
from loguru import logger

from src.agent_graph import GraphError
from src.block_memory import TransferCostModel
from src.experiments import (
    DEFAULT_POLICIES,
    calibration_table,
    microbench,
    run_sweep_async,
    summarize_microbench,
)
from src.metrics import (
    ScenarioMismatchError,
    aggregate,
    compare,
    read_reports_jsonl,
    read_trace_jsonl,
    write_comparison_csv,
    write_plot_data,
    write_reports_csv,
    write_reports_jsonl,
    write_trace_jsonl,
)
from src.sim_engine import Policy, run
from src.workload import ConfigError, load_config, load_scenario


ROOT = Path(__file__).resolve().parent
DEFAULT_CONFIG = 'config/tokencake_sim.yaml'
LOG_LEVELS = {'error': 'ERROR', 'info': 'INFO', 'debug': 'DEBUG'}

BAD_INPUT = (FileNotFoundError, ConfigError, GraphError, ScenarioMismatchError, yaml.YAMLError, ValueError)


class SimulationApp:
    """Loads configuration and runs one CLI subcommand"""

    def __init__(self, config_path: Path):
        """
        Initialize application

        Args:
            config_path: base configuration (YAML)
        """
        if not config_path.exists():
            raise FileNotFoundError(f"Config file not found: {config_path}")
        self.config_path = config_path
        self.config = load_config(config_path)

    def out_dir(self, args) -> Path:
        out = Path(args.out or self.config.get('output', {}).get('dir', 'results'))
        out.mkdir(parents=True, exist_ok=True)
        return out

    def write_reports(self, reports, out: Path, fmt: str) -> Path:
        if fmt == 'csv':
            return write_reports_csv(reports, out / 'report.csv')
        return write_reports_jsonl(reports, out / 'report.jsonl')

    def scenario(self, args):
        scenario = load_scenario(Path(args.scenario), self.config)
        return scenario.with_params(qps=args.qps, seed=args.seed)

    async def cmd_run(self, args) -> int:
        scenario = self.scenario(args)
        out = self.out_dir(args)
        result = run(scenario, args.policy)
        write_trace_jsonl(result.trace, out / 'trace.jsonl')
        report_path = self.write_reports([result.report], out, args.format)

        r = result.report
        logger.success(f"✅ {r.policy} qps={r.qps:g} seed={r.seed}: {r.completed_apps}/{r.arrived_apps} apps, "
                       f"avg e2e {r.avg_e2e_latency_ms:.1f} ms (p95 {r.p95_e2e_latency_ms:.1f}), "
                       f"effective util {r.effective_utilization_mean:.3f}")
        if result.truncated:
            logger.warning("⚠️ Run hit the horizon; metrics are partial")
        logger.info(f"Wrote {out / 'trace.jsonl'} and {report_path}")
        return 0

    async def cmd_sweep(self, args) -> int:
        scenario = load_scenario(Path(args.scenario), self.config)
        sweep_cfg = self.config.get('sweep', {})
        qps_grid = _floats(args.qps_grid) if args.qps_grid else sweep_cfg.get('qps_grid', [0.05, 0.25, 0.5, 1.0])
        seeds = _ints(args.seeds) if args.seeds else sweep_cfg.get('seeds', [1, 2, 3, 4, 5])
        policies = args.policies.split(',') if args.policies else list(sweep_cfg.get('policies', DEFAULT_POLICIES))
        workers = args.workers or int(sweep_cfg.get('workers', 1))
        out = self.out_dir(args)

        outcomes = await run_sweep_async(scenario, qps_grid, policies, seeds, workers,
                                         out_dir=out if args.save_traces else None)
        reports = [o.report for o in outcomes]
        self.write_reports(reports, out, args.format)
        write_reports_jsonl(reports, out / 'reports.jsonl')

        table = compare(reports, [o.policy for o in outcomes])
        write_comparison_csv(table, out / 'compare.csv')
        logger.info("\n" + table.to_text())
        logger.success(f"✅ Sweep done: {len(reports)} runs -> {out}")
        return 0

    async def cmd_report(self, args) -> int:
        reports = []
        for path in args.traces:
            path = Path(path)
            if not path.exists():
                raise FileNotFoundError(f"Trace file not found: {path}")
            reports.append(aggregate(read_trace_jsonl(path)))
        out = self.out_dir(args)
        report_path = self.write_reports(reports, out, args.format)
        for r in reports:
            logger.info(f"{r.policy} qps={r.qps:g} seed={r.seed}: avg e2e {r.avg_e2e_latency_ms:.1f} ms, "
                        f"abnormal {r.abnormal_agent_count}, inversions {r.critical_inversion_count}"
                        f"{' (partial)' if r.partial else ''}")
        logger.success(f"✅ {len(reports)} report(s) -> {report_path}")
        return 0

    async def cmd_plot(self, args) -> int:
        path = Path(args.reports)
        if not path.exists():
            raise FileNotFoundError(f"Reports file not found: {path}")
        reports = read_reports_jsonl(path)
        if not reports:
            raise ValueError(f"{path} holds no reports")
        out = Path(args.out) if args.out else path.parent / 'plots'
        paths = write_plot_data(reports, out)
        logger.success(f"✅ Wrote {', '.join(p.name for p in paths)} to {out}")
        return 0

    async def cmd_calibrate(self, args) -> int:
        rows = calibration_table(TransferCostModel.from_config(self.config))
        logger.info(f"{'blocks':>7} {'offload_ms':>11} {'upload_ms':>10} {'roundtrip_ms':>13} "
                    f"{'recompute_ms':>13} {'ratio':>7}")
        for r in rows:
            logger.info(f"{r.blocks:>7} {r.offload_ms:>11.2f} {r.upload_ms:>10.2f} {r.roundtrip_ms:>13.2f} "
                        f"{r.recompute_ms:>13.1f} {r.ratio:>7.1f}")
        if args.out:
            out = self.out_dir(args)
            with open(out / 'calibration.jsonl', 'w') as f:
                for r in rows:
                    f.write(r.to_json() + '\n')
        return 0

    async def cmd_microbench(self, args) -> int:
        rows = microbench(self.config)
        for s in summarize_microbench(rows):
            logger.info(f"buffer={'on ' if s['host_buffer'] else 'off'} gradual={'on ' if s['gradual'] else 'off'}: "
                        f"fresh acquisitions after first cycle={s['fresh_acquisitions_after_first']}, "
                        f"upload stalls={s['upload_stalls']}, overhead={s['overhead_ms'] / 1000.0:.1f} s")
        if args.out:
            out = self.out_dir(args)
            with open(out / 'microbench.jsonl', 'w') as f:
                for r in rows:
                    f.write(r.to_json() + '\n')
        return 0


def _floats(text: str):
    return [float(x) for x in text.split(',') if x.strip()]


def _ints(text: str):
    return [int(x) for x in text.split(',') if x.strip()]


def build_parser():
    import argparse

    parser = argparse.ArgumentParser(description="KV-cache-centric agent serving simulator")
    parser.add_argument('--config', type=str, default=DEFAULT_CONFIG, help='Base config file path')
    sub = parser.add_subparsers(dest='command', required=True)

    def add_output(p):
        p.add_argument('--out', type=str, default=None, help='Output directory')
        p.add_argument('--format', choices=['csv', 'jsonl'], default='csv', help='Report format')

    p = sub.add_parser('run', help='Run one scenario under one policy')
    p.add_argument('--scenario', required=True, help='Scenario file path')
    p.add_argument('--policy', choices=[x.value for x in Policy], default='tokencake')
    p.add_argument('--seed', type=int, default=None, help='Override the scenario seed')
    p.add_argument('--qps', type=float, default=None, help='Override the scenario QPS')
    add_output(p)

    p = sub.add_parser('sweep', help='QPS grid x policies x seeds')
    p.add_argument('--scenario', required=True, help='Scenario file path')
    p.add_argument('--policies', type=str, default=None, help='Comma-separated policies (first is the baseline)')
    p.add_argument('--qps-grid', type=str, default=None, help='Comma-separated QPS values')
    p.add_argument('--seeds', type=str, default=None, help='Comma-separated seeds')
    p.add_argument('--workers', type=int, default=None, help='Parallel worker processes')
    p.add_argument('--save-traces', action='store_true', help='Write one trace per run under <out>/traces')
    add_output(p)

    p = sub.add_parser('report', help='Aggregate saved traces')
    p.add_argument('traces', nargs='+', help='trace.jsonl files')
    add_output(p)

    p = sub.add_parser('plot', help='Emit plot data files from saved reports')
    p.add_argument('--reports', required=True, help='reports.jsonl written by sweep')
    p.add_argument('--out', type=str, default=None, help='Output directory (default: <reports dir>/plots)')

    p = sub.add_parser('calibrate', help='Transfer vs recompute cost table')
    p.add_argument('--out', type=str, default=None)

    p = sub.add_parser('microbench', help='Offload/upload burst micro-benchmark')
    p.add_argument('--out', type=str, default=None)
    return parser


def configure_logging(config: dict):
    section = config.get('logging', {})
    level = LOG_LEVELS.get(os.environ.get('TOKENCAKE_SIM_LOG', '').lower(), section.get('level', 'INFO'))
    logger.remove()
    logger.add(sys.stderr, level=level)
    if section.get('file', False):
        logger.add(
            str(ROOT / "logs/tokencake_sim_{time:YYYY-MM-DD}.log"),
            rotation="1 day",
            retention="30 days",
            level="DEBUG"
        )


async def main(argv=None) -> int:
    """Main entry point"""
    load_dotenv()
    args = build_parser().parse_args(argv)

    logger.remove()
    logger.add(sys.stderr, level=LOG_LEVELS.get(os.environ.get('TOKENCAKE_SIM_LOG', '').lower(), 'INFO'))

    try:
        config_path = Path(args.config)
        if not config_path.is_absolute() and not config_path.exists():
            config_path = ROOT / args.config
        app = SimulationApp(config_path)
        configure_logging(app.config)
        handler = getattr(app, f"cmd_{args.command}")
        return await handler(args)
    except BAD_INPUT as e:
        logger.error(f"❌ {e}")
        return 2
    except Exception as e:
        logger.exception(f"❌ {args.command} failed: {e}")
        return 1


if __name__ == '__main__':
    sys.exit(asyncio.run(main()))
