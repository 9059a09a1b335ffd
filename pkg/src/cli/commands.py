# src/cli/commands.py
# Subcommand bodies. Each command computes every output in memory first and
# only then writes its files, so a failure leaves no partial output behind.

import logging
from pathlib import Path
from fractions import Fraction
from typing import Any, Dict, List, Tuple

import numpy as np
import pandas as pd

from src.cli.gantt import render_gantt
from src.cli.config import GaeCheck, RunConfig
from src.core.errors import ConfigError
from src.fusion.layout import FusionLayout, transform_problem
from src.fusion.schedule import (
    peak_memory,
    serial_makespan,
    serial_peak_memory,
)
from src.numerics.gae import GaeInputs, gae_matrix, gae_recursive
from src.genfuse.sweep import sweep_threshold, simulate_at_ratio
from src.cli.schedule_io import dump_json, write_atomic, format_schedule
from src.annealer.bounds import lower_bound
from src.annealer.greedy import greedy_schedule
from src.annealer.oracle import exhaustive_oracle
from src.annealer.search import memory_pass, multi_seed_search
from src.pipeline.baseline import bubble_fraction, schedule_1f1b, schedule_interleaved
from src.workflow.iteration import MODES, plan_strategies, format_breakdown, simulate_iteration

logger = logging.getLogger(__name__)

ITERATE_MODES = MODES + ('both',)


def _write_all(out: Path, files: Dict[str, str]) -> List[Path]:
    paths = []
    for name, content in files.items():
        path = Path(out) / name
        write_atomic(path, content)
        paths.append(path)
    logger.info("wrote %s", ", ".join(str(p) for p in paths))
    return paths


def build_layout_from_config(config: RunConfig) -> FusionLayout:
    problem = config.require('schedule')
    return transform_problem(
        problem.model_a,
        problem.strategy_a,
        problem.model_b,
        problem.strategy_b,
        global_batch=problem.global_batch,
        microbatch_size=problem.microbatch_size,
        cluster=config.cluster,
        cost=config.cost,
        seq_len=problem.seq_len,
        layer_split=problem.layer_split,
        comm=problem.comm,
    )


def _stats_text(stats: Dict[str, Any], chains_text: str) -> str:
    lines = [
        f"layout {stats['layout']}",
        f"energy {stats['energy']:.9f}",
        f"lower_bound {stats['lower_bound']:.9f}",
        f"gap {stats['gap']:.6f}",
        f"greedy_energy {stats['greedy_energy']:.9f}",
        f"serial_1f1b {stats['serial_makespan']:.9f}",
        f"speedup_vs_serial {stats['speedup_vs_serial']:.6f}",
        "",
        "stage,peak_bytes,serial_peak_bytes,ratio",
    ]
    for p, (peak, ref) in enumerate(zip(stats['peak_memory'], stats['serial_peak_memory'])):
        ratio = peak / ref if ref else float('nan')
        lines.append(f"{p},{peak:.1f},{ref:.1f},{ratio:.6f}")
    return "\n".join(lines) + "\n\n" + chains_text


def cmd_schedule(config: RunConfig, out: Path, n_jobs: int = None) -> Dict[str, Any]:
    """
    Layout -> greedy -> multi-seed annealing -> memory pass. Writes
    schedule.txt, schedule.svg, stats.txt and stats.json under `out`.
    """
    layout = build_layout_from_config(config)
    best, report = multi_seed_search(layout, config.anneal, config.num_chains, n_jobs=n_jobs)
    final, frozen = memory_pass(best, layout, config.anneal)
    serial = serial_makespan(layout)
    serial_peak = serial_peak_memory(layout)
    bound = lower_bound(layout)
    stats = {
        'layout': layout.describe(),
        'energy': final.energy,
        'lower_bound': bound,
        'gap': final.energy / bound - 1.0 if bound else 0.0,
        'greedy_energy': report.greedy_energy,
        'serial_makespan': serial,
        'speedup_vs_serial': serial / final.energy if final.energy else float('nan'),
        'peak_memory': peak_memory(final, layout),
        'serial_peak_memory': serial_peak,
        'num_chains': config.num_chains,
        'seed': config.anneal.rng_seed,
        'best_seed': report.best_seed,
        'memory_pass_frozen': frozen,
    }
    title = f"fused makespan {final.energy:.6g} s, serial 1F1B {serial:.6g} s"
    _write_all(
        out,
        {
            'schedule.txt': format_schedule(final),
            'schedule.svg': render_gantt(final, layout, serial_peak, title=title),
            'stats.txt': _stats_text(stats, report.to_text()),
            'stats.json': dump_json(stats),
        },
    )
    return stats


def cmd_sweep_rt(config: RunConfig, out: Path, n_jobs: int = None) -> Dict[str, Any]:
    """Writes sweep_rt.csv (one row per ratio, ratio 0 = serial), sweep_rt.txt and
    the event timeline of the best ratio."""
    setup = config.require('generation')
    best, curve = sweep_threshold(setup, config.cluster, config.cost, config.sweep_grid, n_jobs=n_jobs)
    serial = float(curve.loc[curve['ratio'] == 0.0, 'total_seconds'].iloc[0])
    best_row = curve.loc[curve['ratio'] == best].iloc[0]
    result = simulate_at_ratio(setup, config.cluster, best, config.cost)
    summary = {
        'serial_seconds': serial,
        'best_ratio': best,
        'best_r_t': int(best_row['r_t']),
        'best_seconds': float(best_row['total_seconds']),
        'speedup': serial / float(best_row['total_seconds']),
        'mechanism': str(best_row['mechanism']),
        'destinations': int(best_row['m']),
        'preserved_everywhere': bool(curve['preserved'].all()),
    }
    report = "\n".join(f"{k} {v}" for k, v in summary.items()) + "\n"
    _write_all(
        out,
        {
            'sweep_rt.csv': curve.to_csv(index=False, float_format='%.9f'),
            'sweep_rt.txt': report,
            'timeline_best.csv': result.timeline_text(),
        },
    )
    return summary


def _strategies_text(table: pd.DataFrame) -> str:
    lines = [f"{'task':<16}{'searched':>12}{'seconds':>12}{'configured':>12}{'seconds':>12}"]
    for row in table.itertuples(index=False):
        searched = f"{row.dp}x{row.pp}x{row.tp}"
        configured = row.configured or '-'
        seconds = f"{row.configured_seconds:.3f}" if row.configured else '-'
        lines.append(f"{row.task:<16}{searched:>12}{row.seconds:>12.3f}{configured:>12}{seconds:>12}")
    return "\n".join(lines) + "\n"


def cmd_iterate(config: RunConfig, out: Path, mode: str = 'both', n_jobs: int = None) -> Dict[str, Any]:
    if mode not in ITERATE_MODES:
        raise ConfigError(f"mode must be one of {ITERATE_MODES}, got {mode!r}", code="config.mode")
    iteration = config.require('iteration')
    modes = MODES if mode == 'both' else (mode,)
    breakdowns = {
        m: simulate_iteration(iteration, config.cluster, m, config.cost, n_jobs) for m in modes
    }
    data: Dict[str, Any] = {m: b.to_dict() for m, b in breakdowns.items()}
    if mode == 'both':
        base, fused = breakdowns['base'], breakdowns['fused']
        data['speedup'] = {
            'gen_plus_inf': base.gen_plus_inf / fused.gen_plus_inf,
            'train': base.train / fused.train,
            'total': base.total / fused.total,
        }
        text = format_breakdown(base, fused)
    else:
        b = breakdowns[mode]
        text = (
            f"{'stage':<10}{mode + '_s':>14}\n"
            f"{'Gen.+Inf.':<10}{b.gen_plus_inf:>14.3f}\n"
            f"{'Train':<10}{b.train:>14.3f}\n"
            f"{'Others':<10}{b.others:>14.3f}\n"
            f"{'Total':<10}{b.total:>14.3f}\n"
        )
    strategies = plan_strategies(iteration, config.cluster, config.cost)
    data['strategies'] = strategies.to_dict(orient='records')
    text += "\n" + _strategies_text(strategies)
    _write_all(
        out,
        {
            'iterate.txt': text,
            'iterate.json': dump_json(data),
            'strategies.csv': strategies.to_csv(index=False, float_format='%.9g'),
        },
    )
    data['text'] = text
    return data


def baseline_rows(N: int, M: int, K: int, fwd: float, bwd: float, comm: float = 0.0) -> pd.DataFrame:
    """Simulated versus closed-form bubble fraction of 1F1B and, for K > 1,
    interleaved 1F1B."""
    fwd_s, bwd_s, comm = Fraction(fwd), Fraction(bwd), Fraction(comm)
    runs: List[Tuple[str, int, Any]] = [('1f1b', 1, schedule_1f1b(N, M, [fwd_s] * N, [bwd_s] * N, comm))]
    if K > 1:
        runs.append(('interleaved', K, schedule_interleaved(N, M, K, [fwd_s] * N, [bwd_s] * N, comm)))
    rows = []
    for name, k, trace in runs:
        measured = trace.measured_bubble_fraction(0)
        expected = bubble_fraction(N, M, k)
        rows.append(
            {
                'schedule': name,
                'stages': N,
                'microbatches': M,
                'chunks': k,
                'makespan': float(trace.makespan),
                'measured_bubble': str(measured),
                'formula_bubble': str(expected),
                'matches': measured == expected,
            }
        )
    return pd.DataFrame(rows)


def cmd_baselines(config: RunConfig, out: Path) -> pd.DataFrame:
    problem = config.require('baselines')
    table = baseline_rows(
        problem.stages, problem.microbatches, problem.chunks, problem.fwd, problem.bwd, problem.comm
    )
    _write_all(out, {'baselines.csv': table.to_csv(index=False)})
    return table


def cmd_oracle(config: RunConfig, out: Path, n_jobs: int = None) -> Dict[str, Any]:
    """Exhaustive optimum of a tiny layout next to the heuristic chain
    LB <= oracle <= anneal <= greedy <= serial."""
    layout = build_layout_from_config(config)
    oracle = exhaustive_oracle(layout)
    greedy = greedy_schedule(layout)
    best, _ = multi_seed_search(layout, config.anneal, config.num_chains, n_jobs=n_jobs)
    values = {
        'lower_bound': lower_bound(layout),
        'oracle': oracle.energy,
        'anneal': best.energy,
        'greedy': greedy.energy,
        'serial': serial_makespan(layout),
    }
    chain = list(values.values())
    tol = 1e-9 * max(chain)
    data = dict(values)
    data['nodes'] = oracle.nodes
    data['ordered'] = all(a <= b + tol for a, b in zip(chain, chain[1:]))
    data['anneal_optimal'] = best.energy <= oracle.energy + tol
    if not data['ordered']:
        logger.warning("ordering chain violated: %s", values)
    _write_all(out, {'oracle.json': dump_json(data)})
    return data


def cmd_gae_check(check: GaeCheck, out: Path) -> Dict[str, Any]:
    """Random paired evaluations of the recursive and matrix GAE forms."""
    rng = np.random.default_rng(check.seed)
    worst = 0.0
    failures = 0
    for _ in range(check.instances):
        horizon = int(rng.integers(1, check.max_horizon + 1))
        inputs = GaeInputs(
            rewards=rng.uniform(-10, 10, horizon),
            values=rng.uniform(-10, 10, horizon + 1),
            gamma=check.gamma,
            lam=check.lam,
        )
        recursive = gae_recursive(inputs)
        matrix = gae_matrix(inputs)
        scale = max(float(np.max(np.abs(recursive))), 1e-300)
        err = float(np.max(np.abs(matrix - recursive))) / scale
        worst = max(worst, err)
        failures += err > check.tolerance
    data = {
        'instances': check.instances,
        'max_horizon': check.max_horizon,
        'gamma': check.gamma,
        'lam': check.lam,
        'max_relative_error': worst,
        'tolerance': check.tolerance,
        'failures': int(failures),
        'passed': failures == 0,
    }
    _write_all(out, {'gae_check.json': dump_json(data)})
    return data
