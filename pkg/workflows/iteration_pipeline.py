# workflows/iteration_pipeline.py
# RLHF iteration simulation using Prefect: base and fused breakdowns, and an
# optional multi-iteration run with periodic threshold refresh.

import os
import sys
from typing import Optional
from datetime import date

from prefect import flow, task, get_run_logger
from prefect.artifacts import create_markdown_artifact

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.cli.config import RunConfig, load_config, output_dir, env_config_path  # noqa: E402
from src.cli.schedule_io import write_atomic  # noqa: E402
from src.workflow.iteration import (  # noqa: E402
    IterationBreakdown,
    plan_strategies,
    format_breakdown,
    simulate_iteration,
    simulate_iterations,
)


@task
def read_config(config_path: str) -> RunConfig:
    config = load_config(config_path)
    config.require('iteration')
    return config


@task
def simulate(config: RunConfig, mode: str) -> IterationBreakdown:
    breakdown = simulate_iteration(config.iteration, config.cluster, mode, config.cost)
    get_run_logger().info("%s: total %.2fs", mode, breakdown.total)
    return breakdown


@task
def plan(config: RunConfig) -> list:
    table = plan_strategies(config.iteration, config.cluster, config.cost)
    logger = get_run_logger()
    for row in table.itertuples(index=False):
        logger.info("%s: dp=%d pp=%d tp=%d, %.3fs", row.task, row.dp, row.pp, row.tp, row.seconds)
    return table.to_dict(orient='records')


@task
def simulate_many(config: RunConfig, iterations: int, resweep_interval: int, out: str) -> None:
    table = simulate_iterations(
        config.iteration, config.cluster, iterations, resweep_interval, config.cost
    )
    write_atomic(output_dir(out) / "iterations.csv", table.to_csv(index=False, float_format='%.9f'))


@task
def publish_report(base: IterationBreakdown, fused: IterationBreakdown) -> None:
    table = format_breakdown(base, fused)
    markdown_report = f"""# RLHF Iteration Breakdown

## {date.today()}

```
{table}```
"""
    create_markdown_artifact(key="rlhf-iteration-report", markdown=markdown_report)


@flow
def iteration_pipeline(
    config_path: Optional[str] = None,
    out: Optional[str] = None,
    iterations: int = 0,
    resweep_interval: Optional[int] = None,
) -> dict:
    """Search task strategies, simulate one iteration in both modes, then optionally several fused iterations"""
    config = read_config(config_path or env_config_path() or "config/iteration.yaml")
    strategies = plan(config)
    base = simulate(config, 'base')
    fused = simulate(config, 'fused')
    publish_report(base, fused)
    if iterations:
        simulate_many(config, iterations, resweep_interval, out)
    return {'base': base.to_dict(), 'fused': fused.to_dict(), 'strategies': strategies}


if __name__ == "__main__":
    import argparse

    parser = argparse.ArgumentParser(description='RLHF iteration pipeline')
    parser.add_argument('--config', default=None, help='YAML run configuration')
    parser.add_argument('--out', default=None, help='Output directory')
    parser.add_argument('--iterations', type=int, default=0, help='Extra fused iterations to simulate')
    parser.add_argument('--resweep-interval', type=int, default=None, help='Refresh the threshold every n iterations')

    args = parser.parse_args()

    iteration_pipeline(
        config_path=args.config,
        out=args.out,
        iterations=args.iterations,
        resweep_interval=args.resweep_interval,
    )
