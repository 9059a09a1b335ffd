# src/annealer/search.py
# Independent annealing chains with derived seeds, reduced to the best schedule.

import os
import logging
from dataclasses import field, replace, dataclass
from typing import List, Tuple

from joblib import Parallel, delayed

from src.core.errors import ConfigError, NeighborFrozenError
from src.fusion.layout import FusionLayout
from src.fusion.schedule import FusedSchedule, evaluate, peak_memory
from src.annealer.anneal import AnnealParams, anneal, optimize_memory
from src.annealer.bounds import lower_bound
from src.annealer.construct import seed_schedules

logger = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1


def splitmix64(seed: int, index: int) -> int:
    """Seed of chain `index`, a splitmix64 step over seed + index * golden gamma."""
    z = (seed + index * 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def chain_seed(seed: int, index: int) -> int:
    return seed if index == 0 else splitmix64(seed, index)


def default_n_jobs() -> int:
    return int(os.getenv('FUSEPLAN_N_JOBS', '1'))


@dataclass
class ChainResult:
    seed: int
    energy: float
    peak: float
    start_energy: float = 0.0
    frozen: bool = False


@dataclass
class SearchReport:
    chains: List[ChainResult] = field(default_factory=list)
    best_seed: int = 0
    best_energy: float = 0.0
    lower_bound: float = 0.0
    greedy_energy: float = 0.0

    @property
    def gap(self) -> float:
        """Relative distance of the best energy above the lower bound."""
        if not self.lower_bound:
            return 0.0
        return self.best_energy / self.lower_bound - 1.0

    def to_text(self) -> str:
        lines = ["chain,seed,start_energy,energy,peak_bytes,frozen"]
        for i, chain in enumerate(self.chains):
            lines.append(
                f"{i},{chain.seed},{chain.start_energy:.9f},{chain.energy:.9f},"
                f"{chain.peak:.1f},{int(chain.frozen)}"
            )
        lines.append(f"greedy_energy {self.greedy_energy:.9f}")
        lines.append(f"best_energy {self.best_energy:.9f} (seed {self.best_seed})")
        lines.append(f"lower_bound {self.lower_bound:.9f}")
        lines.append(f"gap {self.gap:.6f}")
        return "\n".join(lines) + "\n"


def _run_chain(initial: FusedSchedule, layout: FusionLayout, params: AnnealParams):
    try:
        best, frozen = anneal(initial, layout, params), False
    except NeighborFrozenError as exc:
        logger.warning("chain seed=%d froze, keeping its best schedule", params.rng_seed)
        best, frozen = exc.best, True
    return best.uid_rows(), best.energy, frozen


def multi_seed_search(
    layout: FusionLayout,
    params: AnnealParams = None,
    num_chains: int = 1,
    initial: FusedSchedule = None,
    n_jobs: int = None,
) -> Tuple[FusedSchedule, SearchReport]:
    """
    Run `num_chains` independent anneal chains and keep the best result.

    Chain 0 uses params.rng_seed, chain k uses splitmix64(rng_seed, k). Without
    an explicit `initial`, chain k starts from seed schedule k modulo the number
    of seed schedules, chain 0 from the greedy schedule. Ties in energy go to
    the lower peak memory, then to the lower seed, so the outcome only depends
    on (layout, params, num_chains). Frozen chains contribute the best schedule
    they reached and are flagged in the report.

    Args:
        layout: Fusion layout
        params: Annealing parameters
        num_chains: Number of chains (>= 1)
        initial: Starting schedule for every chain
        n_jobs: joblib workers, FUSEPLAN_N_JOBS by default
    Returns:
        Best schedule and the search report
    """
    if num_chains < 1:
        raise ConfigError(f"num_chains must be >= 1, got {num_chains}", code="config.chains")
    params = params or AnnealParams()
    if initial is None:
        starts = seed_schedules(layout)
    else:
        starts = [initial if initial.timeline is not None else evaluate(initial, layout)]
    chain_starts = [starts[k % len(starts)] for k in range(num_chains)]
    n_jobs = n_jobs or default_n_jobs()
    seeds = [chain_seed(params.rng_seed, k) for k in range(num_chains)]
    logger.info("running %d anneal chains on %d workers", num_chains, n_jobs)

    outputs = Parallel(n_jobs=n_jobs)(
        delayed(_run_chain)(start, layout, replace(params, rng_seed=seed))
        for start, seed in zip(chain_starts, seeds)
    )

    candidates = []
    chains = []
    for seed, start, (rows, energy, frozen) in zip(seeds, chain_starts, outputs):
        schedule = FusedSchedule(tuple(tuple(layout.subtasks[u] for u in row) for row in rows))
        peak = max(peak_memory(schedule, layout), default=0.0)
        chains.append(ChainResult(seed, energy, peak, start.energy, frozen))
        candidates.append(((energy, peak, seed), schedule))
        logger.debug("chain seed=%d energy=%.6g peak=%.6g", seed, energy, peak)
    (best_energy, _, best_seed), best = min(candidates, key=lambda c: c[0])

    report = SearchReport(
        chains=chains,
        best_seed=best_seed,
        best_energy=best_energy,
        lower_bound=lower_bound(layout),
        greedy_energy=starts[0].energy,
    )
    logger.info("best energy %.6g, lower bound %.6g, gap %.4f", best_energy, report.lower_bound, report.gap)
    return evaluate(best, layout), report


def memory_pass(
    schedule: FusedSchedule, layout: FusionLayout, params: AnnealParams = None
) -> Tuple[FusedSchedule, bool]:
    """optimize_memory, keeping the best schedule reached when the pass freezes."""
    try:
        return optimize_memory(schedule, layout, params), False
    except NeighborFrozenError as exc:
        logger.warning("memory pass froze, keeping peak %.6g", max(peak_memory(exc.best, layout), default=0.0))
        return exc.best, True
