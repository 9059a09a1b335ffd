# src/annealer/ablation.py
# Named fused-schedule experiments: the model/stage/batch grid comparing greedy,
# annealed and lower-bound speedups over serial 1F1B, plus the case study.

import sys
import math
import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Iterable, Optional

import pandas as pd
from tqdm import tqdm

from src.core.specs import LLAMA, CostModel, ClusterSpec, ParallelStrategy
from src.fusion.layout import FusionLayout, transform_problem
from src.fusion.schedule import peak_memory, serial_makespan, serial_peak_memory
from src.pipeline.baseline import makespan_1f1b
from src.annealer.anneal import AnnealParams
from src.annealer.bounds import lower_bound
from src.annealer.greedy import greedy_schedule
from src.annealer.search import memory_pass, multi_seed_search

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AblationSetting:
    model_a: str
    model_b: str
    pp_a: int
    pp_b: int
    gbs: int
    tp: int = 8
    seq_len: int = 1024

    @property
    def name(self) -> str:
        return f"{self.model_a}/{self.model_b} pp{self.pp_a}/{self.pp_b} gbs{self.gbs}"


def _grid() -> List[AblationSetting]:
    settings = []
    for model_a, model_b, pp_a, pp_bs in (('33B', '13B', 8, (4, 8)), ('65B', '33B', 16, (8, 16))):
        for pp_b in pp_bs:
            for factor in (1, 2, 4):
                settings.append(AblationSetting(model_a, model_b, pp_a, pp_b, pp_a * factor))
    return settings


ABLATION_SETTINGS = _grid()
CASE_STUDY = AblationSetting('65B', '33B', 16, 8, 16)
# slower cooling and more neighbors per temperature than the CLI default
SEARCH_PARAMS = AnnealParams(alpha=0.995, neighbors_per_temperature=4)


def build_setting_layout(setting: AblationSetting, cost: CostModel = None) -> FusionLayout:
    """One fused unit: N = lcm(pp_a, pp_b) stages of tp GPUs, micro-batch size 1."""
    stages = math.lcm(setting.pp_a, setting.pp_b)
    num_gpus = stages * setting.tp
    cluster = ClusterSpec(
        num_gpus=num_gpus,
        gpus_per_node=setting.tp,
        activation_capacity_per_stage=float('inf'),
        kv_capacity_per_instance=80e9,
        bs_max=256,
        interconnect_bandwidth=100e9,
    )
    strat_a = ParallelStrategy(num_gpus // (setting.pp_a * setting.tp), setting.pp_a, setting.tp)
    strat_b = ParallelStrategy(num_gpus // (setting.pp_b * setting.tp), setting.pp_b, setting.tp)
    return transform_problem(
        LLAMA[setting.model_a],
        strat_a,
        LLAMA[setting.model_b],
        strat_b,
        global_batch=setting.gbs,
        microbatch_size=1,
        cluster=cluster,
        cost=cost,
        seq_len=setting.seq_len,
        layer_split='fractional',
    )


def shallow_makespan(layout: FusionLayout) -> Optional[float]:
    """
    Serial 1F1B of both models with half the stages and half the micro-batches
    per pipeline (twice the data parallelism).
    """
    total = 0.0
    for i, model in enumerate(('A', 'B') if layout.has_b else ('A',)):
        stages, micro = layout.stages_of(model), layout.microbatches_of(model)
        if stages % 2 or micro % 2:
            return None
        half = stages // 2
        fwd = [2 * x for x in layout.fwd_latency[i][:half]]
        bwd = [2 * x for x in layout.bwd_latency[i][:half]]
        total += makespan_1f1b(half, micro // 2, fwd, bwd, layout.comm)
    return total


def run_setting(
    setting: AblationSetting,
    params: AnnealParams = None,
    num_chains: int = 16,
    n_jobs: int = None,
    cost: CostModel = None,
) -> Dict[str, Any]:
    layout = build_setting_layout(setting, cost)
    params = params or SEARCH_PARAMS
    greedy = greedy_schedule(layout)
    best, report = multi_seed_search(layout, params, num_chains, None, n_jobs)
    compact, frozen = memory_pass(best, layout, params)
    serial = serial_makespan(layout)
    serial_peak = max(serial_peak_memory(layout))
    shallow = shallow_makespan(layout)
    row = {
        'setting': setting.name,
        'models': f"{setting.model_a}/{setting.model_b}",
        'pp_a': setting.pp_a,
        'pp_b': setting.pp_b,
        'gbs': setting.gbs,
        'shallow_speedup': serial / shallow if shallow else float('nan'),
        'greedy_speedup': serial / report.greedy_energy,
        'annealed_speedup': serial / best.energy,
        'lb_speedup': serial / lower_bound(layout),
        'greedy_peak_ratio': max(peak_memory(greedy, layout)) / serial_peak,
        'annealed_peak_ratio': max(peak_memory(compact, layout)) / serial_peak,
        'gap': report.gap,
        'memory_pass_frozen': frozen,
    }
    logger.info(
        "%s: greedy %.3f annealed %.3f lb %.3f",
        setting.name,
        row['greedy_speedup'],
        row['annealed_speedup'],
        row['lb_speedup'],
    )
    return row


def run_grid(
    settings: Iterable[AblationSetting] = None,
    params: AnnealParams = None,
    num_chains: int = 16,
    n_jobs: int = None,
    cost: CostModel = None,
) -> pd.DataFrame:
    settings = list(settings or ABLATION_SETTINGS)
    rows = [
        run_setting(s, params, num_chains, n_jobs, cost)
        for s in tqdm(settings, desc="ablation", disable=not sys.stderr.isatty())
    ]
    return pd.DataFrame(rows)
