# src/annealer/bounds.py
# Makespan lower bound for a fusion layout.

from typing import List

from src.fusion.layout import FusionLayout


def _chunk_terms(layout: FusionLayout, model: str, stage_logical: int):
    i = layout.model_index(model)
    fwd, bwd = layout.fwd_latency[i], layout.bwd_latency[i]
    # earliest arrival: the first micro-batch must cross every earlier stage
    arrival = sum(fwd[:stage_logical]) + stage_logical * layout.comm
    # mandatory suffix: the last backward still has to drain to logical stage 0
    suffix = sum(bwd[:stage_logical]) + stage_logical * layout.comm
    work = layout.microbatches_of(model) * (fwd[stage_logical] + bwd[stage_logical])
    return arrival, work, suffix


def stage_bounds(layout: FusionLayout) -> List[float]:
    """
    Per physical stage, the larger of

    - min arrival over hosted chunks + all hosted work + min suffix, and
    - for each hosted chunk on its own, arrival + work + suffix.
    """
    bounds = []
    for chunks in layout.placement:
        terms = [_chunk_terms(layout, c.model, c.stage_logical) for c in chunks]
        combined = (
            min(t[0] for t in terms) + sum(t[1] for t in terms) + min(t[2] for t in terms)
        )
        separate = max(sum(t) for t in terms)
        bounds.append(max(combined, separate))
    return bounds


def lower_bound(layout: FusionLayout) -> float:
    return max(stage_bounds(layout), default=0.0)
