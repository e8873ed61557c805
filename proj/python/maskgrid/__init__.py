"""Desk-scale masked multi-codebook grid modeling toolkit."""

from maskgrid._core import (
    DurationWeights,
    MaskgridError,
    Model,
    SamplerConfig,
    ToySpec,
    UnmaskSchedule,
    build_schedule,
    estimate_duration,
    lr_at,
    pack,
    plan_full_random,
    plan_resample,
    run_cli,
    text_weight,
    toy_sim,
    toy_wer,
    transduce,
)

__all__ = [
    "DurationWeights",
    "MaskgridError",
    "Model",
    "SamplerConfig",
    "ToySpec",
    "UnmaskSchedule",
    "build_schedule",
    "estimate_duration",
    "lr_at",
    "pack",
    "plan_full_random",
    "plan_resample",
    "run_cli",
    "text_weight",
    "toy_sim",
    "toy_wer",
    "transduce",
]
