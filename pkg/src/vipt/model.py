"""Glue between configs, the parameter store and the forward passes."""

from __future__ import annotations

from .config import ViPTConfig
from .foundation import BoxPrediction, foundation_specs, forward_foundation
from .params import ParamSpec, ParamStore
from .prompt import forward_prompted, prompt_specs


def model_specs(cfg: ViPTConfig) -> dict[str, ParamSpec]:
    return {**foundation_specs(cfg.foundation), **prompt_specs(cfg.foundation, cfg.prompt)}


def build_store(cfg: ViPTConfig, allocate: bool = True, mode: str | None = None) -> ParamStore:
    """Parameter store for ``cfg``, partitioned by ``mode`` (default ``cfg.tune_mode``).

    Foundation weights draw from ``cfg.foundation_seed`` and prompt weights from
    ``cfg.schedule.seed``, so changing the training seed never changes the
    frozen tracker.
    """
    from .tuner import partition_params

    seeds = {"foundation": cfg.foundation_seed, "prompt": cfg.schedule.seed}
    store = ParamStore.from_specs(model_specs(cfg), allocate=allocate, seeds=seeds)
    return partition_params(store, mode or cfg.tune_mode)


def predict(params, cfg: ViPTConfig, pair, rgb_only: bool = False) -> BoxPrediction:
    """Run the tracker on one sample pair; ``rgb_only`` bypasses every prompt."""
    if rgb_only:
        return forward_foundation(pair.template_rgb, pair.search_rgb, params, cfg.foundation)[1]
    return forward_prompted(
        pair.template_rgb,
        pair.search_rgb,
        pair.template_aux,
        pair.search_aux,
        params,
        cfg.foundation,
        cfg.prompt,
    )[1]
