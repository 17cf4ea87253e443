"""Prompt tuning: parameter partitioning, accounting, AdamW and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from .config import TrainSchedule, ViPTConfig
from .objective import loss_terms, make_target
from .params import ParamStore
from .tensor import Tape, backward

log = logging.getLogger(__name__)

TUNE_MODES = ("prompt_tune", "full_tune", "foundation_only")
LOG_FIELDS = ("step", "epoch", "lr", "loss", "cls", "iou", "l1")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step


class MissingGradientError(RuntimeError):
    pass


def partition_params(store: ParamStore, mode: str) -> ParamStore:
    """Set trainable flags: prompt group only, everything, or nothing."""
    if mode not in TUNE_MODES:
        raise ValueError(f"unknown tuning mode {mode!r}; expected one of {TUNE_MODES}")
    for name, entry in store.items():
        if mode == "full_tune":
            flag = True
        elif mode == "prompt_tune":
            flag = entry.spec.group == "prompt"
        else:
            flag = False
        store.set_trainable(name, flag)
    return store


def count_params(store: ParamStore, which: str = "all") -> int:
    if which == "all":
        return sum(e.spec.size for e in store.entries.values())
    if which == "trainable":
        return sum(e.spec.size for e in store.entries.values() if e.trainable)
    if which == "frozen":
        return sum(e.spec.size for e in store.entries.values() if not e.trainable)
    raise ValueError(f"unknown filter {which!r}")


def adamw_step(
    store: ParamStore,
    lr: float,
    wd: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    step_index: int = 1,
) -> ParamStore:
    """One AdamW update of every trainable entry (``step_index`` counts from 1).

    Weight decay is decoupled and only touches weight matrices.
    """
    b1, b2 = betas
    c1 = 1.0 - b1**step_index
    c2 = 1.0 - b2**step_index
    for name, entry in store.items():
        if not entry.trainable:
            continue
        if entry.grad is None:
            raise MissingGradientError(f"trainable parameter {name!r} has no gradient")
        g = entry.grad
        theta = entry.value.data
        if entry.adam_m is None:
            entry.adam_m = np.zeros_like(theta)
            entry.adam_v = np.zeros_like(theta)
        if wd and entry.spec.decays:
            theta = theta - lr * wd * theta
        entry.adam_m = b1 * entry.adam_m + (1.0 - b1) * g
        entry.adam_v = b2 * entry.adam_v + (1.0 - b2) * g * g
        m_hat = entry.adam_m / c1
        v_hat = entry.adam_v / c2
        entry.value.data = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
    return store


def lr_at(schedule: TrainSchedule, epoch: int) -> float:
    if not 0 <= epoch < schedule.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.epochs})")
    if epoch < schedule.decay_epoch:
        return schedule.base_lr
    return schedule.base_lr / schedule.decay_factor


class PairSource(Protocol):
    def batch(self, step: int, size: int) -> Sequence: ...


@dataclass
class FitResult:
    store: ParamStore
    log: list[dict] = field(default_factory=list)

    @property
    def losses(self) -> np.ndarray:
        return np.array([row["loss"] for row in self.log])


def sample_gradients(store: ParamStore, cfg: ViPTConfig, pair) -> tuple[dict[str, float], dict[str, np.ndarray]]:
    """Loss terms and per-parameter gradients for one sample on a private tape."""
    from .model import predict

    target = make_target(pair.gt_box, cfg.foundation.grid_x)
    with Tape():
        terms = loss_terms(predict(store, cfg, pair), target, cfg.loss)
        grads = backward(terms["total"], write=False)
    values = {k: v.item() for k, v in terms.items()}
    out = {}
    for name in store.trainable_names():
        hit = grads.get(id(store[name]))
        if hit is not None:
            out[name] = hit[1]
    return values, out


def fit(
    cfg: ViPTConfig,
    source: PairSource,
    store: ParamStore | None = None,
    log_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> FitResult:
    """Minimise the mean batch loss over the trainable entries of ``store``.

    Per-sample gradients are summed in sample order and divided by the batch
    size, so a run is a pure function of (config, source, initial store).
    """
    from .model import build_store

    sched = cfg.schedule
    store = store if store is not None else build_store(cfg)
    trainable = store.trainable_names()
    if not trainable:
        raise ValueError("nothing to train: no trainable parameters")
    result = FitResult(store)
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
    try:
        step = 0
        for epoch in range(sched.epochs):
            lr = lr_at(sched, epoch)
            for _ in range(sched.steps_per_epoch):
                pairs = source.batch(step, sched.batch_size)
                sums = {name: None for name in trainable}
                totals = dict.fromkeys(("total", "cls", "iou", "l1"), 0.0)
                for pair in pairs:
                    values, grads = sample_gradients(store, cfg, pair)
                    for k in totals:
                        totals[k] += values[k]
                    for name, g in grads.items():
                        sums[name] = g.copy() if sums[name] is None else sums[name] + g
                n = len(pairs)
                row = {
                    "step": step,
                    "epoch": epoch,
                    "lr": lr,
                    "loss": totals["total"] / n,
                    "cls": totals["cls"] / n,
                    "iou": totals["iou"] / n,
                    "l1": totals["l1"] / n,
                }
                if not math.isfinite(row["loss"]):
                    raise NonFiniteLossError(step, row["loss"])
                for name in trainable:
                    store.entry(name).grad = None if sums[name] is None else sums[name] / n
                adamw_step(store, lr, sched.weight_decay, sched.betas, sched.eps, step + 1)
                result.log.append(row)
                if writer is not None:
                    writer.writerow([row[k] if k in ("step", "epoch") else repr(row[k]) for k in LOG_FIELDS])
                if on_step is not None:
                    on_step(row)
                if step % 100 == 0:
                    log.info("step %d epoch %d lr %.3g loss %.5f", step, epoch, lr, row["loss"])
                step += 1
    finally:
        if fh is not None:
            fh.close()
    store.zero_grad()
    if checkpoint_path is not None:
        from .checkpoint import save_checkpoint

        save_checkpoint(store, checkpoint_path)
    return result


# ---------------------------------------------------------------------------
# accounting and verification helpers used by the CLI


def variant_configs(cfg: ViPTConfig) -> dict[str, tuple[ViPTConfig, str]]:
    from dataclasses import replace

    p = cfg.prompt
    return {
        "vipt-deep": (cfg.replace(prompt=replace(p, mode="vipt", interval=1, placement=None)), "prompt_tune"),
        "vipt-shallow": (cfg.replace(prompt=replace(p, mode="vipt", placement=(1,))), "prompt_tune"),
        "vpt-shallow": (cfg.replace(prompt=replace(p, mode="vpt_sum", deep=False)), "prompt_tune"),
        "vpt-deep": (cfg.replace(prompt=replace(p, mode="vpt_sum", deep=True)), "prompt_tune"),
        "full": (cfg.replace(prompt=replace(p, mode="vipt", interval=1, placement=None)), "full_tune"),
    }


def variant_budgets(cfg: ViPTConfig) -> dict[str, tuple[int, int]]:
    """``{variant: (trainable, total)}`` from shapes alone."""
    from .model import build_store

    out = {}
    for name, (vcfg, mode) in variant_configs(cfg).items():
        store = build_store(vcfg, allocate=False, mode=mode)
        out[name] = (count_params(store, "trainable"), count_params(store, "all"))
    return out


def module_table(store: ParamStore) -> list[tuple[str, int, bool]]:
    """Parameter counts grouped by module prefix (first two name components)."""
    rows: dict[str, list] = {}
    for name, entry in store.items():
        key = ".".join(name.split(".")[:2])
        row = rows.setdefault(key, [0, entry.trainable])
        row[0] += entry.spec.size
    return [(k, v[0], v[1]) for k, v in rows.items()]


def gradcheck_model(store: ParamStore, cfg: ViPTConfig, pair, h: float = 1e-5) -> float:
    """Max relative error of tape gradients of the total loss over all trainable entries."""
    from .model import predict
    from .tensor import grad_check

    target = make_target(pair.gt_box, cfg.foundation.grid_x)
    worst = 0.0
    for name in store.trainable_names():
        def f(_x):
            return loss_terms(predict(store, cfg, pair), target, cfg.loss)["total"]

        worst = max(worst, grad_check(f, store[name], h))
    return worst


def random_pair(cfg: ViPTConfig, seed: int = 0):
    """Gaussian-noise sample pair with a random in-crop box, for verification runs."""
    from .synthdata import SamplePair

    rng = np.random.default_rng(seed)
    t, s = cfg.foundation.template_size, cfg.foundation.search_size
    w, hh = rng.uniform(0.15, 0.4, size=2)
    cx, cy = rng.uniform(0.3, 0.7, size=2)
    return SamplePair(
        template_rgb=rng.standard_normal((3, t, t)),
        template_aux=rng.standard_normal((3, t, t)),
        search_rgb=rng.standard_normal((3, s, s)),
        search_aux=rng.standard_normal((3, s, s)),
        gt_box=(float(cx), float(cy), float(w), float(hh)),
    )
