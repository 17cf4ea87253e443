"""Acceptance suite: one test per criterion, each logging a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the summary lines appear in
the "acceptance criteria" section at the end of the report (and inline with
``-s``).  Criteria 7 and 8 train the toy tracker for 2000 steps twice.
"""

from __future__ import annotations

import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from vipt.checkpoint import (
    CheckpointHeaderError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    load_checkpoint,
    save_checkpoint,
)
from vipt.cli import parse_scene
from vipt.config import gradcheck_config, load_config, paper_config
from vipt.foundation import forward_foundation
from vipt.metrics import FrameResult, iou, pr_re_f
from vipt.model import build_store, predict
from vipt.prompt import aux_embed_size, forward_prompted, fovea_mask, mcp_block_size
from vipt.synthdata import PairSampler, gen_sequences, make_pair
from vipt.tensor import Tensor
from vipt.tuner import count_params, fit, gradcheck_model, random_pair, variant_budgets

ROOT = Path(__file__).resolve().parents[1]
TOY_INI = ROOT / "configs" / "toy.ini"

# criterion 1: published budgets and the +-5% band
PUBLISHED_BUDGETS = {"vipt-deep": 0.84e6, "vipt-shallow": 0.61e6, "vpt-shallow": 0.59e6}
BUDGET_TOL = 0.05
# criterion 3
GRAD_TOL = 1e-4
# criterion 5
FOVEA_TOL = 1e-12
FOVEA_CASES = 1000
# criterion 6: (Re, Pr, F) rows and tolerance
TABLE1_ROWS = [(0.596, 0.592, 0.594), (0.506, 0.560, 0.532)]
F_TOL = 1e-3
# criterion 7
LOSS_REDUCTION = 0.5
TRAIN_SCENE, TRAIN_SEQUENCES = parse_scene((ROOT / "configs" / "scene.ini").read_text())
HELDOUT_SCENE = replace(TRAIN_SCENE, seed=2)
HELDOUT_SEQUENCES = 6
EVAL_SEED = 5
# IoU margin of the prompted tracker over the RGB-only tracker on the held-out
# corrupted split, observed on the first verified run (0.8450) and frozen here
# rounded down as a regression floor.
FROZEN_IOU_MARGIN = 0.84


def record(log, number, passed, detail):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    log.append(line)
    print(line)
    return passed


# ---------------------------------------------------------------------------
# shared training run (criteria 7, 8, 9)


def toy_run_config():
    return load_config(TOY_INI)


def train_toy(out: Path, cfg=None):
    cfg = cfg or toy_run_config()
    out.mkdir(parents=True, exist_ok=True)
    sequences = gen_sequences(TRAIN_SCENE, TRAIN_SEQUENCES)
    source = PairSampler(sequences, cfg.data, cfg.foundation, seed=cfg.schedule.seed)
    start = time.perf_counter()
    result = fit(cfg, source, log_path=out / "loss.csv", checkpoint_path=out / "checkpoint.vipt")
    return result, time.perf_counter() - start


def heldout_pairs(cfg):
    """Search crops on every RGB-corrupted frame of the held-out sequences, template from frame 0."""
    rng = np.random.default_rng(EVAL_SEED)
    pairs = []
    for seq in gen_sequences(HELDOUT_SCENE, HELDOUT_SEQUENCES):
        for t in np.flatnonzero(seq.corrupted):
            dx, dy = rng.uniform(-cfg.data.center_jitter, cfg.data.center_jitter, size=2)
            pairs.append(make_pair(seq, 0, int(t), (float(dx), float(dy), 1.0), cfg.data, cfg.foundation))
    return pairs


def _xywh(box):
    cx, cy, w, h = box
    return (cx - w / 2, cy - h / 2, w, h)


def mean_iou(store, cfg, pairs, rgb_only=False):
    return float(np.mean([iou(_xywh(predict(store, cfg, p, rgb_only).box), _xywh(p.gt_box)) for p in pairs]))


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy_run_a")
    result, seconds = train_toy(out)
    return {"dir": out, "result": result, "seconds": seconds, "cfg": toy_run_config()}


# ---------------------------------------------------------------------------


def test_criterion_1_parameter_budget(acceptance_log):
    cfg = paper_config()
    budgets = variant_budgets(cfg)
    fc = cfg.foundation
    closed_deep = aux_embed_size(3, fc.patch, fc.dim) + fc.layers * mcp_block_size(fc.dim, cfg.prompt.latent)
    checks = {name: abs(budgets[name][0] - ref) / ref for name, ref in PUBLISHED_BUDGETS.items()}
    trainable, total = budgets["vipt-deep"]
    ratio = trainable / total
    passed = (
        all(v <= BUDGET_TOL for v in checks.values())
        and budgets["vipt-deep"][0] == closed_deep
        and 0.80e6 <= closed_deep <= 0.88e6
        and ratio < 0.01
    )
    detail = ", ".join(f"{n} {budgets[n][0]:,} ({100 * checks[n]:.2f}% off)" for n in PUBLISHED_BUDGETS)
    record(acceptance_log, 1, passed, f"{detail}; ratio {100 * ratio:.3f}% of {total:,} (tol 5%, <1%)")
    assert passed


def test_criterion_2_zero_prompt_reduction(acceptance_log, toy_cfg):
    store = build_store(toy_cfg)
    for name, entry in store.items():
        if entry.spec.group == "prompt":
            store.assign(name, np.zeros(entry.shape))
    fc = toy_cfg.foundation
    rng = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(100):
        z, x = rng.standard_normal((3, fc.template_size, fc.template_size)), rng.standard_normal((3, fc.search_size, fc.search_size))
        za, xa = rng.standard_normal(z.shape), rng.standard_normal(x.shape)
        hp, bp = forward_prompted(z, x, za, xa, store, fc, toy_cfg.prompt)
        hf, bf = forward_foundation(z, x, store, fc)
        same = (
            hp.tokens.data.tobytes() == hf.tokens.data.tobytes()
            and all(getattr(bp, m).data.tobytes() == getattr(bf, m).data.tobytes() for m in ("cls_map", "offset_map", "size_map"))
            and bp.box == bf.box
        )
        mismatches += not same
    passed = mismatches == 0
    record(acceptance_log, 2, passed, f"{100 - mismatches}/100 random toy inputs bitwise identical")
    assert passed


def test_criterion_3_gradient_correctness(acceptance_log):
    cfg = gradcheck_config()
    store = build_store(cfg)
    start = time.perf_counter()
    err = gradcheck_model(store, cfg, random_pair(cfg, cfg.schedule.seed), h=1e-5)
    seconds = time.perf_counter() - start
    n = count_params(store, "trainable")
    passed = err < GRAD_TOL
    record(acceptance_log, 3, passed, f"max relative error {err:.2e} over {n:,} coordinates (tol {GRAD_TOL:g}, {seconds:.0f}s)")
    assert passed


def test_criterion_4_freezing_contract(acceptance_log, toy_cfg):
    cfg = toy_cfg.replace(schedule=replace(toy_cfg.schedule, epochs=1, steps_per_epoch=100, decay_epoch=1, seed=3))
    store = build_store(cfg)
    before = store.snapshot()
    source = PairSampler(gen_sequences(replace(TRAIN_SCENE, num_frames=30), 4), cfg.data, cfg.foundation, seed=3)
    fit(cfg, source, store=store)
    frozen_changed = [n for n, e in store.items() if not e.trainable and e.value.data.tobytes() != before[n].tobytes()]
    stuck = [n for n, e in store.items() if e.trainable and np.array_equal(e.value.data, before[n])]
    passed = not frozen_changed and not stuck
    record(
        acceptance_log,
        4,
        passed,
        f"{len(before) - len(store.trainable_names())} frozen entries unchanged: {not frozen_changed}; "
        f"{len(store.trainable_names())} trainable entries all moved: {not stuck} (100 steps)",
    )
    assert passed


def test_criterion_5_fovea_normalisation(acceptance_log):
    rng = np.random.default_rng(55)
    worst = 0.0
    for _ in range(FOVEA_CASES):
        c, h, w = (int(v) for v in rng.integers(1, 17, size=3))
        lam = float(rng.uniform(-3, 3))
        m = rng.standard_normal((c, h, w)) * rng.uniform(0.1, 30)
        mask = fovea_mask(Tensor(m), Tensor(np.array(lam))).data
        worst = max(worst, float(np.abs(mask.reshape(c, -1).sum(axis=1) - lam).max()))
    passed = worst < FOVEA_TOL
    record(acceptance_log, 5, passed, f"max |sum(mask) - lambda| {worst:.1e} over {FOVEA_CASES} shapes (tol {FOVEA_TOL:g})")
    assert passed


def _frames_for(re, pr):
    """Result set whose best operating point has the given recall and precision.

    Every reported frame overlaps by the same amount.  Precision below recall
    comes from reported frames without a target, precision above recall from
    target frames with no prediction.
    """
    gt = (0.0, 0.0, 10.0, 10.0)
    if pr <= re:
        overlap = re
        n_present, n_absent = 149, 1  # pr/re = 149/150
        n_lost = 0
    else:
        overlap = pr
        n_present, n_lost = 253, 27  # re/pr = 253/280
        n_absent = 0
    s = 10.0 * (1 - overlap) / (1 + overlap)
    hit = (s, 0.0, 10.0, 10.0)
    return (
        [FrameResult(hit, gt, 0.9)] * n_present
        + [FrameResult(hit, None, 0.9)] * n_absent
        + [FrameResult(None, gt)] * n_lost
    )


def test_criterion_6_metric_fidelity(acceptance_log):
    parts = []
    passed = True
    for re_ref, pr_ref, f_ref in TABLE1_ROWS:
        pr, re, f = pr_re_f(_frames_for(re_ref, pr_ref))
        ok = abs(re - re_ref) <= F_TOL and abs(pr - pr_ref) <= F_TOL and abs(f - f_ref) <= F_TOL
        passed &= ok
        parts.append(f"(Re {re:.4f}, Pr {pr:.4f}) -> F {f:.4f} vs {f_ref}")
    record(acceptance_log, 6, passed, "; ".join(parts) + f" (tol {F_TOL:g})")
    assert passed


@pytest.mark.slow
def test_criterion_7_learning_behaviour(acceptance_log, toy_run):
    cfg, result = toy_run["cfg"], toy_run["result"]
    losses = result.losses
    assert len(losses) == 2000
    final_ratio = losses[-1] / losses[0]
    trailing_ratio = losses[-100:].mean() / losses[0]
    pairs = heldout_pairs(cfg)
    prompted = mean_iou(result.store, cfg, pairs)
    rgb_only = mean_iou(result.store, cfg, pairs, rgb_only=True)
    margin = prompted - rgb_only
    passed = (
        final_ratio <= LOSS_REDUCTION
        and trailing_ratio <= LOSS_REDUCTION
        and prompted > rgb_only
        and margin >= FROZEN_IOU_MARGIN
    )
    record(
        acceptance_log,
        7,
        passed,
        f"loss {losses[0]:.3f} -> {losses[-1]:.3f} (last-100 mean {losses[-100:].mean():.3f}, ratio {trailing_ratio:.3f} <= 0.5); "
        f"held-out corrupted IoU {prompted:.4f} vs RGB-only {rgb_only:.4f} over {len(pairs)} frames, "
        f"margin {margin:.4f} >= frozen {FROZEN_IOU_MARGIN} ({toy_run['seconds']:.0f}s)",
    )
    assert passed


@pytest.mark.slow
def test_criterion_8_determinism(acceptance_log, toy_run, tmp_path):
    train_toy(tmp_path / "run_b")
    a, b = toy_run["dir"], tmp_path / "run_b"
    same_csv = (a / "loss.csv").read_bytes() == (b / "loss.csv").read_bytes()
    same_ckpt = (a / "checkpoint.vipt").read_bytes() == (b / "checkpoint.vipt").read_bytes()
    passed = same_csv and same_ckpt
    record(acceptance_log, 8, passed, f"identical loss CSV: {same_csv}; identical checkpoint bytes: {same_ckpt}")
    assert passed


@pytest.mark.slow
def test_criterion_9_checkpoint_round_trip(acceptance_log, toy_run, tmp_path):
    cfg = toy_run["cfg"]
    first = toy_run["dir"] / "checkpoint.vipt"
    loaded = load_checkpoint(first, build_store(cfg, allocate=False, mode="foundation_only"))
    save_checkpoint(loaded, tmp_path / "second.vipt")
    identical = first.read_bytes() == (tmp_path / "second.vipt").read_bytes()

    raw = first.read_bytes()
    cases = {
        "magic": (bytes([raw[0] ^ 0xFF]) + raw[1:], CheckpointHeaderError, None),
        "version": (raw[:8] + b"\x07\x00" + raw[10:], CheckpointHeaderError, None),
        "manifest cut": (raw[:40], CheckpointTruncatedError, None),
        "payload cut": (raw[:-3], CheckpointTruncatedError, None),
        "trailing": (raw + b"\x00", CheckpointTruncatedError, None),
        "shape": (raw, CheckpointShapeError, cfg.replace(prompt=replace(cfg.prompt, latent=4))),
    }
    rejected = {}
    for name, (buf, error, other_cfg) in cases.items():
        path = tmp_path / f"{name.replace(' ', '_')}.vipt"
        path.write_bytes(buf)
        expected = build_store(other_cfg, allocate=False) if other_cfg else None
        try:
            load_checkpoint(path, expected)
            rejected[name] = False
        except error:
            rejected[name] = True
    passed = identical and all(rejected.values())
    record(
        acceptance_log,
        9,
        passed,
        f"save->load->save byte-identical: {identical}; rejected with documented errors: "
        + ", ".join(f"{k} {v}" for k, v in rejected.items()),
    )
    assert passed


@pytest.mark.slow
def test_exploratory_block_count_trend(acceptance_log, toy_run, tmp_path):
    """Held-out IoU against the number of MCP blocks; reported, never asserted."""
    cfg = toy_run["cfg"]
    pairs = heldout_pairs(cfg)
    rows = []
    for interval in (4, 2):
        vcfg = cfg.replace(prompt=replace(cfg.prompt, interval=interval))
        result, _ = train_toy(tmp_path / f"interval_{interval}", vcfg)
        rows.append((len(vcfg.prompt.layers(vcfg.foundation.layers)), mean_iou(result.store, vcfg, pairs)))
    rows.append((cfg.foundation.layers, mean_iou(toy_run["result"].store, cfg, pairs)))
    monotone = all(a[1] <= b[1] for a, b in zip(rows, rows[1:]))
    line = "trend (non-gating): " + ", ".join(f"{n} blocks IoU {v:.4f}" for n, v in rows)
    line += f"; non-decreasing: {monotone}"
    acceptance_log.append(line)
    print(line)
