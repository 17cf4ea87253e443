"""``vipt`` command line: gen | train | eval | gradcheck | audit.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields, replace
from pathlib import Path

from . import checkpoint as ckpt
from .config import ConfigError, ViPTConfig, dump_config, load_config
from .metrics import evaluate, write_results
from .model import build_store
from .synthdata import (
    DatasetError,
    PairSampler,
    SceneSpec,
    gen_sequences,
    read_sequences,
    write_sequence,
)
from .tracking import oracle_track, track_sequence
from .tuner import (
    NonFiniteLossError,
    count_params,
    fit,
    gradcheck_model,
    module_table,
    random_pair,
    variant_budgets,
)

log = logging.getLogger("vipt")

GRADCHECK_LIMIT = 100_000
GRADCHECK_TOL = 1e-4
EXIT_USAGE = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# scene spec files


_SCENE_KEYS = {
    "num_sequences": int,
    "seed": int,
    "num_frames": int,
    "canvas": "pair",
    "shape": str,
    "size_min": int,
    "size_max": int,
    "rgb_corruption_rate": float,
    "aux_noise": float,
    "distractors": int,
    "marker": "bool",
}


def parse_scene(text: str) -> tuple[SceneSpec, int]:
    """``[scene]`` section -> (spec, number of sequences)."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    extra = [s for s in parser.sections() if s != "scene"]
    if extra:
        raise ConfigError(f"unknown section [{extra[0]}]")
    raw = dict(parser["scene"]) if parser.has_section("scene") else {}
    values = {}
    for key, text_value in raw.items():
        kind = _SCENE_KEYS.get(key)
        if kind is None:
            raise ConfigError(f"unknown key {key!r}")
        try:
            if kind == "pair":
                values[key] = tuple(int(v) for v in text_value.replace(",", " ").split())
            elif kind == "bool":
                values[key] = text_value.strip().lower() in ("1", "true", "yes")
            else:
                values[key] = kind(text_value.strip())
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {text_value!r}") from exc
    count = values.pop("num_sequences", 1)
    base = SceneSpec()
    lo = values.pop("size_min", base.size_range[0])
    hi = values.pop("size_max", base.size_range[1])
    try:
        spec = replace(base, size_range=(lo, hi), **values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if count < 1:
        raise ConfigError("num_sequences must be positive")
    return spec, count


def dump_scene(spec: SceneSpec, count: int) -> str:
    lines = ["[scene]", f"num_sequences = {count}"]
    for f in fields(spec):
        v = getattr(spec, f.name)
        if f.name == "size_range":
            lines += [f"size_min = {v[0]}", f"size_max = {v[1]}"]
        elif f.name == "canvas":
            lines.append(f"canvas = {v[0]} {v[1]}")
        else:
            lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# helpers


def _prepare_out(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()) and not force:
        raise UsageError(f"output directory {path} is not empty (use --force)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_sequences(data: str):
    seqs = read_sequences(data)
    if not seqs:
        raise UsageError(f"no sequences found under {data}")
    return seqs


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("VIPT_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    spec, count = parse_scene(Path(args.spec).read_text())
    out = _prepare_out(Path(args.out), args.force)
    seqs = gen_sequences(spec, count)
    for seq in seqs:
        write_sequence(seq, out)
    (out / "scene.ini").write_text(dump_scene(spec, count))
    frames = sum(len(s) for s in seqs)
    print(f"wrote {len(seqs)} sequences, {frames} frames to {out}")
    return 0


def _effective_config(args) -> ViPTConfig:
    cfg = load_config(args.config)
    if getattr(args, "mode", None):
        cfg = replace(cfg, tune_mode=args.mode)
    return cfg


def cmd_train(args) -> int:
    cfg = _effective_config(args)
    if cfg.tune_mode == "foundation_only":
        raise UsageError("tune_mode foundation_only leaves nothing trainable")
    if args.dry_run:
        store = build_store(cfg, allocate=False)
        trainable, total = count_params(store, "trainable"), count_params(store, "all")
        print(f"trainable {trainable:,} of {total:,} parameters ({100.0 * trainable / total:.3f}%)")
        return 0
    if args.data is None or args.out is None:
        raise UsageError("--data and --out are required unless --dry-run")
    seqs = _load_sequences(args.data)
    out = _prepare_out(Path(args.out), args.force)
    (out / "config.ini").write_text(dump_config(cfg))
    source = PairSampler(seqs, cfg.data, cfg.foundation, seed=cfg.schedule.seed)
    result = fit(cfg, source, log_path=out / "loss.csv", checkpoint_path=out / "checkpoint.vipt")
    (out / "audit.txt").write_text(_audit_text(cfg, result.store))
    losses = result.losses
    print(f"trained {len(losses)} steps: loss {losses[0]:.5f} -> {losses[-1]:.5f}; wrote {out}")
    return 0


def _resolve_eval_config(args) -> ViPTConfig:
    if args.config:
        return load_config(args.config)
    candidate = Path(args.checkpoint).with_name("config.ini")
    if not candidate.is_file():
        raise UsageError(f"no --config given and {candidate} not found")
    return load_config(candidate)


def cmd_eval(args) -> int:
    seqs = _load_sequences(args.data)
    out = _prepare_out(Path(args.out), args.force)
    store = None
    cfg = None
    if not args.oracle:
        cfg = _resolve_eval_config(args)
        store = ckpt.load_checkpoint(args.checkpoint, build_store(cfg, allocate=False, mode="foundation_only"))
        (out / "config.ini").write_text(dump_config(cfg))

    def run(seq):
        if args.oracle:
            return oracle_track(seq)
        return track_sequence(store, cfg, seq, rgb_only=args.rgb_only)

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        tracks = list(pool.map(run, seqs))  # map preserves sequence order
    results_dir = out / "results"
    results_dir.mkdir(exist_ok=True)
    frames = []
    for seq, track in zip(seqs, tracks):
        write_results(results_dir / f"{seq.name}.txt", track.boxes, track.confidences)
        frames.extend(track.frame_results(seq))
    report = evaluate(frames)
    (out / "report.json").write_text(json.dumps(report.as_dict(), indent=2) + "\n")
    print(
        f"precision@20 {report.precision_at_20:.4f}  success AUC {report.success_auc:.4f}  "
        f"F {report.f_score:.4f} (Pr {report.pr:.4f}, Re {report.re:.4f}) over {report.num_frames} frames"
    )
    return 0


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config)
    store = build_store(cfg, allocate=False)
    total = count_params(store, "all")
    if total > GRADCHECK_LIMIT:
        raise UsageError(f"config has {total:,} parameters; gradcheck is limited to {GRADCHECK_LIMIT:,}")
    store = build_store(cfg)
    if not store.trainable_names():
        raise UsageError("nothing trainable to check")
    err = gradcheck_model(store, cfg, random_pair(cfg, cfg.schedule.seed), h=args.h)
    status = "PASS" if err < GRADCHECK_TOL else "FAIL"
    print(f"max relative error {err:.3e} ({status} at {GRADCHECK_TOL:g})")
    return 0 if status == "PASS" else EXIT_NUMERIC


def _audit_text(cfg: ViPTConfig, store) -> str:
    lines = [f"{'module':<24}{'params':>14}  trainable"]
    for name, n, trainable in module_table(store):
        lines.append(f"{name:<24}{n:>14,}  {'yes' if trainable else 'no'}")
    trainable, total = count_params(store, "trainable"), count_params(store, "all")
    lines.append(f"{'total':<24}{total:>14,}")
    lines.append(f"{'trainable':<24}{trainable:>14,}  ({100.0 * trainable / total:.3f}%)")
    lines.append("")
    lines.append(f"{'variant':<16}{'trainable':>12}{'total':>14}{'ratio':>10}")
    for name, (tr, tot) in variant_budgets(cfg).items():
        lines.append(f"{name:<16}{tr:>12,}{tot:>14,}{100.0 * tr / tot:>9.3f}%")
    return "\n".join(lines) + "\n"


def cmd_audit(args) -> int:
    cfg = _effective_config(args)
    print(_audit_text(cfg, build_store(cfg, allocate=False)), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vipt", description="Prompt-tuned multi-modal tracking at desk scale")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="prompt-tune on a dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--mode", choices=("prompt_tune", "full_tune", "foundation_only"))
    p.add_argument("--dry-run", action="store_true")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="track every sequence and report metrics")
    p.add_argument("--checkpoint")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rgb-only", action="store_true", help="bypass prompts (foundation tracker)")
    p.add_argument("--oracle", action="store_true", help="debug: echo ground truth")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--config", required=True)
    p.add_argument("--h", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("audit", help="parameter budget per module and per variant")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", choices=("prompt_tune", "full_tune", "foundation_only"))
    p.set_defaults(func=cmd_audit)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "eval" and not args.oracle and not args.checkpoint:
        parser.error("--checkpoint is required unless --oracle")
    try:
        return args.func(args)
    except (ConfigError, UsageError, DatasetError, FileNotFoundError) as exc:
        print(f"vipt {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ckpt.CheckpointError as exc:
        print(f"vipt {args.command}: checkpoint error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as exc:
        print(f"vipt {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
