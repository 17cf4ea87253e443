"""One-pass tracking metrics and long-term precision/recall/F-score."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

Box = tuple[float, float, float, float]  # x, y, w, h

PRECISION_THRESHOLDS = np.arange(0, 51, dtype=np.float64)
SUCCESS_THRESHOLDS = np.linspace(0.0, 1.0, 51)


@dataclass
class FrameResult:
    pred_box: Optional[Box]
    gt_box: Optional[Box]
    confidence: Optional[float] = None

    def __post_init__(self):
        for box in (self.pred_box, self.gt_box):
            if box is not None and (box[2] < 0 or box[3] < 0):
                raise ValueError(f"negative box size in {box}")


@dataclass
class EvalReport:
    precision_at_20: float
    success_auc: float
    f_score: float
    pr: float
    re: float
    precision_curve: list[float] = field(default_factory=list)
    success_curve: list[float] = field(default_factory=list)
    num_frames: int = 0

    def as_dict(self) -> dict:
        return {
            "precision_at_20": self.precision_at_20,
            "success_auc": self.success_auc,
            "f_score": self.f_score,
            "pr": self.pr,
            "re": self.re,
            "num_frames": self.num_frames,
            "precision_curve": self.precision_curve,
            "success_curve": self.success_curve,
        }


def iou(a: Box, b: Box) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def center_error(a: Box, b: Box) -> float:
    return math.hypot(a[0] + a[2] / 2 - b[0] - b[2] / 2, a[1] + a[3] / 2 - b[1] - b[3] / 2)


def _present(results: Sequence[FrameResult]) -> list[FrameResult]:
    frames = [r for r in results if r.gt_box is not None]
    if not frames:
        raise ValueError("no frames with ground truth present")
    return frames


def precision_plot(results: Sequence[FrameResult]) -> tuple[np.ndarray, float]:
    """Fraction of frames with centre error <= t for t = 0..50 px, and the value at 20 px."""
    frames = _present(results)
    err = np.array([center_error(r.pred_box, r.gt_box) if r.pred_box is not None else np.inf for r in frames])
    curve = (err[None, :] <= PRECISION_THRESHOLDS[:, None]).mean(axis=1)
    return curve, float(curve[20])


def success_plot(results: Sequence[FrameResult]) -> tuple[np.ndarray, float]:
    """Fraction of frames with IoU > t over 51 thresholds, and its mean (AUC)."""
    frames = _present(results)
    ov = np.array([iou(r.pred_box, r.gt_box) if r.pred_box is not None else 0.0 for r in frames])
    curve = (ov[None, :] > SUCCESS_THRESHOLDS[:, None]).mean(axis=1)
    return curve, float(curve.mean())


def f_score(pr: float, re: float) -> float:
    return 0.0 if pr + re == 0 else 2.0 * re * pr / (re + pr)


def pr_re_f(results: Sequence[FrameResult], thresholds: Sequence[float] | None = None) -> tuple[float, float, float]:
    """Long-term Pr/Re/F at the confidence threshold that maximises F.

    A frame counts as reported when it has a prediction whose confidence is
    at least the threshold.  Pr averages IoU over reported frames (0 where
    the target is absent); Re averages it over frames where the target is
    present, unreported frames scoring 0.
    """
    if any(r.pred_box is not None and r.confidence is None for r in results):
        raise ValueError("pr_re_f needs a confidence for every prediction")
    frames = list(results)
    ov = np.array(
        [iou(r.pred_box, r.gt_box) if r.pred_box is not None and r.gt_box is not None else 0.0 for r in frames]
    )
    conf = np.array([r.confidence if r.pred_box is not None else -np.inf for r in frames], dtype=np.float64)
    present = np.array([r.gt_box is not None for r in frames])
    if thresholds is None:
        thresholds = np.unique(conf[np.isfinite(conf)])
    best = (0.0, 0.0, 0.0)
    for t in thresholds:
        reported = conf >= t
        pr = float(ov[reported].mean()) if reported.any() else 0.0
        re = float((ov * reported)[present].mean()) if present.any() else 0.0
        f = f_score(pr, re)
        if f > best[2]:
            best = (pr, re, f)
    return best


def evaluate(results: Sequence[FrameResult]) -> EvalReport:
    pcurve, p20 = precision_plot(results)
    scurve, auc = success_plot(results)
    if all(r.confidence is not None or r.pred_box is None for r in results):
        pr, re, f = pr_re_f(results)
    else:
        pr = re = f = float("nan")
    return EvalReport(p20, auc, f, pr, re, pcurve.tolist(), scurve.tolist(), len(results))


# result files: one "x,y,w,h" line or "absent" per frame; confidences one per line


def write_results(path: str | Path, boxes: Sequence[Optional[Box]], confidences: Sequence[float] | None = None) -> None:
    lines = ["absent" if b is None else ",".join(repr(float(v)) for v in b) for b in boxes]
    Path(path).write_text("\n".join(lines) + "\n")
    if confidences is not None:
        conf_path = Path(path).with_name(Path(path).stem + "_confidence.txt")
        conf_path.write_text("\n".join(repr(float(c)) for c in confidences) + "\n")


def read_results(path: str | Path) -> list[Optional[Box]]:
    out: list[Optional[Box]] = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if line == "absent":
            out.append(None)
            continue
        vals = [float(v) for v in line.split(",")]
        if len(vals) != 4:
            raise ValueError(f"{path}: expected 4 values per line, got {line!r}")
        out.append(tuple(vals))
    return out


def read_confidences(path: str | Path) -> list[float]:
    return [float(line) for line in Path(path).read_text().splitlines() if line.strip()]
