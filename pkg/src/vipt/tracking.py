"""Sequence-level tracking loop used for evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import ViPTConfig
from .foundation import forward_foundation
from .metrics import Box, FrameResult
from .prompt import forward_prompted
from .synthdata import Sequence, crop_resize, standardise

MIN_SIDE_PX = 2.0


@dataclass
class TrackOutput:
    boxes: list[Box]
    confidences: list[float]

    def frame_results(self, seq: Sequence) -> list[FrameResult]:
        """Per-frame results for scoring; the initialisation frame is left out."""
        return [
            FrameResult(tuple(b), tuple(float(v) for v in g), c)
            for b, g, c in zip(self.boxes[1:], seq.boxes[1:], self.confidences[1:])
        ]


def _crop_pair(seq: Sequence, t: int, center, side: float, out: int):
    rgb, _ = crop_resize(seq.rgb[t], center, side, out)
    aux, _ = crop_resize(seq.aux[t], center, side, out)
    return standardise(rgb), standardise(np.repeat(aux, 3, axis=0))


def track_sequence(params, cfg: ViPTConfig, seq: Sequence, rgb_only: bool = False) -> TrackOutput:
    """One-pass tracking initialised from the frame-0 ground truth.

    Each search crop is centred on the previous prediction with side
    ``search_factor * sqrt(w*h)`` of the previous box.
    """
    fc, dc = cfg.foundation, cfg.data
    x, y, w, h = (float(v) for v in seq.boxes[0])
    z_center = (x + w / 2, y + h / 2)
    z_rgb, z_aux = _crop_pair(seq, 0, z_center, dc.template_factor * math.sqrt(w * h), fc.template_size)
    boxes: list[Box] = [(x, y, w, h)]
    confidences = [1.0]
    prev = (x, y, w, h)
    for t in range(1, len(seq)):
        px, py, pw, ph = prev
        center = (px + pw / 2, py + ph / 2)
        side = max(dc.search_factor * math.sqrt(pw * ph), MIN_SIDE_PX)
        x_rgb, x_aux = _crop_pair(seq, t, center, side, fc.search_size)
        if rgb_only:
            _, pred = forward_foundation(z_rgb, x_rgb, params, fc)
        else:
            _, pred = forward_prompted(z_rgb, x_rgb, z_aux, x_aux, params, fc, cfg.prompt)
        cx, cy, bw, bh = pred.box
        left, top = center[0] - side / 2, center[1] - side / 2
        bw_px = max(bw * side, 1.0)
        bh_px = max(bh * side, 1.0)
        box = (left + cx * side - bw_px / 2, top + cy * side - bh_px / 2, bw_px, bh_px)
        boxes.append(box)
        confidences.append(pred.score)
        prev = box
    return TrackOutput(boxes, confidences)


def oracle_track(seq: Sequence) -> TrackOutput:
    """Debug tracker that echoes the ground truth."""
    return TrackOutput([tuple(float(v) for v in b) for b in seq.boxes], [1.0] * len(seq))
