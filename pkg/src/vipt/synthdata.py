"""Synthetic RGB + auxiliary tracking sequences.

The auxiliary frame is a depth-like map where the target always stands out.
In a seeded subset of frames the RGB target is blended into the background,
and RGB-only distractors with the target's look wander around, so an RGB
tracker gets lost exactly where the auxiliary flow still helps.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence as Seq

import numpy as np
from scipy import ndimage

from .config import DataConfig, FoundationConfig

PIXEL_MEAN = 0.5
PIXEL_STD = 0.5


class DatasetError(Exception):
    pass


class DatasetFormatError(DatasetError):
    """Malformed PPM/PGM file."""


class DatasetIntegrityError(DatasetError):
    """Missing ground-truth file or frame/box count mismatch."""


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    num_frames: int = 50
    canvas: tuple[int, int] = (128, 128)
    shape: str = "rect"
    size_range: tuple[int, int] = (12, 20)
    rgb_corruption_rate: float = 0.0
    aux_noise: float = 0.0  # 0 means a clean aux signal, otherwise noise sigma in 8-bit levels
    distractors: int = 0
    marker: bool = False  # registration marker at the target's top-left pixel, both modalities

    def __post_init__(self):
        if not 0.0 <= self.rgb_corruption_rate <= 1.0:
            raise ValueError("rgb_corruption_rate must lie in [0, 1]")
        if self.shape not in ("rect", "ellipse"):
            raise ValueError(f"unknown target shape {self.shape!r}")
        if self.num_frames < 1:
            raise ValueError("num_frames must be positive")
        lo, hi = self.size_range
        if lo < 1 or hi < lo:
            raise ValueError(f"bad size range {self.size_range}")
        if hi > min(self.canvas):
            raise ValueError(f"target size {hi} larger than canvas {self.canvas}")


@dataclass
class Sequence:
    name: str
    rgb: np.ndarray  # [F, H, W, 3] uint8
    aux: np.ndarray  # [F, H, W] uint8
    boxes: np.ndarray  # [F, 4] x, y, w, h pixels
    corrupted: np.ndarray | None = None  # [F] bool, known only for generated sequences

    def __len__(self) -> int:
        return len(self.rgb)


@dataclass
class SamplePair:
    template_rgb: np.ndarray  # [3, t, t] standardised
    template_aux: np.ndarray
    search_rgb: np.ndarray  # [3, s, s]
    search_aux: np.ndarray
    gt_box: tuple[float, float, float, float]  # cx, cy, w, h in search-crop units
    padded: bool = False
    meta: dict = field(default_factory=dict)


def _shape_mask(kind: str, w: int, h: int) -> np.ndarray:
    if kind == "rect":
        return np.ones((h, w), dtype=bool)
    yy, xx = np.mgrid[0:h, 0:w]
    return ((xx + 0.5 - w / 2) / (w / 2)) ** 2 + ((yy + 0.5 - h / 2) / (h / 2)) ** 2 <= 1.0


def _walk(rng, n, canvas_hw, wh, speed=2.0):
    """Smooth bounded random walk of a box's top-left corner."""
    H, W = canvas_hw
    w, h = wh
    pos = np.array([rng.uniform(0, W - w), rng.uniform(0, H - h)])
    vel = rng.normal(0, speed, size=2)
    out = np.empty((n, 2))
    hi = np.array([W - w, H - h], dtype=np.float64)
    for t in range(n):
        out[t] = pos
        vel = 0.85 * vel + rng.normal(0, speed * 0.5, size=2)
        pos = pos + vel
        for k in range(2):
            if pos[k] < 0:
                pos[k], vel[k] = -pos[k], -vel[k]
            if pos[k] > hi[k]:
                pos[k], vel[k] = 2 * hi[k] - pos[k], -vel[k]
        pos = np.clip(pos, 0, hi)
    return np.round(out).astype(int)


def gen_sequence(spec: SceneSpec, name: str = "seq") -> Sequence:
    rng = np.random.default_rng(spec.seed)
    H, W = spec.canvas
    n = spec.num_frames
    lo, hi = spec.size_range
    w, h = (int(v) for v in rng.integers(lo, hi + 1, size=2))
    mask = _shape_mask(spec.shape, w, h)

    # RGB background: flat colour plus a few soft coloured blobs
    base = rng.uniform(60, 190, size=3)
    yy, xx = np.mgrid[0:H, 0:W]
    bg = np.broadcast_to(base, (H, W, 3)).astype(np.float64).copy()
    for _ in range(4):
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        r = rng.uniform(8, 24)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        bg += blob[..., None] * rng.uniform(-50, 50, size=3)
    color = rng.uniform(0, 255, size=3)
    while np.abs(color - base).max() < 90:
        color = rng.uniform(0, 255, size=3)
    aux_bg = 40.0 + 30.0 * (yy / max(H - 1, 1))

    corrupt_count = min(int(round(spec.rgb_corruption_rate * n)), max(n - 1, 0))
    corrupted = np.zeros(n, dtype=bool)
    if corrupt_count:
        corrupted[1 + rng.choice(n - 1, size=corrupt_count, replace=False)] = True

    track = _walk(rng, n, (H, W), (w, h))
    distractor_tracks = [_walk(rng, n, (H, W), (w, h)) for _ in range(spec.distractors)]

    rgb = np.empty((n, H, W, 3), dtype=np.uint8)
    aux = np.empty((n, H, W), dtype=np.uint8)
    boxes = np.empty((n, 4), dtype=np.float64)
    for t in range(n):
        frame = bg + rng.normal(0, 4.0, size=bg.shape)
        for dt in distractor_tracks:
            x, y = dt[t]
            frame[y : y + h, x : x + w][mask] = color
        x, y = track[t]
        region = frame[y : y + h, x : x + w]
        if corrupted[t]:
            local = bg[y : y + h, x : x + w][mask]
            region[mask] = 0.9 * local + 0.1 * color
        else:
            region[mask] = color
        depth = aux_bg.copy()
        depth[y : y + h, x : x + w][mask] = 210.0
        if spec.aux_noise > 0:
            depth = depth + rng.normal(0, spec.aux_noise, size=depth.shape)
        if spec.marker:
            frame[y, x] = 255.0
            depth[y, x] = 255.0
        rgb[t] = np.clip(np.round(frame), 0, 255).astype(np.uint8)
        aux[t] = np.clip(np.round(depth), 0, 255).astype(np.uint8)
        boxes[t] = (x, y, w, h)
    return Sequence(name, rgb, aux, boxes, corrupted)


def _sub_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def gen_sequences(spec: SceneSpec, count: int) -> list[Sequence]:
    """``count`` sequences, each with its own sub-seed derived from ``spec.seed``."""
    return [
        gen_sequence(replace(spec, seed=_sub_seed(spec.seed, i)), name=f"seq_{i:03d}") for i in range(count)
    ]


# ---------------------------------------------------------------------------
# cropping


def crop_resize(image: np.ndarray, center, side: float, out: int) -> tuple[np.ndarray, bool]:
    """Square crop of ``side`` pixels around ``center`` (x, y), resampled to ``out``.

    ``image`` is ``[H, W]`` or ``[H, W, C]``; bilinear sampling, pixels outside
    the canvas take the per-channel mean.  Returns ``([C, out, out] float in
    0..255, padded)``.
    """
    img = image[..., None] if image.ndim == 2 else image
    H, W, C = img.shape
    scale = side / out
    x0 = center[0] - side / 2.0
    y0 = center[1] - side / 2.0
    coords = (np.arange(out) + 0.5) * scale - 0.5
    ys = y0 + coords
    xs = x0 + coords
    padded = bool(ys[0] < -0.5 or xs[0] < -0.5 or ys[-1] > H - 0.5 or xs[-1] > W - 0.5)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    result = np.empty((C, out, out))
    for c in range(C):
        chan = img[..., c].astype(np.float64)
        result[c] = ndimage.map_coordinates(chan, [gy, gx], order=1, mode="constant", cval=chan.mean())
    return result, padded


def standardise(pixels: np.ndarray) -> np.ndarray:
    return (pixels / 255.0 - PIXEL_MEAN) / PIXEL_STD


def make_pair(
    seq: Sequence,
    template_idx: int,
    search_idx: int,
    jitter: tuple[float, float, float] = (0.0, 0.0, 1.0),
    data_cfg: DataConfig = DataConfig(),
    fcfg: FoundationConfig = FoundationConfig(),
) -> SamplePair:
    """Template crop around the exemplar box, search crop around a jittered box.

    ``jitter = (dx, dy, scale)``: centre shift in units of the target size and
    a multiplicative factor on the search side.  Both modalities share the
    crop geometry.
    """
    n = len(seq)
    if not (0 <= template_idx < n and 0 <= search_idx < n):
        raise IndexError(f"frame index out of range for sequence of {n} frames")
    tx, ty, tw, th = seq.boxes[template_idx]
    t_center = (tx + tw / 2.0, ty + th / 2.0)
    t_side = data_cfg.template_factor * np.sqrt(tw * th)
    sx, sy, sw, sh = seq.boxes[search_idx]
    size = np.sqrt(sw * sh)
    dx, dy, sc = jitter
    s_center = (sx + sw / 2.0 + dx * size, sy + sh / 2.0 + dy * size)
    s_side = data_cfg.search_factor * size * sc
    z_rgb, p1 = crop_resize(seq.rgb[template_idx], t_center, t_side, fcfg.template_size)
    z_aux, p2 = crop_resize(seq.aux[template_idx], t_center, t_side, fcfg.template_size)
    x_rgb, p3 = crop_resize(seq.rgb[search_idx], s_center, s_side, fcfg.search_size)
    x_aux, p4 = crop_resize(seq.aux[search_idx], s_center, s_side, fcfg.search_size)
    left = s_center[0] - s_side / 2.0
    top = s_center[1] - s_side / 2.0
    gt = (
        (sx + sw / 2.0 - left) / s_side,
        (sy + sh / 2.0 - top) / s_side,
        sw / s_side,
        sh / s_side,
    )
    gt = tuple(float(np.clip(v, 0.0, 1.0)) for v in gt)
    return SamplePair(
        template_rgb=standardise(z_rgb),
        template_aux=standardise(np.repeat(z_aux, 3, axis=0)),
        search_rgb=standardise(x_rgb),
        search_aux=standardise(np.repeat(x_aux, 3, axis=0)),
        gt_box=gt,
        padded=p1 or p2 or p3 or p4,
        meta={
            "sequence": seq.name,
            "template_idx": template_idx,
            "search_idx": search_idx,
            "search_center": s_center,
            "search_side": s_side,
        },
    )


class PairSampler:
    """Seeded stream of training pairs; ``batch(step, size)`` is a pure function of its arguments."""

    def __init__(self, sequences: Seq[Sequence], data_cfg: DataConfig, fcfg: FoundationConfig, seed: int = 0):
        if not sequences:
            raise DatasetError("no sequences to sample from")
        self.sequences = list(sequences)
        self.data_cfg = data_cfg
        self.fcfg = fcfg
        self.seed = seed

    def sample(self, rng: np.random.Generator) -> SamplePair:
        seq = self.sequences[int(rng.integers(len(self.sequences)))]
        n = len(seq)
        t_idx = int(rng.integers(n))
        gap = self.data_cfg.max_gap
        s_idx = int(np.clip(t_idx + rng.integers(-gap, gap + 1), 0, n - 1))
        j = self.data_cfg.center_jitter
        dx, dy = rng.uniform(-j, j, size=2)
        sc = float(np.exp(rng.uniform(-self.data_cfg.scale_jitter, self.data_cfg.scale_jitter)))
        return make_pair(seq, t_idx, s_idx, (float(dx), float(dy), sc), self.data_cfg, self.fcfg)

    def batch(self, step: int, size: int) -> list[SamplePair]:
        rng = np.random.default_rng([self.seed, step])
        return [self.sample(rng) for _ in range(size)]


# ---------------------------------------------------------------------------
# on-disk layout: <dir>/<seq>/rgb/%06d.ppm, <dir>/<seq>/aux/%06d.pgm, <dir>/<seq>/groundtruth.txt


def write_pnm(path: Path, pixels: np.ndarray) -> None:
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    if pixels.ndim == 3:
        magic = b"P6"
        h, w, _ = pixels.shape
    else:
        magic = b"P5"
        h, w = pixels.shape
    path.write_bytes(magic + f"\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


_PNM_HEADER = re.compile(rb"(P[56])(?:\s+|#[^\n]*\n)+(\d+)(?:\s+|#[^\n]*\n)+(\d+)(?:\s+|#[^\n]*\n)+(\d+)\s")


def read_pnm(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = _PNM_HEADER.match(raw)
    if m is None:
        raise DatasetFormatError(f"{path}: malformed PPM/PGM header")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise DatasetFormatError(f"{path}: only 8-bit images are supported (maxval {maxval})")
    channels = 3 if magic == b"P6" else 1
    body = raw[m.end() :]
    if len(body) != w * h * channels:
        raise DatasetFormatError(f"{path}: expected {w * h * channels} pixel bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def write_sequence(seq: Sequence, root: str | Path) -> Path:
    base = Path(root) / seq.name
    (base / "rgb").mkdir(parents=True, exist_ok=True)
    (base / "aux").mkdir(parents=True, exist_ok=True)
    for t in range(len(seq)):
        write_pnm(base / "rgb" / f"{t:06d}.ppm", seq.rgb[t])
        write_pnm(base / "aux" / f"{t:06d}.pgm", seq.aux[t])
    lines = [",".join(_fmt(v) for v in box) for box in seq.boxes]
    (base / "groundtruth.txt").write_text("\n".join(lines) + "\n")
    return base


def write_dataset(specs: Seq[SceneSpec], root: str | Path) -> list[Sequence]:
    """Generate one sequence per spec and write them as ``seq_000``, ``seq_001``, ..."""
    Path(root).mkdir(parents=True, exist_ok=True)
    out = []
    for i, spec in enumerate(specs):
        seq = gen_sequence(spec, name=f"seq_{i:03d}")
        write_sequence(seq, root)
        out.append(seq)
    return out


def read_sequence(path: str | Path) -> Sequence:
    base = Path(path)
    gt_file = base / "groundtruth.txt"
    if not gt_file.is_file():
        raise DatasetIntegrityError(f"{base}: missing groundtruth.txt")
    rgb_files = sorted((base / "rgb").glob("*.ppm"))
    aux_files = sorted((base / "aux").glob("*.pgm"))
    rows = [line for line in gt_file.read_text().splitlines() if line.strip()]
    if not (len(rgb_files) == len(aux_files) == len(rows)):
        raise DatasetIntegrityError(
            f"{base}: {len(rgb_files)} rgb frames, {len(aux_files)} aux frames, {len(rows)} boxes"
        )
    if not rows:
        raise DatasetIntegrityError(f"{base}: empty sequence")
    try:
        boxes = np.array([[float(v) for v in line.split(",")] for line in rows])
    except ValueError as exc:
        raise DatasetIntegrityError(f"{base}: unparsable box line") from exc
    if boxes.shape[1] != 4:
        raise DatasetIntegrityError(f"{base}: box lines must have 4 values")
    rgb = np.stack([read_pnm(f) for f in rgb_files])
    aux = np.stack([read_pnm(f) for f in aux_files])
    if rgb.ndim != 4 or aux.ndim != 3 or rgb.shape[1:3] != aux.shape[1:3]:
        raise DatasetFormatError(f"{base}: rgb frames must be P6 and aux frames P5 of equal size")
    return Sequence(base.name, rgb, aux, boxes)


def read_sequences(root: str | Path) -> list[Sequence]:
    root = Path(root)
    dirs = sorted(p for p in root.iterdir() if p.is_dir()) if root.is_dir() else []
    return [read_sequence(d) for d in dirs]


def read_dataset(
    root: str | Path, data_cfg: DataConfig = DataConfig(), fcfg: FoundationConfig = FoundationConfig()
) -> Iterator[SamplePair]:
    """One pair per frame: template from frame 0, search crop centred on that frame's box."""
    for seq in read_sequences(root):
        for t in range(len(seq)):
            yield make_pair(seq, 0, t, (0.0, 0.0, 1.0), data_cfg, fcfg)
