"""Synthetic moving-shape clips and the dataset generator built on them.

Clips are (F, C, H, W) float32 in [0, 1]: a single colored shape translating over a
black background with wrap-around at the borders. Rendering is anti-aliased from a
signed-distance field evaluated with toroidal displacements, so sub-pixel positions
are meaningful and centroid motion tracks the requested velocity closely.

Motion has two layers: the captioned part (compass direction, integer speed) and,
when `motion_jitter` > 0, seed-deterministic nuisance parameters no caption encodes
(a continuous within-bin heading offset plus a small perpendicular wobble). The
nuisance layer is what makes "same caption, different realization" a real notion
for this corpus.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .captions import CaptionTokens, COLORS, DIRECTION_VECTORS, SHAPES, SPEEDS

FORMAT_VERSION = 1

COLOR_RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "magenta": (1.0, 0.0, 1.0),
    "cyan": (0.0, 1.0, 1.0),
}

# max within-bin heading offset (degrees) and wobble amplitude range (px) at jitter 1
HEADING_JITTER_DEG = 15.0
WOBBLE_AMPLITUDE = (0.3, 0.9)


@dataclass
class VideoClip:
    """A rendered clip plus its caption and provenance metadata."""

    frames: np.ndarray
    caption: CaptionTokens | None = None
    clip_id: str | None = None
    fps: float = 8.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.frames.ndim != 4:
            raise ValueError(f"frames must be (F, C, H, W), got shape {self.frames.shape}")
        if self.frames.dtype != np.float32:
            raise ValueError(f"frames must be float32, got {self.frames.dtype}")
        lo, hi = float(self.frames.min()), float(self.frames.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"frames must lie in [0, 1], got range [{lo}, {hi}]")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def to_model_space(frames: np.ndarray) -> np.ndarray:
    """Map [0, 1] pixels to the zero-centered range diffusion operates in."""
    return (frames.astype(np.float32) * 2.0) - 1.0


def from_model_space(states) -> np.ndarray:
    """Map diffusion states back to clamped [0, 1] pixels."""
    arr = np.asarray(states, dtype=np.float32)
    return np.clip((arr + 1.0) * 0.5, 0.0, 1.0)


def _toroidal_delta(coords: np.ndarray, center: float, extent: int) -> np.ndarray:
    return (coords - center + extent / 2.0) % extent - extent / 2.0


_TRI_NORMALS = np.array(
    [[0.0, 1.0], [math.cos(-math.pi / 6), math.sin(-math.pi / 6)],
     [math.cos(math.pi + math.pi / 6), math.sin(math.pi + math.pi / 6)]]
)


def _shape_distance(shape: str, dx: np.ndarray, dy: np.ndarray, size: float) -> np.ndarray:
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) - size
    if shape == "circle":
        return np.hypot(dx, dy) - size
    if shape == "triangle":
        # equilateral, apex up; edge half-planes with inradius size/2 (screen y is down)
        d = -np.inf
        for nx, ny in _TRI_NORMALS:
            d = np.maximum(d, nx * dx + ny * dy)
        return d - size / 2.0
    if shape == "cross":
        thick = size * 0.4
        horiz = np.maximum(np.abs(dx) - size, np.abs(dy) - thick)
        vert = np.maximum(np.abs(dx) - thick, np.abs(dy) - size)
        return np.minimum(horiz, vert)
    raise ValueError(f"unknown shape {shape!r}")


def _coverage(shape: str, cx: float, cy: float, size: float, image_size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    dx = _toroidal_delta(xs, cx, image_size)
    dy = _toroidal_delta(ys, cy, image_size)
    dist = _shape_distance(shape, dx, dy, size)
    return np.clip(0.5 - dist, 0.0, 1.0)


def render_clip(
    color: str,
    shape: str,
    direction: str,
    speed: float,
    start_pos: tuple[float, float],
    size: float = 5.0,
    seed: int = 0,
    frames: int = 8,
    image_size: int = 32,
    motion_jitter: float = 0.0,
) -> VideoClip:
    """Render one clip of a shape translating along a compass direction.

    With motion_jitter == 0 the trajectory is exact uniform translation, so the
    per-frame centroid displacement equals speed * direction. With jitter > 0 the
    seed deterministically draws a small heading offset and a perpendicular
    sinusoidal wobble; the mean heading stays inside the captioned compass bin.

    Positions wrap around the borders (toroidal canvas), so any start position is
    renderable.
    """
    if color not in COLOR_RGB:
        raise ValueError(f"unknown color {color!r}")
    if direction not in DIRECTION_VECTORS:
        raise ValueError(f"unknown direction {direction!r}")
    if frames < 2:
        raise ValueError("need at least 2 frames")

    rng = np.random.default_rng(seed)
    # always draw all three so the stream does not depend on jitter
    heading_off = math.radians(HEADING_JITTER_DEG) * rng.uniform(-1.0, 1.0) * motion_jitter
    lo, hi = WOBBLE_AMPLITUDE
    wobble_amp = rng.uniform(lo, hi) * motion_jitter
    wobble_phase = rng.uniform(0.0, 2.0 * math.pi)

    ux, uy = DIRECTION_VECTORS[direction]
    base = math.atan2(uy, ux)
    theta = base + heading_off
    fx, fy = math.cos(theta), math.sin(theta)
    px, py = -fy, fx  # perpendicular

    out = np.zeros((frames, 3, image_size, image_size), dtype=np.float32)
    rgb = COLOR_RGB[color]
    for f in range(frames):
        swing = wobble_amp * math.sin(2.0 * math.pi * f / frames + wobble_phase)
        cx = start_pos[0] + f * speed * fx + swing * px
        cy = start_pos[1] + f * speed * fy + swing * py
        cov = _coverage(shape, cx % image_size, cy % image_size, size, image_size)
        for c in range(3):
            out[f, c] = (rgb[c] * cov).astype(np.float32)

    speed_slot = int(speed) if float(speed).is_integer() and int(speed) in SPEEDS else None
    caption = CaptionTokens(color=color, shape=shape, direction=direction, speed=speed_slot)
    meta = {
        "start": [float(start_pos[0]), float(start_pos[1])],
        "size": float(size),
        "seed": int(seed),
        "motion_jitter": float(motion_jitter),
        "heading_offset_deg": math.degrees(heading_off),
        "wobble_amp": float(wobble_amp),
        "wobble_phase": float(wobble_phase),
    }
    return VideoClip(frames=out, caption=caption, meta=meta)


def frame_centroid(frame: np.ndarray) -> tuple[float, float]:
    """Intensity-weighted centroid (x, y) of one (C, H, W) frame.

    Not wrap-aware; only meaningful while the shape stays away from the borders.
    """
    weight = frame.sum(axis=0)
    total = float(weight.sum())
    if total <= 0.0:
        raise ValueError("empty frame has no centroid")
    ys, xs = np.mgrid[0 : frame.shape[1], 0 : frame.shape[2]]
    return float((xs * weight).sum() / total), float((ys * weight).sum() / total)


@dataclass(frozen=True)
class DatasetSpec:
    """Cartesian corpus description; every combination gets `seeds_per_combo` clips."""

    colors: tuple[str, ...] = COLORS[:3]
    shapes: tuple[str, ...] = SHAPES[:3]
    directions: tuple[str, ...] = ("E", "N", "W", "S")
    speeds: tuple[int, ...] = (1, 2)
    seeds_per_combo: int = 2
    val_seeds: int = 1
    frames: int = 8
    image_size: int = 32
    shape_size: float = 5.0
    motion_jitter: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("colors", "shapes", "directions", "speeds"):
            if len(getattr(self, name)) < 2:
                raise ValueError(f"need at least 2 values per attribute axis, {name} is short")
        if not 0 <= self.val_seeds < self.seeds_per_combo:
            raise ValueError("val_seeds must leave at least one training seed")

    @property
    def n_clips(self) -> int:
        return (
            len(self.colors) * len(self.shapes) * len(self.directions)
            * len(self.speeds) * self.seeds_per_combo
        )


def _sample_start(
    rng: np.random.Generator, spec: DatasetSpec, direction: str, speed: float
) -> tuple[float, float]:
    # keep the whole trajectory inside the frame when a safe box exists;
    # otherwise fall back to anywhere and let the canvas wrap
    ux, uy = DIRECTION_VECTORS[direction]
    disp_x = ux * speed * (spec.frames - 1)
    disp_y = uy * speed * (spec.frames - 1)
    margin = spec.shape_size + 2.0
    lo_x = margin + max(0.0, -disp_x)
    hi_x = spec.image_size - 1 - margin - max(0.0, disp_x)
    lo_y = margin + max(0.0, -disp_y)
    hi_y = spec.image_size - 1 - margin - max(0.0, disp_y)
    if lo_x < hi_x and lo_y < hi_y:
        return (float(rng.uniform(lo_x, hi_x)), float(rng.uniform(lo_y, hi_y)))
    return (float(rng.uniform(0, spec.image_size)), float(rng.uniform(0, spec.image_size)))


@dataclass
class ClipDataset:
    """In-memory corpus with its on-disk index."""

    root: Path
    spec: DatasetSpec
    clips: list[VideoClip]

    def __post_init__(self):
        self._by_id = {clip.clip_id: clip for clip in self.clips}

    def get(self, clip_id: str) -> VideoClip:
        return self._by_id[clip_id]

    def split(self, name: str) -> list[VideoClip]:
        return [c for c in self.clips if c.meta["split"] == name]

    @property
    def train_clips(self) -> list[VideoClip]:
        return self.split("train")

    @property
    def val_clips(self) -> list[VideoClip]:
        return self.split("val")


def gen_dataset(spec: DatasetSpec, out_dir: str | Path) -> ClipDataset:
    """Render the full cartesian corpus to out_dir (clips/*.npy + index.json)."""
    out_dir = Path(out_dir)
    clips_dir = out_dir / "clips"
    clips_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(spec.seed)
    combos = list(
        itertools.product(spec.colors, spec.shapes, spec.directions, spec.speeds)
    )
    entries = []
    clips = []
    idx = 0
    for color, shape, direction, speed in combos:
        for s in range(spec.seeds_per_combo):
            start = _sample_start(rng, spec, direction, speed)
            render_seed = spec.seed * 1_000_003 + idx
            clip = render_clip(
                color=color, shape=shape, direction=direction, speed=speed,
                start_pos=start, size=spec.shape_size, seed=render_seed,
                frames=spec.frames, image_size=spec.image_size,
                motion_jitter=spec.motion_jitter,
            )
            clip_id = f"clip{idx:04d}"
            split = "val" if s >= spec.seeds_per_combo - spec.val_seeds else "train"
            clip.clip_id = clip_id
            clip.meta["split"] = split
            np.save(clips_dir / f"{clip_id}.npy", clip.frames)
            entries.append(
                {
                    "id": clip_id,
                    "file": f"clips/{clip_id}.npy",
                    "caption": clip.caption.to_dict(),
                    "split": split,
                    "meta": clip.meta,
                }
            )
            clips.append(clip)
            idx += 1

    index = {
        "format_version": FORMAT_VERSION,
        "spec": asdict(spec),
        "clips": entries,
    }
    (out_dir / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))
    return ClipDataset(root=out_dir, spec=spec, clips=clips)


def load_dataset(root: str | Path) -> ClipDataset:
    root = Path(root)
    index = json.loads((root / "index.json").read_text())
    if index.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format {index.get('format_version')!r}")
    spec_d = index["spec"]
    for key in ("colors", "shapes", "directions", "speeds"):
        spec_d[key] = tuple(spec_d[key])
    spec = DatasetSpec(**spec_d)
    clips = []
    for entry in index["clips"]:
        frames = np.load(root / entry["file"])
        clip = VideoClip(
            frames=frames,
            caption=CaptionTokens.from_dict(entry["caption"]),
            clip_id=entry["id"],
            meta=dict(entry["meta"]),
        )
        clips.append(clip)
    return ClipDataset(root=root, spec=spec, clips=clips)


def corpus_hash(root: str | Path) -> str:
    """Stable content hash of a generated corpus (index + every clip array)."""
    root = Path(root)
    h = hashlib.sha256()
    h.update((root / "index.json").read_bytes())
    for path in sorted((root / "clips").glob("*.npy")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()
