"""Optical-flow measurement and the motion/appearance metrics built on it.

The estimator is windowed Lucas-Kanade on Gaussian-presmoothed grayscale frames,
run in two passes: a first pass whose valid-pixel median, rounded to integers,
pre-aligns the second frame (repeatedly, until the rounded median residual is
zero), then a final solve on the residual sub-pixel motion. The pre-alignment
step assumes one dominant translation per frame pair, which is exactly the motion
family this toolkit renders and probes; it is what lets a 5x5 window recover
multi-pixel shifts that a single linearized solve underestimates.

All image math is float64. Boundary handling is wrap-around, matching the
renderer's toroidal canvas. Pixel validity comes from the smaller structure-tensor
eigenvalue, thresholded at an absolute value calibrated for unit-range intensities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
from scipy import ndimage

from .captions import DIRECTION_VECTORS


@dataclass
class FlowField:
    """Dense per-pixel flow (u right, v down) with a validity mask."""

    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u, self.v)


class FlowSimilarity(NamedTuple):
    value: float
    no_motion: bool = False


@dataclass(frozen=True)
class MotionLabel:
    """Oracle motion readout: dominant compass direction and median speed."""

    direction: str | None
    speed: float
    coverage: float
    no_motion: bool


def _grayscale(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 3:
        return frame.mean(axis=0)
    if frame.ndim == 2:
        return frame
    raise ValueError(f"expected (C, H, W) or (H, W) frame, got shape {frame.shape}")


def _lk_solve(sa: np.ndarray, sb: np.ndarray, window_size: int, eig_threshold: float):
    avg = 0.5 * (sa + sb)
    gy, gx = np.gradient(avg)
    gt = sb - sa

    def wsum(z):
        return ndimage.uniform_filter(z, window_size, mode="wrap") * window_size**2

    sxx, syy, sxy = wsum(gx * gx), wsum(gy * gy), wsum(gx * gy)
    sxt, syt = wsum(gx * gt), wsum(gy * gt)
    lam_min = 0.5 * (sxx + syy - np.sqrt((sxx - syy) ** 2 + 4.0 * sxy**2))
    det = sxx * syy - sxy * sxy
    ok = (lam_min >= eig_threshold) & (np.abs(det) > 1e-12)
    safe_det = np.where(ok, det, 1.0)
    u = np.where(ok, (-sxt * syy + syt * sxy) / safe_det, 0.0)
    v = np.where(ok, (-syt * sxx + sxt * sxy) / safe_det, 0.0)
    return u, v, ok


def lk_flow(
    frame_a,
    frame_b,
    window_size: int = 5,
    eig_threshold: float = 1e-3,
    presmooth_sigma: float = 1.0,
    max_prealign: int = 3,
) -> FlowField:
    """Estimate dense flow from frame_a to frame_b.

    Args:
        frame_a, frame_b: (C, H, W) or (H, W) arrays; channels are averaged.
        window_size: square aggregation window for the least-squares solve.
        eig_threshold: validity floor for the smaller structure-tensor eigenvalue
            (absolute, calibrated for intensities in [0, 1]).
        presmooth_sigma: Gaussian presmoothing applied to both frames.
        max_prealign: cap on integer pre-alignment rounds (0 disables them).

    A static frame pair yields a zero flow field, never an error.
    """
    ga, gb = _grayscale(frame_a), _grayscale(frame_b)
    if ga.shape != gb.shape:
        raise ValueError(f"frame shapes differ: {ga.shape} vs {gb.shape}")
    sa = ndimage.gaussian_filter(ga, presmooth_sigma, mode="wrap")
    sb = ndimage.gaussian_filter(gb, presmooth_sigma, mode="wrap")

    shift_x = shift_y = 0
    for _ in range(max_prealign):
        u, v, ok = _lk_solve(
            sa, np.roll(sb, (-shift_y, -shift_x), axis=(0, 1)), window_size, eig_threshold
        )
        if not ok.any():
            break
        mu = int(round(float(np.median(u[ok]))))
        mv = int(round(float(np.median(v[ok]))))
        if mu == 0 and mv == 0:
            break
        shift_x += mu
        shift_y += mv

    u, v, ok = _lk_solve(
        sa, np.roll(sb, (-shift_y, -shift_x), axis=(0, 1)), window_size, eig_threshold
    )
    return FlowField(u=u + shift_x, v=v + shift_y, valid=ok)


def _frames_of(video) -> np.ndarray:
    frames = getattr(video, "frames", video)
    frames = np.asarray(frames)
    if frames.ndim != 4:
        raise ValueError(f"expected a (F, C, H, W) video, got shape {frames.shape}")
    if frames.shape[0] < 2:
        raise ValueError("need at least 2 frames")
    return frames


def video_flows(video, **lk_kwargs) -> list[FlowField]:
    """Flow fields for every consecutive frame pair."""
    frames = _frames_of(video)
    return [lk_flow(frames[i], frames[i + 1], **lk_kwargs) for i in range(frames.shape[0] - 1)]


def flow_similarity(
    video_a,
    video_b,
    min_magnitude: float = 1e-8,
    **lk_kwargs,
) -> FlowSimilarity:
    """Direction agreement of two videos' motion, in [-1, 1].

    Per frame-pair index: cosine similarity of unit-normalized flow vectors at
    pixels that are valid in both fields and carry non-negligible motion in both,
    averaged over those pixels; then averaged over the frame pairs that had any.
    Magnitude is deliberately ignored (unit normalization), so uniformly faster
    motion in the same direction scores 1. If no frame pair has jointly usable
    pixels the result is the neutral 0.0 with the no-motion flag set.
    """
    frames_a, frames_b = _frames_of(video_a), _frames_of(video_b)
    if frames_a.shape[0] != frames_b.shape[0]:
        raise ValueError(
            f"frame count mismatch: {frames_a.shape[0]} vs {frames_b.shape[0]}"
        )
    pair_scores = []
    for i in range(frames_a.shape[0] - 1):
        fa = lk_flow(frames_a[i], frames_a[i + 1], **lk_kwargs)
        fb = lk_flow(frames_b[i], frames_b[i + 1], **lk_kwargs)
        mag_a, mag_b = fa.magnitude, fb.magnitude
        joint = fa.valid & fb.valid & (mag_a > min_magnitude) & (mag_b > min_magnitude)
        if not joint.any():
            continue
        cos = (fa.u * fb.u + fa.v * fb.v)[joint] / (mag_a * mag_b)[joint]
        pair_scores.append(float(np.mean(cos)))
    if not pair_scores:
        return FlowSimilarity(0.0, no_motion=True)
    return FlowSimilarity(float(np.mean(pair_scores)), no_motion=False)


def oracle_motion_label(
    video,
    moving_threshold: float = 0.1,
    coverage_threshold: float = 0.01,
    **lk_kwargs,
) -> MotionLabel:
    """Ground-truth-style motion readout used to grade generated clips.

    Pools flow vectors from valid pixels moving at least `moving_threshold`
    px/frame; the dominant direction is the compass bin closest to their mean
    vector and speed is their median magnitude. If moving pixels cover less than
    `coverage_threshold` of the canvas on average, the clip is labeled motionless.
    """
    flows = video_flows(video, **lk_kwargs)
    vectors = []
    coverages = []
    for f in flows:
        mag = f.magnitude
        moving = f.valid & (mag >= moving_threshold)
        coverages.append(float(moving.mean()))
        if moving.any():
            vectors.append(np.stack([f.u[moving], f.v[moving]], axis=1))
    coverage = float(np.mean(coverages))
    if coverage < coverage_threshold or not vectors:
        return MotionLabel(direction=None, speed=0.0, coverage=coverage, no_motion=True)
    pooled = np.concatenate(vectors, axis=0)
    mean_vec = pooled.mean(axis=0)
    norm = float(np.hypot(*mean_vec))
    if norm < 1e-12:
        return MotionLabel(direction=None, speed=0.0, coverage=coverage, no_motion=True)
    best = max(
        DIRECTION_VECTORS,
        key=lambda d: (mean_vec[0] * DIRECTION_VECTORS[d][0]
                       + mean_vec[1] * DIRECTION_VECTORS[d][1]) / norm,
    )
    speed = float(np.median(np.hypot(pooled[:, 0], pooled[:, 1])))
    return MotionLabel(direction=best, speed=speed, coverage=coverage, no_motion=False)


Scorer = Callable[[object, object], float]


def appearance_gain(edited_video, baseline_video, caption, scorer: Scorer) -> float:
    """How much better the edited video matches the caption than the baseline does."""
    return float(scorer(edited_video, caption)) - float(scorer(baseline_video, caption))


def temporal_consistency(video, embedder: Callable[[np.ndarray], np.ndarray]) -> float:
    """Mean cosine similarity of consecutive frame embeddings.

    `embedder` maps (F, C, H, W) frames to an (F, D) array. Near-zero embeddings
    contribute a neutral 0 for their pair instead of dividing by zero.
    """
    frames = _frames_of(video)
    emb = np.asarray(embedder(frames), dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] != frames.shape[0]:
        raise ValueError(f"embedder must return (F, D), got {emb.shape}")
    sims = []
    for i in range(emb.shape[0] - 1):
        a, b = emb[i], emb[i + 1]
        na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
        if na < 1e-12 or nb < 1e-12:
            sims.append(0.0)
        else:
            sims.append(float(np.dot(a, b) / (na * nb)))
    return float(np.mean(sims))
