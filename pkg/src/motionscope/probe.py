"""Prompt-tampering probe: invert a clip, resample with a subject edit active only
inside a timestep window, and measure what changed.

Window convention: the edited caption conditions the denoiser for timesteps t with
tau_end < t <= tau_start (half-open, executed in descending t). This makes adjacent
windows concatenate exactly and leaves no shared endpoint.

Execution layout: each clip is inverted once under its own caption; the
reconstruction and every requested window are then resampled together as rows of
one batch. Since no operation in the sampler mixes batch rows, rows with identical
inputs stay bitwise identical all the way down — a null edit therefore reproduces
the reconstruction exactly, which doubles as a self-check of the whole pipeline.

Metric baseline: appearance gain is scored against the reconstruction row, not the
raw source clip, so that a null edit reads exactly zero and trained-model
reconstruction error cancels out of every comparison. Motion preservation is flow
similarity against the source clip.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .captions import CaptionTokens, sample_subject_edit
from .flow import flow_similarity
from .model import VideoDenoiser, clip_to_state, state_to_clip
from .rendering import VideoClip
from .schedule import NoiseSchedule, LatentTrajectory, ddim_step, invert_trajectory, subsample_timesteps
from .scorer import SubjectScorer, score_video

RECORD_COLUMNS = (
    "video_id", "tau_start", "tau_end",
    "appearance_gain", "motion_preservation", "runtime",
)


@dataclass(frozen=True)
class TimestepWindow:
    """Edited caption active for tau_end < t <= tau_start."""

    tau_start: int
    tau_end: int

    def __post_init__(self):
        if not 0 <= self.tau_end < self.tau_start:
            raise ValueError(
                f"need 0 <= tau_end < tau_start, got ({self.tau_start}, {self.tau_end}]"
            )

    def contains(self, t: int) -> bool:
        return self.tau_end < t <= self.tau_start


@dataclass
class ProbeRecord:
    video_id: str
    window: TimestepWindow
    appearance_gain: float | None
    motion_preservation: float | None
    runtime: float
    edited_video: VideoClip | None = None

    @property
    def failed(self) -> bool:
        return self.appearance_gain is None


def make_prompt_schedule(
    c: CaptionTokens, c_edit: CaptionTokens, window: TimestepWindow
) -> Callable[[int], CaptionTokens]:
    """Total map t -> conditioning caption; rejects edits that touch motion slots."""
    if not c.same_motion(c_edit):
        raise ValueError("prompt edits may only change subject slots")

    def schedule(t: int) -> CaptionTokens:
        return c_edit if window.contains(t) else c

    return schedule


def window_grid(T: int, interval: int) -> list[TimestepWindow]:
    """All ordered pairs from {0, interval, ..., T}: 55 windows for T=1000/100."""
    if interval <= 0 or T % interval != 0:
        raise ValueError(f"interval {interval} must positively divide T={T}")
    taus = list(range(0, T + 1, interval))
    return [
        TimestepWindow(tau_start=s, tau_end=e)
        for s in taus for e in taus if s > e
    ]


def record_seed(video_id: str, salt: int = 0) -> int:
    """Stable cross-platform seed for per-clip choices."""
    digest = hashlib.sha256(f"{video_id}:{salt}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def invert_clip(
    clip: VideoClip,
    model: VideoDenoiser,
    sched: NoiseSchedule,
    n_steps: int,
    caption: CaptionTokens | None = None,
) -> LatentTrajectory:
    caption = caption or clip.caption
    state = clip_to_state(clip.frames)

    def eps_fn(x, t):
        return model.predict_noise(x, t, [caption] * x.shape[0])

    return invert_trajectory(state, eps_fn, sched, n_steps)


@torch.no_grad()
def resample_batch(
    noise_latent: torch.Tensor,
    schedules: list[Callable[[int], CaptionTokens]],
    model: VideoDenoiser,
    sched: NoiseSchedule,
    n_steps: int,
) -> torch.Tensor:
    """Resample one latent under several prompt schedules as one batch."""
    desc = subsample_timesteps(sched.T, n_steps)[::-1]
    b = len(schedules)
    x = noise_latent.repeat(b, 1, 1, 1, 1)
    for i, t in enumerate(desc):
        t_prev = desc[i + 1] if i + 1 < len(desc) else 0
        ids = model.encode_caption_ids([fn(t) for fn in schedules])
        eps = model(x, torch.full((b,), t, dtype=torch.long), ids)
        x = ddim_step(x, eps, t, t_prev, sched)
    return x


def sweep_windows(
    clip: VideoClip,
    c_edit: CaptionTokens,
    windows: list[TimestepWindow],
    model: VideoDenoiser,
    scorer: SubjectScorer,
    sched: NoiseSchedule,
    n_steps: int = 50,
    keep_videos: bool = False,
) -> tuple[list[ProbeRecord], np.ndarray | None]:
    """Probe one clip over many windows.

    Returns (records, reconstruction frames). Row 0 of the resampling batch is the
    reconstruction; it is returned so callers can compare edited outputs against it
    at full precision.
    """
    c = clip.caption
    t0 = time.perf_counter()
    traj = invert_clip(clip, model, sched, n_steps)
    if not torch.isfinite(traj.noise_latent).all():
        elapsed = (time.perf_counter() - t0) / max(len(windows), 1)
        return [
            ProbeRecord(clip.clip_id, w, None, None, runtime=elapsed) for w in windows
        ], None

    identity = make_prompt_schedule(c, c, TimestepWindow(sched.T, 0))
    schedules = [identity] + [make_prompt_schedule(c, c_edit, w) for w in windows]
    states = resample_batch(traj.noise_latent, schedules, model, sched, n_steps)
    elapsed = (time.perf_counter() - t0) / max(len(windows), 1)

    recon = state_to_clip(states[0])
    records = []
    for w, state in zip(windows, states[1:]):
        if not torch.isfinite(state).all():
            records.append(ProbeRecord(clip.clip_id, w, None, None, runtime=elapsed))
            continue
        edited = state_to_clip(state)
        gain = score_video(scorer, edited, c_edit) - score_video(scorer, recon, c_edit)
        preservation = flow_similarity(edited, clip.frames).value
        video = None
        if keep_videos:
            video = VideoClip(
                frames=edited, caption=c_edit, clip_id=f"{clip.clip_id}@{w.tau_start}-{w.tau_end}",
                fps=clip.fps, meta={"source": clip.clip_id},
            )
        records.append(
            ProbeRecord(clip.clip_id, w, gain, preservation, runtime=elapsed,
                        edited_video=video)
        )
    return records, recon


def run_probe(
    clip: VideoClip,
    c_edit: CaptionTokens,
    window: TimestepWindow,
    model: VideoDenoiser,
    scorer: SubjectScorer,
    sched: NoiseSchedule,
    n_steps: int = 50,
    keep_video: bool = True,
) -> ProbeRecord:
    records, _ = sweep_windows(
        clip, c_edit, [window], model, scorer, sched, n_steps, keep_videos=keep_video
    )
    return records[0]


def sweep_corpus(
    clips: list[VideoClip],
    model: VideoDenoiser,
    scorer: SubjectScorer,
    sched: NoiseSchedule,
    interval: int = 100,
    n_steps: int = 50,
    seed: int = 0,
    edit_fn: Callable[[VideoClip], CaptionTokens] | None = None,
    skip: set[tuple[str, int, int]] | None = None,
    progress: Callable[[str], None] | None = None,
) -> list[ProbeRecord]:
    """Sweep every clip over the full window grid.

    `skip` lists (video_id, tau_start, tau_end) triples whose records already
    exist; a clip is only skipped when all of its windows are done.
    """
    grid = window_grid(sched.T, interval)
    records = []
    for clip in clips:
        todo = grid
        if skip:
            todo = [w for w in grid if (clip.clip_id, w.tau_start, w.tau_end) not in skip]
            if not todo:
                continue
        if edit_fn is not None:
            c_edit = edit_fn(clip)
        else:
            rng = np.random.default_rng(record_seed(clip.clip_id, seed))
            c_edit = sample_subject_edit(clip.caption, rng)
        clip_records, _ = sweep_windows(clip, c_edit, todo, model, scorer, sched, n_steps)
        records.extend(clip_records)
        if progress is not None:
            progress(clip.clip_id)
    return records


def _fmt(value: float | None) -> str:
    return "nan" if value is None else repr(float(value))


def records_to_csv(records: list[ProbeRecord], path) -> None:
    rows = sorted(records, key=lambda r: (r.video_id, r.window.tau_start, r.window.tau_end))
    lines = [",".join(RECORD_COLUMNS)]
    for r in rows:
        lines.append(
            ",".join(
                [r.video_id, str(r.window.tau_start), str(r.window.tau_end),
                 _fmt(r.appearance_gain), _fmt(r.motion_preservation), repr(r.runtime)]
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_records_csv(path) -> list[ProbeRecord]:
    lines = Path(path).read_text().strip().splitlines()
    header = tuple(lines[0].split(","))
    if header != RECORD_COLUMNS:
        raise ValueError(f"unexpected record columns {header}")
    records = []
    for line in lines[1:]:
        vid, ts, te, gain, pres, rt = line.split(",")
        g = float(gain)
        p = float(pres)
        records.append(
            ProbeRecord(
                video_id=vid,
                window=TimestepWindow(int(ts), int(te)),
                appearance_gain=None if np.isnan(g) else g,
                motion_preservation=None if np.isnan(p) else p,
                runtime=float(rt),
            )
        )
    return records
