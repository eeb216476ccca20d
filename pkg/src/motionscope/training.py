"""Base-model training: plain noise-prediction regression over uniform timesteps.

Conditioning is dropped two ways during training, both controlled here rather than
in the model: with probability `cond_dropout` the whole caption collapses to the
null caption, and independently each slot collapses to its null token with
probability `slot_dropout`. The per-slot path matters because evaluation prompts
routinely leave motion slots unspecified; the model has to treat a missing slot as
"no information" rather than as an unseen token.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .model import VideoDenoiser
from .rendering import ClipDataset, to_model_space
from .schedule import NoiseSchedule


def schedule_tables(sched: NoiseSchedule) -> tuple[torch.Tensor, torch.Tensor]:
    """(sqrt(alpha_bar), sqrt(1 - alpha_bar)) as float32 lookup tensors."""
    sab = torch.from_numpy(np.sqrt(sched.alpha_bar)).float()
    somb = torch.from_numpy(np.sqrt(1.0 - sched.alpha_bar)).float()
    return sab, somb


def noise_batch(
    x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor, sched: NoiseSchedule
) -> torch.Tensor:
    """Vectorized forward noising for per-sample timesteps t (long, in [1, T])."""
    sab, somb = schedule_tables(sched)
    shape = (-1,) + (1,) * (x0.ndim - 1)
    return sab[t].reshape(shape) * x0 + somb[t].reshape(shape) * eps


def _stack_clips(clips) -> torch.Tensor:
    return torch.from_numpy(np.stack([to_model_space(c.frames) for c in clips]))


@dataclass
class TrainResult:
    losses: list[float]
    val_loss: float | None = None


def train_base(
    model: VideoDenoiser,
    sched: NoiseSchedule,
    dataset: ClipDataset,
    steps: int,
    seed: int = 0,
    batch_size: int = 8,
    lr: float = 2e-4,
    cond_dropout: float = 0.1,
    slot_dropout: float = 0.1,
    log_every: int = 0,
) -> TrainResult:
    clips = dataset.train_clips
    if not clips:
        raise ValueError("dataset has no training clips")
    x_all = _stack_clips(clips)
    ids_all = model.encode_caption_ids([c.caption for c in clips])

    g = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    losses: list[float] = []
    model.train()
    for step in range(steps):
        idx = torch.randint(len(clips), (batch_size,), generator=g)
        x0 = x_all[idx]
        ids = ids_all[idx].clone()
        if cond_dropout > 0:
            drop_all = torch.rand(batch_size, generator=g) < cond_dropout
            ids[drop_all] = 0
        if slot_dropout > 0:
            drop_slot = torch.rand(ids.shape, generator=g) < slot_dropout
            ids[drop_slot] = 0
        t = torch.randint(1, sched.T + 1, (batch_size,), generator=g)
        eps = torch.randn(x0.shape, generator=g)
        x_t = noise_batch(x0, t, eps, sched)
        loss = (model(x_t, t, ids) - eps).square().mean()
        if not torch.isfinite(loss):
            raise RuntimeError(f"training loss diverged (non-finite) at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
        if log_every and (step + 1) % log_every == 0:
            recent = losses[-log_every:]
            print(f"step {step + 1}/{steps} loss {sum(recent) / len(recent):.4f}", flush=True)
    model.eval()
    return TrainResult(losses=losses)


@torch.no_grad()
def validation_loss(
    model: VideoDenoiser,
    sched: NoiseSchedule,
    dataset: ClipDataset,
    seed: int = 0,
    batches: int = 8,
    batch_size: int = 8,
) -> float:
    """Noise-prediction MSE on the val split with a fixed evaluation seed."""
    clips = dataset.val_clips
    if not clips:
        raise ValueError("dataset has no validation clips")
    x_all = _stack_clips(clips)
    ids_all = model.encode_caption_ids([c.caption for c in clips])
    g = torch.Generator().manual_seed(seed)
    model.eval()
    total = 0.0
    for _ in range(batches):
        idx = torch.randint(len(clips), (batch_size,), generator=g)
        t = torch.randint(1, sched.T + 1, (batch_size,), generator=g)
        eps = torch.randn((batch_size,) + x_all.shape[1:], generator=g)
        x_t = noise_batch(x_all[idx], t, eps, sched)
        total += float((model(x_t, t, ids_all[idx]) - eps).square().mean())
    return total / batches
