"""Frame-level subject classifier used as the appearance judge.

A small CNN predicts (color, shape) per frame. Video-level alignment with a caption
is the mean over frames of the log-probabilities of the caption's color and shape.
Training mixes light Gaussian corruption of clean frames with pure-noise batches
whose target posterior is uniform, so the judge stays calibrated on the imperfect
frames that resampling produces instead of confidently hallucinating a subject.

The penultimate feature layer doubles as a frame embedder for temporal-consistency
measurements; features are centered by a stored dataset mean so that cosine
similarity between consecutive frames is informative rather than saturated.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .captions import COLORS, SHAPES, CaptionTokens
from .rendering import ClipDataset

SCORER_VERSION = 1


class SubjectScorer(nn.Module):
    def __init__(self, n_colors: int = len(COLORS), n_shapes: int = len(SHAPES),
                 feature_dim: int = 128, image_size: int = 32):
        super().__init__()
        if image_size % 8 != 0:
            raise ValueError(f"image_size must be divisible by 8, got {image_size}")
        self.n_colors = n_colors
        self.n_shapes = n_shapes
        self.image_size = image_size
        side = image_size // 8  # three stride-2 convs
        self.backbone = nn.Sequential(
            nn.Conv2d(3, 32, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(64, 64, 3, stride=2, padding=1), nn.GELU(),
            nn.Flatten(),
            nn.Linear(64 * side * side, feature_dim), nn.GELU(),
        )
        self.color_head = nn.Linear(feature_dim, n_colors)
        self.shape_head = nn.Linear(feature_dim, n_shapes)
        # dataset mean of penultimate features, filled in after training
        self.register_buffer("feature_center", torch.zeros(feature_dim))

    def forward(self, frames: torch.Tensor):
        """frames: (B, 3, H, W) in [0, 1] -> (color logits, shape logits, features)."""
        feats = self.backbone(frames)
        return self.color_head(feats), self.shape_head(feats), feats


def _frames_tensor(video: np.ndarray) -> torch.Tensor:
    arr = np.asarray(video, dtype=np.float32)
    if arr.ndim != 4:
        raise ValueError(f"expected (F, C, H, W) video, got shape {arr.shape}")
    return torch.from_numpy(arr)


@torch.no_grad()
def score_video(scorer: SubjectScorer, video: np.ndarray, caption: CaptionTokens) -> float:
    """Mean over frames of log p(color) + log p(shape) for the caption's subject."""
    if caption.color is None or caption.shape is None:
        raise ValueError("alignment scoring needs both subject slots set")
    scorer.eval()
    cl, sl, _ = scorer(_frames_tensor(video))
    lc = F.log_softmax(cl, dim=1)[:, COLORS.index(caption.color)]
    ls = F.log_softmax(sl, dim=1)[:, SHAPES.index(caption.shape)]
    return float((lc + ls).mean())


@torch.no_grad()
def classify_video(scorer: SubjectScorer, video: np.ndarray) -> tuple[str, str]:
    """Majority-free subject read-out: argmax of frame-mean log-probs."""
    scorer.eval()
    cl, sl, _ = scorer(_frames_tensor(video))
    color = COLORS[int(F.log_softmax(cl, dim=1).mean(0).argmax())]
    shape = SHAPES[int(F.log_softmax(sl, dim=1).mean(0).argmax())]
    return color, shape


@torch.no_grad()
def embed_frames(scorer: SubjectScorer, video: np.ndarray) -> np.ndarray:
    """Centered penultimate features per frame, for temporal-consistency cosines."""
    scorer.eval()
    _, _, feats = scorer(_frames_tensor(video))
    return (feats - scorer.feature_center).numpy()


def train_scorer(
    dataset: ClipDataset,
    steps: int = 600,
    seed: int = 0,
    batch_size: int = 64,
    lr: float = 1e-3,
    noise_std: float = 0.15,
    noise_batch_every: int = 4,
) -> tuple[SubjectScorer, list[float]]:
    """Train the judge on single frames from the train split.

    Every `noise_batch_every`-th step feeds pure uniform noise with a uniform
    target posterior instead of labeled frames.
    """
    torch.manual_seed(seed)
    scorer = SubjectScorer(image_size=dataset.spec.image_size)
    g = torch.Generator().manual_seed(seed + 1)

    clips = dataset.train_clips
    if not clips:
        raise ValueError("dataset has no training clips")
    frames = torch.from_numpy(np.stack([c.frames for c in clips]))  # (M, F, 3, H, W)
    color_ids = torch.tensor([COLORS.index(c.caption.color) for c in clips])
    shape_ids = torch.tensor([SHAPES.index(c.caption.shape) for c in clips])
    n_clips, n_frames = frames.shape[0], frames.shape[1]

    opt = torch.optim.Adam(scorer.parameters(), lr=lr)
    losses: list[float] = []
    for step in range(steps):
        if noise_batch_every and step % noise_batch_every == noise_batch_every - 1:
            x = torch.rand((batch_size, 3) + frames.shape[-2:], generator=g)
            cl, sl, _ = scorer(x)
            loss = -(F.log_softmax(cl, 1).mean() + F.log_softmax(sl, 1).mean())
        else:
            ci = torch.randint(n_clips, (batch_size,), generator=g)
            fi = torch.randint(n_frames, (batch_size,), generator=g)
            x = frames[ci, fi]
            # random toroidal shifts: subjects must be recognized anywhere on the
            # canvas, not just at the training clips' start positions
            shifts = torch.randint(x.shape[-1], (batch_size, 2), generator=g)
            x = torch.stack(
                [torch.roll(f, (int(s[0]), int(s[1])), dims=(-2, -1))
                 for f, s in zip(x, shifts)]
            )
            sigma = torch.rand((batch_size, 1, 1, 1), generator=g) * noise_std
            x = (x + torch.randn(x.shape, generator=g) * sigma).clamp(0, 1)
            cl, sl, _ = scorer(x)
            loss = F.cross_entropy(cl, color_ids[ci]) + F.cross_entropy(sl, shape_ids[ci])
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))

    # freeze the feature center on clean training frames
    scorer.eval()
    with torch.no_grad():
        flat = frames.reshape(-1, *frames.shape[2:])
        centers = []
        for chunk in torch.split(flat, 256):
            centers.append(scorer(chunk)[2])
        scorer.feature_center.copy_(torch.cat(centers).mean(0))
    return scorer, losses


@torch.no_grad()
def subject_accuracy(scorer: SubjectScorer, clips) -> float:
    """Fraction of clips whose (color, shape) read-out matches the caption."""
    hits = 0
    for clip in clips:
        color, shape = classify_video(scorer, clip.frames)
        hits += int(color == clip.caption.color and shape == clip.caption.shape)
    return hits / len(clips)


def save_scorer(path, scorer: SubjectScorer) -> None:
    torch.save(
        {
            "format_version": SCORER_VERSION,
            "n_colors": scorer.n_colors,
            "n_shapes": scorer.n_shapes,
            "image_size": scorer.image_size,
            "state_dict": scorer.state_dict(),
        },
        path,
    )


def load_scorer(path) -> SubjectScorer:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != SCORER_VERSION:
        raise ValueError(f"unsupported scorer format {payload.get('format_version')!r}")
    scorer = SubjectScorer(
        payload["n_colors"], payload["n_shapes"], image_size=payload["image_size"]
    )
    scorer.load_state_dict(payload["state_dict"])
    return scorer
