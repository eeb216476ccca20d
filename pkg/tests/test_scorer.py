import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from motionscope.captions import COLORS, SHAPES, CaptionTokens
from motionscope.flow import temporal_consistency
from motionscope.scorer import (
    SubjectScorer,
    classify_video,
    embed_frames,
    load_scorer,
    save_scorer,
    score_video,
    subject_accuracy,
    train_scorer,
)


@pytest.fixture(scope="module")
def trained(small_dataset):
    scorer, losses = train_scorer(small_dataset, steps=500, seed=3)
    return scorer, losses, small_dataset


def test_training_loss_drops(trained):
    _, losses, _ = trained
    assert len(losses) == 500
    assert np.mean(losses[-50:]) < 0.5 * np.mean(losses[:10])


def test_val_subject_accuracy(trained):
    scorer, _, ds = trained
    assert subject_accuracy(scorer, ds.val_clips) >= 0.99


def test_noise_posterior_is_flat(trained):
    scorer, _, _ = trained
    g = torch.Generator().manual_seed(0)
    x = torch.rand((32, 3, 32, 32), generator=g)
    with torch.no_grad():
        cl, sl, _ = scorer(x)
    for logits, n in ((cl, len(COLORS)), (sl, len(SHAPES))):
        probs = F.softmax(logits, dim=1).mean(0)
        entropy = float(-(probs * probs.log()).sum())
        assert entropy >= 0.8 * math.log(n)


def test_true_caption_outscores_swap(trained):
    scorer, _, ds = trained
    wins = 0
    clips = ds.val_clips
    for clip in clips:
        true = score_video(scorer, clip.frames, clip.caption)
        other_color = next(c for c in ds.spec.colors if c != clip.caption.color)
        swapped = clip.caption.with_subject(color=other_color)
        wins += int(true > score_video(scorer, clip.frames, swapped))
    assert wins == len(clips)


def test_classify_matches_captions(trained):
    scorer, _, ds = trained
    clip = ds.val_clips[0]
    assert classify_video(scorer, clip.frames) == (clip.caption.color, clip.caption.shape)


def test_score_requires_subject_slots(trained):
    scorer, _, ds = trained
    clip = ds.val_clips[0]
    headless = CaptionTokens(None, clip.caption.shape, None, None)
    with pytest.raises(ValueError):
        score_video(scorer, clip.frames, headless)


def test_embeddings_flag_subject_flicker(trained):
    scorer, _, ds = trained
    clips = ds.val_clips
    a = clips[0]
    b = next(
        c for c in clips
        if c.caption.color != a.caption.color and c.caption.shape != a.caption.shape
    )
    feats = embed_frames(scorer, a.frames)
    assert feats.shape == (a.n_frames, 128)

    def embedder(video):
        return embed_frames(scorer, video)

    clean = temporal_consistency(a.frames, embedder)
    flicker = a.frames.copy()
    flicker[1::2] = b.frames[1::2]
    assert clean > 0.9
    assert temporal_consistency(flicker, embedder) < 0.5


def test_save_load_round_trip(trained, tmp_path):
    scorer, _, ds = trained
    path = tmp_path / "scorer.pt"
    save_scorer(path, scorer)
    loaded = load_scorer(path)
    clip = ds.val_clips[0]
    assert score_video(loaded, clip.frames, clip.caption) == score_video(
        scorer, clip.frames, clip.caption
    )
    np.testing.assert_array_equal(
        loaded.feature_center.numpy(), scorer.feature_center.numpy()
    )


def test_load_rejects_unknown_version(tmp_path):
    scorer = SubjectScorer()
    path = tmp_path / "scorer.pt"
    save_scorer(path, scorer)
    blob = torch.load(path, weights_only=False)
    blob["format_version"] = -1
    torch.save(blob, path)
    with pytest.raises(ValueError, match="format"):
        load_scorer(path)


def test_training_is_seed_deterministic(small_dataset):
    _, la = train_scorer(small_dataset, steps=25, seed=9)
    _, lb = train_scorer(small_dataset, steps=25, seed=9)
    assert la == lb
