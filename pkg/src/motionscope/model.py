"""Toy text-to-video denoiser in two attention layouts.

Both variants are small patch-token transformers over (F, C, H, W) pixel clips that
predict the noise component of a diffusion state:

* factorized: per block, a per-frame spatial self-attention over pixel tokens, a
  per-frame caption cross-attention (queries are pixel tokens, keys/values are the
  caption tokens alone), then a per-position temporal self-attention across frames,
  then an MLP. The spatial sublayers are frame-wise equivariant; frame identity
  only enters inside the temporal sublayer via its frame-position table.
* unified: per block, one joint self-attention over all F*N patch tokens with the
  caption tokens appended to the key/value set (tiled `caption_repeat` times so a
  handful of caption tokens is not drowned out by every patch token), then an MLP.

The factorized conditioning is deliberately a dedicated cross-attention rather
than appending caption tokens to the self-attention kv set: in the appended form
the softmax may simply never route mass to the caption, and on a corpus this easy
the model then denoises from pixel evidence alone and stays caption-blind. A
cross-attention block whose kv set is only the caption cannot be gated out that
way. The cross sublayer carries the "spatial" scope tag: it acts per frame and
edits appearance, not motion.

Every attention sublayer exposes named q/k/v/o projections, carries a scope tag
("spatial", "temporal" or "unified") and a stable qualified name, and routes each
projection through an optional hook so adapters can add deltas without the model
knowing anything about them. Timesteps are 1-based; t is embedded sinusoidally and
added to every token.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .captions import CaptionTokens, CaptionVocab, SLOTS
from .rendering import from_model_space, to_model_space
from .schedule import NoiseSchedule

CHECKPOINT_VERSION = 1

VARIANTS = ("factorized", "unified")
PROJECTIONS = ("Q", "K", "V", "O")


@dataclass(frozen=True)
class DenoiserConfig:
    variant: str = "factorized"
    width: int = 64
    depth: int = 3
    heads: int = 4
    cond_dim: int = 32
    patch_size: int = 4
    frames: int = 8
    channels: int = 3
    image_size: int = 32
    # Unified variant only: each caption token appears this many times in the
    # joint attention kv set, so 4 caption tokens are not outnumbered 128:1 by
    # patch tokens. The factorized variant conditions through a dedicated
    # cross-attention instead and ignores this.
    caption_repeat: int = 8

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.width % self.heads != 0:
            raise ValueError(f"width {self.width} must divide evenly into {self.heads} heads")
        if self.image_size % self.patch_size != 0:
            raise ValueError("patch_size must tile image_size exactly")
        if self.caption_repeat < 1:
            raise ValueError("caption_repeat must be at least 1")

    @property
    def tokens_per_frame(self) -> int:
        return (self.image_size // self.patch_size) ** 2


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1)
    )
    angles = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)


class CaptionEncoder(nn.Module):
    """Per-slot embedding tables plus a learned slot-position table."""

    def __init__(self, vocab: CaptionVocab, cond_dim: int):
        super().__init__()
        sizes = vocab.slot_sizes()
        self.tables = nn.ModuleList(
            [nn.Embedding(sizes[slot], cond_dim) for slot in SLOTS]
        )
        self.slot_pos = nn.Parameter(torch.zeros(len(SLOTS), cond_dim))

    def forward(self, slot_ids: torch.Tensor) -> torch.Tensor:
        # slot_ids: (B, S) per-slot indices -> (B, S, cond_dim)
        cols = [table(slot_ids[:, i]) for i, table in enumerate(self.tables)]
        return torch.stack(cols, dim=1) + self.slot_pos


class Attention(nn.Module):
    """Multi-head attention with named, hookable projections."""

    def __init__(self, width: int, heads: int, tag: str, qualname: str):
        super().__init__()
        self.heads = heads
        self.tag = tag
        self.qualname = qualname
        self.q_proj = nn.Linear(width, width)
        self.k_proj = nn.Linear(width, width)
        self.v_proj = nn.Linear(width, width)
        self.o_proj = nn.Linear(width, width)

    def _apply_proj(self, lin: nn.Linear, name: str, x: torch.Tensor, hook):
        out = lin(x)
        if hook is not None:
            delta = hook(self.qualname, name, x)
            if delta is not None:
                out = out + delta
        return out

    def forward(self, q_in: torch.Tensor, kv_in: torch.Tensor, hook=None) -> torch.Tensor:
        b, nq, d = q_in.shape
        nk = kv_in.shape[1]
        q = self._apply_proj(self.q_proj, "Q", q_in, hook)
        k = self._apply_proj(self.k_proj, "K", kv_in, hook)
        v = self._apply_proj(self.v_proj, "V", kv_in, hook)
        hd = d // self.heads
        q = q.view(b, nq, self.heads, hd).transpose(1, 2)
        k = k.view(b, nk, self.heads, hd).transpose(1, 2)
        v = v.view(b, nk, self.heads, hd).transpose(1, 2)
        out = F.scaled_dot_product_attention(q, k, v)
        out = out.transpose(1, 2).reshape(b, nq, d)
        return self._apply_proj(self.o_proj, "O", out, hook)


def _mlp(width: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(width, width * 4), nn.GELU(), nn.Linear(width * 4, width)
    )


class FactorizedBlock(nn.Module):
    def __init__(self, cfg: DenoiserConfig, index: int):
        super().__init__()
        self.norm_spatial = nn.LayerNorm(cfg.width)
        self.spatial = Attention(cfg.width, cfg.heads, "spatial", f"block{index}.spatial")
        self.norm_cross = nn.LayerNorm(cfg.width)
        self.cross = Attention(cfg.width, cfg.heads, "spatial", f"block{index}.cross")
        self.norm_temporal = nn.LayerNorm(cfg.width)
        self.temporal = Attention(cfg.width, cfg.heads, "temporal", f"block{index}.temporal")
        self.frame_pos = nn.Parameter(torch.zeros(cfg.frames, cfg.width))
        self.norm_mlp = nn.LayerNorm(cfg.width)
        self.mlp = _mlp(cfg.width)

    def _spatial(self, x: torch.Tensor, hook=None) -> torch.Tensor:
        # x: (B, F, N, D); per-frame self-attention over pixel tokens
        b, f, n, d = x.shape
        h = self.norm_spatial(x).reshape(b * f, n, d)
        return self.spatial(h, h, hook).reshape(b, f, n, d)

    def _cross(self, x: torch.Tensor, cond: torch.Tensor, hook=None) -> torch.Tensor:
        # per-frame cross-attention; the kv set is the caption tokens only
        b, f, n, d = x.shape
        h = self.norm_cross(x).reshape(b * f, n, d)
        kv = cond.repeat_interleave(f, dim=0)
        return self.cross(h, kv, hook).reshape(b, f, n, d)

    def _temporal(self, x: torch.Tensor, hook=None) -> torch.Tensor:
        # per-position attention over frames; frame identity is injected here only
        b, f, n, d = x.shape
        h = self.norm_temporal(x).permute(0, 2, 1, 3).reshape(b * n, f, d)
        h = h + self.frame_pos
        out = self.temporal(h, h, hook)
        return out.reshape(b, n, f, d).permute(0, 2, 1, 3)

    def forward(self, x: torch.Tensor, cond: torch.Tensor, hook=None) -> torch.Tensor:
        x = x + self._spatial(x, hook)
        x = x + self._cross(x, cond, hook)
        x = x + self._temporal(x, hook)
        return x + self.mlp(self.norm_mlp(x))


class UnifiedBlock(nn.Module):
    def __init__(self, cfg: DenoiserConfig, index: int):
        super().__init__()
        self.norm_attn = nn.LayerNorm(cfg.width)
        self.attn = Attention(cfg.width, cfg.heads, "unified", f"block{index}.unified")
        self.norm_mlp = nn.LayerNorm(cfg.width)
        self.mlp = _mlp(cfg.width)

    def forward(self, x: torch.Tensor, cond: torch.Tensor, hook=None) -> torch.Tensor:
        # x: (B, F*N, D); one joint space-time attention with caption tokens in kv
        h = self.norm_attn(x)
        kv = torch.cat([h, cond], dim=1)
        x = x + self.attn(h, kv, hook)
        return x + self.mlp(self.norm_mlp(x))


class VideoDenoiser(nn.Module):
    """Noise predictor over pixel clips; see the module docstring for layouts."""

    def __init__(self, cfg: DenoiserConfig, vocab: CaptionVocab | None = None):
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab or CaptionVocab()

        p, d = cfg.patch_size, cfg.width
        self.patch_embed = nn.Conv2d(cfg.channels, d, kernel_size=p, stride=p)
        self.spatial_pos = nn.Parameter(torch.zeros(cfg.tokens_per_frame, d))
        self.temporal_pos = (
            nn.Parameter(torch.zeros(cfg.frames, d)) if cfg.variant == "unified" else None
        )
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, d))
        self.caption_encoder = CaptionEncoder(self.vocab, cfg.cond_dim)
        self.cond_proj = nn.Linear(cfg.cond_dim, d)
        # pixel tokens enter attention layer-normed; caption tokens must too,
        # or their keys start at the wrong scale and attention tunes them out
        self.cond_norm = nn.LayerNorm(d)

        block_cls = FactorizedBlock if cfg.variant == "factorized" else UnifiedBlock
        self.blocks = nn.ModuleList(block_cls(cfg, i) for i in range(cfg.depth))

        self.norm_out = nn.LayerNorm(d)
        self.head = nn.Linear(d, p * p * cfg.channels)
        # learned t-dependent input passthrough: eps_hat = gain(t) * x_t + f(x_t, t, c).
        # gain(t) converges to ~1/sqrt(1-alpha_bar_t) within a few hundred steps,
        # which frees f from reproducing the white-noise component of x_t through
        # the patch bottleneck. Without the skip that reproduction error (~1e-2)
        # buries the caption-dependent content term (~alpha_bar-scale at high t),
        # and conditioning never trains on a corpus this easy to denoise.
        self.skip_gain = nn.Sequential(nn.Linear(d, d // 4), nn.GELU(), nn.Linear(d // 4, 1))
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        nn.init.zeros_(self.skip_gain[-1].weight)
        nn.init.zeros_(self.skip_gain[-1].bias)
        nn.init.normal_(self.spatial_pos, std=0.02)
        if self.temporal_pos is not None:
            nn.init.normal_(self.temporal_pos, std=0.02)
        for block in self.blocks:
            if isinstance(block, FactorizedBlock):
                nn.init.normal_(block.frame_pos, std=0.02)

    def encode_caption_ids(self, captions: list[CaptionTokens]) -> torch.Tensor:
        ids = [self.vocab.encode_slots(c) for c in captions]
        return torch.as_tensor(ids, dtype=torch.long)

    def attention_layers(self) -> list[tuple[str, str, Attention]]:
        out = []
        for module in self.modules():
            if isinstance(module, Attention):
                out.append((module.qualname, module.tag, module))
        return out

    def forward(
        self,
        x: torch.Tensor,
        t: torch.Tensor,
        slot_ids: torch.Tensor,
        hook=None,
    ) -> torch.Tensor:
        """Predict noise for states x at timesteps t.

        Args:
            x: (B, F, C, H, W) diffusion states.
            t: (B,) long timesteps in [1, T].
            slot_ids: (B, S) per-slot caption token indices.
            hook: optional projection hook (qualname, proj_name, input) -> delta.
        """
        cfg = self.cfg
        b, f, c, h, w = x.shape
        if (f, c, h, w) != (cfg.frames, cfg.channels, cfg.image_size, cfg.image_size):
            raise ValueError(
                f"state shape {x.shape[1:]} does not match config "
                f"({cfg.frames}, {cfg.channels}, {cfg.image_size}, {cfg.image_size})"
            )
        tok = self.patch_embed(x.reshape(b * f, c, h, w))
        tok = tok.flatten(2).transpose(1, 2)  # (B*F, N, D)
        tok = tok + self.spatial_pos
        n = tok.shape[1]
        tok = tok.reshape(b, f, n, cfg.width)

        temb = self.time_mlp(sinusoidal_embedding(t, cfg.width).to(tok.dtype))
        tok = tok + temb[:, None, None, :]
        cond = self.cond_norm(self.cond_proj(self.caption_encoder(slot_ids)))
        if cfg.variant == "unified" and cfg.caption_repeat > 1:
            cond = cond.repeat_interleave(cfg.caption_repeat, dim=1)

        if cfg.variant == "factorized":
            for block in self.blocks:
                tok = block(tok, cond, hook)
        else:
            tok = tok + self.temporal_pos[None, :, None, :]
            tok = tok.reshape(b, f * n, cfg.width)
            for block in self.blocks:
                tok = block(tok, cond, hook)
            tok = tok.reshape(b, f, n, cfg.width)

        out = self.head(self.norm_out(tok))  # (B, F, N, p*p*C)
        p = cfg.patch_size
        g = cfg.image_size // p
        out = out.reshape(b, f, g, g, p, p, c)
        out = out.permute(0, 1, 6, 2, 4, 3, 5)
        gain = self.skip_gain(temb).reshape(b, 1, 1, 1, 1)
        return out.reshape(b, f, c, h, w) + gain * x

    @torch.no_grad()
    def predict_noise(
        self,
        x: torch.Tensor,
        t: int | torch.Tensor,
        captions: list[CaptionTokens],
        hook=None,
    ) -> torch.Tensor:
        """Inference convenience: accepts a scalar timestep and caption objects."""
        if isinstance(t, int):
            t = torch.full((x.shape[0],), t, dtype=torch.long)
        return self.forward(x, t, self.encode_caption_ids(captions), hook=hook)

    def count_params(self) -> int:
        return sum(p.numel() for p in self.parameters())


def save_checkpoint(
    path,
    model: VideoDenoiser,
    sched: NoiseSchedule,
    extra: dict | None = None,
) -> None:
    """Single-archive checkpoint: weights, config, schedule block, vocab, version."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "schedule_text": sched.to_text_block(),
        "vocab": model.vocab.to_dict(),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[VideoDenoiser, NoiseSchedule, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format {version!r}")
    cfg = DenoiserConfig(**payload["config"])
    vocab = CaptionVocab.from_dict(payload["vocab"])
    model = VideoDenoiser(cfg, vocab)
    model.load_state_dict(payload["state_dict"])
    sched = NoiseSchedule.from_text_block(payload["schedule_text"])
    return model, sched, payload.get("extra", {})


def clip_to_state(frames: np.ndarray) -> torch.Tensor:
    """[0,1] pixel frames -> (1, F, C, H, W) float32 state in [-1, 1]."""
    return torch.from_numpy(to_model_space(frames))[None]


def state_to_clip(state: torch.Tensor) -> np.ndarray:
    """Model-space state -> clamped [0,1] pixel frames (drops the batch dim)."""
    arr = state.detach().cpu().numpy()
    if arr.ndim == 5:
        arr = arr[0]
    return from_model_space(arr)
