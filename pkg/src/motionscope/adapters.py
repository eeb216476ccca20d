"""Timestep-gated adapters on attention projections.

Two parameterizations behind one interface: low-rank (delta W = (alpha/r) B A with
A Gaussian-initialized and B zero) and direct (a full-rank additive delta, zero
initialized). Both start as exact identities and both are applied through the
model's projection hook, so the base weights are never touched; "direct tuning"
means full-rank capacity, not literal in-place mutation, which keeps the timestep
gate and the identity guarantees uniform across modes.

The gate: the adapter contributes only when the current timestep t >= tau. During
training t is only ever sampled from [tau, T], so the gate binds at inference time,
where the sampler decides per step whether to pass the hook at all. Setting
tau > T therefore disables the adapter entirely without removing it.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .captions import CaptionTokens
from .flow import flow_similarity, oracle_motion_label, temporal_consistency
from .model import VideoDenoiser, state_to_clip
from .rendering import VideoClip
from .schedule import NoiseSchedule, ddim_step, subsample_timesteps
from .scorer import SubjectScorer, classify_video, embed_frames, score_video
from .training import noise_batch

ADAPTER_VERSION = 1
SCOPES = ("temporal", "unified")
MODES = ("lora", "direct")
PROJECTIONS = ("Q", "K", "V", "O")

EVAL_COLUMNS = (
    "label", "tau", "mode", "rank", "layers",
    "alignment", "consistency", "motion_fidelity", "direction_accuracy",
    "leakage_rate", "n_samples",
)


@dataclass(frozen=True)
class LoraAdapterConfig:
    rank: int = 4
    alpha: float = 8.0
    target_layers: tuple[str, ...] = ("Q", "K", "V", "O")
    target_scope: str = "temporal"
    tau: int = 0
    mode: str = "lora"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.target_scope not in SCOPES:
            raise ValueError(f"unknown scope {self.target_scope!r}")
        if not self.target_layers or any(p not in PROJECTIONS for p in self.target_layers):
            raise ValueError(f"target_layers must be a nonempty subset of {PROJECTIONS}")
        if len(set(self.target_layers)) != len(self.target_layers):
            raise ValueError("duplicate target layers")
        if self.mode == "lora" and self.rank < 1:
            raise ValueError("rank must be positive")
        if self.tau < 0:
            raise ValueError("tau must be nonnegative")


def _key(qualname: str, proj: str) -> str:
    return f"{qualname}.{proj}".replace(".", "__")


class MotionAdapter(nn.Module):
    """Additive deltas for the targeted projections of one model."""

    def __init__(self, cfg: LoraAdapterConfig, model: VideoDenoiser, init_seed: int = 0):
        super().__init__()
        self.cfg = cfg
        scope_variant = {"temporal": "factorized", "unified": "unified"}[cfg.target_scope]
        if model.cfg.variant != scope_variant:
            raise ValueError(
                f"scope {cfg.target_scope!r} targets the {scope_variant} variant, "
                f"model is {model.cfg.variant!r}"
            )
        targets = [
            (qualname, attn)
            for qualname, tag, attn in model.attention_layers()
            if tag == cfg.target_scope
        ]
        if not targets:
            raise ValueError(f"model has no {cfg.target_scope!r} attention layers")

        g = torch.Generator().manual_seed(init_seed)
        self.params = nn.ParameterDict()
        self.target_keys: list[tuple[str, str]] = []
        for qualname, attn in targets:
            for proj in cfg.target_layers:
                lin: nn.Linear = getattr(attn, f"{proj.lower()}_proj")
                d_out, d_in = lin.weight.shape
                key = _key(qualname, proj)
                if cfg.mode == "lora":
                    a = torch.randn(cfg.rank, d_in, generator=g) * 0.02
                    self.params[key + "__A"] = nn.Parameter(a)
                    self.params[key + "__B"] = nn.Parameter(torch.zeros(d_out, cfg.rank))
                else:
                    self.params[key + "__D"] = nn.Parameter(torch.zeros(d_out, d_in))
                self.target_keys.append((qualname, proj))
        self.applications = 0

    def delta(self, qualname: str, proj: str, x: torch.Tensor) -> torch.Tensor | None:
        key = _key(qualname, proj)
        if self.cfg.mode == "lora":
            a = self.params.get(key + "__A")
            if a is None:
                return None
            b = self.params[key + "__B"]
            self.applications += 1
            return (x @ a.T) @ b.T * (self.cfg.alpha / self.cfg.rank)
        d = self.params.get(key + "__D")
        if d is None:
            return None
        self.applications += 1
        return x @ d.T

    def projection_hook(self, qualname: str, proj: str, x: torch.Tensor):
        return self.delta(qualname, proj, x)

    def active_at(self, t: int) -> bool:
        return t >= self.cfg.tau

    def hook_for(self, t: int):
        return self.projection_hook if self.active_at(t) else None

    def count_params(self) -> int:
        return sum(p.numel() for p in self.params.values())


def init_adapter(
    cfg: LoraAdapterConfig, model: VideoDenoiser, init_seed: int = 0
) -> MotionAdapter:
    return MotionAdapter(cfg, model, init_seed=init_seed)


def train_constrained(
    model: VideoDenoiser,
    sched: NoiseSchedule,
    adapter: MotionAdapter,
    reference: VideoClip,
    steps: int,
    seed: int = 0,
    lr: float = 1e-4,
    batch_size: int = 4,
) -> list[float]:
    """Fit the adapter to one reference clip with noise regression on t in [tau, T].

    The reference caption conditions every step; no caption dropout here. Base
    weights are frozen for the duration and restored to trainable afterwards.
    """
    tau = adapter.cfg.tau
    t_lo = max(tau, 1)
    if t_lo > sched.T:
        raise ValueError(f"tau={tau} leaves no trainable timesteps in [1, {sched.T}]")
    from .model import clip_to_state

    x0 = clip_to_state(reference.frames).repeat(batch_size, 1, 1, 1, 1)
    ids = model.encode_caption_ids([reference.caption] * batch_size)
    g = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(adapter.parameters(), lr=lr)
    model.requires_grad_(False)
    model.eval()
    losses = []
    try:
        for step in range(steps):
            t = torch.randint(t_lo, sched.T + 1, (batch_size,), generator=g)
            eps = torch.randn(x0.shape, generator=g)
            x_t = noise_batch(x0, t, eps, sched)
            pred = model(x_t, t, ids, hook=adapter.projection_hook)
            loss = (pred - eps).square().mean()
            if not torch.isfinite(loss):
                raise RuntimeError(f"adapter training diverged at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
    finally:
        model.requires_grad_(True)
    return losses


@torch.no_grad()
def sample_batch(
    model: VideoDenoiser,
    adapter: MotionAdapter | None,
    prompts: list[CaptionTokens],
    seeds: list[int],
    sched: NoiseSchedule,
    n_steps: int = 50,
) -> list[VideoClip]:
    """Seeded DDIM generations; the adapter (if any) is gated per timestep.

    Each row's starting noise comes from its own generator, so a sample depends
    only on its (prompt, seed) pair, not on batch composition.
    """
    if len(prompts) != len(seeds):
        raise ValueError("need one seed per prompt")
    cfg = model.cfg
    shape = (1, cfg.frames, cfg.channels, cfg.image_size, cfg.image_size)
    rows = [
        torch.randn(shape, generator=torch.Generator().manual_seed(s)) for s in seeds
    ]
    x = torch.cat(rows, dim=0)
    ids = model.encode_caption_ids(prompts)
    desc = subsample_timesteps(sched.T, n_steps)[::-1]
    b = len(prompts)
    for i, t in enumerate(desc):
        t_prev = desc[i + 1] if i + 1 < len(desc) else 0
        hook = adapter.hook_for(t) if adapter is not None else None
        eps = model(x, torch.full((b,), t, dtype=torch.long), ids, hook=hook)
        x = ddim_step(x, eps, t, t_prev, sched)
    return [
        VideoClip(
            frames=state_to_clip(x[i]),
            caption=prompts[i],
            clip_id=f"gen-{seeds[i]}",
            meta={"seed": seeds[i]},
        )
        for i in range(b)
    ]


def sample_with_adapter(
    model: VideoDenoiser,
    adapter: MotionAdapter | None,
    prompt: CaptionTokens,
    sched: NoiseSchedule,
    n_steps: int = 50,
    seed: int = 0,
) -> VideoClip:
    return sample_batch(model, adapter, [prompt], [seed], sched, n_steps)[0]


@dataclass
class CustomizationEval:
    alignment: float
    consistency: float
    motion_fidelity: float
    direction_accuracy: float
    leakage_rate: float
    n_samples: int


def evaluate_customization(
    model: VideoDenoiser,
    adapter: MotionAdapter | None,
    reference: VideoClip,
    prompts: list[CaptionTokens],
    scorer: SubjectScorer,
    sched: NoiseSchedule,
    seeds: list[int],
    n_steps: int = 50,
) -> CustomizationEval:
    """Generate one sample per (prompt, seed) pair and score the batch.

    Leakage: the oracle classifier reads the reference subject out of a sample
    that was prompted with a different subject.
    """
    if len(prompts) != len(seeds):
        raise ValueError("need one seed per prompt")
    samples = sample_batch(model, adapter, prompts, seeds, sched, n_steps)
    ref_subject = (reference.caption.color, reference.caption.shape)
    ref_direction = reference.caption.direction

    def embedder(video):
        return embed_frames(scorer, video)

    alignments, consistencies, fidelities = [], [], []
    leaks = 0
    direction_hits = 0
    for prompt, sample in zip(prompts, samples):
        alignments.append(score_video(scorer, sample.frames, prompt))
        consistencies.append(temporal_consistency(sample.frames, embedder))
        fidelities.append(flow_similarity(sample.frames, reference.frames).value)
        leaks += int(classify_video(scorer, sample.frames) == ref_subject)
        label = oracle_motion_label(sample.frames)
        direction_hits += int(not label.no_motion and label.direction == ref_direction)
    n = len(samples)
    return CustomizationEval(
        alignment=float(np.mean(alignments)),
        consistency=float(np.mean(consistencies)),
        motion_fidelity=float(np.mean(fidelities)),
        direction_accuracy=direction_hits / n,
        leakage_rate=leaks / n,
        n_samples=n,
    )


def make_eval_prompts(
    reference: CaptionTokens,
    n: int,
    rng: np.random.Generator,
    colors: tuple[str, ...],
    shapes: tuple[str, ...],
) -> list[CaptionTokens]:
    """New-subject prompts for customization eval: both subject slots differ from
    the reference and motion slots stay unspecified (the adapter owns motion)."""
    other_colors = [c for c in colors if c != reference.color]
    other_shapes = [s for s in shapes if s != reference.shape]
    if not other_colors or not other_shapes:
        raise ValueError("need at least one alternative color and shape")
    return [
        CaptionTokens(
            color=other_colors[int(rng.integers(len(other_colors)))],
            shape=other_shapes[int(rng.integers(len(other_shapes)))],
            direction=None,
            speed=None,
        )
        for _ in range(n)
    ]


def eval_to_row(label: str, cfg: LoraAdapterConfig | None, result: CustomizationEval) -> list[str]:
    tau = "" if cfg is None else str(cfg.tau)
    mode = "" if cfg is None else cfg.mode
    rank = "" if cfg is None or cfg.mode != "lora" else str(cfg.rank)
    layers = "" if cfg is None else "".join(cfg.target_layers)
    return [
        label, tau, mode, rank, layers,
        repr(result.alignment), repr(result.consistency), repr(result.motion_fidelity),
        repr(result.direction_accuracy), repr(result.leakage_rate), str(result.n_samples),
    ]


def save_adapter(path, adapter: MotionAdapter) -> None:
    torch.save(
        {
            "format_version": ADAPTER_VERSION,
            "config": asdict(adapter.cfg),
            "state_dict": adapter.state_dict(),
        },
        path,
    )


def load_adapter(path, model: VideoDenoiser) -> MotionAdapter:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != ADAPTER_VERSION:
        raise ValueError(f"unsupported adapter format {payload.get('format_version')!r}")
    raw = payload["config"]
    raw["target_layers"] = tuple(raw["target_layers"])
    cfg = LoraAdapterConfig(**raw)
    adapter = MotionAdapter(cfg, model)
    adapter.load_state_dict(payload["state_dict"])
    return adapter
