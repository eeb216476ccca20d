"""Noise schedules and deterministic denoising/inversion steps.

All schedule arrays are float64 and indexed by timestep t in [0, T], with index 0
reserved for the clean-data anchor (beta[0] = 0, alpha_bar[0] = 1). Model states
keep whatever dtype the caller passes in (float32 in practice); only the scalar
coefficients are computed in float64. The step functions are array-library
agnostic: they use nothing but scalar-times-array arithmetic, so numpy arrays and
torch tensors both work.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

BETA_KINDS = ("linear", "scaled_linear")


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep noising coefficients.

    Attributes:
        T: number of diffusion steps; valid model timesteps are 1..T.
        beta: per-step variances, shape (T+1,), beta[0] = 0, ascending.
        alpha: 1 - beta.
        alpha_bar: running product of alpha over 1..t, alpha_bar[0] = 1.
        sigma: per-step sampling noise scale; all zeros in deterministic mode,
            otherwise the posterior std sqrt((1-ab[t-1])/(1-ab[t]) * beta[t]).
        kind: beta ladder family, one of BETA_KINDS.
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    kind: str = "linear"
    beta_start: float = 1e-4
    beta_end: float = 0.02
    deterministic: bool = True

    def to_text_block(self) -> str:
        """Serialize build parameters as a small key=value block."""
        return "\n".join(
            [
                f"T={self.T}",
                f"kind={self.kind}",
                f"beta_start={self.beta_start!r}",
                f"beta_end={self.beta_end!r}",
                f"deterministic={str(self.deterministic).lower()}",
            ]
        )

    @classmethod
    def from_text_block(cls, block: str) -> "NoiseSchedule":
        kv = {}
        for line in block.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
        return build_schedule(
            T=int(kv["T"]),
            beta_start=float(kv["beta_start"]),
            beta_end=float(kv["beta_end"]),
            kind=kv["kind"],
            deterministic=kv.get("deterministic", "true") == "true",
        )


def build_schedule(
    T: int,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    kind: str = "linear",
    deterministic: bool = True,
) -> NoiseSchedule:
    """Build a noise schedule.

    Args:
        T: number of steps, >= 1.
        beta_start: first-step variance, 0 <= beta_start <= beta_end < 1.
        beta_end: last-step variance.
        kind: "linear" (betas evenly spaced) or "scaled_linear" (sqrt(beta)
            evenly spaced).
        deterministic: when True the sigma column is all zeros.
    """
    if T <= 0:
        raise ValueError(f"T must be positive, got {T}")
    if not 0.0 <= beta_start <= beta_end:
        raise ValueError(f"need 0 <= beta_start <= beta_end, got {beta_start}, {beta_end}")
    if beta_end >= 1.0:
        raise ValueError(f"beta_end must stay below 1, got {beta_end}")
    if kind not in BETA_KINDS:
        raise ValueError(f"unknown beta kind {kind!r}, expected one of {BETA_KINDS}")

    if kind == "linear":
        steps = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    else:
        steps = np.linspace(math.sqrt(beta_start), math.sqrt(beta_end), T, dtype=np.float64) ** 2

    beta = np.concatenate([[0.0], steps])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)

    sigma = np.zeros(T + 1, dtype=np.float64)
    if not deterministic:
        # posterior std of the per-step reverse kernel
        sigma[1:] = np.sqrt((1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:])

    return NoiseSchedule(
        T=T,
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        sigma=sigma,
        kind=kind,
        beta_start=float(beta_start),
        beta_end=float(beta_end),
        deterministic=deterministic,
    )


def _check_t(sched: NoiseSchedule, t: int, lowest: int = 0) -> None:
    if not lowest <= t <= sched.T:
        raise ValueError(f"timestep {t} outside [{lowest}, {sched.T}]")


def add_noise(x0, t: int, eps, sched: NoiseSchedule):
    """Mix clean state and noise at level t: sqrt(ab_t) x0 + sqrt(1-ab_t) eps."""
    _check_t(sched, t)
    ab = float(sched.alpha_bar[t])
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def clean_estimate(x_t, eps_hat, t: int, sched: NoiseSchedule):
    """Invert the mixing line at level t to the implied clean state."""
    _check_t(sched, t, lowest=1)
    ab = float(sched.alpha_bar[t])
    return (x_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)


def ddim_step(x_t, eps_hat, t: int, t_prev: int, sched: NoiseSchedule):
    """Deterministic update from level t down to t_prev via the clean estimate.

    t_prev == t is a no-op; t_prev > t is rejected. t_prev == 0 returns the
    implied clean state exactly.
    """
    _check_t(sched, t, lowest=1)
    if t_prev > t:
        raise ValueError(f"ddim_step must move down in time, got t={t} -> t_prev={t_prev}")
    if t_prev == t:
        return x_t
    x0_hat = clean_estimate(x_t, eps_hat, t, sched)
    ab_prev = float(sched.alpha_bar[t_prev])
    return math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * eps_hat


def ddim_invert_step(x_prev, eps_hat, t_prev: int, t: int, sched: NoiseSchedule):
    """Exact algebraic inverse of ddim_step under the same eps_hat."""
    _check_t(sched, t, lowest=1)
    if t_prev >= t:
        raise ValueError(f"inversion must move up in time, got t_prev={t_prev} -> t={t}")
    ab_prev = float(sched.alpha_bar[t_prev])
    x0_hat = (x_prev - math.sqrt(1.0 - ab_prev) * eps_hat) / math.sqrt(ab_prev)
    ab = float(sched.alpha_bar[t])
    return math.sqrt(ab) * x0_hat + math.sqrt(1.0 - ab) * eps_hat


def ddpm_step(x_t, eps_hat, t: int, sched: NoiseSchedule, z):
    """Literal per-step ancestral update; z is ignored when sigma[t] is zero."""
    _check_t(sched, t, lowest=1)
    a = float(sched.alpha[t])
    ab = float(sched.alpha_bar[t])
    mean = (x_t - (1.0 - a) / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(a)
    s = float(sched.sigma[t])
    if s == 0.0:
        return mean
    return mean + s * z


def subsample_timesteps(T: int, n_steps: int) -> list[int]:
    """Ascending uniform-stride subsample of [1, T] that always ends at T."""
    if not 1 <= n_steps <= T:
        raise ValueError(f"n_steps must lie in [1, T={T}], got {n_steps}")
    stride = T // n_steps
    ts = [T - stride * i for i in range(n_steps)]
    return ts[::-1]


@dataclass
class LatentTrajectory:
    """Inversion output: per-timestep latents, noisiest first.

    latents[0] pairs with timesteps[0] == the top timestep reached; the list
    descends from there. `noise_latent` is the terminal (noisiest) state the
    inversion produced, i.e. the natural starting point for resampling.
    """

    latents: list
    timesteps: list[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.latents) != len(self.timesteps):
            raise ValueError("latents and timesteps must align")
        if any(b >= a for a, b in zip(self.timesteps, self.timesteps[1:])):
            raise ValueError("timesteps must be strictly descending")

    @property
    def noise_latent(self):
        return self.latents[0]

    def save(self, path) -> None:
        stacked = np.stack([np.asarray(x) for x in self.latents])
        np.savez(path, latents=stacked, timesteps=np.asarray(self.timesteps, dtype=np.int64))

    @classmethod
    def load(cls, path) -> "LatentTrajectory":
        with np.load(path) as data:
            stacked = data["latents"]
            timesteps = [int(t) for t in data["timesteps"]]
        return cls(latents=list(stacked), timesteps=timesteps)


EpsModel = Callable[[object, int], object]


def invert_trajectory(
    x0, model: EpsModel, sched: NoiseSchedule, n_steps: int
) -> LatentTrajectory:
    """Lift a clean state to the top timestep along the deterministic trajectory.

    Args:
        x0: clean state (any array-like the model accepts).
        model: callable (state, t) -> predicted noise; condition the model by
            closing over whatever context it needs.
        sched: noise schedule.
        n_steps: number of subsampled timesteps; the walk visits them ascending
            and evaluates the model at each target timestep.
    """
    ts = subsample_timesteps(sched.T, n_steps)
    x = x0
    latents = []
    t_prev = 0
    for t in ts:
        eps_hat = model(x, t)
        x = ddim_invert_step(x, eps_hat, t_prev, t, sched)
        latents.append(x)
        t_prev = t
    return LatentTrajectory(latents=latents[::-1], timesteps=ts[::-1])


def ddim_sample(x_top, model: EpsModel, sched: NoiseSchedule, n_steps: int):
    """Deterministically denoise from the top timestep down to a clean state."""
    ts = subsample_timesteps(sched.T, n_steps)
    x = x_top
    steps = ts[::-1] + [0]
    for t, t_prev in zip(steps[:-1], steps[1:]):
        eps_hat = model(x, t)
        x = ddim_step(x, eps_hat, t, t_prev, sched)
    return x
