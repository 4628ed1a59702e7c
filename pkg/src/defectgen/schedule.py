"""Discrete diffusion noise schedules and the localized-noise decay.

A schedule of length ``T`` is defined by per-step variances ``betas[s]``
in (0, 1) and the cumulative signal-retention coefficients

    alpha_bars[t] = prod_{s<=t} (1 - betas[s]),

which drive both the forward noising ``z_t = sqrt(abar_t) z_0 +
sqrt(1 - abar_t) eps`` and the deterministic reverse updates.
``alpha_bars`` is strictly decreasing and stays in (0, 1).

The name ``alpha_bars`` is deliberate: keeping the cumulative product
visually distinct from the per-step ``1 - beta`` avoids the classic
sampler bug of mixing the two.

Normalized time maps a step index onto [0, 1] with t = 1 at the start
of denoising (index T-1) and t = 0 at the end, so "early steps" are
t close to 1.  The masked-noise decay is a step function of that time:

    lambda(t) = a * 1[t > t_min]
"""

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variances and their cumulative products.

    Instances are immutable and safe to share across threads.  Use
    :func:`make_linear_schedule` to build a validated schedule.
    """

    betas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        alpha_bars = np.asarray(self.alpha_bars, dtype=np.float64)
        if betas.ndim != 1 or alpha_bars.shape != betas.shape:
            raise ParameterError("betas and alpha_bars must be 1-d arrays of equal length")
        if betas.size == 0:
            raise ParameterError("schedule must have at least one step")
        if not (np.isfinite(betas).all() and np.isfinite(alpha_bars).all()):
            raise ParameterError("schedule entries must be finite")
        betas.setflags(write=False)
        alpha_bars.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    @property
    def num_steps(self) -> int:
        return self.betas.shape[0]


@dataclass(frozen=True)
class MgniConfig:
    """Localized-noise parameters: scale ``a`` and time threshold ``t_min``."""

    a: float
    t_min: float

    def __post_init__(self):
        if not 0.0 <= self.a <= 1.0:
            raise ParameterError(f"noise scale a must be in [0, 1], got {self.a}")
        if not 0.0 <= self.t_min <= 1.0:
            raise ParameterError(f"t_min must be in [0, 1], got {self.t_min}")


def make_linear_schedule(
    num_steps: int, beta_start: float = 1e-4, beta_end: float = 0.02
) -> NoiseSchedule:
    """Build a schedule with betas linearly spaced over [beta_start, beta_end].

    Endpoints are included.  Requires ``0 < beta_start <= beta_end < 1``
    and ``num_steps >= 1``.
    """
    if not isinstance(num_steps, (int, np.integer)) or num_steps < 1:
        raise ParameterError(f"num_steps must be a positive integer, got {num_steps!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ParameterError(
            f"beta range must satisfy 0 < beta_start <= beta_end < 1, "
            f"got ({beta_start}, {beta_end})"
        )
    betas = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
    alpha_bars = np.cumprod(1.0 - betas)
    return NoiseSchedule(betas=betas, alpha_bars=alpha_bars)


def normalized_time(step_index: int, num_steps: int) -> float:
    """Map a step index to [0, 1]; index T-1 maps to 1, index 0 to 0."""
    if num_steps < 1:
        raise ParameterError(f"num_steps must be positive, got {num_steps}")
    if not 0 <= step_index < num_steps:
        raise ParameterError(
            f"step index {step_index} out of range for {num_steps} steps"
        )
    if num_steps == 1:
        return 0.0
    return step_index / (num_steps - 1)


def lambda_decay(t: float, cfg: MgniConfig) -> float:
    """Step-function decay: ``a`` for t strictly above ``t_min``, else 0."""
    return cfg.a if t > cfg.t_min else 0.0
