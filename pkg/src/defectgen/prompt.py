"""Fixed anomaly-token embedding and its Gaussian perturbation.

The conditioning vector is a frozen random embedding ``c`` drawn once at
model creation.  Each call to :func:`perturb` returns ``c + delta`` with
``delta ~ N(0, sigma^2 I)`` drawn fresh from the caller's generator; the
stored vector is never mutated.  The same operation is used at training
and at sampling time so the model only ever sees conditions from the
same noisy ball it was trained on.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError


@dataclass(frozen=True)
class PromptEmbedding:
    """A frozen d-dimensional conditioning vector."""

    base: np.ndarray

    def __post_init__(self):
        base = np.asarray(self.base, dtype=np.float64)
        if base.ndim != 1 or base.size == 0:
            raise ParameterError("embedding must be a non-empty 1-d vector")
        if not np.isfinite(base).all():
            raise ParameterError("embedding entries must be finite")
        base = base.copy()
        base.setflags(write=False)
        object.__setattr__(self, "base", base)

    @property
    def dim(self) -> int:
        return self.base.shape[0]


@dataclass(frozen=True)
class GppConfig:
    """Perturbation scale sigma >= 0."""

    sigma: float

    def __post_init__(self):
        if self.sigma < 0:
            raise ParameterError(f"sigma must be nonnegative, got {self.sigma}")


def init_embedding(dim: int, seed: int) -> PromptEmbedding:
    """Draw the base vector once from N(0, I/dim), reproducibly from seed.

    The 1/dim variance keeps the expected norm near 1 regardless of
    dimension, so the perturbation scale sigma has a consistent meaning.
    """
    if dim < 1:
        raise ParameterError(f"embedding dimension must be >= 1, got {dim}")
    rng = np.random.default_rng(seed)
    base = rng.standard_normal(dim) / np.sqrt(dim)
    return PromptEmbedding(base=base)


def perturb(e: PromptEmbedding, cfg: GppConfig, rng: np.random.Generator) -> np.ndarray:
    """Return ``base + delta`` with a fresh ``delta ~ N(0, sigma^2 I)``.

    The generator is advanced by exactly ``dim`` standard normals on
    every call, regardless of sigma, so call sequences stay aligned
    when sigma is changed.  With sigma = 0 the base vector is returned
    exactly (as a copy).
    """
    delta = rng.standard_normal(e.dim)
    if cfg.sigma == 0.0:
        return e.base.copy()
    return e.base + cfg.sigma * delta
