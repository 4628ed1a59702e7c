"""Forward diffusion and the reverse (DDIM / masked-noise) updates.

The reverse update from step t to t-1 is

    z_{t-1} = sqrt(abar_{t-1}) * (z_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)
            + sqrt(1 - abar_{t-1}) * eps_hat
            + sqrt(1 - abar_{t-1}) * sqrt(lambda(t)) * M * eta_t

with eps_hat the predicted noise, eta_t ~ N(0, I) drawn fresh, M the
binary mask and lambda(t) the step-function decay from
:mod:`defectgen.schedule` evaluated at the normalized time of the
current step.  The first two terms are the plain deterministic update
(:func:`ddim_step`); the third confines extra stochasticity to masked
pixels at early steps (:func:`mgni_step`).  With a = 0 or an all-zero
mask the two updates coincide bit for bit.

:func:`sample_inpaint` runs the full reverse trajectory for one image
and composites the result so that background pixels are exact copies of
the input.
"""

from dataclasses import dataclass

import numpy as np

from .denoiser import InpaintCondition, LatentCodec, ensure_latent, ensure_mask, predict_noise
from .errors import ParameterError, ShapeError
from .prompt import GppConfig, PromptEmbedding, perturb
from .schedule import MgniConfig, NoiseSchedule, lambda_decay, normalized_time

# Defaults used when the caller does not pin the localized-noise scale:
# a is drawn uniformly from this range, once per generated image.
DEFAULT_A_RANGE = (0.0, 0.6)
DEFAULT_T_MIN = 0.6


@dataclass
class SamplerState:
    """Mutable state of one reverse trajectory."""

    z: np.ndarray
    step_index: int
    schedule: NoiseSchedule
    rng: np.random.Generator | None = None

    def __post_init__(self):
        self.z = ensure_latent(self.z, "z")
        if not 0 <= self.step_index < self.schedule.num_steps:
            raise ParameterError(
                f"step_index {self.step_index} out of range for "
                f"{self.schedule.num_steps}-step schedule"
            )


def forward_diffuse(z0, t_index: int, eps, schedule: NoiseSchedule) -> np.ndarray:
    """Noise a clean latent: sqrt(abar_t) z0 + sqrt(1 - abar_t) eps."""
    z0 = ensure_latent(z0, "z0")
    eps = ensure_latent(eps, "eps")
    if eps.shape != z0.shape:
        raise ShapeError(f"eps shape {eps.shape} != z0 shape {z0.shape}")
    abar = schedule.alpha_bars[t_index]
    return np.sqrt(abar) * z0 + np.sqrt(1.0 - abar) * eps


def ddim_step(state: SamplerState, cond: InpaintCondition, c: np.ndarray, predictor) -> np.ndarray:
    """One deterministic reverse step; calls the predictor exactly once."""
    t = state.step_index
    if t < 1:
        raise ParameterError("cannot step below the first schedule index")
    abar_t = state.schedule.alpha_bars[t]
    abar_prev = state.schedule.alpha_bars[t - 1]
    eps_hat = predict_noise(predictor, cond, t, c)
    z0_hat = (state.z - np.sqrt(1.0 - abar_t) * eps_hat) / np.sqrt(abar_t)
    return np.sqrt(abar_prev) * z0_hat + np.sqrt(1.0 - abar_prev) * eps_hat


def mgni_step(
    state: SamplerState,
    cond: InpaintCondition,
    c: np.ndarray,
    predictor,
    cfg: MgniConfig,
    mask,
) -> np.ndarray:
    """Deterministic reverse step plus masked localized noise.

    The injected term is exactly zero wherever the mask is zero and at
    every step whose normalized time is at or below ``cfg.t_min``; in
    those degenerate cases the plain step result is returned unchanged
    and no noise is drawn.
    """
    mask = ensure_mask(mask)
    if mask.shape != state.z.shape[1:]:
        raise ShapeError(
            f"mask shape {mask.shape} does not match latent spatial dims "
            f"{state.z.shape[1:]}"
        )
    base = ddim_step(state, cond, c, predictor)
    lam = lambda_decay(normalized_time(state.step_index, state.schedule.num_steps), cfg)
    if lam == 0.0 or not mask.any():
        return base
    if state.rng is None:
        raise ParameterError("mgni_step needs a SamplerState with an rng")
    abar_prev = state.schedule.alpha_bars[state.step_index - 1]
    eta = state.rng.standard_normal(state.z.shape)
    return base + np.sqrt(1.0 - abar_prev) * np.sqrt(lam) * mask * eta


def sample_inpaint(
    image,
    mask,
    predictor,
    schedule: NoiseSchedule,
    embedding: PromptEmbedding,
    gpp: GppConfig,
    mgni: MgniConfig | None,
    codec: LatentCodec,
    rng: np.random.Generator,
) -> np.ndarray:
    """Synthesize content inside ``mask`` on top of ``image``.

    The perturbed conditioning vector is drawn once per generation and
    held fixed across steps.  When ``mgni`` is None the noise scale is
    drawn uniformly from ``DEFAULT_A_RANGE`` with ``DEFAULT_T_MIN``.
    The returned image equals the input exactly wherever the mask is 0
    (the final composite copies background pixels verbatim); masked
    pixels come from decoding the final latent and are not clipped.

    Draw order from ``rng``: noise scale (only if mgni is None), the
    perturbation delta, the initial latent, then one eta per injecting
    step.  Fixed seed and inputs give identical output bytes.
    """
    image = ensure_latent(image, "image")
    mask = ensure_mask(mask)
    if mask.shape != image.shape[1:]:
        raise ShapeError(
            f"mask shape {mask.shape} does not match image spatial dims {image.shape[1:]}"
        )
    if mgni is None:
        a = float(rng.uniform(*DEFAULT_A_RANGE))
        mgni = MgniConfig(a=a, t_min=DEFAULT_T_MIN)

    background = codec.encode((1.0 - mask) * image)
    latent_mask = codec.encode_mask(mask)
    c_p = perturb(embedding, gpp, rng)

    z = rng.standard_normal(background.shape)
    state = SamplerState(
        z=z, step_index=schedule.num_steps - 1, schedule=schedule, rng=rng
    )
    for t in range(schedule.num_steps - 1, 0, -1):
        state.step_index = t
        cond = InpaintCondition(z_t=state.z, background=background, mask=latent_mask)
        state.z = mgni_step(state, cond, c_p, predictor, mgni, latent_mask)
    synthesized = codec.decode(state.z)
    return (1.0 - mask) * image + mask * synthesized
