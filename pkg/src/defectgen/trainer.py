"""Few-shot fine-tuning of the trainable denoiser.

The objective is the inpainting reconstruction loss with a perturbed
conditioning vector: for each exemplar a step t is drawn uniformly, the
clean latent is noised with a fresh eps, and the model predicts that
eps from (z_t, encoded masked background, mask) under c_p = c + delta.
The loss is the batch mean of the squared residual norm.

Randomness is consumed in a documented order (per exemplar: t, eps,
delta) so oracle tests can replay the exact draws.  Training is
deterministic given the config seed.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .denoiser import ConvDenoiser, InpaintCondition, LatentCodec, ensure_latent, ensure_mask, identity_codec, predict_noise
from .errors import DivergenceError, ParameterError, ShapeError
from .prompt import GppConfig, PromptEmbedding, perturb
from .sampler import forward_diffuse
from .schedule import NoiseSchedule


@dataclass
class AnomalyExemplar:
    """One training pair: image with a defect and its binary mask."""

    image: np.ndarray
    mask: np.ndarray
    label: str = ""

    def __post_init__(self):
        self.image = ensure_latent(self.image, "exemplar image")
        self.mask = ensure_mask(self.mask, "exemplar mask")
        if self.mask.shape != self.image.shape[1:]:
            raise ShapeError(
                f"exemplar mask shape {self.mask.shape} does not match image "
                f"spatial dims {self.image.shape[1:]}"
            )
        if not self.mask.any():
            raise ParameterError("exemplar mask is empty")


@dataclass
class TrainConfig:
    steps: int
    batch: int
    lr: float
    gpp: GppConfig
    schedule: NoiseSchedule
    seed: int = 0
    weight_decay: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.steps < 1 or self.batch < 1 or self.lr <= 0:
            raise ParameterError("steps, batch and lr must be positive")


def split_train_test(items: list) -> tuple[list, list]:
    """First floor(n/3) items train, the rest test.

    The input must already be in canonical sorted order; this function
    does not reorder.  A class too small to yield any training items is
    allowed but flagged with a warning.
    """
    if not items:
        raise ParameterError("cannot split an empty class list")
    n_train = len(items) // 3
    if n_train == 0:
        warnings.warn(
            f"class with {len(items)} items yields an empty train split",
            stacklevel=2,
        )
    return list(items[:n_train]), list(items[n_train:])


def draw_training_batch(
    batch: list[AnomalyExemplar],
    schedule: NoiseSchedule,
    embedding: PromptEmbedding,
    gpp: GppConfig,
    rng: np.random.Generator,
    codec: LatentCodec | None = None,
):
    """Sample the stochastic inputs for one loss evaluation.

    Per exemplar, in order: t uniform over schedule indices, eps over
    the latent shape, then the embedding perturbation.  Returns a list
    of (cond, t, c_p, eps) tuples.
    """
    if not batch:
        raise ParameterError("batch must be nonempty")
    codec = codec or identity_codec()
    draws = []
    for ex in batch:
        z0 = codec.encode(ex.image)
        b = codec.encode((1.0 - ex.mask) * ex.image)
        m = codec.encode_mask(ex.mask)
        t = int(rng.integers(schedule.num_steps))
        eps = rng.standard_normal(z0.shape)
        c_p = perturb(embedding, gpp, rng)
        z_t = forward_diffuse(z0, t, eps, schedule)
        cond = InpaintCondition(z_t=z_t, background=b, mask=m)
        draws.append((cond, t, c_p, eps))
    return draws


def _batch_loss(predictor, draws) -> float:
    total = 0.0
    for cond, t, c_p, eps in draws:
        eps_hat = predict_noise(predictor, cond, t, c_p)
        total += float(np.sum((eps - eps_hat) ** 2))
    return total / len(draws)


def gpp_loss(
    batch: list[AnomalyExemplar],
    predictor,
    schedule: NoiseSchedule,
    embedding: PromptEmbedding,
    gpp: GppConfig,
    rng: np.random.Generator,
    codec: LatentCodec | None = None,
) -> float:
    """Batch-mean squared residual norm under perturbed conditioning.

    With sigma = 0 this coincides exactly with the plain inpainting
    reconstruction loss under the same draws.
    """
    return _batch_loss(predictor, draw_training_batch(batch, schedule, embedding, gpp, rng, codec))


def loss_and_grads_from_draws(net: ConvDenoiser, draws) -> tuple[float, dict[str, np.ndarray]]:
    """Loss plus parameter gradients for pre-sampled draws."""
    grads = {name: np.zeros_like(p) for name, p in net.params.items()}
    total = 0.0
    inv_b = 1.0 / len(draws)
    for cond, t, c_p, eps in draws:
        out, cache = net.forward(cond.stacked(), t, c_p, keep_cache=True)
        resid = eps - out
        total += float(np.sum(resid ** 2))
        d_out = -2.0 * resid * inv_b
        for name, g in net.backward(cache, d_out).items():
            grads[name] += g
    return total * inv_b, grads


def gpp_loss_and_grads(
    batch: list[AnomalyExemplar],
    net: ConvDenoiser,
    schedule: NoiseSchedule,
    embedding: PromptEmbedding,
    gpp: GppConfig,
    rng: np.random.Generator,
    codec: LatentCodec | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    draws = draw_training_batch(batch, schedule, embedding, gpp, rng, codec)
    return loss_and_grads_from_draws(net, draws)


class AdamW:
    """Adam with decoupled weight decay on a named-parameter dict."""

    def __init__(self, params: dict[str, np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            update = (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)
            params[k] -= self.lr * (update + self.weight_decay * params[k])


@dataclass
class TrainResult:
    net: ConvDenoiser
    losses: np.ndarray = field(repr=False)


def train(
    exemplars: list[AnomalyExemplar],
    net: ConvDenoiser,
    embedding: PromptEmbedding,
    cfg: TrainConfig,
    codec: LatentCodec | None = None,
) -> TrainResult:
    """Run cfg.steps optimizer steps; returns the per-step loss series.

    Batches are drawn with replacement.  Aborts with a DivergenceError
    if the loss becomes non-finite.
    """
    if not exemplars:
        raise ParameterError("need at least one exemplar to train")
    codec = codec or identity_codec()
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(net.params, lr=cfg.lr, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2,
                eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
    losses = np.empty(cfg.steps)
    for step in range(cfg.steps):
        idx = rng.integers(0, len(exemplars), size=cfg.batch)
        batch = [exemplars[i] for i in idx]
        loss, grads = gpp_loss_and_grads(batch, net, cfg.schedule, embedding, cfg.gpp, rng, codec)
        if not np.isfinite(loss):
            raise DivergenceError(f"loss became non-finite at step {step}")
        opt.step(net.params, grads)
        losses[step] = loss
    return TrainResult(net=net, losses=losses)


def write_loss_curve(path, losses) -> None:
    """Two-column text file: step index and loss."""
    with open(path, "w") as f:
        for i, v in enumerate(losses):
            f.write(f"{i} {v:.10g}\n")
