"""Noise predictors, inpainting conditioning, and the latent codec.

Latents are channels-first float64 arrays of shape (C, H, W); binary
masks are (H, W) arrays with entries in {0, 1}.  The inpainting
condition stacks the current latent, the encoded masked background and
the mask into one input.

Two predictor backends implement the same ``predict(cond, t_index, c)``
interface:

* :class:`AnalyticGaussianPredictor` is an exact oracle for data drawn
  from a diagonal Gaussian.  It lets the samplers be verified end to
  end without any trained weights.
* :class:`ConvDenoiser` is a small trainable convolutional network with
  hand-written forward/backward passes, so its gradients can be checked
  against finite differences.

Predictors are read-only during inference and may be shared across
threads; training mutates :class:`ConvDenoiser` parameters and needs
exclusive access.
"""

import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import CheckpointError, ParameterError, ShapeError
from .prompt import PromptEmbedding
from .schedule import NoiseSchedule, normalized_time

# ---------------------------------------------------------------------------
# Array validation helpers


def ensure_latent(x, name: str = "latent") -> np.ndarray:
    """Coerce to a float64 (C, H, W) grid with finite entries."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 3:
        raise ShapeError(f"{name} must have shape (C, H, W), got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ParameterError(f"{name} contains non-finite entries")
    return arr


def ensure_mask(m, name: str = "mask") -> np.ndarray:
    """Coerce to a float64 (H, W) mask with entries in {0, 1}."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must have shape (H, W), got {arr.shape}")
    if not np.isin(arr, (0.0, 1.0)).all():
        raise ParameterError(f"{name} must be strictly binary")
    return arr


@dataclass
class InpaintCondition:
    """Conditioning triple: current latent, encoded background, mask.

    All three must agree spatially; the mask lives at latent resolution.
    """

    z_t: np.ndarray
    background: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.z_t = ensure_latent(self.z_t, "z_t")
        self.background = ensure_latent(self.background, "background")
        self.mask = ensure_mask(self.mask, "mask")
        if self.background.shape != self.z_t.shape:
            raise ShapeError(
                f"background shape {self.background.shape} != z_t shape {self.z_t.shape}"
            )
        if self.mask.shape != self.z_t.shape[1:]:
            raise ShapeError(
                f"mask shape {self.mask.shape} does not match latent spatial "
                f"dims {self.z_t.shape[1:]}"
            )

    def stacked(self) -> np.ndarray:
        """Concatenate (z_t, background, mask) along channels."""
        return np.concatenate([self.z_t, self.background, self.mask[None]], axis=0)


# ---------------------------------------------------------------------------
# Latent codec


@dataclass(frozen=True)
class LatentCodec:
    """Image <-> latent mapping: exact identity, or k x k average pooling.

    Identity round-trips bit-exact.  Pool mode downsamples by block
    averaging and upsamples by nearest neighbour; spatial dims must be
    divisible by the factor.
    """

    mode: str = "identity"
    factor: int = 1

    def __post_init__(self):
        if self.mode not in ("identity", "pool"):
            raise ParameterError(f"unknown codec mode {self.mode!r}")
        if self.mode == "identity" and self.factor != 1:
            raise ParameterError("identity codec has factor 1")
        if self.mode == "pool" and self.factor < 2:
            raise ParameterError("pool codec needs factor >= 2")

    def _check_divisible(self, h: int, w: int):
        k = self.factor
        if h % k or w % k:
            raise ShapeError(f"spatial dims ({h}, {w}) not divisible by pool factor {k}")

    def encode(self, image) -> np.ndarray:
        img = ensure_latent(image, "image")
        if self.mode == "identity":
            return img.copy()
        c, h, w = img.shape
        self._check_divisible(h, w)
        k = self.factor
        return img.reshape(c, h // k, k, w // k, k).mean(axis=(2, 4))

    def decode(self, latent) -> np.ndarray:
        z = ensure_latent(latent, "latent")
        if self.mode == "identity":
            return z.copy()
        k = self.factor
        return np.repeat(np.repeat(z, k, axis=1), k, axis=2)

    def encode_mask(self, mask) -> np.ndarray:
        """Downsample a mask to latent resolution; a cell is 1 if any pixel is."""
        m = ensure_mask(mask)
        if self.mode == "identity":
            return m.copy()
        h, w = m.shape
        self._check_divisible(h, w)
        k = self.factor
        return m.reshape(h // k, k, w // k, k).max(axis=(1, 3))


def identity_codec() -> LatentCodec:
    return LatentCodec()


def pool_codec(factor: int) -> LatentCodec:
    return LatentCodec(mode="pool", factor=factor)


# ---------------------------------------------------------------------------
# Predictor entry point


def predict_noise(predictor, cond: InpaintCondition, t_index: int, c: np.ndarray) -> np.ndarray:
    """Run a noise predictor and enforce its output contract.

    The result always has the shape of ``cond.z_t`` and is a pure
    function of (inputs, predictor parameters).
    """
    out = predictor.predict(cond, t_index, np.asarray(c, dtype=np.float64))
    if out.shape != cond.z_t.shape:
        raise ShapeError(
            f"predictor returned shape {out.shape}, expected {cond.z_t.shape}"
        )
    return out


# ---------------------------------------------------------------------------
# Analytic Gaussian oracle


class AnalyticGaussianPredictor:
    """Exact noise predictor for data z_0 ~ N(mean, diag(variance)).

    With z_t = sqrt(abar) z_0 + sqrt(1 - abar) eps, standard Gaussian
    conditioning gives the posterior mean of the clean latent

        m_t(z_t) = mean + g_t * (z_t - sqrt(abar) mean),
        g_t = sqrt(abar) v / (abar v + 1 - abar),

    elementwise in the diagonal variance v, and therefore

        eps_hat = (z_t - sqrt(abar) m_t(z_t)) / sqrt(1 - abar).

    As v -> inf the posterior mean tends to z_t / sqrt(abar) and
    eps_hat -> 0.  The prompt vector and the background/mask channels
    are ignored by construction.
    """

    def __init__(self, mean, variance, schedule: NoiseSchedule):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.variance = np.asarray(variance, dtype=np.float64)
        if not (self.variance > 0).all():
            raise ParameterError("variance entries must be strictly positive")
        self.schedule = schedule

    def predict(self, cond: InpaintCondition, t_index: int, c=None) -> np.ndarray:
        z = cond.z_t
        abar = self.schedule.alpha_bars[t_index]
        sa = np.sqrt(abar)
        gain = sa * self.variance / (abar * self.variance + 1.0 - abar)
        m = self.mean + gain * (z - sa * self.mean)
        return (z - sa * m) / np.sqrt(1.0 - abar)


def analytic_gaussian_backend(mean, variance, schedule: NoiseSchedule) -> AnalyticGaussianPredictor:
    """Exact oracle backend; see :class:`AnalyticGaussianPredictor`."""
    return AnalyticGaussianPredictor(mean, variance, schedule)


# ---------------------------------------------------------------------------
# Trainable convolutional predictor


@dataclass(frozen=True)
class ArchConfig:
    """Shape of the trainable predictor.

    Input channels are ``2 * latent_channels + 1`` (latent, background,
    mask).  Each block is a 3x3 same-padded convolution whose output
    receives an additive channel bias computed by a learned linear map
    of the conditioning vector (prompt embedding concatenated with
    sinusoidal time features), followed by SiLU.  The final 3x3 head is
    zero-initialized so an untrained model predicts zero noise.
    """

    latent_channels: int = 1
    hidden: int = 16
    blocks: int = 2
    embed_dim: int = 16
    time_freqs: int = 4
    num_steps: int = 50

    def __post_init__(self):
        for field in ("latent_channels", "hidden", "blocks", "embed_dim", "time_freqs", "num_steps"):
            v = getattr(self, field)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ParameterError(f"arch config field {field} must be a positive integer, got {v!r}")

    @property
    def in_channels(self) -> int:
        return 2 * self.latent_channels + 1

    @property
    def cond_dim(self) -> int:
        return self.embed_dim + 2 * self.time_freqs


def _windows3(x: np.ndarray) -> np.ndarray:
    # (C, H, W) -> (C, H, W, 3, 3) sliding windows over a zero-padded copy
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    return sliding_window_view(xp, (3, 3), axis=(1, 2))


def _silu(x: np.ndarray):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s, s


class ConvDenoiser:
    """Small convolutional noise predictor with explicit backprop.

    Parameters live in ``self.params`` (float64 arrays) keyed by name in
    declaration order: per block ``bK.W``, ``bK.b``, ``bK.P``, then
    ``head.W``, ``head.b``.  That order is also the checkpoint layout.
    """

    def __init__(self, arch: ArchConfig, params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.arch = arch
        if params is None:
            params = self._init_params(arch, np.random.default_rng(seed))
        self.params = params

    @staticmethod
    def _init_params(arch: ArchConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
        params: dict[str, np.ndarray] = {}
        c_in = arch.in_channels
        for k in range(arch.blocks):
            fan = c_in * 9
            params[f"b{k}.W"] = rng.standard_normal((arch.hidden, c_in, 3, 3)) / np.sqrt(fan)
            params[f"b{k}.b"] = np.zeros(arch.hidden)
            params[f"b{k}.P"] = rng.standard_normal((arch.hidden, arch.cond_dim)) / np.sqrt(arch.cond_dim)
            c_in = arch.hidden
        # zero init: the untrained model predicts exactly zero noise
        params["head.W"] = np.zeros((arch.latent_channels, arch.hidden, 3, 3))
        params["head.b"] = np.zeros(arch.latent_channels)
        return params

    def param_names(self) -> list[str]:
        names = []
        for k in range(self.arch.blocks):
            names += [f"b{k}.W", f"b{k}.b", f"b{k}.P"]
        names += ["head.W", "head.b"]
        return names

    def num_params(self) -> int:
        return sum(self.params[n].size for n in self.param_names())

    def time_features(self, t_index: int) -> np.ndarray:
        t = normalized_time(t_index, self.arch.num_steps)
        freqs = 2.0 ** np.arange(self.arch.time_freqs)
        ang = np.pi * freqs * t
        return np.concatenate([np.sin(ang), np.cos(ang)])

    def _cond_vector(self, t_index: int, c: np.ndarray) -> np.ndarray:
        c = np.asarray(c, dtype=np.float64)
        if c.shape != (self.arch.embed_dim,):
            raise ShapeError(
                f"conditioning vector has shape {c.shape}, expected ({self.arch.embed_dim},)"
            )
        return np.concatenate([c, self.time_features(t_index)])

    def forward(self, x: np.ndarray, t_index: int, c: np.ndarray, keep_cache: bool = False):
        """Forward pass on a stacked (in_channels, H, W) input.

        Returns the prediction, plus a cache for :meth:`backward` when
        ``keep_cache`` is set.
        """
        if x.shape[0] != self.arch.in_channels:
            raise ShapeError(
                f"input has {x.shape[0]} channels, expected {self.arch.in_channels}"
            )
        if not 0 <= t_index < self.arch.num_steps:
            raise ParameterError(f"t_index {t_index} out of range")
        u = self._cond_vector(t_index, c)
        cache = {"u": u, "blocks": []}
        h = x
        for k in range(self.arch.blocks):
            win = _windows3(h)
            pre = np.einsum("oikl,ihwkl->ohw", self.params[f"b{k}.W"], win)
            pre += (self.params[f"b{k}.b"] + self.params[f"b{k}.P"] @ u)[:, None, None]
            h, sig = _silu(pre)
            if keep_cache:
                cache["blocks"].append({"win": win, "pre": pre, "sig": sig})
        win = _windows3(h)
        out = np.einsum("oikl,ihwkl->ohw", self.params["head.W"], win)
        out += self.params["head.b"][:, None, None]
        if keep_cache:
            cache["head_win"] = win
            return out, cache
        return out

    def backward(self, cache, d_out: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss w.r.t. every parameter, given dL/d(out)."""
        grads: dict[str, np.ndarray] = {}
        u = cache["u"]
        grads["head.W"] = np.einsum("ohw,ihwkl->oikl", d_out, cache["head_win"])
        grads["head.b"] = d_out.sum(axis=(1, 2))
        w_flip = self.params["head.W"][:, :, ::-1, ::-1]
        dh = np.einsum("oikl,ohwkl->ihw", w_flip, _windows3(d_out))
        for k in reversed(range(self.arch.blocks)):
            blk = cache["blocks"][k]
            pre, sig = blk["pre"], blk["sig"]
            d_pre = dh * (sig * (1.0 + pre * (1.0 - sig)))  # SiLU'
            grads[f"b{k}.W"] = np.einsum("ohw,ihwkl->oikl", d_pre, blk["win"])
            ch_sum = d_pre.sum(axis=(1, 2))
            grads[f"b{k}.b"] = ch_sum
            grads[f"b{k}.P"] = np.outer(ch_sum, u)
            w_flip = self.params[f"b{k}.W"][:, :, ::-1, ::-1]
            dh = np.einsum("oikl,ohwkl->ihw", w_flip, _windows3(d_pre))
        return grads

    def predict(self, cond: InpaintCondition, t_index: int, c: np.ndarray) -> np.ndarray:
        if cond.z_t.shape[0] != self.arch.latent_channels:
            raise ShapeError(
                f"latent has {cond.z_t.shape[0]} channels, model expects "
                f"{self.arch.latent_channels}"
            )
        return self.forward(cond.stacked(), t_index, c)


def trainable_backend(arch: ArchConfig, seed: int = 0) -> ConvDenoiser:
    """Fresh trainable predictor; the zero-initialized head makes its
    initial prediction identically zero."""
    return ConvDenoiser(arch, seed=seed)


# ---------------------------------------------------------------------------
# Parameter persistence

_MAGIC = b"DGENNET1"
_VERSION = 1


def save_checkpoint(path, net: ConvDenoiser, embedding: PromptEmbedding) -> None:
    """Write parameters and the prompt embedding to a flat binary file.

    Layout: 8-byte magic, '<7I' header (version and arch fields),
    '<Q' parameter count, then little-endian float32 payloads in
    declaration order followed by the embedding vector.
    """
    a = net.arch
    if embedding.dim != a.embed_dim:
        raise ParameterError("embedding dim does not match arch config")
    count = net.num_params()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack(
            "<7I", _VERSION, a.latent_channels, a.hidden, a.blocks,
            a.embed_dim, a.time_freqs, a.num_steps,
        ))
        f.write(struct.pack("<Q", count))
        for name in net.param_names():
            f.write(net.params[name].astype("<f4").tobytes())
        f.write(embedding.base.astype("<f4").tobytes())


def load_checkpoint(path) -> tuple[ConvDenoiser, PromptEmbedding]:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(blob) < 8 + 28 + 8 or blob[:8] != _MAGIC:
        raise CheckpointError(f"{path} is not a model checkpoint")
    version, lc, hidden, blocks, ed, tf, ns = struct.unpack_from("<7I", blob, 8)
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (count,) = struct.unpack_from("<Q", blob, 36)
    arch = ArchConfig(latent_channels=lc, hidden=hidden, blocks=blocks,
                      embed_dim=ed, time_freqs=tf, num_steps=ns)
    payload = np.frombuffer(blob, dtype="<f4", offset=44)
    if payload.size != count + ed:
        raise CheckpointError(
            f"checkpoint payload has {payload.size} floats, expected {count + ed}"
        )
    net = ConvDenoiser(arch, params={})
    shapes = {}
    c_in = arch.in_channels
    for k in range(arch.blocks):
        shapes[f"b{k}.W"] = (arch.hidden, c_in, 3, 3)
        shapes[f"b{k}.b"] = (arch.hidden,)
        shapes[f"b{k}.P"] = (arch.hidden, arch.cond_dim)
        c_in = arch.hidden
    shapes["head.W"] = (arch.latent_channels, arch.hidden, 3, 3)
    shapes["head.b"] = (arch.latent_channels,)
    pos = 0
    params = {}
    for name in net.param_names():
        n = int(np.prod(shapes[name]))
        params[name] = payload[pos:pos + n].astype(np.float64).reshape(shapes[name])
        pos += n
    net.params = params
    embedding = PromptEmbedding(base=payload[pos:pos + ed].astype(np.float64))
    return net, embedding
