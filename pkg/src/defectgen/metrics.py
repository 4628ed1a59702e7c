"""Generation-quality metrics over pluggable image features.

``kid`` is the unbiased squared maximum mean discrepancy with the
degree-3 polynomial kernel

    k(x, y) = (x . y / d + 1)^3

    MMD^2 = mean_offdiag k(X, X) + mean_offdiag k(Y, Y) - 2 mean k(X, Y)

computed on all samples (no subset averaging); the estimator can be
slightly negative on identically distributed sets.  ``ic_lpips`` is a
diversity proxy: the mean over clusters of the mean pairwise feature
distance 1 - cos(f_i, f_j) inside each cluster.

The default feature extractor is deterministic and network-free: per
scale, grid-cell intensity means and variances plus gradient-magnitude
histograms.
"""

from dataclasses import dataclass

import numpy as np

from .denoiser import ensure_latent
from .errors import ParameterError, ShapeError
from .imgio import resize_nearest


@dataclass(frozen=True)
class FeatureConfig:
    """Layout of the hand-crafted feature vector.

    Per scale: the intensity plane is average-pooled by the scale
    factor, split into a grid x grid cell lattice, and each cell
    contributes its mean, its variance, and a ``bins``-bin histogram of
    gradient magnitudes (first bin anchored at zero).
    """

    grid: int = 2
    bins: int = 6
    scales: tuple[int, ...] = (1, 2)
    resize_to: tuple[int, int] | None = None

    def __post_init__(self):
        if self.grid < 1 or self.bins < 2 or not self.scales:
            raise ParameterError("feature config needs grid >= 1, bins >= 2, scales nonempty")
        if any(s < 1 for s in self.scales):
            raise ParameterError("scale factors must be >= 1")

    @property
    def dim(self) -> int:
        return len(self.scales) * self.grid * self.grid * (2 + self.bins)


@dataclass(frozen=True)
class FeatureSet:
    """n feature rows of dimension d."""

    rows: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2:
            raise ShapeError("feature rows must be a 2-d array")
        if not np.isfinite(rows).all():
            raise ParameterError("features contain non-finite entries")
        object.__setattr__(self, "rows", rows)

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def d(self) -> int:
        return self.rows.shape[1]


def _cell_slices(n: int, grid: int) -> list[slice]:
    bounds = np.linspace(0, n, grid + 1).astype(int)
    return [slice(bounds[i], bounds[i + 1]) for i in range(grid)]


_GRAD_EDGE_MAX = 0.5


def _image_feature(plane: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    parts = []
    edges = np.append(np.linspace(0.0, _GRAD_EDGE_MAX, cfg.bins), np.inf)
    for s in cfg.scales:
        h, w = plane.shape
        hc, wc = (h // s) * s, (w // s) * s
        if hc // s < cfg.grid or wc // s < cfg.grid:
            raise ShapeError(
                f"image ({h}, {w}) too small for scale {s} with grid {cfg.grid}"
            )
        pooled = plane[:hc, :wc].reshape(hc // s, s, wc // s, s).mean(axis=(1, 3))
        gy, gx = np.gradient(pooled)
        grad = np.hypot(gy, gx)
        for ry in _cell_slices(pooled.shape[0], cfg.grid):
            for rx in _cell_slices(pooled.shape[1], cfg.grid):
                cell = pooled[ry, rx]
                parts.append(cell.mean())
                parts.append(cell.var())
                hist, _ = np.histogram(grad[ry, rx], bins=edges)
                parts.extend(hist / cell.size)
    return np.array(parts)


def extract_features(images, cfg: FeatureConfig | None = None) -> FeatureSet:
    """Deterministic per-image feature rows; see :class:`FeatureConfig`.

    All images must share one size unless ``cfg.resize_to`` is set.
    """
    cfg = cfg or FeatureConfig()
    if not images:
        raise ParameterError("image list is empty")
    rows = []
    ref_shape = None
    for img in images:
        plane = ensure_latent(img, "image").mean(axis=0)
        if cfg.resize_to is not None:
            plane = resize_nearest(plane, cfg.resize_to)
        elif ref_shape is None:
            ref_shape = plane.shape
        elif plane.shape != ref_shape:
            raise ShapeError(
                f"inconsistent image sizes {plane.shape} vs {ref_shape}; "
                "set resize_to to allow mixed sizes"
            )
        rows.append(_image_feature(plane, cfg))
    out = FeatureSet(rows=np.stack(rows))
    assert out.d == cfg.dim
    return out


def _poly_kernel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a.shape[1]
    return (a @ b.T / d + 1.0) ** 3


def kid(x: FeatureSet, y: FeatureSet) -> float:
    """Unbiased squared MMD between two feature sets (raw value).

    The conventional scaled form is 1000x this value; reports include
    both.
    """
    if x.d != y.d:
        raise ShapeError(f"feature dims differ: {x.d} vs {y.d}")
    if x.n < 2 or y.n < 2:
        raise ParameterError("kid needs at least 2 samples per set")
    k_xx = _poly_kernel(x.rows, x.rows)
    k_yy = _poly_kernel(y.rows, y.rows)
    k_xy = _poly_kernel(x.rows, y.rows)
    n, m = x.n, y.n
    sum_xx = (k_xx.sum() - np.trace(k_xx)) / (n * (n - 1))
    sum_yy = (k_yy.sum() - np.trace(k_yy)) / (m * (m - 1))
    return float(sum_xx + sum_yy - 2.0 * k_xy.mean())


def mean_pairwise_distance(rows: np.ndarray) -> float:
    """Mean of 1 - cos(f_i, f_j) over all unordered row pairs."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.shape[0] < 2:
        raise ParameterError("need at least 2 rows for pairwise distance")
    norms = np.linalg.norm(rows, axis=1)
    if (norms == 0).any():
        raise ParameterError("zero-norm feature row; cosine distance undefined")
    unit = rows / norms[:, None]
    cos = unit @ unit.T
    iu = np.triu_indices(rows.shape[0], k=1)
    return float(np.mean(1.0 - cos[iu]))


def ic_lpips(clusters: list[list], cfg: FeatureConfig | None = None) -> float:
    """Mean intra-cluster pairwise feature distance.

    Each cluster (e.g. all generations from one source image) must hold
    at least two images.
    """
    cfg = cfg or FeatureConfig()
    if not clusters:
        raise ParameterError("need at least one cluster")
    per_cluster = []
    for i, cluster in enumerate(clusters):
        if len(cluster) < 2:
            raise ParameterError(f"cluster {i} has {len(cluster)} image(s); need >= 2")
        feats = extract_features(cluster, cfg)
        per_cluster.append(mean_pairwise_distance(feats.rows))
    return float(np.mean(per_cluster))
