"""Context-aware relocation of an anomaly mask onto a normal image.

The procedure transfers a mask from a defect exemplar to a plausible
position on a defect-free image using three keypoint correspondences:

1. Pick three keypoints on the exemplar mask: the centroid plus the
   topmost and bottommost mask pixels of the centroid's column, so all
   three share one x-coordinate.
2. Match each keypoint densely against the normal image (cosine
   similarity of patch descriptors), giving three score maps.
3. The upper and lower matches are the unconstrained argmaxes of their
   maps.  The center match is the best-scoring pixel on the discrete
   segment joining them that also lies inside the object foreground
   mask; if the segment misses the foreground entirely, fall back to
   the global foreground-constrained argmax and flag it.
4. Translate the input mask so its centroid lands on the chosen center,
   drop pixels pushed off-frame, and intersect with the foreground.

The default descriptor is a mean-subtracted k x k intensity patch
(zero-padded at borders).  Any object with ``at(image, point)`` and
``dense(image)`` methods can be substituted, e.g. to plug in learned
dense features.  All operations are pure and deterministic.
"""

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.ndimage as ndi
from numpy.lib.stride_tricks import sliding_window_view

from .denoiser import ensure_latent, ensure_mask
from .errors import AlignmentError, ParameterError, ShapeError
from .trainer import AnomalyExemplar

Point = tuple[int, int]  # (x, y) pixel coordinates; arrays index [y, x]


def intensity(image) -> np.ndarray:
    """Channel-mean intensity plane of a (C, H, W) image."""
    return ensure_latent(image, "image").mean(axis=0)


def mask_centroid(mask) -> tuple[float, float]:
    m = ensure_mask(mask)
    ys, xs = np.nonzero(m)
    if ys.size == 0:
        raise ParameterError("mask is empty")
    return float(xs.mean()), float(ys.mean())


def _rint(v: float) -> int:
    return int(np.rint(v))


@dataclass(frozen=True)
class KeypointTriple:
    """Center, upper and lower keypoints sharing one x-coordinate."""

    center: Point
    upper: Point
    lower: Point


def extract_keypoints(mask) -> KeypointTriple:
    """Centroid keypoint plus the column's top and bottom mask pixels.

    If the centroid's column carries no mask pixel (non-convex masks),
    the nearest column that does is used instead (ties to the smaller
    x) and the center is placed at that column's mask midpoint.  A
    center that would fall outside the column span is clamped onto it;
    degenerate triples (single-pixel masks) are allowed with a warning.
    """
    m = ensure_mask(mask)
    ys, xs = np.nonzero(m)
    if ys.size == 0:
        raise ParameterError("cannot extract keypoints from an empty mask")
    cx = _rint(xs.mean())
    col_ys = ys[xs == cx]
    if col_ys.size == 0:
        cols = np.unique(xs)
        order = sorted(cols, key=lambda x: (abs(int(x) - cx), int(x)))
        cx = int(order[0])
        col_ys = ys[xs == cx]
        cy = _rint((col_ys.min() + col_ys.max()) / 2.0)
    else:
        cy = _rint(ys.mean())
    y_top = int(col_ys.min())
    y_bot = int(col_ys.max())
    if cy < y_top or cy > y_bot:
        warnings.warn(
            f"mask centroid row {cy} lies outside column span [{y_top}, {y_bot}]; clamping",
            stacklevel=2,
        )
        cy = min(max(cy, y_top), y_bot)
    if y_top == y_bot:
        warnings.warn("degenerate keypoint triple: mask column has a single pixel", stacklevel=2)
    return KeypointTriple(center=(cx, cy), upper=(cx, y_top), lower=(cx, y_bot))


# ---------------------------------------------------------------------------
# Dense patch correspondence


@dataclass(frozen=True)
class PatchDescriptor:
    """Mean-subtracted k x k intensity patch, zero-padded at borders."""

    k: int = 7

    def __post_init__(self):
        if self.k < 3 or self.k % 2 == 0:
            raise ParameterError(f"patch size must be odd and >= 3, got {self.k}")

    def _check_fit(self, plane: np.ndarray):
        h, w = plane.shape
        if self.k > h or self.k > w:
            raise ShapeError(f"patch size {self.k} does not fit inside image ({h}, {w})")

    def at(self, image, point: Point) -> np.ndarray:
        plane = intensity(image)
        self._check_fit(plane)
        h, w = plane.shape
        x, y = point
        if not (0 <= x < w and 0 <= y < h):
            raise ParameterError(f"keypoint ({x}, {y}) outside image ({h}, {w})")
        r = self.k // 2
        padded = np.pad(plane, r)
        patch = padded[y:y + self.k, x:x + self.k].ravel()
        return patch - patch.mean()

    def dense(self, image) -> np.ndarray:
        plane = intensity(image)
        self._check_fit(plane)
        r = self.k // 2
        padded = np.pad(plane, r)
        win = sliding_window_view(padded, (self.k, self.k))
        flat = win.reshape(*plane.shape, self.k * self.k)
        return flat - flat.mean(axis=-1, keepdims=True)


# descriptor norms at or below this are zero-variance up to rounding
_DEGENERATE_NORM = 1e-12


def similarity_map(keypoint: Point, image_anom, image_norm, descriptor=None) -> np.ndarray:
    """Cosine similarity between the keypoint descriptor and every
    position of the normal image.

    Positions whose descriptor has (numerically) zero norm score 0.  A
    degenerate descriptor at the keypoint, or a constant normal image,
    is an alignment error.
    """
    descriptor = descriptor or PatchDescriptor()
    key = descriptor.at(image_anom, keypoint)
    key_norm = float(np.linalg.norm(key))
    if key_norm <= _DEGENERATE_NORM:
        raise AlignmentError(
            "similarity", f"degenerate (zero-variance) descriptor at keypoint {keypoint}"
        )
    plane = intensity(image_norm)
    if plane.max() - plane.min() == 0.0:
        raise AlignmentError("similarity", "normal image is constant; zero-variance patches")
    dense = descriptor.dense(image_norm)
    norms = np.linalg.norm(dense, axis=-1)
    scores = dense @ key
    with np.errstate(invalid="ignore", divide="ignore"):
        sims = np.where(norms > _DEGENERATE_NORM, scores / (norms * key_norm), 0.0)
    return sims


def argmax_point(score_map: np.ndarray) -> Point:
    """Position of the maximum score; ties go to smaller y, then x."""
    idx = int(np.argmax(score_map))
    y, x = divmod(idx, score_map.shape[1])
    return (x, y)


# ---------------------------------------------------------------------------
# Candidate line and constrained center


def rasterize_line(p0: Point, p1: Point) -> list[Point]:
    """Discrete segment between two pixels, endpoints inclusive."""
    x0, y0 = int(p0[0]), int(p0[1])
    x1, y1 = int(p1[0]), int(p1[1])
    dx = abs(x1 - x0)
    dy = -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    pixels = []
    while True:
        pixels.append((x0, y0))
        if x0 == x1 and y0 == y1:
            return pixels
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


@dataclass(frozen=True)
class CandidateLine:
    upper: Point
    lower: Point
    pixels: tuple[Point, ...]


def candidate_line(q_upper: Point, q_lower: Point) -> CandidateLine:
    return CandidateLine(upper=q_upper, lower=q_lower,
                         pixels=tuple(rasterize_line(q_upper, q_lower)))


@dataclass(frozen=True)
class CenterResult:
    point: Point
    fallback: bool


def constrained_center(score_map: np.ndarray, q_upper: Point, q_lower: Point, fg_mask) -> CenterResult:
    """Best-scoring foreground pixel on the segment joining the matches.

    Ties break to smaller y then smaller x.  If the segment has no
    foreground pixel, returns the global foreground argmax with the
    fallback flag set.  An empty foreground mask is an error.
    """
    fg = ensure_mask(fg_mask, "foreground mask")
    score_map = np.asarray(score_map, dtype=np.float64)
    if score_map.shape != fg.shape:
        raise ShapeError(f"score map shape {score_map.shape} != mask shape {fg.shape}")
    if not fg.any():
        raise AlignmentError("center", "foreground mask is empty")
    h, w = fg.shape
    for x, y in (q_upper, q_lower):
        if not (0 <= x < w and 0 <= y < h):
            raise ParameterError(f"line endpoint ({x}, {y}) outside image ({h}, {w})")
    candidates = [(x, y) for x, y in rasterize_line(q_upper, q_lower) if fg[y, x] == 1.0]
    if candidates:
        best = None
        best_score = -np.inf
        for x, y in sorted(candidates, key=lambda p: (p[1], p[0])):
            s = score_map[y, x]
            if s > best_score:
                best, best_score = (x, y), s
        return CenterResult(point=best, fallback=False)
    masked = np.where(fg == 1.0, score_map, -np.inf)
    return CenterResult(point=argmax_point(masked), fallback=True)


# ---------------------------------------------------------------------------
# Mask relocation


def translate_mask(mask, shift: tuple[int, int]) -> np.ndarray:
    """Shift a mask by integer (dx, dy); pixels leaving the frame are dropped."""
    m = ensure_mask(mask)
    h, w = m.shape
    dx, dy = int(shift[0]), int(shift[1])
    out = np.zeros_like(m)
    src_y0, src_y1 = max(0, -dy), min(h, h - dy)
    src_x0, src_x1 = max(0, -dx), min(w, w - dx)
    if src_y0 < src_y1 and src_x0 < src_x1:
        out[src_y0 + dy:src_y1 + dy, src_x0 + dx:src_x1 + dx] = m[src_y0:src_y1, src_x0:src_x1]
    return out


def relocate_mask(mask, q_center: Point, fg_mask) -> np.ndarray:
    """Move the mask centroid to ``q_center``, clip, and intersect with
    the foreground.  An empty result is an alignment failure."""
    m = ensure_mask(mask)
    fg = ensure_mask(fg_mask, "foreground mask")
    if fg.shape != m.shape:
        raise ShapeError(f"mask shape {m.shape} != foreground shape {fg.shape}")
    cx, cy = mask_centroid(m)
    shift = (int(q_center[0]) - _rint(cx), int(q_center[1]) - _rint(cy))
    shifted = translate_mask(m, shift)
    if not shifted.any():
        raise AlignmentError("relocate", "mask translated entirely off-frame")
    out = shifted * fg
    if not out.any():
        raise AlignmentError("relocate", "mask empty after foreground intersection")
    return out


# ---------------------------------------------------------------------------
# Foreground extraction


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """Histogram threshold maximizing between-class variance."""
    hist, edges = np.histogram(values.ravel(), bins=bins)
    hist = hist.astype(np.float64)
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    s0 = np.cumsum(hist * centers)
    s1 = s0[-1] - s0
    with np.errstate(invalid="ignore", divide="ignore"):
        mu0 = s0 / w0
        mu1 = s1 / w1
        var_between = w0 * w1 * (mu0 - mu1) ** 2
    var_between = np.nan_to_num(var_between, nan=-1.0)
    return float(edges[int(np.argmax(var_between)) + 1])


def foreground_mask(image, mask_path=None) -> np.ndarray:
    """Binary support of the object in a normal image.

    Default extractor: Otsu threshold on intensity, keep the largest
    8-connected component, fill holes.  A constant image yields an
    all-ones mask with a low-confidence warning.  Alternatively a mask
    file path is read and binarized verbatim.
    """
    if mask_path is not None:
        from .imgio import load_mask

        return load_mask(mask_path)
    plane = intensity(image)
    if plane.max() - plane.min() == 0.0:
        warnings.warn("uniform image: foreground covers everything (low confidence)", stacklevel=2)
        return np.ones_like(plane)
    thr = otsu_threshold(plane)
    fg = plane > thr
    if not fg.any():
        fg = plane >= plane.max()
    labels, n = ndi.label(fg, structure=np.ones((3, 3), dtype=int))
    if n > 1:
        sizes = np.bincount(labels.ravel())[1:]
        fg = labels == (int(np.argmax(sizes)) + 1)
    return ndi.binary_fill_holes(fg).astype(np.float64)


# ---------------------------------------------------------------------------
# Full alignment


@dataclass(frozen=True)
class AlignResult:
    mask: np.ndarray
    q_upper: Point
    q_lower: Point
    q_center: Point
    fallback: bool


def align(mask, exemplar: AnomalyExemplar, normal_image, descriptor=None, foreground=None) -> AlignResult:
    """Relocate ``mask`` onto ``normal_image`` using the exemplar's
    keypoint correspondences.

    ``foreground`` overrides the default extractor.  Deterministic;
    failures carry the stage that produced them.
    """
    descriptor = descriptor or PatchDescriptor()
    kp = extract_keypoints(exemplar.mask)
    s_u = similarity_map(kp.upper, exemplar.image, normal_image, descriptor)
    s_c = similarity_map(kp.center, exemplar.image, normal_image, descriptor)
    s_l = similarity_map(kp.lower, exemplar.image, normal_image, descriptor)
    q_upper = argmax_point(s_u)
    q_lower = argmax_point(s_l)
    fg = ensure_mask(foreground, "foreground mask") if foreground is not None else foreground_mask(normal_image)
    center = constrained_center(s_c, q_upper, q_lower, fg)
    aligned = relocate_mask(mask, center.point, fg)
    return AlignResult(mask=aligned, q_upper=q_upper, q_lower=q_lower,
                       q_center=center.point, fallback=center.fallback)
