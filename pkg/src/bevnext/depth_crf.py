"""CRF modulation of per-pixel depth distributions.

Depth estimation is treated as classification over K metric bins. The raw
network output is softmaxed into per-pixel distributions, then refined by
T synchronous mean-field steps whose pairwise coupling prefers equal depth
bins for pixels with similar patch colors. Label compatibility between two
bins is the metric distance of their centers, so large depth disagreements
between similar-looking pixels cost more than small ones.

All distributions in this module are float64; the unary cost of a
probability p is -log(p + 1e-12). Pairwise sums follow the ordered-pair
convention (each unordered pair counted twice), which only scales the
energy and is applied consistently in both the energy and the messages.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .kernels import softmax

UNARY_EPS = 1e-12
MAX_ITERS = 64
MAX_WINDOW = 4096


@dataclass(frozen=True)
class DepthBins:
    """K discrete depth bins with strictly increasing metric centers."""

    centers: np.ndarray
    d_min: float
    d_max: float

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=np.float64)
        object.__setattr__(self, "centers", c)
        if c.ndim != 1 or c.size < 2:
            raise ShapeError("DepthBins: need at least 2 centers")
        if not (np.diff(c) > 0).all():
            raise ShapeError("DepthBins: centers must be strictly increasing")
        if c[0] < self.d_min or c[-1] > self.d_max:
            raise ShapeError("DepthBins: centers must lie within [d_min, d_max]")

    @property
    def k(self) -> int:
        return int(self.centers.size)

    @classmethod
    def uniform(cls, k: int, d_min: float, d_max: float) -> "DepthBins":
        """Evenly spaced centers at d_min + i * (d_max - d_min) / k."""
        step = (d_max - d_min) / k
        return cls(d_min + step * np.arange(k), d_min, d_max)


@dataclass
class DepthVolume:
    """Per-pixel categorical distribution over depth bins, shape [K, H, W]."""

    camera: int
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "probs", p)
        if p.ndim != 3:
            raise ShapeError(f"DepthVolume: probs must be rank-3 [K, H, W], got rank {p.ndim}")
        if (p < 0).any():
            raise ShapeError("DepthVolume: negative probability entry")
        sums = p.sum(axis=0)
        if np.abs(sums - 1.0).max() > 1e-6:
            raise ShapeError("DepthVolume: per-pixel probabilities must sum to 1 within 1e-6")

    @property
    def k(self) -> int:
        return self.probs.shape[0]

    @property
    def height(self) -> int:
        return self.probs.shape[1]

    @property
    def width(self) -> int:
        return self.probs.shape[2]


@dataclass
class PatchColorMap:
    """Mean RGB per feature cell, shape [H, W, 3], values in [0, 1]."""

    colors: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.colors, dtype=np.float64)
        object.__setattr__(self, "colors", c)
        if c.ndim != 3 or c.shape[2] != 3:
            raise ShapeError("PatchColorMap: colors must be [H, W, 3]")


@dataclass(frozen=True)
class CrfKernel:
    weight: float
    theta: float
    kind: str  # 'appearance' | 'spatial'

    def __post_init__(self):
        if self.kind not in ("appearance", "spatial"):
            raise ShapeError(f"CrfKernel: unknown kind '{self.kind}'")
        if self.weight < 0:
            raise ShapeError("CrfKernel: weight must be >= 0")
        if self.theta <= 0:
            raise ShapeError("CrfKernel: bandwidth theta must be > 0")


@dataclass
class CrfParams:
    """Kernel collection, iteration count T and interaction window radius R.

    R = 0 means dense coupling; R > 0 truncates the pairwise graph to a
    Chebyshev window of R cells (the performance path).
    """

    kernels: list = field(default_factory=list)
    iters: int = 5
    window: int = 0

    def __post_init__(self):
        if not self.kernels:
            raise ShapeError("CrfParams: at least one kernel required")
        if not 0 <= self.iters <= MAX_ITERS:
            raise ShapeError(f"CrfParams: iters must be in [0, {MAX_ITERS}]")
        if not 0 <= self.window <= MAX_WINDOW:
            raise ShapeError(f"CrfParams: window must be in [0, {MAX_WINDOW}]")

    @classmethod
    def default(cls, iters: int = 5, window: int = 0) -> "CrfParams":
        return cls(
            kernels=[CrfKernel(1.0, 0.1, "appearance"), CrfKernel(0.3, 3.0, "spatial")],
            iters=iters,
            window=window,
        )


def patch_colors(image: np.ndarray, stride: int) -> PatchColorMap:
    """Mean RGB of every stride x stride patch of an [H, W, 3] image."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError("patch_colors: image must be [H, W, 3]")
    h, w, _ = img.shape
    if h % stride or w % stride:
        raise ShapeError(
            f"patch_colors: image dims {h}x{w} not divisible by stride {stride}; crop the input first"
        )
    cells = img.reshape(h // stride, stride, w // stride, stride, 3)
    return PatchColorMap(cells.mean(axis=(1, 3)))


def build_compat(bins: DepthBins) -> np.ndarray:
    """Label compatibility: metric distance |c_a - c_b| between bin centers."""
    c = bins.centers
    return np.abs(c[:, None] - c[None, :])


class Affinity:
    """Pairwise coupling a(i, j) over flattened feature cells.

    a(i, j) = sum over kernels of w * exp(-dist^2 / (2 theta^2)), where
    appearance kernels use squared mean-RGB distance and spatial kernels
    squared cell-coordinate distance. The stored dense matrix has
    a(i, i) = sum of weights; couplings outside the interaction window are
    zeroed. `coupling` is the zero-diagonal matrix used for messages and
    energies.
    """

    def __init__(self, matrix: np.ndarray, height: int, width: int):
        self.matrix = matrix
        self.height = height
        self.width = width
        self.coupling = matrix.copy()
        np.fill_diagonal(self.coupling, 0.0)

    def lookup(self, i: int, j: int) -> float:
        return float(self.matrix[i, j])


def pairwise_affinity(colors: PatchColorMap, params: CrfParams) -> Affinity:
    h, w, _ = colors.colors.shape
    n = h * w
    flat = colors.colors.reshape(n, 3)
    rows, cols = np.divmod(np.arange(n), w)
    a = np.zeros((n, n), dtype=np.float64)
    col_d2 = None
    pos_d2 = None
    for k in params.kernels:
        if k.kind == "appearance":
            if col_d2 is None:
                diff = flat[:, None, :] - flat[None, :, :]
                col_d2 = np.einsum("ijc,ijc->ij", diff, diff)
            d2 = col_d2
        else:
            if pos_d2 is None:
                dr = rows[:, None] - rows[None, :]
                dc = cols[:, None] - cols[None, :]
                pos_d2 = (dr * dr + dc * dc).astype(np.float64)
            d2 = pos_d2
        a += k.weight * np.exp(-d2 / (2.0 * k.theta * k.theta))
    if params.window > 0:
        cheb = np.maximum(np.abs(rows[:, None] - rows[None, :]), np.abs(cols[:, None] - cols[None, :]))
        a[cheb > params.window] = 0.0
    return Affinity(a, h, w)


def unary_from_probs(probs: np.ndarray) -> np.ndarray:
    """Unary potentials -log(p + eps), shape preserved."""
    return -np.log(np.asarray(probs, dtype=np.float64) + UNARY_EPS)


def crf_energy(labels: np.ndarray, unary: np.ndarray, affinity: Affinity, compat: np.ndarray) -> float:
    """Total energy of a hard bin assignment.

    E = sum_i unary(i, l_i) + sum_{i != j} a(i, j) * compat(l_i, l_j),
    the pairwise sum running over ordered pairs.
    """
    k = compat.shape[0]
    lab = np.asarray(labels).reshape(-1)
    if lab.min() < 0 or lab.max() >= k:
        raise ShapeError(f"crf_energy: label outside [0, {k})")
    n = lab.size
    u = np.asarray(unary, dtype=np.float64).reshape(k, n).T  # [N, K]
    e_unary = float(u[np.arange(n), lab].sum())
    pair_compat = compat[np.ix_(lab, lab)]
    e_pair = float((affinity.coupling * pair_compat).sum())
    return e_unary + e_pair


def mean_field_step(q: DepthVolume, unary: np.ndarray, affinity: Affinity, compat: np.ndarray) -> DepthVolume:
    """One synchronous (Jacobi) mean-field update.

    Q'_i(a) ~ exp(-unary(i, a) - sum_{j != i} a(i, j) * sum_b compat(a, b) Q_j(b)),
    normalized per pixel. All messages read the previous iterate, so the
    update is order-independent and safe to parallelize over pixels.
    """
    k, h, w = q.probs.shape
    n = h * w
    if affinity.coupling.shape != (n, n):
        raise ShapeError(f"mean_field_step: affinity is {affinity.coupling.shape}, expected {(n, n)}")
    qf = q.probs.reshape(k, n).T  # [N, K]
    expected = np.einsum("nb,ab->na", qf, compat)  # E_b compat(a,b) Q_j(b) per pixel
    messages = np.einsum("ij,ja->ia", affinity.coupling, expected)  # [N, K]
    logits = -(unary.reshape(k, n).T + messages)
    out = softmax(logits, axis=1).T.reshape(k, h, w)
    return DepthVolume(q.camera, out)


def modulate(
    logits: np.ndarray,
    image: np.ndarray,
    bins: DepthBins,
    params: CrfParams,
    camera: int = 0,
) -> DepthVolume:
    """Softmax the depth logits and run T mean-field refinement steps.

    T = 0 returns softmax(logits) unchanged. The unary stays fixed at
    -log softmax(logits) across iterations.
    """
    lg = np.asarray(logits)
    if lg.ndim != 3:
        raise ShapeError(f"modulate: logits must be [K, H', W'], got rank {lg.ndim}")
    k, h, w = lg.shape
    if k != bins.k:
        raise ShapeError(f"modulate: logits bin axis {k} != bins.k {bins.k}")
    probs0 = softmax(lg, axis=0)
    vol = DepthVolume(camera, probs0)
    if params.iters == 0:
        return vol
    ih, iw = np.asarray(image).shape[:2]
    if ih % h or iw % w:
        raise ShapeError(f"modulate: image dims {ih}x{iw} not an integer multiple of feature dims {h}x{w}")
    stride = ih // h
    if iw // w != stride:
        raise ShapeError(f"modulate: inconsistent stride between axes ({ih}/{h} vs {iw}/{w})")
    colors = patch_colors(image, stride)
    affinity = pairwise_affinity(colors, params)
    compat = build_compat(bins)
    unary = unary_from_probs(probs0)
    for _ in range(params.iters):
        vol = mean_field_step(vol, unary, affinity, compat)
    return vol


def map_labeling(q: DepthVolume) -> np.ndarray:
    """Per-pixel argmax bin index; ties break toward the lower index."""
    return np.argmax(q.probs, axis=0)
