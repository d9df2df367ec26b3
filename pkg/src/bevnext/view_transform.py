"""Camera-to-BEV view transform: frustum lifting and sum pooling.

Forward projection in three steps: each feature pixel spawns one 3D point
per depth bin (a frustum of candidate positions), image features are spread
across those candidates weighted by the per-pixel depth distribution, and
every in-bounds candidate is sum-pooled into the ego-centric grid cell it
falls in. The scatter order is precomputed once per geometry (PoolIndex)
and accumulation runs over sorted entries in float64, so pooled grids are
bit-identical across runs and thread counts.

Camera axis convention: x right, y down, z forward in the camera frame.
The extrinsic transform maps camera-frame points into the ego frame.
"""

from dataclasses import dataclass
from typing import Dict, Iterable, Sequence, Tuple, Union

import numpy as np

from .depth_crf import DepthBins, DepthVolume
from .errors import FormatError, ShapeError

ROTATION_TOL = 1e-6


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics plus a rigid camera-to-ego transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        if self.fx <= 0 or self.fy <= 0:
            raise ShapeError("CameraModel: focal lengths must be > 0")
        if r.shape != (3, 3):
            raise ShapeError(f"CameraModel: rotation must be 3x3, got {r.shape}")
        if t.shape != (3,):
            raise ShapeError(f"CameraModel: translation must be a 3-vector, got {t.shape}")
        if np.abs(r @ r.T - np.eye(3)).max() > ROTATION_TOL:
            raise ShapeError("CameraModel: rotation must be orthonormal within 1e-6")

    def cam_to_ego(self, points: np.ndarray) -> np.ndarray:
        """Map camera-frame [N, 3] points into the ego frame."""
        p = np.asarray(points, dtype=np.float64)
        return np.einsum("nj,ij->ni", p, self.rotation) + self.translation

    def ego_to_cam(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64) - self.translation
        return np.einsum("nj,ji->ni", p, self.rotation)

    def project(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Project ego-frame [N, 3] points to pixel (u, v) and depth.

        Depth is the camera-frame z coordinate; points at or behind the
        image plane (depth <= 0) yield non-finite or mirrored pixels, so
        callers must mask on the returned depth.
        """
        cam = self.ego_to_cam(points)
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * cam[:, 0] / z + self.cx
            v = self.fy * cam[:, 1] / z + self.cy
        return np.stack([u, v], axis=1), z


@dataclass(frozen=True)
class CameraRig:
    """Ordered set of cameras sharing one ego frame."""

    cameras: Tuple[CameraModel, ...]

    def __post_init__(self):
        object.__setattr__(self, "cameras", tuple(self.cameras))
        if not self.cameras:
            raise ShapeError("CameraRig: at least one camera required")

    def __len__(self) -> int:
        return len(self.cameras)

    def __iter__(self):
        return iter(self.cameras)

    def __getitem__(self, i: int) -> CameraModel:
        return self.cameras[i]


@dataclass(frozen=True)
class BevSpec:
    """Square ego-centric grid: G x G cells covering [-L, L] in x and y."""

    g: int
    cell_size: float
    extent: float

    def __post_init__(self):
        if self.g < 8:
            raise ShapeError(f"BevSpec: grid size {self.g} below minimum 8")
        if abs(self.g * self.cell_size - 2.0 * self.extent) > 1e-9:
            raise ShapeError(
                f"BevSpec: g * cell_size = {self.g * self.cell_size} must equal 2 * extent = {2 * self.extent}"
            )

    @classmethod
    def square(cls, g: int, extent: float) -> "BevSpec":
        return cls(g, 2.0 * extent / g, extent)

    @property
    def n_cells(self) -> int:
        return self.g * self.g


@dataclass(frozen=True)
class FrustumGrid:
    """Ego-frame 3D point of every (feature pixel, depth bin) pair, [H', W', K, 3]."""

    camera: int
    points: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64)
        object.__setattr__(self, "points", p)
        if p.ndim != 4 or p.shape[3] != 3:
            raise ShapeError(f"FrustumGrid: points must be [H', W', K, 3], got {p.shape}")
        if self.camera < 0:
            raise ShapeError("FrustumGrid: camera index must be >= 0")
        if not np.isfinite(p).all():
            raise ShapeError("FrustumGrid: non-finite point coordinate")


@dataclass(frozen=True)
class BevGrid:
    """Single-frame C-channel feature raster over the ego ground plane, [C, G, G]."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float32)
        object.__setattr__(self, "data", d)
        if d.ndim != 3:
            raise ShapeError(f"BevGrid: data must be rank-3 [C, G, G], got rank {d.ndim}")
        if d.shape[1] != d.shape[2]:
            raise ShapeError(f"BevGrid: grid must be square, got {d.shape[1]}x{d.shape[2]}")
        if not np.isfinite(d).all():
            raise ShapeError("BevGrid: non-finite feature value")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def g(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class PoolIndex:
    """Sorted scatter plan: for each BEV cell, one contiguous entry interval.

    Entries are sorted by (cell, camera, pixel, bin); cell_offsets is the
    CSR-style interval table (length G*G + 1). Per-entry source coordinates
    index into a [n_cameras, C, H', W', K] lifted feature stack.
    """

    g: int
    n_cameras: int
    feat_shape: Tuple[int, int, int]
    cell_offsets: np.ndarray
    entry_camera: np.ndarray
    entry_pixel: np.ndarray
    entry_bin: np.ndarray

    def __post_init__(self):
        for name in ("cell_offsets", "entry_camera", "entry_pixel", "entry_bin"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.uint32))
        object.__setattr__(self, "feat_shape", tuple(int(v) for v in self.feat_shape))
        if self.cell_offsets.shape != (self.g * self.g + 1,):
            raise ShapeError(
                f"PoolIndex: cell_offsets must have length G*G + 1 = {self.g * self.g + 1}, got {self.cell_offsets.size}"
            )
        m = self.entry_count
        if self.entry_camera.size != m or self.entry_pixel.size != m or self.entry_bin.size != m:
            raise ShapeError("PoolIndex: entry arrays must match the total interval length")

    @property
    def entry_count(self) -> int:
        return int(self.cell_offsets[-1])

    def to_entries(self) -> Dict[str, np.ndarray]:
        """Flat u32 tensors for the named-bundle container."""
        h, w, k = self.feat_shape
        meta = np.array([self.g, self.n_cameras, h, w, k], dtype=np.uint32)
        return {
            "pool.meta": meta,
            "pool.offsets": self.cell_offsets,
            "pool.camera": self.entry_camera,
            "pool.pixel": self.entry_pixel,
            "pool.bin": self.entry_bin,
        }

    @classmethod
    def from_entries(cls, entries: Dict[str, np.ndarray]) -> "PoolIndex":
        for key in ("pool.meta", "pool.offsets", "pool.camera", "pool.pixel", "pool.bin"):
            if key not in entries:
                raise FormatError(f"pool index bundle missing entry '{key}'")
        meta = np.asarray(entries["pool.meta"], dtype=np.uint32)
        if meta.size != 5:
            raise FormatError(f"pool index meta must have 5 fields, got {meta.size}")
        g, n_cameras, h, w, k = (int(v) for v in meta)
        return cls(
            g=g,
            n_cameras=n_cameras,
            feat_shape=(h, w, k),
            cell_offsets=entries["pool.offsets"],
            entry_camera=entries["pool.camera"],
            entry_pixel=entries["pool.pixel"],
            entry_bin=entries["pool.bin"],
        )


def build_frustum(
    cam: CameraModel,
    feat_h: int,
    feat_w: int,
    stride: int,
    bins: DepthBins,
    camera: int = 0,
) -> FrustumGrid:
    """Ego-frame point of every (feature pixel, depth bin) pair.

    Feature pixel (row, col) covers image pixels [row*stride, (row+1)*stride);
    its center (u, v) = ((col + 0.5) * stride, (row + 0.5) * stride) is pushed
    through the inverse intrinsics at each bin center depth, then through the
    camera-to-ego transform.
    """
    u = (np.arange(feat_w, dtype=np.float64) + 0.5) * stride
    v = (np.arange(feat_h, dtype=np.float64) + 0.5) * stride
    d = bins.centers
    x = (u[None, :, None] - cam.cx) / cam.fx * d[None, None, :]
    y = (v[:, None, None] - cam.cy) / cam.fy * d[None, None, :]
    z = np.broadcast_to(d[None, None, :], (feat_h, feat_w, bins.k))
    pts_cam = np.stack(np.broadcast_arrays(x, y, z), axis=-1)
    ego = np.einsum("hwkj,ij->hwki", pts_cam, cam.rotation) + cam.translation
    return FrustumGrid(camera, ego)


def lift(features: np.ndarray, depth: DepthVolume) -> np.ndarray:
    """Spread [C, H', W'] features over depth bins: out[c,u,v,d] = f[c,u,v] * p[d,u,v]."""
    f = np.asarray(features, dtype=np.float32)
    if f.ndim != 3:
        raise ShapeError(f"lift: features must be [C, H', W'], got rank {f.ndim}")
    _, h, w = f.shape
    if (depth.height, depth.width) != (h, w):
        raise ShapeError(
            f"lift: depth dims {depth.height}x{depth.width} != feature dims {h}x{w}"
        )
    out = np.einsum("chw,khw->chwk", f.astype(np.float64), depth.probs)
    return out.astype(np.float32)


def precompute_pool_index(
    frusta: Union[FrustumGrid, Sequence[FrustumGrid]],
    spec: BevSpec,
) -> PoolIndex:
    """Sorted scatter plan from frustum geometry; reusable across frames.

    Frusta from all cameras share one index; overlapping cells accumulate.
    Out-of-extent points are dropped here, never at pool time.
    """
    if isinstance(frusta, FrustumGrid):
        frusta = [frusta]
    frusta = list(frusta)
    if not frusta:
        raise ShapeError("precompute_pool_index: at least one frustum required")
    h, w, k, _ = frusta[0].points.shape
    seen = set()
    for f in frusta:
        if f.points.shape != (h, w, k, 3):
            raise ShapeError(
                f"precompute_pool_index: frustum dims {f.points.shape[:3]} != {(h, w, k)}"
            )
        if f.camera in seen:
            raise ShapeError(f"precompute_pool_index: duplicate camera index {f.camera}")
        seen.add(f.camera)
    n_cameras = max(seen) + 1

    cells, cams, pixels, dbins = [], [], [], []
    flat = np.arange(h * w * k, dtype=np.int64)
    pixel_of = flat // k
    bin_of = flat % k
    for f in frusta:
        x = f.points[..., 0].reshape(-1)
        y = f.points[..., 1].reshape(-1)
        ix = np.floor((x + spec.extent) / spec.cell_size).astype(np.int64)
        iy = np.floor((y + spec.extent) / spec.cell_size).astype(np.int64)
        ok = (ix >= 0) & (ix < spec.g) & (iy >= 0) & (iy < spec.g)
        cells.append((iy * spec.g + ix)[ok])
        cams.append(np.full(int(ok.sum()), f.camera, dtype=np.int64))
        pixels.append(pixel_of[ok])
        dbins.append(bin_of[ok])
    cell = np.concatenate(cells)
    cam = np.concatenate(cams)
    pixel = np.concatenate(pixels)
    dbin = np.concatenate(dbins)

    order = np.lexsort((dbin, pixel, cam, cell))  # cell is the primary key
    counts = np.bincount(cell, minlength=spec.n_cells)
    offsets = np.zeros(spec.n_cells + 1, dtype=np.uint32)
    offsets[1:] = np.cumsum(counts)
    return PoolIndex(
        g=spec.g,
        n_cameras=n_cameras,
        feat_shape=(h, w, k),
        cell_offsets=offsets,
        entry_camera=cam[order],
        entry_pixel=pixel[order],
        entry_bin=dbin[order],
    )


def pool(frustum_features: np.ndarray, index: PoolIndex, spec: BevSpec) -> BevGrid:
    """Sum-pool lifted features into the BEV grid along the precomputed plan.

    Accepts [C, H', W', K] (single camera) or [N, C, H', W', K]. Each cell
    accumulates its interval in sorted entry order, in float64, then rounds
    to float32 once, so results are bit-identical regardless of threading.
    """
    f = np.asarray(frustum_features, dtype=np.float32)
    if f.ndim == 4:
        f = f[None]
    if f.ndim != 5:
        raise ShapeError(f"pool: features must be [N, C, H', W', K], got rank {f.ndim}")
    n, c, h, w, k = f.shape
    if spec.g != index.g or (h, w, k) != index.feat_shape or n != index.n_cameras:
        raise ShapeError(
            f"pool: stale index (built for cameras={index.n_cameras}, dims={index.feat_shape}, "
            f"G={index.g}; got cameras={n}, dims={(h, w, k)}, G={spec.g}); rebuild the index"
        )
    ff = f.astype(np.float64)
    pix = index.entry_pixel.astype(np.int64)
    vals = ff[
        index.entry_camera.astype(np.int64),
        :,
        pix // w,
        pix % w,
        index.entry_bin.astype(np.int64),
    ]
    cells = np.repeat(
        np.arange(spec.n_cells, dtype=np.int64),
        np.diff(index.cell_offsets.astype(np.int64)),
    )
    acc = np.zeros((spec.n_cells, c), dtype=np.float64)
    np.add.at(acc, cells, vals)
    return BevGrid(acc.T.reshape(c, spec.g, spec.g).astype(np.float32))
