"""End-to-end orchestration: images to detections, deterministically.

Per frame, every camera runs backbone -> depth logits -> CRF-refined
depth -> frustum lift; the lifted features pool into one BEV grid per
frame. The frame grids fuse temporally, and the decoder turns the fused
grid into detections. Camera passes are independent pure functions, so
they may run on a thread pool; results are collected by camera index and
pooled in fixed order, which keeps outputs bit-identical for any thread
count. Failures inside a stage re-raise as ``StageError`` tagged with
the stage name.

The backbone consumes the background-subtracted raster. With zero
conv biases an object-free frame therefore produces exactly zero
features, an all-zero BEV, and a heatmap pinned at sigmoid(bias) below
the proposal threshold: background-only scenes decode to zero
detections structurally.
"""

from __future__ import annotations

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Sequence, Tuple

import numpy as np

from .config import SceneConfig
from .depth_crf import DepthBins, DepthVolume, map_labeling, modulate
from .errors import BevnextError, ConfigError, ShapeError, StageError
from .kernels import ConvSpec, conv2d
from .object_decoder import (
    Detection,
    Heatmap,
    compute_heatmap,
    depth_embedding,
    expand_roi,
    format_detections,
    lift_references,
    regress,
    select_centers,
    spatial_cross_attention,
)
from .ppm import save_ppm
from .res2fusion import FusionStack, fuse, post_fuse
from .scene import SyntheticScene, background_image
from .view_transform import (
    BevGrid,
    CameraModel,
    build_frustum,
    lift,
    pool,
    precompute_pool_index,
)
from .weights import (
    WeightBundle,
    attn_spec,
    backbone_specs,
    depth_head_spec,
    depth_mlp_spec,
    fusion_config,
    heatmap_spec,
    post_specs,
    regression_heads,
    validate_bundle,
)

STAGES = ("backbone", "depth", "crf", "lift", "pool", "fusion", "decoder")


def run_stage(stage: str, fn: Callable, *args, **kwargs):
    """Run one stage; package-level failures re-raise tagged with the stage."""
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except BevnextError as exc:
        raise StageError(stage, str(exc)) from exc


def tensor_digest(arr: np.ndarray) -> str:
    """Stable content digest: sha256 over dtype, shape, and raw bytes."""
    a = np.ascontiguousarray(arr)
    h = hashlib.sha256()
    h.update(str(a.dtype).encode())
    h.update(str(a.shape).encode())
    h.update(a.tobytes())
    return h.hexdigest()


def toy_backbone(image: np.ndarray, stride: int, specs: Sequence[ConvSpec]) -> np.ndarray:
    """Fixed 3-layer strided conv stack over an [H, W, 3] raster.

    Input values are scaled by 1/255 (a raw uint8 raster or a signed
    background-subtracted float raster both work). Three stride-2 convs
    reach 1/8 scale with relu between them; stride 16 appends a 2x2 mean
    pool. Output is [C, H/stride, W/stride] float32.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"toy_backbone: image must be [H, W, 3], got {img.shape}")
    h, w = img.shape[:2]
    if stride not in (8, 16):
        raise ShapeError(f"toy_backbone: stride must be 8 or 16, got {stride}")
    if h % stride or w % stride:
        raise ShapeError(
            f"toy_backbone: image dims {h}x{w} not divisible by stride {stride}"
        )
    if len(specs) != 3:
        raise ShapeError(f"toy_backbone: expected 3 conv specs, got {len(specs)}")
    x = (img / 255.0).transpose(2, 0, 1).astype(np.float32)[None]
    for i, spec in enumerate(specs):
        x = conv2d(x, spec)
        if i < 2:
            x = np.maximum(x, 0.0)
    if stride == 16:
        n, c, hh, ww = x.shape
        x = (
            x.reshape(n, c, hh // 2, 2, ww // 2, 2)
            .astype(np.float64)
            .mean(axis=(3, 5))
            .astype(np.float32)
        )
    return x[0]


def project_depth_labels(
    points: np.ndarray,
    camera: CameraModel,
    feat_h: int,
    feat_w: int,
    stride: int,
    bins: DepthBins,
) -> Tuple[np.ndarray, float]:
    """Sparse depth labels: project points onto the feature grid.

    Each point maps to the feature cell containing its pixel and to the
    bin with the nearest center; within a cell the nearest point wins
    (ties by input order). Returns the [H', W'] int64 label raster with
    -1 for unlabeled cells, and coverage = labeled cells / total cells.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    labels = np.full((feat_h, feat_w), -1, dtype=np.int64)
    total = feat_h * feat_w
    if pts.shape[0] == 0:
        return labels, 0.0
    uv, depth = camera.project(pts)
    with np.errstate(invalid="ignore"):
        ok = (
            (depth > 0)
            & np.isfinite(uv).all(axis=1)
            & (uv[:, 0] >= 0)
            & (uv[:, 0] < feat_w * stride)
            & (uv[:, 1] >= 0)
            & (uv[:, 1] < feat_h * stride)
        )
    idx = np.nonzero(ok)[0]
    if idx.size == 0:
        return labels, 0.0
    u, v, d = uv[idx, 0], uv[idx, 1], depth[idx]
    cell = (v.astype(np.int64) // stride) * feat_w + (u.astype(np.int64) // stride)
    order = np.lexsort((idx, d, cell))
    cells_sorted = cell[order]
    _, first = np.unique(cells_sorted, return_index=True)
    chosen = order[first]
    bin_idx = np.abs(d[chosen][:, None] - bins.centers[None, :]).argmin(axis=1)
    labels.reshape(-1)[cell[chosen]] = bin_idx
    coverage = float(cell[chosen].size) / float(total)
    return labels, coverage


def _check_scene(scene: SyntheticScene, cfg: SceneConfig) -> None:
    """Scene artifacts must match the config's dimensional contract."""
    if scene.k != cfg.frames:
        raise ShapeError(f"scene has {scene.k} frames, config expects {cfg.frames}")
    if scene.n_cameras != cfg.camera_count:
        raise ShapeError(
            f"scene has {scene.n_cameras} cameras, config expects {cfg.camera_count}"
        )
    if scene.image_h != cfg.image_h or scene.image_w != cfg.image_w:
        raise ShapeError(
            f"scene rasters are {scene.image_h}x{scene.image_w}, "
            f"config expects {cfg.image_h}x{cfg.image_w}"
        )


@dataclass
class PipelineResult:
    """Decoder output plus the tensors the artifact dumps are made from."""

    detections: List[Detection]
    heatmap: Heatmap
    depth: Tuple[DepthVolume, ...]  # current-frame depth, one per camera
    bev: BevGrid  # fused decoder input


def run_pipeline(
    scene: SyntheticScene,
    cfg: SceneConfig,
    bundle: WeightBundle,
    threads: int = 1,
) -> PipelineResult:
    """Run the full detector on a scene; bit-identical for any ``threads``."""
    if threads < 1:
        raise ConfigError(f"threads must be >= 1, got {threads}")
    _check_scene(scene, cfg)
    validate_bundle(bundle, cfg)
    bins, spec, rig, params = cfg.bins(), cfg.bev(), cfg.rig(), cfg.crf_params()
    bspecs = backbone_specs(bundle, cfg)
    dspec = depth_head_spec(bundle, cfg)
    fcfg = fusion_config(bundle, cfg)
    down, merge = post_specs(bundle, cfg)
    hspec = heatmap_spec(bundle, cfg)
    attn = attn_spec(bundle, cfg)
    dmlp = depth_mlp_spec(bundle)
    heads = regression_heads(bundle)
    queries = bundle["decoder.queries"]

    frusta = [
        run_stage("lift", build_frustum, cam, cfg.feat_h, cfg.feat_w, cfg.stride, bins, ci)
        for ci, cam in enumerate(rig)
    ]
    index = run_stage("pool", precompute_pool_index, frusta, spec)
    bg = background_image(cfg.image_h, cfg.image_w).astype(np.float64)

    def camera_pass(image: np.ndarray, ci: int):
        diff = image.astype(np.float64) - bg
        feats = run_stage("backbone", toy_backbone, diff, cfg.stride, bspecs)
        logits = run_stage("depth", lambda: conv2d(feats[None], dspec)[0])
        vol = run_stage("crf", modulate, logits, image.astype(np.float64) / 255.0, bins, params, ci)
        lifted = run_stage("lift", lift, feats, vol)
        return feats, vol, lifted

    grids = []
    current = None
    for t in range(scene.k):
        images = scene.frames[t].images
        if threads == 1:
            results = [camera_pass(images[ci], ci) for ci in range(len(images))]
        else:
            with ThreadPoolExecutor(max_workers=threads) as ex:
                futures = [ex.submit(camera_pass, images[ci], ci) for ci in range(len(images))]
                results = [f.result() for f in futures]
        lifted_stack = np.stack([lifted for _, _, lifted in results], axis=0)
        grids.append(run_stage("pool", pool, lifted_stack, index, spec))
        current = results

    stack = run_stage("fusion", FusionStack, tuple(grids))
    fused = run_stage("fusion", fuse, stack, fcfg)
    bev = run_stage("fusion", post_fuse, fused, down, merge)

    heat = run_stage("decoder", compute_heatmap, bev, hspec)
    props = run_stage("decoder", select_centers, heat, cfg.threshold, cfg.top_n)
    roi = run_stage("decoder", expand_roi, bev, props, queries)
    refs = run_stage(
        "decoder", lift_references, roi.centers, spec, cfg.heights, rig, cfg.image_h, cfg.image_w
    )
    feats_now = np.stack([feats for feats, _, _ in current], axis=0)
    vols_now = tuple(vol for _, vol, _ in current)
    emb = run_stage(
        "decoder", lambda: np.stack([depth_embedding(v, dmlp) for v in vols_now], axis=0)
    )
    refined, _ = run_stage(
        "decoder", spatial_cross_attention, roi, refs, feats_now, attn, cfg.stride, emb
    )
    dets = run_stage("decoder", regress, refined, heads, spec)
    return PipelineResult(dets, heat, vols_now, bev)


def write_artifacts(
    result: PipelineResult,
    out_dir,
    dump_depth: bool = False,
    dump_heatmap: bool = False,
) -> List[str]:
    """Write detections.txt and optional PPM dumps; returns written paths."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    det_path = os.path.join(out_dir, "detections.txt")
    with open(det_path, "w", encoding="utf-8") as fh:
        fh.write(format_detections(result.detections))
    written.append(det_path)
    if dump_depth:
        for ci, vol in enumerate(result.depth):
            labels = map_labeling(vol)
            gray = ((labels * 255) // max(vol.k - 1, 1)).astype(np.uint8)
            img = np.repeat(gray[:, :, None], 3, axis=2)
            path = os.path.join(out_dir, f"depth_cam{ci}.ppm")
            save_ppm(path, img)
            written.append(path)
    if dump_heatmap:
        best = result.heatmap.values.max(axis=0)
        gray = np.floor(best * 255.0).astype(np.uint8)
        img = np.repeat(gray[:, :, None], 3, axis=2)
        path = os.path.join(out_dir, "heatmap.ppm")
        save_ppm(path, img)
        written.append(path)
    return written
