"""Command-line entry points.

Subcommands: ``generate`` renders a synthetic scene directory,
``init-weights`` writes a seeded weight bundle, ``run`` executes the
full pipeline over a scene, ``crf-demo`` shows the depth-distribution
sharpening on a two-region image, and ``bench`` wall-times one stage on
fixed synthetic inputs. Exit codes: 0 success, 2 configuration or file
format problems, 3 runtime shape or stage failures.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from typing import List, Optional

import numpy as np

from .config import SceneConfig, load_config
from .depth_crf import CrfParams, DepthBins, DepthVolume, map_labeling, modulate
from .errors import ConfigError, FormatError, ShapeError, StageError
from .kernels import SplitMix64, softmax
from .object_decoder import (
    compute_heatmap,
    depth_embedding,
    expand_roi,
    lift_references,
    regress,
    select_centers,
    spatial_cross_attention,
)
from .pipeline import run_pipeline, write_artifacts
from .ppm import save_ppm
from .res2fusion import FusionStack, fuse, post_fuse
from .scene import gen_scene, load_scene, save_scene
from .view_transform import BevGrid, build_frustum, pool, precompute_pool_index
from .weights import (
    attn_spec,
    depth_mlp_spec,
    fusion_config,
    heatmap_spec,
    init_bundle,
    load_weights,
    post_specs,
    regression_heads,
    save_weights,
)

DEFAULT_WEIGHT_SEED = 7


def _cmd_generate(args) -> int:
    cfg = load_config(args.config)
    scene = gen_scene(cfg)
    save_scene(scene, args.out)
    print(f"wrote {scene.k} frames x {scene.n_cameras} cameras to {args.out}")
    return 0


def _cmd_init_weights(args) -> int:
    cfg = load_config(args.config)
    bundle = init_bundle(cfg, args.seed)
    save_weights(bundle, args.out)
    print(f"wrote {len(bundle.tensors)} tensors to {args.out}")
    return 0


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    scene = load_scene(args.scene)
    bundle = load_weights(args.weights, cfg)
    start = time.perf_counter()
    result = run_pipeline(scene, cfg, bundle, threads=args.threads)
    elapsed = time.perf_counter() - start
    paths = write_artifacts(result, args.out, args.dump_depth, args.dump_heatmap)
    print(f"{len(result.detections)} detections in {elapsed:.2f} s -> {paths[0]}")
    for path in paths[1:]:
        print(f"dumped {path}")
    return 0


def _two_region_image(height: int, width: int) -> np.ndarray:
    img = np.zeros((height, width, 3), dtype=np.uint8)
    img[:, : width // 2] = (51, 51, 204)
    img[:, width // 2 :] = (230, 153, 26)
    return img


def _region_spread(probs: np.ndarray, columns: slice) -> float:
    """Mean pairwise L1 distance between the region's pixel distributions."""
    region = probs[:, :, columns].reshape(probs.shape[0], -1).T
    n = region.shape[0]
    total = 0.0
    for i in range(n):
        total += np.abs(region[i + 1 :] - region[i]).sum()
    pairs = n * (n - 1) // 2
    return total / pairs if pairs else 0.0


def _cmd_crf_demo(args) -> int:
    h, w = args.height, args.width
    if h < 2 or w < 2 or w % 2:
        raise ConfigError("crf-demo needs height >= 2 and even width >= 2")
    rng = SplitMix64(args.seed)
    image = _two_region_image(h, w)
    k = args.bins
    logits = rng.uniform_array((k, h, w), -2.0, 2.0).astype(np.float64)
    bins = DepthBins.uniform(k, 1.0, 1.0 + k)
    before = modulate(logits, image / 255.0, bins, CrfParams.default(iters=0))
    after = modulate(logits, image / 255.0, bins, CrfParams.default(iters=args.iters))
    left, right = slice(0, w // 2), slice(w // 2, w)
    for name, region in (("left", left), ("right", right)):
        s0 = _region_spread(before.probs, region)
        s1 = _region_spread(after.probs, region)
        print(f"region {name}: spread T=0 {s0:.6f} -> T={args.iters} {s1:.6f}")
    changed = int((map_labeling(before) != map_labeling(after)).sum())
    print(f"map labels changed: {changed} of {h * w}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        for tag, vol in (("before", before), ("after", after)):
            gray = ((map_labeling(vol) * 255) // (k - 1)).astype(np.uint8)
            save_ppm(f"{args.out}/crf_{tag}.ppm", np.repeat(gray[:, :, None], 3, axis=2))
            print(f"dumped {args.out}/crf_{tag}.ppm")
    return 0


def _bench_setup(stage: str):
    """Build (callable, description) benching one stage at desk scale."""
    cfg = SceneConfig()
    rng = SplitMix64(99)
    if stage == "crf":
        logits = rng.uniform_array((cfg.depth_bins, cfg.feat_h, cfg.feat_w), -2, 2).astype(np.float64)
        image = rng.uniform_array((cfg.image_h, cfg.image_w, 3), 0, 1).astype(np.float64)
        bins, params = cfg.bins(), cfg.crf_params()
        return (lambda: modulate(logits, image, bins, params)), "dense CRF, 5 iterations"
    if stage == "pool":
        bins, spec = cfg.bins(), cfg.bev()
        frusta = [
            build_frustum(cam, cfg.feat_h, cfg.feat_w, cfg.stride, bins, ci)
            for ci, cam in enumerate(cfg.rig())
        ]
        index = precompute_pool_index(frusta, spec)
        feats = rng.uniform_array(
            (cfg.camera_count, cfg.channels, cfg.feat_h, cfg.feat_w, cfg.depth_bins), -1, 1
        )
        return (lambda: pool(feats, index, spec)), "6-camera frustum sum-pool"
    bundle = init_bundle(cfg, DEFAULT_WEIGHT_SEED)
    if stage == "fusion":
        grids = tuple(
            BevGrid(rng.uniform_array((cfg.channels, cfg.bev_grid, cfg.bev_grid), -1, 1))
            for _ in range(cfg.frames)
        )
        stack = FusionStack(grids)
        fcfg = fusion_config(bundle, cfg)
        down, merge = post_specs(bundle, cfg)
        return (lambda: post_fuse(fuse(stack, fcfg), down, merge)), "9-frame temporal fusion"
    if stage == "decoder":
        bev = BevGrid(rng.uniform_array((cfg.channels, cfg.bev_grid, cfg.bev_grid), -1, 1))
        spec, rig = cfg.bev(), cfg.rig()
        hspec, attn = heatmap_spec(bundle, cfg), attn_spec(bundle, cfg)
        dmlp, heads = depth_mlp_spec(bundle), regression_heads(bundle)
        queries = bundle["decoder.queries"]
        feats = rng.uniform_array(
            (cfg.camera_count, cfg.channels, cfg.feat_h, cfg.feat_w), -1, 1
        )
        vols = tuple(
            DepthVolume(ci, softmax(
                rng.uniform_array((cfg.depth_bins, cfg.feat_h, cfg.feat_w), -1, 1).astype(np.float64),
                axis=0,
            ))
            for ci in range(cfg.camera_count)
        )

        def decoder_pass():
            heat = compute_heatmap(bev, hspec)
            props = select_centers(heat, cfg.threshold, cfg.top_n)
            roi = expand_roi(bev, props, queries)
            refs = lift_references(roi.centers, spec, cfg.heights, rig, cfg.image_h, cfg.image_w)
            emb = np.stack([depth_embedding(v, dmlp) for v in vols], axis=0)
            refined, _ = spatial_cross_attention(roi, refs, feats, attn, cfg.stride, emb)
            return regress(refined, heads, spec)

        return decoder_pass, "heatmap -> ROI attention -> regression"
    raise ConfigError(f"unknown bench stage '{stage}'")


def _cmd_bench(args) -> int:
    if args.repeat < 1:
        raise ConfigError(f"--repeat must be >= 1, got {args.repeat}")
    fn, desc = _bench_setup(args.stage)
    times = []
    for i in range(args.repeat):
        t0 = time.perf_counter()
        fn()
        dt = (time.perf_counter() - t0) * 1000.0
        times.append(dt)
        print(f"stage {args.stage}: run {i + 1}/{args.repeat}: {dt:.2f} ms")
    print(
        f"stage {args.stage} ({desc}): min {min(times):.2f} ms, "
        f"mean {sum(times) / len(times):.2f} ms over {args.repeat} runs"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bevnext",
        description="Deterministic multi-camera 3D detection on synthetic scenes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="render a synthetic scene directory")
    gen.add_argument("--config", required=True, help="key = value config file")
    gen.add_argument("--out", required=True, help="output scene directory")
    gen.set_defaults(func=_cmd_generate)

    init = sub.add_parser("init-weights", help="write a seeded weight bundle")
    init.add_argument("--config", required=True)
    init.add_argument("--out", required=True, help="output .bvnx bundle path")
    init.add_argument("--seed", type=int, default=DEFAULT_WEIGHT_SEED)
    init.set_defaults(func=_cmd_init_weights)

    run = sub.add_parser("run", help="run the full pipeline on a scene")
    run.add_argument("--config", required=True)
    run.add_argument("--weights", required=True)
    run.add_argument("--scene", required=True, help="directory from 'generate'")
    run.add_argument("--out", required=True, help="output artifact directory")
    run.add_argument("--dump-depth", action="store_true", help="write per-camera depth argmax PPMs")
    run.add_argument("--dump-heatmap", action="store_true", help="write the BEV heatmap PPM")
    run.add_argument("--threads", type=int, default=1, help="camera-pass worker threads")
    run.set_defaults(func=_cmd_run)

    demo = sub.add_parser("crf-demo", help="two-region depth sharpening demo")
    demo.add_argument("--seed", type=int, default=0)
    demo.add_argument("--iters", type=int, default=5)
    demo.add_argument("--height", type=int, default=8)
    demo.add_argument("--width", type=int, default=16)
    demo.add_argument("--bins", type=int, default=6)
    demo.add_argument("--out", default=None, help="optional PPM dump directory")
    demo.set_defaults(func=_cmd_crf_demo)

    bench = sub.add_parser("bench", help="wall-time one stage on synthetic input")
    bench.add_argument("--stage", required=True, choices=("crf", "pool", "fusion", "decoder"))
    bench.add_argument("--repeat", type=int, default=3)
    bench.set_defaults(func=_cmd_bench)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ShapeError, StageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
