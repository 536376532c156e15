#!/usr/bin/env python3
"""Timing sweep of the splat renderer's forward/backward passes.

    python3 scripts/benchmark_renderer.py --sizes 64 128 256
"""

import argparse
import os
import sys
import time

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from splatstab.splat import RasterConfig, build_scene, render_backward, render_with_cache
from splatstab.synth import JitterSpec, SceneSpec, SyntheticScene


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sizes", type=int, nargs="+", default=[64, 128])
    ap.add_argument("--reps", type=int, default=3)
    args = ap.parse_args()

    for size in args.sizes:
        spec = SceneSpec(width=size, height=size, frame_count=2, flow_radius=1, n_points=0,
                         jitter=JitterSpec(sigma_t=0.01, sigma_r_deg=0.3))
        b = SyntheticScene(spec).generate()
        scene = build_scene(b.frames[0], b.depths[0], b.intrinsics, b.trajectory[0])
        cfg = RasterConfig()
        out, cache = render_with_cache(scene, b.intrinsics, b.trajectory[1], cfg)  # warmup
        gc = np.random.default_rng(0).normal(size=out.color.shape)

        t0 = time.time()
        for _ in range(args.reps):
            out, cache = render_with_cache(scene, b.intrinsics, b.trajectory[1], cfg)
        fwd = (time.time() - t0) / args.reps
        t0 = time.time()
        for _ in range(args.reps):
            render_backward(scene, cache, gc)
        bwd = (time.time() - t0) / args.reps
        print(f"{size}x{size}: {len(scene)} primitives, {len(cache.pair_prim)} pairs, "
              f"forward {fwd * 1e3:.0f} ms, backward {bwd * 1e3:.0f} ms")


if __name__ == "__main__":
    main()
