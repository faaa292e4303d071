"""Render-kernel benchmark: numba @njit loop vs the vectorized numpy
mirror, on the same scene and trajectory.

Both backends run in one process (the numpy path ignores the JIT), a
bitwise comparison guards the mirror property, and the numba timing
excludes the one-off compile. Set VIDGEO_DISABLE_NUMBA=1 to check the
import-time fallback separately.

    python3 benchmarks/bench_render.py [--frames 21] [--height 48]
    [--width 80] [--repeat 3]
"""

import argparse
import sys
import time

import numpy as np

sys.path.insert(0, "src")

from vidgeo import kernels, scenes


def render(clipspec, backend):
    scene, poses, H, W = clipspec
    return scenes.render_clip(scene, poses, H, W, backend=backend)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--frames", type=int, default=21)
    ap.add_argument("--height", type=int, default=48)
    ap.add_argument("--width", type=int, default=80)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    scene = scenes.make_random_scene(rng)
    tspec = scenes.make_random_trajectory(rng, args.frames, args.height,
                                          args.width)
    poses = scenes.make_trajectory(tspec)
    clipspec = (scene, poses, args.height, args.width)
    n_pix = args.frames * args.height * args.width
    print("scene: %d primitives, %d frames at %dx%d (%d rays/pass)"
          % (len(scene.primitives), args.frames, args.height, args.width,
             n_pix))

    if not kernels.HAVE_NUMBA:
        print("numba unavailable (VIDGEO_DISABLE_NUMBA or not installed);"
              " timing numpy only")

    results = {}
    backends = ["numpy"] + (["numba"] if kernels.HAVE_NUMBA else [])
    for backend in backends:
        render(clipspec, backend)        # warm-up; compiles the jit path
        best = min(_timed(render, clipspec, backend)
                   for _ in range(args.repeat))
        results[backend] = best
        print("%-6s best of %d: %7.1f ms  (%5.1f ns/ray)"
              % (backend, args.repeat, best * 1e3, best * 1e9 / n_pix))

    if kernels.HAVE_NUMBA:
        a = render(clipspec, "numpy")
        b = render(clipspec, "numba")
        same = all(np.array_equal(getattr(a, f), getattr(b, f))
                   for f in ("frames", "depth", "points", "valid", "poses"))
        print("backends bitwise identical: %s" % same)
        print("speedup: %.1fx" % (results["numpy"] / results["numba"]))
        if not same:
            return 1
    return 0


def _timed(fn, clipspec, backend):
    t0 = time.perf_counter()
    fn(clipspec, backend)
    return time.perf_counter() - t0


if __name__ == "__main__":
    sys.exit(main())
