"""Compare the compiled raster kernels with the NumPy fallback.

    python benchmarks/bench_raster.py [--size 64] [--repeat 5]

Times the soft rasterizer (forward and backward) and the z-buffer on the
face template, checks that both backends agree, and prints a table.
"""
import argparse
import time

import numpy as np

from rhythmhead import _ext
from rhythmhead import render as r
from rhythmhead.numeric import tensor as T


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def workloads(size):
    mesh = r.load_template()
    mesh = mesh.with_colors(np.full((len(mesh.vertices), 3), 0.6))
    cam = r.Camera.for_size(size)

    def forward():
        r.soft_rasterize(mesh, cam)

    def forward_backward():
        v = T.Tensor(mesh.vertices, requires_grad=True)
        c = T.Tensor(mesh.colors, requires_grad=True)
        img, sil = r.soft_rasterize_tensors(v, c, mesh.faces, cam)
        T.backward(img.sum() + sil.sum())

    def zbuffer():
        r.hard_rasterize(mesh.vertices, mesh.faces, cam)

    return {"soft forward": forward, "soft forward+backward": forward_backward, "z-buffer": zbuffer}, mesh, cam


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _ext.BACKEND != "cython":
        raise SystemExit("compiled extension not available; build with `pip install -e . --no-build-isolation`")

    jobs, mesh, cam = workloads(args.size)
    compiled = _ext.kernels
    rows = []
    for name, fn in jobs.items():
        r.kernels = compiled
        fast = best_of(fn, args.repeat)
        r.kernels = _ext.pure
        slow = best_of(fn, args.repeat)
        rows.append((name, fast, slow))

    r.kernels = compiled
    a = r.soft_rasterize(mesh, cam)[0].data
    r.kernels = _ext.pure
    b = r.soft_rasterize(mesh, cam)[0].data
    r.kernels = compiled

    print(f"template: {len(mesh.vertices)} vertices, {len(mesh.faces)} faces, {args.size}x{args.size} px, best of {args.repeat}")
    print(f"{'workload':<24}{'cython ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for name, fast, slow in rows:
        print(f"{name:<24}{fast * 1e3:>12.2f}{slow * 1e3:>12.2f}{slow / fast:>9.1f}x")
    print(f"max |image difference| between backends: {np.abs(a - b).max():.2e}")


if __name__ == "__main__":
    main()
