"""Time the compiled assembly kernels against the numpy fallback.

Run with ``python3 benchmarks/bench_kernels.py``. Each kernel is timed on
disk meshes of two resolutions, best of several repeats, and the table
reports the per-call times plus the compiled/python speedup. The numbers
are dominated by the per-element loops, which is exactly the part the
extension exists to remove.
"""

import time

import numpy as np

from helmpert import _kernels_py as py_impl
from helmpert import kernels
from helmpert import mesh as hm

try:
    from helmpert import _kernels as c_impl
except ImportError:
    c_impl = None

REPEATS = 5


def best_time(fn, *args):
    best = float("inf")
    for _ in range(REPEATS):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def kernel_cases(mesh):
    rng = np.random.default_rng(0)
    nodes = mesh.nodes
    tris = mesh.triangles
    gamma_e = rng.uniform(0.5, 2.0, mesh.n_triangles)
    q_e = rng.uniform(0.5, 2.0, mesh.n_triangles)
    u = rng.standard_normal(mesh.n_nodes) + 1j * rng.standard_normal(mesh.n_nodes)
    area, b, c = py_impl.element_geometry(nodes, tris)
    grads = py_impl.triangle_gradients(u, tris, b, c, area)
    mag_sq = np.abs(grads[:, 0]) ** 2 + np.abs(grads[:, 1]) ** 2
    return [
        ("element_geometry", (nodes, tris)),
        ("local_matrices", (area, b, c, gamma_e, q_e)),
        ("triangle_gradients", (u, tris, b, c, area)),
        ("nodal_average", (mag_sq, tris, area, mesh.n_nodes)),
        ("gradient_load", (gamma_e, grads, tris, b, c, mesh.n_nodes)),
    ]


def main():
    print(f"active backend: {kernels.BACKEND}")
    if c_impl is None:
        print("compiled extension not importable; nothing to compare")
        return
    header = f"{'kernel':<20} {'mesh':>6} {'python':>12} {'compiled':>12} {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for n in (200, 400):
        mesh = hm.build_disk_mesh(8.0, n)
        for name, args in kernel_cases(mesh):
            t_py = best_time(getattr(py_impl, name), *args)
            t_c = best_time(getattr(c_impl, name), *args)
            print(f"{name:<20} {n:>6} {t_py * 1e3:>10.3f}ms {t_c * 1e3:>10.3f}ms "
                  f"{t_py / t_c:>7.1f}x")


if __name__ == "__main__":
    main()
