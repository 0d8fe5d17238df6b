# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled assembly kernels. Mirrors helmpert._kernels_py exactly."""

import numpy as np

cimport numpy as cnp

cnp.import_array()

ctypedef cnp.float64_t f64
ctypedef cnp.complex128_t c128
ctypedef cnp.int32_t i32


def element_geometry(cnp.ndarray[f64, ndim=2] nodes, cnp.ndarray[i32, ndim=2] triangles):
    cdef Py_ssize_t m = triangles.shape[0]
    cdef cnp.ndarray[f64, ndim=1] area = np.empty(m, dtype=np.float64)
    cdef cnp.ndarray[f64, ndim=2] b = np.empty((m, 3), dtype=np.float64)
    cdef cnp.ndarray[f64, ndim=2] c = np.empty((m, 3), dtype=np.float64)
    cdef Py_ssize_t e
    cdef Py_ssize_t i0, i1, i2
    cdef f64 x0, y0, x1, y1, x2, y2
    for e in range(m):
        i0 = triangles[e, 0]; i1 = triangles[e, 1]; i2 = triangles[e, 2]
        x0 = nodes[i0, 0]; y0 = nodes[i0, 1]
        x1 = nodes[i1, 0]; y1 = nodes[i1, 1]
        x2 = nodes[i2, 0]; y2 = nodes[i2, 1]
        b[e, 0] = y1 - y2; b[e, 1] = y2 - y0; b[e, 2] = y0 - y1
        c[e, 0] = x2 - x1; c[e, 1] = x0 - x2; c[e, 2] = x1 - x0
        area[e] = 0.5 * ((x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0))
    return area, b, c


def local_matrices(cnp.ndarray[f64, ndim=1] area, cnp.ndarray[f64, ndim=2] b,
                   cnp.ndarray[f64, ndim=2] c, cnp.ndarray[f64, ndim=1] stiff_coeff,
                   cnp.ndarray[f64, ndim=1] mass_coeff):
    cdef Py_ssize_t m = area.shape[0]
    cdef cnp.ndarray[f64, ndim=3] data = np.empty((m, 3, 3), dtype=np.float64)
    cdef Py_ssize_t e, i, j
    cdef f64 gs, ms, v
    for e in range(m):
        gs = stiff_coeff[e] / (4.0 * area[e])
        ms = mass_coeff[e] * area[e] / 12.0
        for i in range(3):
            for j in range(3):
                v = gs * (b[e, i] * b[e, j] + c[e, i] * c[e, j]) + ms
                if i == j:
                    v += ms
                data[e, i, j] = v
    return data


def triangle_gradients(values, cnp.ndarray[i32, ndim=2] triangles,
                       cnp.ndarray[f64, ndim=2] b, cnp.ndarray[f64, ndim=2] c,
                       cnp.ndarray[f64, ndim=1] area):
    if np.iscomplexobj(values):
        return _tri_grad_c(np.ascontiguousarray(values, dtype=np.complex128), triangles, b, c, area)
    out = _tri_grad_c(np.asarray(values, dtype=np.float64).astype(np.complex128), triangles, b, c, area)
    return out.real.copy()


cdef _tri_grad_c(cnp.ndarray[c128, ndim=1] values, cnp.ndarray[i32, ndim=2] triangles,
                 cnp.ndarray[f64, ndim=2] b, cnp.ndarray[f64, ndim=2] c,
                 cnp.ndarray[f64, ndim=1] area):
    cdef Py_ssize_t m = triangles.shape[0]
    cdef cnp.ndarray[c128, ndim=2] g = np.empty((m, 2), dtype=np.complex128)
    cdef Py_ssize_t e, i
    cdef c128 gx, gy, v
    cdef f64 inv2a
    for e in range(m):
        gx = 0; gy = 0
        for i in range(3):
            v = values[triangles[e, i]]
            gx = gx + v * b[e, i]
            gy = gy + v * c[e, i]
        inv2a = 1.0 / (2.0 * area[e])
        g[e, 0] = gx * inv2a
        g[e, 1] = gy * inv2a
    return g


def nodal_average(tri_values, cnp.ndarray[i32, ndim=2] triangles,
                  cnp.ndarray[f64, ndim=1] area, Py_ssize_t n_nodes):
    arr = np.asarray(tri_values)
    squeeze = arr.ndim == 1
    if squeeze:
        arr = arr[:, None]
    out = _nodal_avg_c(np.ascontiguousarray(arr, dtype=np.complex128), triangles, area, n_nodes)
    if not np.iscomplexobj(tri_values):
        out = out.real.copy()
    return out[:, 0] if squeeze else out


cdef _nodal_avg_c(cnp.ndarray[c128, ndim=2] tri_values, cnp.ndarray[i32, ndim=2] triangles,
                  cnp.ndarray[f64, ndim=1] area, Py_ssize_t n_nodes):
    cdef Py_ssize_t m = triangles.shape[0]
    cdef Py_ssize_t k = tri_values.shape[1]
    cdef cnp.ndarray[c128, ndim=2] num = np.zeros((n_nodes, k), dtype=np.complex128)
    cdef cnp.ndarray[f64, ndim=1] den = np.zeros(n_nodes, dtype=np.float64)
    cdef Py_ssize_t e, i, j, node
    cdef f64 w
    for e in range(m):
        w = area[e]
        for i in range(3):
            node = triangles[e, i]
            den[node] += w
            for j in range(k):
                num[node, j] = num[node, j] + w * tri_values[e, j]
    for node in range(n_nodes):
        w = den[node]
        for j in range(k):
            num[node, j] = num[node, j] / w
    return num


def gradient_load(cnp.ndarray[f64, ndim=1] weight, grads, cnp.ndarray[i32, ndim=2] triangles,
                  cnp.ndarray[f64, ndim=2] b, cnp.ndarray[f64, ndim=2] c, Py_ssize_t n_nodes):
    out = _grad_load_c(weight, np.ascontiguousarray(grads, dtype=np.complex128),
                       triangles, b, c, n_nodes)
    if not np.iscomplexobj(grads):
        return out.real.copy()
    return out


cdef _grad_load_c(cnp.ndarray[f64, ndim=1] weight, cnp.ndarray[c128, ndim=2] grads,
                  cnp.ndarray[i32, ndim=2] triangles, cnp.ndarray[f64, ndim=2] b,
                  cnp.ndarray[f64, ndim=2] c, Py_ssize_t n_nodes):
    cdef Py_ssize_t m = triangles.shape[0]
    cdef cnp.ndarray[c128, ndim=1] rhs = np.zeros(n_nodes, dtype=np.complex128)
    cdef Py_ssize_t e, i
    cdef c128 gx, gy
    cdef f64 w
    for e in range(m):
        w = 0.5 * weight[e]
        gx = grads[e, 0]; gy = grads[e, 1]
        for i in range(3):
            rhs[triangles[e, i]] = rhs[triangles[e, i]] + w * (gx * b[e, i] + gy * c[e, i])
    return rhs
