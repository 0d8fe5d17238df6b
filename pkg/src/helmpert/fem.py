"""P1 finite elements for div(gamma grad u) + k^2 q u = f on disk meshes.

Assembly follows the convention that the stored system represents
-div(gamma grad u) - k^2 q u = -source, so the matrix is
K(gamma) - k^2 M(q) with K the coefficient-weighted stiffness and M the
consistent mass. Coefficients enter by nodal averaging per element (one-point
centroid quadrature), which is adequate for the piecewise-constant phantoms
used here. Dirichlet data is enforced by row elimination with the symmetric
column correction; Neumann data adds consistent edge loads. Solves use a
sparse direct factorization and are checked against a relative residual of
1e-10.
"""

import math
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import kernels
from .mesh import TriangleMesh

RESIDUAL_RTOL = 1e-10


class SingularSystem(Exception):
    """Factorization failed or produced a non-finite solution."""


class NonConvergence(Exception):
    """Solution exists but the residual check failed."""

    def __init__(self, residual: float, rhs_norm: float):
        self.residual = residual
        self.rhs_norm = rhs_norm
        super().__init__(f"residual {residual:.3e} exceeds {RESIDUAL_RTOL:.0e} * |rhs| = "
                         f"{RESIDUAL_RTOL * rhs_norm:.3e}")


@dataclass
class CoefficientField:
    """Real nodal material parameter on a mesh."""

    mesh: TriangleMesh
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.mesh.n_nodes,):
            raise ValueError("coefficient values must be one per node")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("coefficient values must be finite")


@dataclass
class ComplexField:
    """Complex nodal field (potentials, correctors)."""

    mesh: TriangleMesh
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.complex128)
        if self.values.shape != (self.mesh.n_nodes,):
            raise ValueError("field values must be one per node")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must be finite")


@dataclass
class GradientField:
    """Exact per-triangle P1 gradients plus area-averaged nodal recovery."""

    mesh: TriangleMesh
    tri_values: np.ndarray
    node_values: np.ndarray

    def node_magnitude_squared(self) -> np.ndarray:
        g = self.node_values
        return (np.abs(g[:, 0]) ** 2 + np.abs(g[:, 1]) ** 2).astype(np.float64)


@dataclass
class BoundaryCondition:
    """kind is 'dirichlet' or 'neumann'; data is complex per boundary node,
    aligned with mesh.boundary_nodes order."""

    kind: str
    data: np.ndarray

    def __post_init__(self):
        if self.kind not in ("dirichlet", "neumann"):
            raise ValueError(f"unknown boundary condition kind {self.kind!r}")
        self.data = np.asarray(self.data, dtype=np.complex128)


@dataclass
class SparseSystem:
    mesh: TriangleMesh
    matrix: sp.csr_matrix
    rhs: np.ndarray

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]


def _nodal_to_element(mesh: TriangleMesh, nodal: np.ndarray) -> np.ndarray:
    return nodal[mesh.triangles].mean(axis=1)


def _coo_pattern(mesh: TriangleMesh):
    t = mesh.triangles
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    return rows, cols


def assemble_operator_elementwise(
    mesh: TriangleMesh,
    stiff_elem: np.ndarray,
    mass_elem: np.ndarray,
) -> sp.csr_matrix:
    """K + M from per-element (centroid) coefficient values."""
    area, b, c = mesh.geometry
    data = kernels.local_matrices(area, b, c,
                                  np.ascontiguousarray(stiff_elem, dtype=np.float64),
                                  np.ascontiguousarray(mass_elem, dtype=np.float64))
    rows, cols = _coo_pattern(mesh)
    n = mesh.n_nodes
    mat = sp.coo_matrix((data.ravel(), (rows, cols)), shape=(n, n))
    return mat.tocsr()


def assemble_operator(
    mesh: TriangleMesh,
    stiff_nodal: Optional[np.ndarray],
    mass_nodal: Optional[np.ndarray],
) -> sp.csr_matrix:
    """K(stiff) + M(mass) with signed nodal coefficient fields.

    Low-level entry used by the reconstruction correctors, where coefficient
    combinations may vanish or change sign; no positivity checks here.
    """
    n_tris = mesh.n_triangles
    sc = np.zeros(n_tris) if stiff_nodal is None else _nodal_to_element(mesh, stiff_nodal)
    mc = np.zeros(n_tris) if mass_nodal is None else _nodal_to_element(mesh, mass_nodal)
    return assemble_operator_elementwise(mesh, sc, mc)


def stiffness_matrix(mesh: TriangleMesh, coeff_nodal: np.ndarray) -> sp.csr_matrix:
    return assemble_operator(mesh, coeff_nodal, None)


def mass_matrix(mesh: TriangleMesh, coeff_nodal: np.ndarray) -> sp.csr_matrix:
    return assemble_operator(mesh, None, coeff_nodal)


def load_vector(mesh: TriangleMesh, nodal_values: np.ndarray) -> np.ndarray:
    """Consistent load (f, phi_i) for the P1 interpolant of f."""
    ones = np.ones(mesh.n_nodes)
    return mass_matrix(mesh, ones) @ nodal_values


def lumped_node_areas(mesh: TriangleMesh) -> np.ndarray:
    """Row sums of the mass matrix: one third of each incident triangle."""
    area, _, _ = mesh.geometry
    contrib = np.repeat(area / 3.0, 3)
    return np.bincount(mesh.triangles.ravel(), weights=contrib,
                       minlength=mesh.n_nodes)


def masked_field_norms(mesh: TriangleMesh, values: np.ndarray,
                       node_mask: np.ndarray) -> Tuple[float, float, float]:
    """(l_inf, l1, l2) of a nodal field over a node mask.

    l_inf is the max over masked nodes; l1 and l2 use mass-lumped quadrature
    over the elements whose three vertices are all masked, so the same
    measure backs both integral norms.
    """
    if not np.any(node_mask):
        raise ValueError("node mask selects no nodes")
    v = np.abs(np.asarray(values))
    linf = float(v[node_mask].max())
    area, _, _ = mesh.geometry
    elem_in = node_mask[mesh.triangles].all(axis=1)
    tri = mesh.triangles[elem_in]
    w = area[elem_in] / 3.0
    l1 = float(np.sum(w * v[tri].sum(axis=1)))
    l2 = float(math.sqrt(np.sum(w * (v[tri] ** 2).sum(axis=1))))
    return linf, l1, l2


def assemble(
    mesh: TriangleMesh,
    gamma: CoefficientField,
    q: CoefficientField,
    k: float,
    source: Optional[ComplexField] = None,
) -> SparseSystem:
    """Weak form of -div(gamma grad u) - k^2 q u = -source."""
    if gamma.mesh is not mesh or q.mesh is not mesh:
        raise ValueError("coefficient fields must live on the given mesh")
    if np.min(gamma.values) <= 0 or np.min(q.values) <= 0:
        raise ValueError("gamma and q must be strictly positive")
    if k < 0:
        raise ValueError("k must be nonnegative")
    matrix = assemble_operator(mesh, gamma.values, -(k ** 2) * q.values)
    rhs = np.zeros(mesh.n_nodes, dtype=np.complex128)
    if source is not None:
        rhs -= load_vector(mesh, source.values)
    return SparseSystem(mesh=mesh, matrix=matrix, rhs=rhs)


def apply_dirichlet(system: SparseSystem, bc: BoundaryCondition) -> SparseSystem:
    """Eliminate boundary rows and columns, keeping the pattern symmetric."""
    if bc.kind != "dirichlet":
        raise ValueError("apply_dirichlet requires a Dirichlet boundary condition")
    mesh = system.mesh
    bnodes = mesh.boundary_nodes
    if bc.data.shape != (len(bnodes),):
        raise ValueError("boundary data must match the boundary node count")
    n = system.dimension
    u_bc = np.zeros(n, dtype=np.complex128)
    u_bc[bnodes] = bc.data
    rhs = system.rhs - system.matrix @ u_bc
    interior = np.ones(n)
    interior[bnodes] = 0.0
    d_int = sp.diags(interior)
    d_bd = sp.diags(1.0 - interior)
    matrix = (d_int @ system.matrix @ d_int + d_bd).tocsr()
    rhs[bnodes] = bc.data
    return SparseSystem(mesh=mesh, matrix=matrix, rhs=rhs)


def apply_neumann(system: SparseSystem, bc: BoundaryCondition) -> SparseSystem:
    """Add the consistent boundary load (flux, phi_i) along the loop."""
    if bc.kind != "neumann":
        raise ValueError("apply_neumann requires a Neumann boundary condition")
    mesh = system.mesh
    bnodes = mesh.boundary_nodes
    if bc.data.shape != (len(bnodes),):
        raise ValueError("boundary data must match the boundary node count")
    rhs = system.rhs.copy()
    pts = mesh.nodes[bnodes]
    nxt = np.roll(np.arange(len(bnodes)), -1)
    seg = pts[nxt] - pts
    lengths = np.hypot(seg[:, 0], seg[:, 1])
    phi_a = bc.data
    phi_b = bc.data[nxt]
    contrib_a = lengths / 6.0 * (2.0 * phi_a + phi_b)
    contrib_b = lengths / 6.0 * (phi_a + 2.0 * phi_b)
    np.add.at(rhs, bnodes, contrib_a)
    np.add.at(rhs, bnodes[nxt], contrib_b)
    return SparseSystem(mesh=mesh, matrix=system.matrix, rhs=rhs)


def solve(system: SparseSystem) -> ComplexField:
    matrix = system.matrix.tocsc().astype(np.complex128)
    try:
        lu = spla.splu(matrix)
        x = lu.solve(system.rhs)
    except RuntimeError as exc:
        raise SingularSystem(str(exc)) from exc
    if not np.all(np.isfinite(x)):
        raise SingularSystem("factorization produced non-finite values")
    rhs_norm = float(np.linalg.norm(system.rhs))
    residual = float(np.linalg.norm(system.matrix @ x - system.rhs))
    if residual > RESIDUAL_RTOL * max(rhs_norm, np.finfo(float).tiny):
        raise NonConvergence(residual, rhs_norm)
    return ComplexField(mesh=system.mesh, values=x)


def solve_bvp(
    mesh: TriangleMesh,
    gamma: CoefficientField,
    q: CoefficientField,
    k: float,
    bc: BoundaryCondition,
    source: Optional[ComplexField] = None,
) -> ComplexField:
    """Assemble, apply the boundary condition, and solve in one call."""
    system = assemble(mesh, gamma, q, k, source)
    if bc.kind == "dirichlet":
        system = apply_dirichlet(system, bc)
    else:
        system = apply_neumann(system, bc)
    return solve(system)


def gradient(u: ComplexField) -> GradientField:
    mesh = u.mesh
    area, b, c = mesh.geometry
    tri = kernels.triangle_gradients(u.values, mesh.triangles, b, c, area)
    node = kernels.nodal_average(tri, mesh.triangles, area, mesh.n_nodes)
    return GradientField(mesh=mesh, tri_values=tri, node_values=node)


def boundary_integral(f: Union[ComplexField, np.ndarray], g: Union[ComplexField, np.ndarray]) -> complex:
    """Trapezoidal integral of f * conj(g) along the boundary loop."""
    if isinstance(f, ComplexField):
        mesh = f.mesh
        fv = f.values
    else:
        raise TypeError("f must be a ComplexField (need its mesh)")
    if isinstance(g, ComplexField):
        if g.mesh is not mesh:
            raise ValueError("fields must share a mesh")
        gv = g.values
    else:
        gv = np.asarray(g, dtype=np.complex128)
        if gv.shape != fv.shape:
            raise ValueError("g must match f in shape")
    bnodes = mesh.boundary_nodes
    vals = fv[bnodes] * np.conj(gv[bnodes])
    pts = mesh.nodes[bnodes]
    nxt = np.roll(np.arange(len(bnodes)), -1)
    seg = pts[nxt] - pts
    lengths = np.hypot(seg[:, 0], seg[:, 1])
    return complex(np.sum(0.5 * lengths * (vals + vals[nxt])))


def save_field(field: ComplexField, path) -> None:
    """Plain-text nodal table: node index, real part, imaginary part."""
    with open(path, "w") as fh:
        fh.write("# node re im\n")
        for i, v in enumerate(field.values):
            fh.write(f"{i} {float(v.real)!r} {float(v.imag)!r}\n")


def save_field_vtk(field: ComplexField, path, name: str = "field") -> None:
    """Legacy-VTK unstructured grid (cells + nodal re/im), for ParaView etc."""
    mesh = field.mesh
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(f"{name}\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {mesh.n_nodes} double\n")
        for x, y in mesh.nodes:
            fh.write(f"{float(x)!r} {float(y)!r} 0.0\n")
        fh.write(f"CELLS {mesh.n_triangles} {4 * mesh.n_triangles}\n")
        for i, j, k in mesh.triangles:
            fh.write(f"3 {i} {j} {k}\n")
        fh.write(f"CELL_TYPES {mesh.n_triangles}\n")
        fh.write("\n".join(["5"] * mesh.n_triangles) + "\n")
        fh.write(f"POINT_DATA {mesh.n_nodes}\n")
        fh.write(f"SCALARS {name}_re double 1\nLOOKUP_TABLE default\n")
        fh.write("\n".join(repr(float(v)) for v in field.values.real) + "\n")
        fh.write(f"SCALARS {name}_im double 1\nLOOKUP_TABLE default\n")
        fh.write("\n".join(repr(float(v)) for v in field.values.imag) + "\n")
