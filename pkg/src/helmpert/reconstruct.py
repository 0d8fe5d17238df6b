"""Alternating perturbative reconstruction of (gamma, q) from internal data.

The data are the two interior energy maps: J collected at a high frequency
and j at a low one. Each outer iteration solves the forward problem with the
current guess at both frequencies, forms the quotient misfits

    E0 = J / |grad u0|^2 - gamma0        (high-frequency pass)
    eps0 = j / |u0|^2 - q0               (low-frequency pass)

and, when a misfit is above the precision target, solves a linearized
corrector problem for the first-order solution change and updates the guess
with the corrected quotient. Material values on the near-boundary annulus
are known and reset after every update. The iteration stops when both
misfits pass in the same sweep (Converged), when the iteration budget runs
out (IterationCap), when a field floor is violated (Diverged, the structured
stand-in for the division-by-zero breakdown the quotients suffer on
degenerate fields), or when the corrector magnitudes stop decaying
(Stalled).

Field floors are relative to the current field maximum. The low-frequency
floor is the operative breakdown signal: a collapsing min|u|^2 is what a
diverging run shows first. The high-frequency floor must sit far lower,
because the unresolved-wavelength regime makes the discrete solution decay
geometrically toward the disk center (measured interior-to-peak ratios of
|grad u|^2: about 2e-7 on the 50-point mesh, 2e-16 on the 100-point mesh,
1e-34 on the 200-point mesh), and those runs are expected to proceed, not
to be cut off at the first solve; its default is low enough that the
low-frequency signal always fires first on the meshes studied here.
"""

import csv
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import fem
from .fem import (BoundaryCondition, CoefficientField, ComplexField,
                  NonConvergence, SingularSystem)
from .forward import boundary_phase
from .mesh import TriangleMesh

GAMMA_VALUE_FLOOR = 1e-6  # absolute clamp applied to updated coefficients
STALL_WINDOW = 10  # iterations without a new corrector-magnitude minimum
CORRECTOR_CAP = 1.0  # max |u1|^2 beyond which the linearization premise fails

STATUS_CONVERGED = "Converged"
STATUS_ITERATION_CAP = "IterationCap"
STATUS_DIVERGED = "Diverged"
STATUS_STALLED = "Stalled"


class FloorViolation(Exception):
    """A field dropped below its admissible floor; quotients are meaningless."""

    def __init__(self, which: str, minimum: float, floor: float):
        self.which = which
        self.minimum = minimum
        self.floor = floor
        super().__init__(f"min {which} = {minimum:.3e} below floor {floor:.3e}")


@dataclass
class ReconstructionConfig:
    k1: float
    k2: float
    eps_precision: float = 1e-3
    max_outer_iterations: int = 50
    # relative floors (fraction of the current field maximum); see module
    # docstring for why the gradient floor sits so low
    floor_grad: float = 1e-60
    floor_u: float = 1e-12
    boundary_data: Optional[BoundaryCondition] = None
    phase_convention: str = "xy"
    known_annulus_radius: float = 6.0
    gamma_guess: float = 3.5
    q_guess: float = 11.5
    damping: float = 1.0
    # a corrector is a first-order term; past this magnitude it is not one,
    # and the update falls back to the plain quotient
    corrector_cap: float = CORRECTOR_CAP

    def __post_init__(self):
        if self.k1 == self.k2:
            raise ValueError("the two frequencies must differ")
        if self.eps_precision <= 0:
            raise ValueError("eps_precision must be positive")
        if self.floor_grad <= 0 or self.floor_u <= 0:
            raise ValueError("floors must be positive")
        if self.max_outer_iterations < 1:
            raise ValueError("need at least one outer iteration")
        if self.boundary_data is not None and self.boundary_data.kind != "dirichlet":
            raise ValueError("reconstruction drives the medium with dirichlet data")


@dataclass
class ReconstructionState:
    gamma0: CoefficientField
    q0: CoefficientField
    iteration: int = 0
    last_E: float = math.inf
    last_eps: float = math.inf


@dataclass
class IterationRecord:
    iteration: int
    misfit_J_linf: float
    misfit_J_l2: float
    misfit_j_linf: float
    misfit_j_l2: float
    min_grad_sq: float
    min_u_sq: float
    max_corr_gamma_sq: float
    max_corr_q_sq: float
    gamma_err_linf: float = math.nan
    gamma_err_l1: float = math.nan
    gamma_err_l2: float = math.nan
    q_err_linf: float = math.nan
    q_err_l1: float = math.nan
    q_err_l2: float = math.nan
    n_gamma_clamped: int = 0
    n_q_clamped: int = 0
    corrector_failed: int = 0
    forward_residual_k1: float = math.nan
    forward_residual_k2: float = math.nan


@dataclass
class ReconstructionTrace:
    records: List[IterationRecord] = field(default_factory=list)
    status: str = ""
    detail: str = ""
    final_gamma: Optional[CoefficientField] = None
    final_q: Optional[CoefficientField] = None


def _region_norms(mesh: TriangleMesh, values: np.ndarray, mask: np.ndarray):
    """(linf, l1, l2) over the masked region; same quadrature as diagnostics."""
    return fem.masked_field_norms(mesh, values, mask)


def compute_gamma_error(
    J: np.ndarray,
    u0: ComplexField,
    gamma0: CoefficientField,
    floor_grad: float = 1e-60,
    region_mask: Optional[np.ndarray] = None,
) -> Tuple[CoefficientField, float]:
    """Quotient misfit of the gradient-energy data against the current guess."""
    mesh = u0.mesh
    if region_mask is None:
        region_mask = np.ones(mesh.n_nodes, dtype=bool)
    grad_sq = fem.gradient(u0).node_magnitude_squared()
    floor = floor_grad * grad_sq.max()
    min_grad = float(grad_sq[region_mask].min())
    if min_grad < floor:
        raise FloorViolation("|grad u|^2", min_grad, floor)
    E0 = CoefficientField(mesh, J / grad_sq - gamma0.values)
    linf = float(np.max(np.abs(E0.values[region_mask])))
    return E0, linf


def compute_q_error(
    j: np.ndarray,
    u0: ComplexField,
    q0: CoefficientField,
    floor_u: float = 1e-12,
    region_mask: Optional[np.ndarray] = None,
) -> Tuple[CoefficientField, float]:
    """Quotient misfit of the mass-energy data against the current guess."""
    mesh = u0.mesh
    if region_mask is None:
        region_mask = np.ones(mesh.n_nodes, dtype=bool)
    val_sq = np.abs(u0.values) ** 2
    floor = floor_u * val_sq.max()
    min_val = float(val_sq[region_mask].min())
    if min_val < floor:
        raise FloorViolation("|u|^2", min_val, floor)
    eps0 = CoefficientField(mesh, j / val_sq - q0.values)
    linf = float(np.max(np.abs(eps0.values[region_mask])))
    return eps0, linf


def _dirichlet_homogeneous(mesh: TriangleMesh, matrix: sp.spmatrix,
                           rhs: np.ndarray) -> Tuple[sp.csc_matrix, np.ndarray]:
    """Zero-boundary elimination keeping the symmetric pattern."""
    n = matrix.shape[0] // mesh.n_nodes  # 1 or 2 stacked nodal blocks
    keep = np.ones(mesh.n_nodes, dtype=np.float64)
    keep[mesh.boundary_nodes] = 0.0
    keep_full = np.tile(keep, n)
    d_int = sp.diags(keep_full)
    d_bd = sp.diags(1.0 - keep_full)
    mat = d_int @ matrix @ d_int + d_bd
    out = rhs * keep_full
    return mat.tocsc(), out


def _splu_solve(matrix: sp.csc_matrix, rhs: np.ndarray):
    """(solution, relative residual); raises only on outright breakdown."""
    try:
        lu = spla.splu(matrix)
        x = lu.solve(rhs)
    except RuntimeError as err:
        raise SingularSystem(str(err)) from err
    if not np.all(np.isfinite(x)):
        raise SingularSystem("solution contains non-finite entries")
    rhs_norm = float(np.linalg.norm(rhs))
    residual = float(np.linalg.norm(matrix @ x - rhs))
    return x, residual / max(rhs_norm, np.finfo(float).tiny)


def _direct_solve(matrix: sp.csc_matrix, rhs: np.ndarray) -> np.ndarray:
    x, rel = _splu_solve(matrix, rhs)
    if rel > fem.RESIDUAL_RTOL:
        raise NonConvergence(rel, 1.0)
    return x


def _forward_solve_monitored(mesh: TriangleMesh, gamma: CoefficientField,
                             q: CoefficientField, k: float,
                             bc: BoundaryCondition):
    """Forward solve that reports, instead of gating on, the residual.

    The outer loop has to keep iterating through the badly conditioned
    passes a diverging run produces; breakdown is diagnosed by the floors
    and the stall detector, not by the linear solver.
    """
    system = fem.assemble(mesh, gamma, q, k)
    system = fem.apply_dirichlet(system, bc)
    x, rel = _splu_solve(system.matrix.tocsc().astype(np.complex128),
                         system.rhs)
    return ComplexField(mesh, x), rel


def solve_gamma_corrector(
    u0: ComplexField,
    E0: CoefficientField,
    gamma0: CoefficientField,
    q0: CoefficientField,
    k1: float,
) -> ComplexField:
    """First-order solution change induced by the gradient-energy misfit.

    Real and imaginary parts each satisfy the same scalar problem: principal
    part weighted by (gamma0 - E0) (the misfit flips sign against the
    principal coefficient), plus-signed mass term, driven in weak form by the
    misfit-weighted gradient of u0 and homogeneous dirichlet walls.
    """
    mesh = u0.mesh
    matrix = fem.assemble_operator(mesh, gamma0.values - E0.values,
                                   (k1 ** 2) * q0.values).astype(np.complex128)
    area, b, c = mesh.geometry
    e0_elem = E0.values[mesh.triangles].mean(axis=1)
    grads = fem.gradient(u0).tri_values
    rhs = kernels_gradient_load(e0_elem, grads, mesh, b, c)
    mat, rhs = _dirichlet_homogeneous(mesh, matrix.tocsc(), rhs)
    values = _direct_solve(mat, rhs)
    return ComplexField(mesh, values)


def kernels_gradient_load(weight_elem, grads, mesh, b, c):
    from . import kernels
    return kernels.gradient_load(np.ascontiguousarray(weight_elem, dtype=np.float64),
                                 np.ascontiguousarray(grads),
                                 mesh.triangles, b, c, mesh.n_nodes)


def solve_q_corrector(
    u0: ComplexField,
    eps0: CoefficientField,
    j: np.ndarray,
    gamma0: CoefficientField,
    q0: CoefficientField,
    k2: float,
) -> ComplexField:
    """First-order solution change induced by the mass-energy misfit.

    The u0-weighted rank-one coupling mixes real and imaginary parts, so the
    two parts are assembled as one real block system: diagonal blocks carry
    the divergence-form principal part, the data-weighted negative mass and
    the self couplings; off-diagonal blocks carry the cross coupling.
    """
    mesh = u0.mesh
    re = u0.values.real
    im = u0.values.imag
    u2 = re * re + im * im
    if np.min(u2) <= 0:
        raise FloorViolation("|u|^2", float(np.min(u2)), 0.0)
    k_sq = k2 ** 2

    Kg = fem.stiffness_matrix(mesh, gamma0.values)
    Mj = fem.mass_matrix(mesh, j / u2)
    Mrr = fem.mass_matrix(mesh, q0.values * re * re / u2)
    Mri = fem.mass_matrix(mesh, q0.values * re * im / u2)
    Mii = fem.mass_matrix(mesh, q0.values * im * im / u2)

    diag = Kg - k_sq * Mj
    a11 = diag + 2.0 * k_sq * Mrr
    a12 = 2.0 * k_sq * Mri
    a22 = diag + 2.0 * k_sq * Mii
    matrix = sp.bmat([[a11, a12], [a12, a22]], format="csc")

    rhs = np.concatenate([k_sq * fem.load_vector(mesh, eps0.values * re),
                          k_sq * fem.load_vector(mesh, eps0.values * im)])
    mat, rhs = _dirichlet_homogeneous(mesh, matrix, rhs)
    sol = _direct_solve(mat, rhs)
    n = mesh.n_nodes
    return ComplexField(mesh, sol[:n] + 1j * sol[n:])


def _apply_update(current: CoefficientField, proposed: np.ndarray,
                  annulus_mask: np.ndarray, annulus_values: np.ndarray,
                  damping: float) -> Tuple[CoefficientField, int]:
    mesh = current.mesh
    new = current.values + damping * (proposed - current.values)
    clamped = int(np.count_nonzero(new < GAMMA_VALUE_FLOOR))
    new = np.maximum(new, GAMMA_VALUE_FLOOR)
    new[annulus_mask] = annulus_values[annulus_mask]
    return CoefficientField(mesh, new), clamped


def update_gamma(
    J: np.ndarray,
    u0: ComplexField,
    u1_tilde: Optional[ComplexField],
    gamma0: CoefficientField,
    annulus_mask: Optional[np.ndarray] = None,
    annulus_values: Optional[np.ndarray] = None,
    damping: float = 1.0,
) -> Tuple[CoefficientField, int]:
    """Corrected quotient update of the conductivity guess."""
    mesh = u0.mesh
    grad_sq = fem.gradient(u0).node_magnitude_squared()
    cross = np.zeros(mesh.n_nodes)
    if u1_tilde is not None:
        g0 = fem.gradient(u0).node_values
        g1 = fem.gradient(u1_tilde).node_values
        cross = (g0.real * g1.real).sum(axis=1) + (g0.imag * g1.imag).sum(axis=1)
    proposed = (J - 2.0 * gamma0.values * cross) / grad_sq
    if annulus_mask is None:
        annulus_mask = np.zeros(mesh.n_nodes, dtype=bool)
    if annulus_values is None:
        annulus_values = gamma0.values
    return _apply_update(gamma0, proposed, annulus_mask, annulus_values, damping)


def update_q(
    j: np.ndarray,
    u0: ComplexField,
    u1_tilde: Optional[ComplexField],
    q0: CoefficientField,
    annulus_mask: Optional[np.ndarray] = None,
    annulus_values: Optional[np.ndarray] = None,
    damping: float = 1.0,
) -> Tuple[CoefficientField, int]:
    """Corrected quotient update of the permittivity guess."""
    mesh = u0.mesh
    val_sq = np.abs(u0.values) ** 2
    cross = np.zeros(mesh.n_nodes)
    if u1_tilde is not None:
        cross = (u0.values.real * u1_tilde.values.real
                 + u0.values.imag * u1_tilde.values.imag)
    proposed = (j - 2.0 * q0.values * cross) / val_sq
    if annulus_mask is None:
        annulus_mask = np.zeros(mesh.n_nodes, dtype=bool)
    if annulus_values is None:
        annulus_values = q0.values
    return _apply_update(q0, proposed, annulus_mask, annulus_values, damping)


def run(
    mesh: TriangleMesh,
    J: np.ndarray,
    j: np.ndarray,
    truth: Optional[Tuple[CoefficientField, CoefficientField]],
    config: ReconstructionConfig,
) -> ReconstructionTrace:
    """Alternating outer loop over the high- and low-frequency passes."""
    radii = mesh.node_radii()
    annulus_mask = radii >= config.known_annulus_radius
    unknown_mask = ~annulus_mask

    gamma_vals = np.full(mesh.n_nodes, float(config.gamma_guess))
    q_vals = np.full(mesh.n_nodes, float(config.q_guess))
    if truth is not None:
        gamma_true, q_true = truth
        gamma_vals[annulus_mask] = gamma_true.values[annulus_mask]
        q_vals[annulus_mask] = q_true.values[annulus_mask]
        gamma_annulus = gamma_true.values
        q_annulus = q_true.values
    else:
        gamma_annulus = gamma_vals.copy()
        q_annulus = q_vals.copy()
    state = ReconstructionState(gamma0=CoefficientField(mesh, gamma_vals),
                                q0=CoefficientField(mesh, q_vals))

    bc = config.boundary_data
    if bc is None:
        bc = BoundaryCondition("dirichlet",
                               boundary_phase(mesh, config.phase_convention))

    trace = ReconstructionTrace()
    best_corr = math.inf
    stall_streak = 0

    for it in range(1, config.max_outer_iterations + 1):
        state.iteration = it
        rec = IterationRecord(iteration=it, misfit_J_linf=math.nan,
                              misfit_J_l2=math.nan, misfit_j_linf=math.nan,
                              misfit_j_l2=math.nan, min_grad_sq=math.nan,
                              min_u_sq=math.nan, max_corr_gamma_sq=0.0,
                              max_corr_q_sq=0.0)
        try:
            # high-frequency pass: conductivity test and update
            u0, rec.forward_residual_k1 = _forward_solve_monitored(
                mesh, state.gamma0, state.q0, config.k1, bc)
            grad_sq = fem.gradient(u0).node_magnitude_squared()
            rec.min_grad_sq = float(grad_sq[unknown_mask].min())
            E0, e_linf = compute_gamma_error(J, u0, state.gamma0,
                                             floor_grad=config.floor_grad,
                                             region_mask=unknown_mask)
            state.last_E = e_linf
            rec.misfit_J_linf = e_linf
            _, _, rec.misfit_J_l2 = _region_norms(mesh, E0.values, unknown_mask)
            gamma_ok = e_linf < config.eps_precision
            if not gamma_ok:
                u1g = None
                try:
                    u1g = solve_gamma_corrector(u0, E0, state.gamma0, state.q0,
                                                config.k1)
                    rec.max_corr_gamma_sq = float(np.max(np.abs(u1g.values) ** 2))
                except (SingularSystem, NonConvergence):
                    rec.corrector_failed += 1
                if rec.max_corr_gamma_sq > config.corrector_cap:
                    u1g = None  # too large to be a first-order term
                state.gamma0, rec.n_gamma_clamped = update_gamma(
                    J, u0, u1g, state.gamma0, annulus_mask, gamma_annulus,
                    config.damping)

            # low-frequency pass: permittivity test and update
            u0b, rec.forward_residual_k2 = _forward_solve_monitored(
                mesh, state.gamma0, state.q0, config.k2, bc)
            val_sq = np.abs(u0b.values) ** 2
            rec.min_u_sq = float(val_sq[unknown_mask].min())
            eps0, eps_linf = compute_q_error(j, u0b, state.q0,
                                             floor_u=config.floor_u,
                                             region_mask=unknown_mask)
            state.last_eps = eps_linf
            rec.misfit_j_linf = eps_linf
            _, _, rec.misfit_j_l2 = _region_norms(mesh, eps0.values, unknown_mask)
            q_ok = eps_linf < config.eps_precision
            if not q_ok:
                u1q = None
                try:
                    u1q = solve_q_corrector(u0b, eps0, j, state.gamma0,
                                            state.q0, config.k2)
                    rec.max_corr_q_sq = float(np.max(np.abs(u1q.values) ** 2))
                except (SingularSystem, NonConvergence):
                    rec.corrector_failed += 1
                if rec.max_corr_q_sq > config.corrector_cap:
                    u1q = None
                state.q0, rec.n_q_clamped = update_q(
                    j, u0b, u1q, state.q0, annulus_mask, q_annulus,
                    config.damping)
        except (FloorViolation, SingularSystem, ValueError) as err:
            _record_truth_errors(rec, state, truth, mesh, unknown_mask)
            trace.records.append(rec)
            trace.status = STATUS_DIVERGED
            trace.detail = str(err)
            break

        _record_truth_errors(rec, state, truth, mesh, unknown_mask)
        trace.records.append(rec)

        if gamma_ok and q_ok:
            trace.status = STATUS_CONVERGED
            trace.detail = f"both misfits below {config.eps_precision:g}"
            break

        corr = max(rec.max_corr_gamma_sq, rec.max_corr_q_sq)
        if corr < best_corr:
            best_corr = corr
            stall_streak = 0
        else:
            stall_streak += 1
            if stall_streak >= STALL_WINDOW:
                trace.status = STATUS_STALLED
                trace.detail = (f"corrector magnitude made no progress for "
                                f"{STALL_WINDOW} iterations")
                break
    else:
        trace.status = STATUS_ITERATION_CAP
        trace.detail = f"no convergence in {config.max_outer_iterations} iterations"

    trace.final_gamma = state.gamma0
    trace.final_q = state.q0
    return trace


def _record_truth_errors(rec: IterationRecord, state: ReconstructionState,
                         truth, mesh: TriangleMesh, mask: np.ndarray) -> None:
    if truth is None:
        return
    gamma_true, q_true = truth
    g = state.gamma0.values - gamma_true.values
    qv = state.q0.values - q_true.values
    rec.gamma_err_linf, rec.gamma_err_l1, rec.gamma_err_l2 = _region_norms(mesh, g, mask)
    rec.q_err_linf, rec.q_err_l1, rec.q_err_l2 = _region_norms(mesh, qv, mask)


TRACE_COLUMNS = [
    "iteration", "misfit_J_linf", "misfit_J_l2", "misfit_j_linf", "misfit_j_l2",
    "min_grad_sq", "min_u_sq", "max_corr_gamma_sq", "max_corr_q_sq",
    "gamma_err_linf", "gamma_err_l1", "gamma_err_l2",
    "q_err_linf", "q_err_l1", "q_err_l2",
    "n_gamma_clamped", "n_q_clamped", "corrector_failed",
    "forward_residual_k1", "forward_residual_k2", "status",
]


def save_trace_csv(path, trace: ReconstructionTrace) -> None:
    """One row per iteration; the status column is filled on the last row."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        last = len(trace.records) - 1
        for i, rec in enumerate(trace.records):
            row = [getattr(rec, col) for col in TRACE_COLUMNS[:-1]]
            row = [repr(float(v)) if isinstance(v, float) else v for v in row]
            row.append(trace.status if i == last else "")
            writer.writerow(row)
