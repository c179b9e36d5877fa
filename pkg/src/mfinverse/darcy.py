"""Steady-state Darcy flow solver with exact discrete adjoint gradients.

Primal formulation: solve -div(k grad p) = 0 with Dirichlet pressure boundary
data, k = exp(nodal log-permeability field), bilinear elements, permeability
evaluated once per element at the midpoint.  Velocities are post-processed as
u = -k grad p at the observation coordinates.  The adjoint solve reuses the
forward factorization (the stiffness matrix is symmetric).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import Mesh, ObservationGrid, gradient_matrices, interpolation_matrix


class SolverError(RuntimeError):
    """Forward solve failed (singular or badly conditioned system)."""


def _bc_hf_quadratic(c: np.ndarray) -> np.ndarray:
    return 1.0 - c[:, 0] ** 2 + (c[:, 1] - 0.5) ** 2


def _bc_lf_moderate(c: np.ndarray) -> np.ndarray:
    return 1.0 - c[:, 0] + np.abs(c[:, 1] - 0.5)


def _bc_lf_bad(c: np.ndarray) -> np.ndarray:
    return 1.0 - (2.0 / 3.0) * c[:, 0]


_BC_TABLE = {
    "hf_quadratic": _bc_hf_quadratic,
    "lf_moderate": _bc_lf_moderate,
    "lf_bad": _bc_lf_bad,
}


@dataclass(frozen=True)
class PressureBC:
    """Dirichlet pressure boundary condition g(c) on the unit-square boundary."""

    kind: str
    custom: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if self.kind == "custom":
            if self.custom is None:
                raise ValueError("custom boundary condition requires a closure")
        elif self.kind not in _BC_TABLE:
            raise ValueError(f"unknown boundary condition kind: {self.kind!r}")

    def __call__(self, coords: np.ndarray) -> np.ndarray:
        coords = np.atleast_2d(np.asarray(coords, dtype=float))
        if self.kind == "custom":
            return np.asarray(self.custom(coords), dtype=float)
        return _BC_TABLE[self.kind](coords)


@dataclass
class DarcySolution:
    pressure: np.ndarray              # nodal pressure, full vector
    Y: np.ndarray                     # (n_obs, 2) velocities at observation coords
    k_elements: np.ndarray            # midpoint permeability per element
    k_obs: np.ndarray                 # permeability at observation coords
    grad_p: np.ndarray                # (n_obs, 2) pressure gradient at obs coords
    factor: spla.SuperLU = field(repr=False, default=None)


def reference_element_stiffness(hx: float, hy: float) -> np.ndarray:
    """4x4 bilinear stiffness matrix for unit permeability on an hx-by-hy element.

    Exact 2x2 Gauss integration; local node order matches Mesh.element_nodes.
    """
    g = 0.5 + np.array([-1, 1]) / (2 * np.sqrt(3.0))
    ke = np.zeros((4, 4))
    for xi in g:
        for eta in g:
            dx = np.array([-(1 - eta), (1 - eta), -eta, eta]) / hx
            dy = np.array([-(1 - xi), -xi, (1 - xi), xi]) / hy
            ke += 0.25 * hx * hy * (np.outer(dx, dx) + np.outer(dy, dy))
    return ke


class DarcySolver:
    """Forward/adjoint Darcy solver bound to a mesh, BC, and observation grid.

    Tracks the total number of forward solves in ``n_calls``.
    """

    def __init__(self, mesh: Mesh, bc: PressureBC, grid: ObservationGrid):
        self.mesh = mesh
        self.bc = bc
        self.grid = grid
        self.n_calls = 0

        self._elem_nodes = mesh.element_nodes()
        self._ke0 = reference_element_stiffness(mesh.hx, mesh.hy)
        self._bnd = mesh.boundary_node_mask()
        self._free = ~self._bnd
        self._g_bnd = bc(mesh.node_coords()[self._bnd])
        self._S = interpolation_matrix(mesh, grid.coords)
        self._Gx, self._Gy = gradient_matrices(mesh, grid.coords)
        # Fixed COO pattern for fast stiffness re-assembly.
        rows = np.repeat(self._elem_nodes, 4, axis=1).ravel()
        cols = np.tile(self._elem_nodes, (1, 4)).ravel()
        self._coo_rows = rows
        self._coo_cols = cols

    @property
    def n_dof(self) -> int:
        return self.mesh.n_nodes

    def _element_permeability(self, x: np.ndarray) -> np.ndarray:
        # midpoint value of the bilinear field = mean of the element's nodes
        return np.exp(np.mean(x[self._elem_nodes], axis=1))

    def assemble(self, x: np.ndarray) -> tuple[sp.csc_matrix, np.ndarray, np.ndarray]:
        """Stiffness matrix on free DoFs and lifted right-hand side.

        Returns (A_ff, b_f, k_elements).
        """
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n_dof,):
            raise ValueError(f"field vector length {x.shape} != {self.n_dof} nodes")
        if not np.all(np.isfinite(x)):
            raise ValueError("field vector contains non-finite entries")
        k_e = self._element_permeability(x)
        data = (k_e[:, None, None] * self._ke0).ravel()
        A = sp.coo_matrix(
            (data, (self._coo_rows, self._coo_cols)),
            shape=(self.n_dof, self.n_dof),
        ).tocsr()
        free, bnd = self._free, self._bnd
        A_ff = A[free][:, free].tocsc()
        b_f = -A[free][:, bnd] @ self._g_bnd
        return A_ff, b_f, k_e

    def solve(self, x: np.ndarray) -> DarcySolution:
        """Forward solve: pressure field and velocities at the observation grid."""
        A_ff, b_f, k_e = self.assemble(x)
        try:
            factor = spla.splu(A_ff)
            p_f = factor.solve(b_f)
        except RuntimeError as err:
            raise SolverError(f"direct factorization failed: {err}")
        if not np.all(np.isfinite(p_f)):
            raise SolverError("non-finite pressure solution")
        p = np.empty(self.n_dof)
        p[self._free] = p_f
        p[self._bnd] = self._g_bnd
        k_obs = np.exp(self._S @ x)
        grad_p = np.column_stack([self._Gx @ p, self._Gy @ p])
        Y = -k_obs[:, None] * grad_p
        self.n_calls += 1
        return DarcySolution(
            pressure=p, Y=Y, k_elements=k_e, k_obs=k_obs, grad_p=grad_p, factor=factor
        )

    def adjoint(self, x: np.ndarray, solution: DarcySolution, dJ_dY: np.ndarray) -> np.ndarray:
        """Exact gradient of J(Y(x)) given the seed dJ/dY, reusing the factorization.

        Combines the explicit permeability path of the velocity post-processing
        with the implicit path through the pressure solve.
        """
        dJ_dY = np.asarray(dJ_dY, dtype=float)
        if dJ_dY.shape != solution.Y.shape:
            raise ValueError(f"seed shape {dJ_dY.shape} != velocity shape {solution.Y.shape}")
        x = np.asarray(x, dtype=float)

        # explicit path: Y_i = -exp(S_i x) * grad_p(c_i)
        w = np.sum(dJ_dY * solution.Y, axis=1)
        grad = self._S.T @ w

        # implicit path through the pressure solve
        dJ_dp = -(
            self._Gx.T @ (solution.k_obs * dJ_dY[:, 0])
            + self._Gy.T @ (solution.k_obs * dJ_dY[:, 1])
        )
        lam = np.zeros(self.n_dof)
        lam[self._free] = solution.factor.solve(dJ_dp[self._free])

        # dJ/dx_j -= lambda^T (dA/dx_j p); dk_e/dx_j = k_e / 4 for each element node
        p_el = solution.pressure[self._elem_nodes]
        lam_el = lam[self._elem_nodes]
        q_e = np.einsum("ei,ij,ej->e", lam_el, self._ke0, p_el) * solution.k_elements
        contrib = np.zeros(self.n_dof)
        np.add.at(contrib, self._elem_nodes.ravel(), np.repeat(q_e / 4.0, 4))
        return grad - contrib

    def solve_with_gradient(self, x, dJ_dY_fn):
        """Convenience path: forward solve, then adjoint for a seed built from Y."""
        sol = self.solve(x)
        return sol, self.adjoint(x, sol, dJ_dY_fn(sol.Y))


def save_velocities(path, grid, Y: np.ndarray) -> None:
    """Write velocities at observation coordinates as CSV (c1, c2, u1, u2)."""
    Y = np.asarray(Y, dtype=float)
    if Y.shape != (grid.n_points, 2):
        raise ValueError(f"velocity array shape {Y.shape} != ({grid.n_points}, 2)")
    with open(path, "w") as fh:
        fh.write(f"# coords rows={grid.rows} cols={grid.cols}\n")
        fh.write("c1,c2,u1,u2\n")
        for (c1, c2), (u1, u2) in zip(grid.coords, Y):
            fh.write(f"{float(c1)!r},{float(c2)!r},{float(u1)!r},{float(u2)!r}\n")


def load_velocities(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a velocity CSV back as (coords (n,2), Y (n,2))."""
    with open(path) as fh:
        fh.readline()
        fh.readline()
        data = np.array([[float(v) for v in line.split(",")] for line in fh if line.strip()])
    return data[:, :2], data[:, 2:]
