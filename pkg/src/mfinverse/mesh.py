"""Uniform quadrilateral meshes on the unit square and bilinear field interpolation.

The log-permeability field is represented by its nodal values on a uniform
mesh; evaluation at arbitrary interior coordinates is a sparse linear map
(bilinear shape functions), so interpolation and its adjoint are exact
matrix/matrix-transpose actions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


class MeshError(ValueError):
    """Invalid mesh definition (e.g. zero elements)."""


class OutOfDomainError(ValueError):
    """Coordinate outside the unit square."""


@dataclass(frozen=True)
class Mesh:
    """Uniform quad mesh of the unit square with bilinear (Q1) elements.

    Nodes are ordered row-major: node (i, j) -> index j * (n_ele_x + 1) + i,
    with i along c1 and j along c2.
    """

    n_ele_x: int
    n_ele_y: int

    def __post_init__(self):
        if self.n_ele_x < 1 or self.n_ele_y < 1:
            raise MeshError(
                f"mesh must have at least one element per direction, "
                f"got {self.n_ele_x} x {self.n_ele_y}"
            )

    @property
    def n_nodes_x(self) -> int:
        return self.n_ele_x + 1

    @property
    def n_nodes_y(self) -> int:
        return self.n_ele_y + 1

    @property
    def n_nodes(self) -> int:
        return self.n_nodes_x * self.n_nodes_y

    @property
    def n_elements(self) -> int:
        return self.n_ele_x * self.n_ele_y

    @property
    def hx(self) -> float:
        return 1.0 / self.n_ele_x

    @property
    def hy(self) -> float:
        return 1.0 / self.n_ele_y

    def node_coords(self) -> np.ndarray:
        """(n_nodes, 2) array of node coordinates."""
        xs = np.linspace(0.0, 1.0, self.n_nodes_x)
        ys = np.linspace(0.0, 1.0, self.n_nodes_y)
        cx, cy = np.meshgrid(xs, ys)
        return np.column_stack([cx.ravel(), cy.ravel()])

    def element_nodes(self) -> np.ndarray:
        """(n_elements, 4) node indices per element.

        Local order: (i, j), (i+1, j), (i, j+1), (i+1, j+1).
        """
        nnx = self.n_nodes_x
        i, j = np.meshgrid(
            np.arange(self.n_ele_x), np.arange(self.n_ele_y), indexing="xy"
        )
        base = (j * nnx + i).ravel()
        return np.column_stack([base, base + 1, base + nnx, base + nnx + 1])

    def boundary_node_mask(self) -> np.ndarray:
        """Boolean mask of nodes on the boundary of the unit square."""
        mask = np.zeros((self.n_nodes_y, self.n_nodes_x), dtype=bool)
        mask[0, :] = mask[-1, :] = True
        mask[:, 0] = mask[:, -1] = True
        return mask.ravel()

    def locate(self, coords: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Containing element indices (ex, ey) and local coords in [0, 1]^2."""
        coords = np.atleast_2d(np.asarray(coords, dtype=float))
        if np.any(coords < 0.0) or np.any(coords > 1.0):
            bad = coords[np.any((coords < 0.0) | (coords > 1.0), axis=1)][0]
            raise OutOfDomainError(f"coordinate {bad} outside the unit square")
        ex = np.minimum((coords[:, 0] * self.n_ele_x).astype(int), self.n_ele_x - 1)
        ey = np.minimum((coords[:, 1] * self.n_ele_y).astype(int), self.n_ele_y - 1)
        xi = coords[:, 0] * self.n_ele_x - ex
        eta = coords[:, 1] * self.n_ele_y - ey
        return ex, ey, np.column_stack([xi, eta])


@dataclass(frozen=True)
class ObservationGrid:
    """Observation coordinates arranged as a (rows, cols) pixel grid.

    Row-major ordering: index = row * cols + col, where rows run along c2 and
    columns along c1.
    """

    coords: np.ndarray
    rows: int
    cols: int

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=float)
        if coords.shape != (self.rows * self.cols, 2):
            raise ValueError(
                f"expected {self.rows * self.cols} coordinates, got {coords.shape}"
            )
        if np.any(coords <= 0.0) or np.any(coords >= 1.0):
            raise OutOfDomainError("observation coordinates must lie strictly inside (0,1)^2")
        object.__setattr__(self, "coords", coords)

    @classmethod
    def uniform(cls, rows: int, cols: int) -> "ObservationGrid":
        """Pixel-center grid, e.g. 50x50 covering (0.01 .. 0.99)."""
        c1 = (np.arange(cols) + 0.5) / cols
        c2 = (np.arange(rows) + 0.5) / rows
        cc1, cc2 = np.meshgrid(c1, c2)
        return cls(np.column_stack([cc1.ravel(), cc2.ravel()]), rows, cols)

    @property
    def n_points(self) -> int:
        return self.rows * self.cols

    def to_image(self, values: np.ndarray) -> np.ndarray:
        """Reshape (n, ...) point values into (rows, cols, ...) image layout."""
        return np.asarray(values).reshape(self.rows, self.cols, *np.shape(values)[1:])

    def to_points(self, image: np.ndarray) -> np.ndarray:
        return np.asarray(image).reshape(self.n_points, *np.shape(image)[2:])


def _bilinear_weights(local: np.ndarray) -> np.ndarray:
    """Shape-function values at local coords; columns match element node order."""
    xi, eta = local[:, 0], local[:, 1]
    return np.column_stack(
        [(1 - xi) * (1 - eta), xi * (1 - eta), (1 - xi) * eta, xi * eta]
    )


def interpolation_matrix(mesh: Mesh, coords: np.ndarray) -> sp.csr_matrix:
    """Sparse matrix S with (S x)_i = bilinear interpolation of x at coords[i].

    Rows sum to one (partition of unity).
    """
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    ex, ey, local = mesh.locate(coords)
    elem = ey * mesh.n_ele_x + ex
    nodes = mesh.element_nodes()[elem]
    weights = _bilinear_weights(local)
    n = coords.shape[0]
    rows = np.repeat(np.arange(n), 4)
    return sp.csr_matrix(
        (weights.ravel(), (rows, nodes.ravel())), shape=(n, mesh.n_nodes)
    )


def gradient_matrices(mesh: Mesh, coords: np.ndarray) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Sparse (Gx, Gy) with (Gx p)_i = d/dc1 of the bilinear interpolant at coords[i]."""
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    ex, ey, local = mesh.locate(coords)
    elem = ey * mesh.n_ele_x + ex
    nodes = mesh.element_nodes()[elem]
    xi, eta = local[:, 0], local[:, 1]
    # d/dxi and d/deta of the four shape functions, scaled by inverse element size
    dx = np.column_stack([-(1 - eta), (1 - eta), -eta, eta]) / mesh.hx
    dy = np.column_stack([-(1 - xi), -xi, (1 - xi), xi]) / mesh.hy
    n = coords.shape[0]
    rows = np.repeat(np.arange(n), 4)
    shape = (n, mesh.n_nodes)
    gx = sp.csr_matrix((dx.ravel(), (rows, nodes.ravel())), shape=shape)
    gy = sp.csr_matrix((dy.ravel(), (rows, nodes.ravel())), shape=shape)
    return gx, gy


def interpolate_field(x: np.ndarray, mesh: Mesh, grid: ObservationGrid) -> np.ndarray:
    """Field values at the observation coordinates (length n vector)."""
    x = np.asarray(x, dtype=float)
    if x.shape != (mesh.n_nodes,):
        raise ValueError(f"field vector has length {x.shape}, mesh has {mesh.n_nodes} nodes")
    return interpolation_matrix(mesh, grid.coords) @ x


def interpolation_adjoint(mesh: Mesh, grid: ObservationGrid, v: np.ndarray) -> np.ndarray:
    """Exact transpose action S^T v (gradient contribution to the nodal field)."""
    v = np.asarray(v, dtype=float)
    if v.shape != (grid.n_points,):
        raise ValueError(f"seed vector has length {v.shape}, grid has {grid.n_points} points")
    return interpolation_matrix(mesh, grid.coords).T @ v


def save_field(path, x: np.ndarray, mesh: Mesh) -> None:
    """Write a nodal field vector as CSV, one value per line."""
    x = np.asarray(x, dtype=float)
    if x.shape != (mesh.n_nodes,):
        raise ValueError(f"field vector has length {x.shape}, mesh has {mesh.n_nodes} nodes")
    header = f"# nodes={mesh.n_nodes} mesh={mesh.n_ele_x}x{mesh.n_ele_y}\n"
    with open(path, "w") as fh:
        fh.write(header)
        fh.writelines(f"{float(v)!r}\n" for v in x)


def load_field(path) -> tuple[np.ndarray, Mesh]:
    with open(path) as fh:
        header = fh.readline().strip()
        values = np.array([float(line) for line in fh if line.strip()])
    tokens = dict(tok.split("=") for tok in header.lstrip("# ").split())
    nx, ny = (int(s) for s in tokens["mesh"].split("x"))
    mesh = Mesh(nx, ny)
    if len(values) != int(tokens["nodes"]) or len(values) != mesh.n_nodes:
        raise ValueError(f"field file {path} is inconsistent with its header")
    return values, mesh
