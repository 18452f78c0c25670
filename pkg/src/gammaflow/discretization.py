"""Linear-algebra kernels shared by the flow solvers.

Two discretizations of ``-div(a grad u)`` on a uniform node grid:

* a fast shifted 5-point Laplacian solve with homogeneous Dirichlet data,
  diagonalized by the type-I discrete sine transform (constant isotropic
  diffusion, used by the Allen-Cahn stepper);
* a conforming P1/Q1 stiffness matrix with one coefficient per cell and a
  lumped (trapezoid) mass, used for variable and tensor coefficients.

In 1D both coincide with the classical three-point flux scheme.
"""

from __future__ import annotations

import numpy as np
import scipy.fft as sfft
import scipy.sparse as sps

from .fields import Grid


def interior(arr: np.ndarray, dim: int) -> np.ndarray:
    return arr[(slice(1, -1),) * dim]


def laplacian_5pt(u: np.ndarray, grid: Grid) -> np.ndarray:
    """Five-point (three-point in 1D) Laplacian at interior nodes of ``u`` (shape ``space_shape``)."""
    out = np.zeros(tuple(n - 1 for n in grid.cells))
    for ax, h in enumerate(grid.h):
        lo = [slice(1, -1)] * grid.dim
        hi = [slice(1, -1)] * grid.dim
        mid = [slice(1, -1)] * grid.dim
        lo[ax], hi[ax] = slice(0, -2), slice(2, None)
        out += (u[tuple(lo)] - 2.0 * u[tuple(mid)] + u[tuple(hi)]) / (h * h)
    return out


def edge_dirichlet_energy(u: np.ndarray, grid: Grid) -> float:
    """``1/2 int |grad u|^2`` from edge differences of a ``space_shape`` array.

    Edges on a boundary line get half weight.  The gradient of this
    quadratic form with respect to the lumped mass is ``-Lap_h`` of
    :func:`laplacian_5pt`, so it is the energy the Allen-Cahn steppers
    dissipate.
    """
    cell = float(np.prod(grid.h))
    total = 0.0
    for ax, h in enumerate(grid.h):
        d = np.diff(u, axis=ax) / h
        w = np.ones(d.shape)
        for other in range(grid.dim):
            if other != ax:
                edge = [slice(None)] * grid.dim
                for k in (0, -1):
                    edge[other] = k
                    w[tuple(edge)] *= 0.5
        total += 0.5 * cell * float(np.sum(w * d * d))
    return total


class ShiftedDirichletSolver:
    """Solve ``(shift - diff * Lap_h) w = r`` on interior nodes with ``w = 0`` on the boundary."""

    def __init__(self, grid: Grid, shift: float, diff: float):
        self.grid = grid
        denom = np.full(tuple(n - 1 for n in grid.cells), float(shift))
        for ax, (h, n) in enumerate(zip(grid.h, grid.cells)):
            j = np.arange(1, n)
            lam = 4.0 / (h * h) * np.sin(j * np.pi / (2 * n)) ** 2
            shape = [1] * grid.dim
            shape[ax] = n - 1
            denom = denom + diff * lam.reshape(shape)
        if np.any(denom <= 0):
            raise ValueError("shifted Laplacian is not positive definite")
        self.denom = denom

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        hat = sfft.dstn(rhs, type=1, norm="ortho", workers=1)
        return sfft.idstn(hat / self.denom, type=1, norm="ortho", workers=1)


# -- P1/Q1 stiffness ---------------------------------------------------------

def _q1_reference(hx: float, hy: float) -> np.ndarray:
    """``S[i, j, a, b] = int_cell d_i phi_a d_j phi_b`` for bilinear shape functions.

    Local node order: (0,0), (1,0), (0,1), (1,1).
    """
    g = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])
    corners = np.array([[0, 0], [1, 0], [0, 1], [1, 1]])
    S = np.zeros((2, 2, 4, 4))
    for xi in g:
        for eta in g:
            grads = np.zeros((4, 2))
            for a, (cx, cy) in enumerate(corners):
                fx = xi if cx else 1 - xi
                fy = eta if cy else 1 - eta
                dfx = (1.0 if cx else -1.0) / hx
                dfy = (1.0 if cy else -1.0) / hy
                grads[a] = (dfx * fy, fx * dfy)
            S += 0.25 * hx * hy * np.einsum("ai,bj->ijab", grads, grads)
    return S


def cell_centers(grid: Grid) -> np.ndarray:
    axes = [0.5 * (x[1:] + x[:-1]) for x in grid.axes()]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def cell_coefficient(coeff, grid: Grid, t: float) -> np.ndarray:
    """Coefficient at cell centres as ``(cells..., dim, dim)`` matrices."""
    xc = cell_centers(grid)
    a = np.asarray(coeff(xc, t), dtype=float)
    point_shape = grid.cells
    if a.ndim == len(point_shape) + 2 and a.shape[-2:] == (grid.dim, grid.dim):
        return a
    return np.broadcast_to(a, point_shape)[..., None, None] * np.eye(grid.dim)


def node_index(grid: Grid, periodic: bool) -> np.ndarray:
    """Degree-of-freedom index of every node; periodic grids fold the last node onto the first."""
    shape = grid.space_shape
    if not periodic:
        return np.arange(int(np.prod(shape))).reshape(shape)
    idx = [np.arange(n + 1) % n for n in grid.cells]
    grids = np.meshgrid(*idx, indexing="ij")
    if grid.dim == 1:
        return grids[0]
    return grids[0] * grid.cells[1] + grids[1]


def n_dofs(grid: Grid, periodic: bool) -> int:
    return int(np.prod(grid.cells if periodic else grid.space_shape))


def stiffness(grid: Grid, cell_a: np.ndarray, periodic: bool = False) -> sps.csr_matrix:
    """Assemble ``K`` with ``u^T K u = int a grad u . grad u`` for P1 (1D) / Q1 (2D) elements."""
    idx = node_index(grid, periodic)
    N = n_dofs(grid, periodic)
    if grid.dim == 1:
        (h,) = grid.h
        a = cell_a[:, 0, 0] / h
        i0, i1 = idx[:-1], idx[1:]
        rows = np.concatenate([i0, i1, i0, i1])
        cols = np.concatenate([i0, i1, i1, i0])
        vals = np.concatenate([a, a, -a, -a])
    else:
        hx, hy = grid.h
        S = _q1_reference(hx, hy)
        Ke = np.einsum("cdij,ijab->cdab", cell_a, S)  # (nx, ny, 4, 4)
        loc = np.stack([idx[:-1, :-1], idx[1:, :-1], idx[:-1, 1:], idx[1:, 1:]], axis=-1)
        rows = np.repeat(loc[..., :, None], 4, axis=-1).ravel()
        cols = np.repeat(loc[..., None, :], 4, axis=-2).ravel()
        vals = Ke.ravel()
    return sps.coo_matrix((vals, (rows, cols)), shape=(N, N)).tocsr()


def lumped_mass(grid: Grid, periodic: bool = False) -> np.ndarray:
    """Diagonal of the lumped mass matrix (trapezoid weights, folded when periodic)."""
    w = grid.space_weights()
    idx = node_index(grid, periodic)
    return np.bincount(idx.ravel(), weights=w.ravel(), minlength=n_dofs(grid, periodic))


def free_dofs(grid: Grid, periodic: bool) -> np.ndarray:
    """Unknown dof indices: everything for periodic grids, interior nodes otherwise."""
    if periodic:
        return np.arange(n_dofs(grid, True))
    return node_index(grid, False)[(slice(1, -1),) * grid.dim].ravel()


def cell_gradient_sq(u: np.ndarray, grid: Grid) -> np.ndarray:
    """``|grad u|^2`` at cell centres for a ``(space..., m)`` array (summed over components)."""
    if grid.dim == 1:
        (h,) = grid.h
        g = np.diff(u, axis=0) / h
        return np.sum(g * g, axis=-1)
    hx, hy = grid.h
    gx = 0.5 * ((u[1:, :-1] - u[:-1, :-1]) + (u[1:, 1:] - u[:-1, 1:])) / hx
    gy = 0.5 * ((u[:-1, 1:] - u[:-1, :-1]) + (u[1:, 1:] - u[1:, :-1])) / hy
    return np.sum(gx * gx + gy * gy, axis=-1)


def _dirichlet_symbol(grid: Grid) -> np.ndarray:
    """Eigenvalues of ``-Lap_h`` on interior nodes in the type-I sine basis."""
    lam = np.zeros(tuple(n - 1 for n in grid.cells))
    for ax, (h, n) in enumerate(zip(grid.h, grid.cells)):
        j = np.arange(1, n)
        shape = [1] * grid.dim
        shape[ax] = n - 1
        lam = lam + (4.0 / (h * h) * np.sin(j * np.pi / (2 * n)) ** 2).reshape(shape)
    return lam


class DirichletHeatPropagator:
    """Exact discrete heat semigroup ``exp(dt * diff * Lap_h)`` with fixed boundary values.

    The boundary frame is lifted by its discrete harmonic extension, so the
    propagator maps interior values to interior values.
    """

    def __init__(self, grid: Grid, diff: float, dt: float, frame: np.ndarray):
        lam = _dirichlet_symbol(grid)
        self.factor = np.exp(-diff * dt * lam)
        # discrete harmonic extension of the frame: Lap_h(frame + w) = 0 inside
        src = laplacian_5pt(frame, grid)
        self.harmonic = sfft.idstn(sfft.dstn(src, type=1, norm="ortho") / lam, type=1, norm="ortho")

    def step(self, inner: np.ndarray) -> np.ndarray:
        v = inner - self.harmonic
        hat = sfft.dstn(v, type=1, norm="ortho", workers=1)
        return sfft.idstn(hat * self.factor, type=1, norm="ortho", workers=1) + self.harmonic
