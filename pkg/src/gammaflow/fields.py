"""
Space-time fields on tensor grids.

A field lives on the node set of a uniform grid over ``Omega x [t0, t0 + T]``
with ``Omega`` a box in one or two dimensions.  Values are stored as a
``(time, space..., component)`` array.  Integrals use the composite
trapezoid rule in every direction, derivatives use second-order finite
differences.

The module also provides the strong/weak convergence diagnostics used to
monitor sequences of fields (strong L^p distance, pairings of gradients
against a bank of smooth test fields, and a uniform gradient bound), plus
binary and CSV serialization of field snapshots.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

DIRICHLET_ZERO = "dirichlet_zero"
PERIODIC = "periodic"
FREE = "free"
BOUNDARY_KINDS = (DIRICHLET_ZERO, PERIODIC, FREE)


@dataclass(frozen=True)
class Grid:
    """Uniform node-centred grid over a box times a time interval.

    Parameters
    ----------
    dim : int
        Number of spatial dimensions (1 or 2).
    cells : tuple of int
        Cells per axis; an axis with ``N`` cells carries ``N + 1`` nodes.
    extent : tuple of (float, float)
        Lower and upper bound of the box along each axis.
    n_time_steps : int
        Number of time intervals; there are ``n_time_steps + 1`` levels.
    t_final : float
        Length ``T`` of the time interval.
    t_start : float
        Time of the first level.
    """

    dim: int
    cells: tuple
    extent: tuple
    n_time_steps: int
    t_final: float
    t_start: float = 0.0

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {self.dim}")
        cells = tuple(int(c) for c in np.atleast_1d(self.cells))
        extent = tuple((float(lo), float(hi)) for lo, hi in np.reshape(self.extent, (-1, 2)))
        if len(cells) != self.dim or len(extent) != self.dim:
            raise ValueError("cells and extent must have one entry per axis")
        if any(c < 1 for c in cells):
            raise ValueError(f"cells must be positive, got {cells}")
        if any(lo >= hi for lo, hi in extent):
            raise ValueError(f"extent lower bound must be below upper bound, got {extent}")
        if int(self.n_time_steps) < 1:
            raise ValueError("n_time_steps must be positive")
        if not self.t_final > 0:
            raise ValueError("t_final must be positive")
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "extent", extent)
        object.__setattr__(self, "n_time_steps", int(self.n_time_steps))
        object.__setattr__(self, "t_final", float(self.t_final))
        object.__setattr__(self, "t_start", float(self.t_start))

    @classmethod
    def uniform(cls, cells, lo=0.0, hi=1.0, dim=1, n_time_steps=1, t_final=1.0):
        """Grid with the same cell count and bounds on every axis."""
        return cls(dim, (cells,) * dim, ((lo, hi),) * dim, n_time_steps, t_final)

    @property
    def h(self) -> tuple:
        return tuple((hi - lo) / n for (lo, hi), n in zip(self.extent, self.cells))

    @property
    def dt(self) -> float:
        return self.t_final / self.n_time_steps

    @property
    def space_shape(self) -> tuple:
        return tuple(n + 1 for n in self.cells)

    @property
    def n_levels(self) -> int:
        return self.n_time_steps + 1

    @property
    def measure(self) -> float:
        """Measure of the space-time cylinder."""
        return float(np.prod([hi - lo for lo, hi in self.extent])) * self.t_final

    def axes(self) -> list:
        return [np.linspace(lo, hi, n + 1) for (lo, hi), n in zip(self.extent, self.cells)]

    def times(self) -> np.ndarray:
        return self.t_start + self.dt * np.arange(self.n_levels)

    def coords(self) -> np.ndarray:
        """Node coordinates, shape ``space_shape + (dim,)``."""
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"), axis=-1)

    def space_weights(self) -> np.ndarray:
        w = np.ones(())
        for h, n in zip(self.h, self.cells):
            wa = np.full(n + 1, h)
            wa[[0, -1]] *= 0.5
            w = np.multiply.outer(w, wa)
        return w

    def time_weights(self) -> np.ndarray:
        w = np.full(self.n_levels, self.dt)
        w[[0, -1]] *= 0.5
        return w

    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.space_shape, dtype=bool)
        for ax in range(self.dim):
            idx = [slice(None)] * self.dim
            idx[ax] = 0
            mask[tuple(idx)] = True
            idx[ax] = -1
            mask[tuple(idx)] = True
        return mask

    def with_time(self, n_time_steps, t_final, t_start=0.0) -> "Grid":
        return Grid(self.dim, self.cells, self.extent, n_time_steps, t_final, t_start)

    def same_space(self, other: "Grid") -> bool:
        return self.cells == other.cells and np.allclose(self.extent, other.extent, rtol=0, atol=1e-14)

    def compatible(self, other: "Grid") -> bool:
        return (
            self.same_space(other)
            and self.n_time_steps == other.n_time_steps
            and abs(self.t_final - other.t_final) <= 1e-12 * self.t_final
            and abs(self.t_start - other.t_start) <= 1e-12 * max(1.0, abs(self.t_start))
        )


@dataclass(frozen=True, eq=False)
class SpaceTimeField:
    """Immutable sampled field ``u(x_i, t_k) in R^m``.

    ``values`` has shape ``(n_levels, *space_shape, m)``.  A
    ``dirichlet_zero`` field has exactly zero boundary samples at every time
    level, a ``periodic`` field repeats its first node on the last one.
    """

    grid: Grid
    values: np.ndarray
    boundary_kind: str = FREE

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64)
        g = self.grid
        if vals.ndim == g.dim + 1:
            vals = vals[..., None]
        expected = (g.n_levels,) + g.space_shape
        if vals.shape[:-1] != expected:
            raise ValueError(f"values shape {vals.shape} does not match grid {expected} + (m,)")
        if self.boundary_kind not in BOUNDARY_KINDS:
            raise ValueError(f"unknown boundary kind {self.boundary_kind!r}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("field contains non-finite values")
        if self.boundary_kind == DIRICHLET_ZERO:
            if np.any(vals[:, g.boundary_mask()] != 0.0):
                raise ValueError("dirichlet_zero field has nonzero boundary samples")
        elif self.boundary_kind == PERIODIC:
            for ax in range(g.dim):
                first = np.take(vals, [0], axis=ax + 1)
                last = np.take(vals, [-1], axis=ax + 1)
                if np.any(first != last):
                    raise ValueError("periodic field must repeat its first node on the last")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_function(cls, grid: Grid, func: Callable, boundary_kind: str = FREE) -> "SpaceTimeField":
        """Sample ``func(x, t)``; ``x`` has a trailing axis of length ``dim``.

        ``func`` may return shape ``space_shape`` (scalar field) or
        ``space_shape + (m,)``.  Boundary samples are zeroed for
        ``dirichlet_zero`` fields and wrapped for ``periodic`` fields.
        """
        x = grid.coords()
        levels = [np.asarray(func(x, t), dtype=float) for t in grid.times()]
        vals = np.stack([np.broadcast_to(v, grid.space_shape + v.shape[grid.dim:]) for v in levels])
        return cls(grid, _enforce_boundary(vals, grid, boundary_kind), boundary_kind)

    @classmethod
    def from_levels(cls, grid: Grid, levels: Sequence[np.ndarray], boundary_kind: str = FREE):
        vals = np.stack([np.asarray(v, dtype=float) for v in levels])
        return cls(grid, vals, boundary_kind)

    @property
    def m(self) -> int:
        return self.values.shape[-1]

    def level(self, k: int) -> np.ndarray:
        return self.values[k]

    def _combine(self, other, op):
        if isinstance(other, SpaceTimeField):
            if not self.grid.compatible(other.grid) or self.m != other.m:
                raise ValueError("incompatible fields")
            kind = self.boundary_kind if self.boundary_kind == other.boundary_kind else FREE
            return SpaceTimeField(self.grid, op(self.values, other.values), kind)
        return NotImplemented

    def __add__(self, other):
        return self._combine(other, np.add)

    def __sub__(self, other):
        return self._combine(other, np.subtract)

    def __neg__(self):
        return SpaceTimeField(self.grid, -self.values, self.boundary_kind)

    def __mul__(self, c):
        if np.ndim(c) != 0:
            return NotImplemented
        return SpaceTimeField(self.grid, float(c) * self.values, self.boundary_kind)

    __rmul__ = __mul__


@dataclass
class SwReport:
    """Diagnostics for convergence in the strong-L^p / weak-gradient topology."""

    strong_lp_distance: float
    weak_gradient_pairings: list = field(default_factory=list)
    gradient_lp_bound: float = 0.0

    @property
    def max_pairing_error(self) -> float:
        return max((err for _, err in self.weak_gradient_pairings), default=0.0)


def _enforce_boundary(vals, grid, kind):
    vals = np.array(vals, dtype=float)
    if kind == DIRICHLET_ZERO:
        vals[:, grid.boundary_mask()] = 0.0
    elif kind == PERIODIC:
        for ax in range(grid.dim):
            src = [slice(None)] * vals.ndim
            dst = [slice(None)] * vals.ndim
            src[ax + 1], dst[ax + 1] = 0, -1
            vals[tuple(dst)] = vals[tuple(src)]
    return vals


def spatial_derivative(arr: np.ndarray, h: float, axis: int, periodic: bool) -> np.ndarray:
    """Second-order derivative of ``arr`` along ``axis``.

    Central differences inside; second-order one-sided differences at the
    ends of a non-periodic axis.  For a periodic axis the last node is a
    copy of the first.
    """
    n = arr.shape[axis]
    if n < 4:
        raise ValueError("gradient needs at least 3 cells per axis")
    if periodic:
        core = np.take(arr, np.arange(n - 1), axis=axis)
        d = (np.roll(core, -1, axis=axis) - np.roll(core, 1, axis=axis)) / (2.0 * h)
        return np.concatenate([d, np.take(d, [0], axis=axis)], axis=axis)
    return np.gradient(arr, h, axis=axis, edge_order=2)


def spatial_gradient(arr: np.ndarray, grid: Grid, periodic: bool = False) -> np.ndarray:
    """Gradient of a ``(..., space..., m)`` array; returns ``(..., space..., m*dim)``.

    Component ``i * dim + j`` holds ``d u^i / d x_j``.
    """
    lead = arr.ndim - grid.dim - 1
    parts = [
        spatial_derivative(arr, h, lead + ax, periodic) for ax, h in enumerate(grid.h)
    ]
    stacked = np.stack(parts, axis=-1)  # (..., m, dim)
    return stacked.reshape(stacked.shape[:-2] + (-1,))


def gradient(u: SpaceTimeField) -> SpaceTimeField:
    """Spatial Jacobian ``(d u^i / d x_j)`` as a field with ``m * dim`` components."""
    if min(u.grid.cells) < 3:
        raise ValueError("gradient needs at least 3 cells per axis")
    periodic = u.boundary_kind == PERIODIC
    return SpaceTimeField(u.grid, spatial_gradient(u.values, u.grid, periodic), PERIODIC if periodic else FREE)


def time_derivative(u: SpaceTimeField) -> SpaceTimeField:
    """Second-order finite-difference ``d u / d t`` at every level."""
    edge = 2 if u.grid.n_levels >= 3 else 1
    d = np.gradient(u.values, u.grid.dt, axis=0, edge_order=edge)
    return SpaceTimeField(u.grid, d, u.boundary_kind)


def spatial_integrate(arr: np.ndarray, grid: Grid) -> np.ndarray:
    """Trapezoid integral over ``Omega`` of an array whose leading axes are spatial."""
    return np.tensordot(grid.space_weights(), arr, axes=grid.dim)


def integrate(u) -> np.ndarray:
    """Space-time trapezoid integral, one value per component.

    Accepts a field or a ``(grid, array)`` pair whose array has shape
    ``(n_levels, *space_shape[, ...])``.
    """
    grid, vals = (u.grid, u.values) if isinstance(u, SpaceTimeField) else u
    in_space = np.tensordot(grid.time_weights(), vals, axes=1)
    return spatial_integrate(in_space, grid)


def lp_norm(u: SpaceTimeField, p: float = 2.0) -> float:
    """``(int |u|^p dx dt)^(1/p)`` with ``|.|`` the Euclidean norm over components."""
    if not p >= 1:
        raise ValueError(f"p must be >= 1, got {p}")
    mag = np.sqrt(np.sum(u.values**2, axis=-1))
    return float(integrate((u.grid, mag**p))) ** (1.0 / p)


def pairing(a: SpaceTimeField, b: SpaceTimeField) -> float:
    """``int a : b dx dt`` for fields with the same component count."""
    if not a.grid.compatible(b.grid) or a.m != b.m:
        raise ValueError("incompatible fields")
    return float(integrate((a.grid, np.sum(a.values * b.values, axis=-1))))


def sine_test_bank(grid: Grid, components: int, max_order: int = 8) -> list:
    """Smooth time-constant test fields: tensor sine modes, one component at a time.

    In 1D there are ``max_order`` modes per component, in 2D ``max_order**2``.
    """
    axes = grid.axes()
    modes1d = [
        [np.sin(j * np.pi * (x - lo) / (hi - lo)) for j in range(1, max_order + 1)]
        for x, (lo, hi) in zip(axes, grid.extent)
    ]
    bank = []
    for comp in range(components):
        for combo in np.ndindex(*(max_order,) * grid.dim):
            prof = modes1d[0][combo[0]]
            for ax in range(1, grid.dim):
                prof = np.multiply.outer(prof, modes1d[ax][combo[ax]])
            vals = np.zeros((grid.n_levels,) + grid.space_shape + (components,))
            vals[..., comp] = prof
            bank.append(SpaceTimeField(grid, vals))
    return bank


def sw_distance(seq_member: SpaceTimeField, limit: SpaceTimeField, test_bank=None, p: float = 2.0) -> SwReport:
    """Strong/weak convergence diagnostics of ``seq_member`` towards ``limit``.

    ``test_bank`` holds fields with ``m * dim`` components paired against the
    gradient difference; by default the tensor sine bank of order 8 is used.
    """
    if not seq_member.grid.compatible(limit.grid) or seq_member.m != limit.m:
        raise ValueError("grid or component mismatch between sequence member and limit")
    grad_member = gradient(seq_member)
    dgrad = grad_member - gradient(limit)
    if test_bank is None:
        test_bank = sine_test_bank(seq_member.grid, dgrad.m)
    pairings = [(i, abs(pairing(dgrad, psi))) for i, psi in enumerate(test_bank)]
    return SwReport(
        strong_lp_distance=lp_norm(seq_member - limit, p),
        weak_gradient_pairings=pairings,
        gradient_lp_bound=lp_norm(grad_member, p),
    )


def restrict_time(u: SpaceTimeField, k0: int, k1: int) -> SpaceTimeField:
    """Sub-field on levels ``k0..k1`` inclusive."""
    if not 0 <= k0 < k1 <= u.grid.n_time_steps:
        raise ValueError("invalid time window")
    g = u.grid
    sub = g.with_time(k1 - k0, (k1 - k0) * g.dt, g.t_start + k0 * g.dt)
    return SpaceTimeField(sub, u.values[k0 : k1 + 1], u.boundary_kind)


# -- serialization -----------------------------------------------------------

def write_binary(u: SpaceTimeField, path) -> None:
    """Flat little-endian layout.

    Header: ``dim, m, cells[0..dim-1], n_time_steps`` as int64.  Payload:
    float64 node values in time-major, row-major space, component order.
    """
    g = u.grid
    header = [g.dim, u.m, *g.cells, g.n_time_steps]
    with open(path, "wb") as fh:
        fh.write(struct.pack(f"<{len(header)}q", *header))
        fh.write(np.ascontiguousarray(u.values, dtype="<f8").tobytes())


def read_binary(path, extent=None, t_final=1.0, t_start=0.0, boundary_kind=FREE) -> SpaceTimeField:
    """Inverse of :func:`write_binary`; the header carries no geometry, so pass it."""
    raw = Path(path).read_bytes()
    dim, m = struct.unpack_from("<2q", raw, 0)
    if dim not in (1, 2):
        raise ValueError(f"corrupt header: dim={dim}")
    *cells, steps = struct.unpack_from(f"<{dim + 1}q", raw, 16)
    offset = 16 + 8 * (dim + 1)
    if extent is None:
        extent = ((0.0, 1.0),) * dim
    grid = Grid(dim, tuple(cells), extent, steps, t_final, t_start)
    shape = (grid.n_levels,) + grid.space_shape + (m,)
    expected = offset + 8 * int(np.prod(shape))
    if len(raw) != expected:
        raise ValueError(f"payload size {len(raw)} does not match header ({expected})")
    vals = np.frombuffer(raw, dtype="<f8", offset=offset).reshape(shape)
    return SpaceTimeField(grid, vals, boundary_kind)


def write_csv(u: SpaceTimeField, path) -> None:
    """Long-format CSV with columns ``t, x, [y,] component, value``."""
    g = u.grid
    names = ["t", "x", "y"][: g.dim + 1] + ["component", "value"]
    coords = g.coords().reshape(-1, g.dim)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for k, t in enumerate(g.times()):
            level = u.values[k].reshape(-1, u.m)
            for node, xs in enumerate(coords):
                for c in range(u.m):
                    w.writerow([repr(float(t)), *(repr(float(v)) for v in xs), c, repr(float(level[node, c]))])
