"""Critical points and critical values, plus value clustering.

The value set of interest is always a small finite set of reals (or complex
numbers in complex mode), produced by noisy numerics, so values get grouped
into clusters with an absolute/relative gap rule before they are reported.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import UnsupportedDimensionError
from .expr import Expression
from .solve import Box, SquareSystem, multistart_solve, newton_solve

PROV_CRITICAL = "critical"
PROV_ASYMPTOTIC = "asymptotic"


@dataclass(frozen=True)
class ValueCluster:
    value: float | complex
    provenance: tuple[str, ...]
    members: tuple
    spread: float
    stable: bool = True


@dataclass(frozen=True)
class CriticalPoint:
    x: np.ndarray
    f_value: float | complex
    residual: float


def _gap(a, b, abs_tol: float, rel_tol: float) -> bool:
    scale = max(abs(a), abs(b))
    return abs(a - b) > max(abs_tol, rel_tol * scale)


def cluster_values(values, abs_tol: float = 1e-5, rel_tol: float = 1e-6,
                   provenance: str = PROV_CRITICAL, stable: bool = True) -> list[ValueCluster]:
    """Group nearby values.  Real values use a sorted greedy gap rule; complex
    values use pairwise linking with the same threshold."""
    vals = list(values)
    if not vals:
        return []
    if any(isinstance(v, complex) and v.imag != 0.0 for v in vals):
        return _cluster_complex(vals, abs_tol, rel_tol, provenance, stable)
    vals = sorted(float(complex(v).real) for v in vals)
    groups: list[list[float]] = [[vals[0]]]
    for v in vals[1:]:
        if _gap(groups[-1][-1], v, abs_tol, rel_tol):
            groups.append([v])
        else:
            groups[-1].append(v)
    out = []
    for g in groups:
        arr = np.array(g)
        out.append(ValueCluster(value=float(arr.mean()), provenance=(provenance,),
                                members=tuple(g), spread=float(arr.max() - arr.min()),
                                stable=stable))
    return out


def _cluster_complex(vals, abs_tol, rel_tol, provenance, stable) -> list[ValueCluster]:
    vals = [complex(v) for v in vals]
    k = len(vals)
    parent = list(range(k))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(k):
        for j in range(i + 1, k):
            if not _gap(vals[i], vals[j], abs_tol, rel_tol):
                parent[find(i)] = find(j)
    groups: dict[int, list[complex]] = {}
    for i in range(k):
        groups.setdefault(find(i), []).append(vals[i])
    out = []
    for g in sorted(groups.values(), key=lambda g: (g[0].real, g[0].imag)):
        mean = sum(g) / len(g)
        spread = 2.0 * max(abs(v - mean) for v in g)
        out.append(ValueCluster(value=mean, provenance=(provenance,),
                                members=tuple(g), spread=spread, stable=stable))
    out.sort(key=lambda c: (complex(c.value).real, complex(c.value).imag))
    return out


def combine_clusters(clusters: list[ValueCluster], abs_tol: float = 1e-5,
                     rel_tol: float = 1e-6) -> list[ValueCluster]:
    """Merge clusters from different sources into one candidate list, joining
    provenance tags when centers coincide."""
    items = sorted(clusters, key=lambda c: (complex(c.value).real, complex(c.value).imag))
    merged: list[ValueCluster] = []
    for c in items:
        if merged and not _gap(merged[-1].value, c.value, abs_tol, rel_tol):
            prev = merged[-1]
            members = prev.members + c.members
            mean = sum(members) / len(members)
            if any(isinstance(m, complex) and m.imag != 0.0 for m in members):
                spread = 2.0 * max(abs(m - mean) for m in members)
            else:
                ms = [complex(m).real for m in members]
                mean = float(np.mean(ms))
                spread = float(max(ms) - min(ms))
            merged[-1] = ValueCluster(
                value=mean,
                provenance=tuple(sorted(set(prev.provenance) | set(c.provenance))),
                members=members, spread=spread,
                stable=prev.stable and c.stable)
        else:
            merged.append(c)
    return merged


def gradient_system(f: Expression) -> SquareSystem:
    """Square system whose roots are the critical points of f.  Complex
    polynomials are realified (the holomorphic partials, not conjugated:
    the zero set is the same)."""
    n = len(f.variables)
    grad = [f.partial(i) for i in range(n)]
    hess = [[g.partial(j) for j in range(n)] for g in grad]
    if f.mode == "complex":
        def residual(v):
            z = v[:n] + 1j * v[n:]
            g = np.array([gi.evaluate(z) for gi in grad], dtype=complex)
            return np.concatenate([g.real, g.imag])

        def jacobian(v):
            z = v[:n] + 1j * v[n:]
            H = np.array([[h.evaluate(z) for h in row] for row in hess], dtype=complex)
            return np.block([[H.real, -H.imag], [H.imag, H.real]])

        return SquareSystem(2 * n, residual, jacobian)

    def residual(v):
        return np.array([gi.evaluate(v) for gi in grad], dtype=float)

    def jacobian(v):
        return np.array([[h.evaluate(v) for h in row] for row in hess], dtype=float)

    return SquareSystem(n, residual, jacobian)


def critical_points(f: Expression, box_half_width: float = 20.0, n_starts: int = 200,
                    seed: int = 42, tol_residual: float = 1e-9,
                    threads: int = 1) -> list[CriticalPoint]:
    """Multistart search for critical points inside the centered box.

    Roots outside the box are discarded: flat tails admit tolerance-level
    pseudo-roots arbitrarily far out, and keeping them would invent critical
    values the function does not have.
    """
    n = len(f.variables)
    dim = 2 * n if f.mode == "complex" else n
    system = gradient_system(f)
    region = Box.cube(box_half_width, dim)
    roots = multistart_solve(system, region, n_starts, seed,
                             tol_residual=tol_residual, threads=threads)
    pts = []
    for r in roots:
        if f.mode == "complex":
            x = r.point[:n] + 1j * r.point[n:]
        else:
            x = r.point
        pts.append(CriticalPoint(x=np.array(x), f_value=f.evaluate(x),
                                 residual=r.residual_norm))
    return pts


def sigma_values(f: Expression, box_half_width: float = 20.0, n_starts: int = 200,
                 seed: int = 42, tol_residual: float = 1e-9,
                 abs_tol: float = 1e-5, rel_tol: float = 1e-6,
                 threads: int = 1) -> list[ValueCluster]:
    """Critical values of f over the box, clustered and sorted ascending."""
    pts = critical_points(f, box_half_width, n_starts, seed, tol_residual, threads)
    return cluster_values([p.f_value for p in pts], abs_tol, rel_tol,
                          provenance=PROV_CRITICAL)


def _grid_axes(hw: float, cells: int) -> np.ndarray:
    return np.linspace(-hw, hw, cells + 1)


def gradient_zero_components(f: Expression, box_half_width: float = 20.0,
                             grid_n: int = 512, tol: float = 1e-9) -> int:
    """Number of connected components of the critical set inside the box.

    A cell of the grid is marked when the gradient at its best corner is small
    against a Hessian-based Lipschitz bound for the cell, so no zero can hide
    in an unmarked cell.  Marked cells are grouped by face adjacency and each
    group is confirmed once by a Newton refinement that must land inside the
    group (flat tails and pseudo-zero bands fail confirmation and are
    dropped).  Supports up to three real dimensions.
    """
    n = len(f.variables)
    if f.mode == "complex":
        if n != 1:
            raise UnsupportedDimensionError(
                "component counting supports at most 3 real dimensions")
        dim = 2
    else:
        if n > 3:
            raise UnsupportedDimensionError(
                "component counting supports at most 3 real dimensions")
        dim = n
    cells = int(grid_n)
    if dim == 3:
        cells = min(cells, 96)
    axes = [_grid_axes(box_half_width, cells) for _ in range(dim)]
    mesh = np.meshgrid(*axes, indexing="ij")

    grad = [f.partial(i) for i in range(n)]
    hess = [[g.partial(j) for j in range(n)] for g in grad]
    if f.mode == "complex":
        zgrid = mesh[0] + 1j * mesh[1]
        gsq = np.zeros(zgrid.shape)
        hsq = np.zeros(zgrid.shape)
        for gi in grad:
            gv = gi.evaluate_grid([zgrid])
            gsq += np.abs(gv) ** 2
        for row in hess:
            for hij in row:
                hv = hij.evaluate_grid([zgrid])
                hsq += 2.0 * np.abs(hv) ** 2
    else:
        gsq = np.zeros(mesh[0].shape)
        hsq = np.zeros(mesh[0].shape)
        for gi in grad:
            gv = gi.evaluate_grid(mesh)
            gsq += gv ** 2
        for row in hess:
            for hij in row:
                hv = hij.evaluate_grid(mesh)
                hsq += hv ** 2
    gnorm = np.sqrt(np.maximum(gsq, 0.0))
    hnorm = np.sqrt(np.maximum(hsq, 0.0))
    gnorm[~np.isfinite(gnorm)] = np.inf
    hnorm[~np.isfinite(hnorm)] = np.inf

    step = 2.0 * box_half_width / cells
    diam = step * np.sqrt(dim)
    corner_slices = [
        tuple(slice(o, o + cells) for o in offs)
        for offs in np.ndindex(*(2,) * dim)
    ]
    gmin = np.minimum.reduce([gnorm[s] for s in corner_slices])
    hmax = np.maximum.reduce([hnorm[s] for s in corner_slices])
    with np.errstate(invalid="ignore"):
        marked = gmin <= np.maximum(2.0 * hmax * diam, tol)
    marked &= np.isfinite(gmin)

    structure = ndimage.generate_binary_structure(dim, 1)
    labels, count = ndimage.label(marked, structure=structure)
    if count == 0:
        return 0

    system = gradient_system(f)
    box = Box.cube(box_half_width, dim)
    confirmed = 0
    for comp in range(1, count + 1):
        idx = np.argwhere(labels == comp)
        # best corner of the component: smallest corner gradient norm
        best_cell = idx[np.argmin([gmin[tuple(i)] for i in idx])]
        start = np.array([axes[d][best_cell[d]] for d in range(dim)], dtype=float)
        root = newton_solve(system, start, tol_residual=tol, max_iter=80)
        if not root.converged:
            continue
        p = root.point
        if not box.contains(p):
            continue
        lo = np.array([axes[d][idx[:, d].min()] for d in range(dim)]) - 3.0 * diam
        hi = np.array([axes[d][idx[:, d].max() + 1] for d in range(dim)]) + 3.0 * diam
        if np.all(p >= lo) and np.all(p <= hi):
            confirmed += 1
    return confirmed
