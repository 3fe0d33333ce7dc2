"""Tangency variety of f: points where the gradient is parallel to the
position vector, restricted to spheres about the origin.

Real case: unknowns (x, lam) solve grad f(x) = lam*x together with the
normalized sphere equation (|x|^2 - R^2) / (2R).  The normalization keeps the
sphere row at unit scale so absolute residual tolerances remain meaningful at
large radii.

Complex case: f is a polynomial on C^n, the gradient uses conjugated
holomorphic partials, and the tangency condition grad f(z) = lam*z (lam in C)
is solved in realified coordinates (re z, im z, re lam, im lam).  The
solution set on a sphere is curve-like, so a random affine hyperplane slice
(scaled with the radius so it keeps cutting the same branches) makes the
system square.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .expr import Expression
from .solve import (Root, SphereSurface, SquareSystem, dedup_roots,
                    solve_from_starts)

_SHARP_RATIO = 1e-12
_GRAD_FLOOR_FACTOR = 1e3


def tangency_residual(f: Expression, x: Sequence) -> float:
    """Relative size of the gradient component orthogonal to the position.

    Zero exactly when grad f(x) is parallel to x (or the gradient vanishes);
    close to one when they are orthogonal.  Undefined at the origin.
    """
    mode = f.mode
    xv = np.asarray(x, dtype=complex if mode == "complex" else float)
    xn2 = float(np.vdot(xv, xv).real)
    if xn2 == 0.0:
        raise ValueError("tangency measure is undefined at the origin")
    g = f.gradient().evaluate(xv)
    gn = float(np.linalg.norm(g))
    if gn == 0.0:
        return 0.0
    w = g - (np.vdot(xv, g) / xn2) * xv
    return float(np.linalg.norm(w)) / gn


@dataclass(frozen=True)
class Slice:
    """Affine hyperplane in realified coordinates: <normal, p> = c0 * R."""

    normal: np.ndarray
    c0: float


@dataclass(frozen=True)
class TangencyPoint:
    x: np.ndarray          # real or complex coordinates
    lam: float | complex   # multiplier in grad f = lam * x
    radius: float
    f_value: float | complex
    residual: float        # norm of the solved square system at the root
    tau: float             # orthogonal-defect ratio, floored to 0 near critical points
    sharp: bool            # square-system Jacobian well conditioned at the root
    slice_: Slice | None = None

    def embedded(self) -> np.ndarray:
        return embed(self.x)


def embed(x: np.ndarray) -> np.ndarray:
    """Real or complex coordinates as a flat real vector (re parts, im parts)."""
    if np.iscomplexobj(x):
        return np.concatenate([x.real, x.imag])
    return np.asarray(x, dtype=float)


@dataclass(frozen=True)
class SliceResult:
    """Sphere-slice outcome.  Iterates over the isolated points.

    ``points`` holds the numerically isolated tangency points; converged
    solutions whose Jacobian is too degenerate to separate (flat-region
    artifacts, underflowed far-out roots) are kept apart in ``soft_points``
    for diagnostics only.
    """

    points: list
    degenerate: bool
    f_range: tuple[float, float] | None = None
    soft_points: list = field(default_factory=list)

    def __iter__(self):
        return iter(self.points)

    def __len__(self) -> int:
        return len(self.points)

    def __getitem__(self, i):
        return self.points[i]


def _sharpness(J: np.ndarray) -> float:
    """Smallest-to-largest singular value ratio after row equilibration.

    Row scaling removes the huge row-norm spread the Lagrange systems pick up
    from exponential gradients; what remains measures genuine directional
    degeneracy at the root (zero exactly when a row vanishes outright).
    """
    if not np.all(np.isfinite(J)):
        return 0.0
    norms = np.linalg.norm(J, axis=1, keepdims=True)
    scale = np.where(norms > 0.0, norms, 1.0)
    sv = np.linalg.svd(J / scale, compute_uv=False)
    if sv[0] == 0.0:
        return 0.0
    return float(sv[-1] / sv[0])


class LagrangeFamily:
    """Square tangency systems on spheres, parameterized by the radius.

    Precompiles the gradient and second partials once; builds a SquareSystem
    per radius (and per slice in complex mode).
    """

    def __init__(self, f: Expression):
        self.f = f
        self.mode = f.mode
        self.n = len(f.variables)
        grad = [f.partial(i) for i in range(self.n)]
        self._grad = grad
        self._hess = [[g.partial(j) for j in range(self.n)] for g in grad]
        if self.mode == "complex":
            self.ambient_dim = 2 * self.n
            self.unknowns = 2 * self.n + 2
        else:
            self.ambient_dim = self.n
            self.unknowns = self.n + 1

    # -- raw evaluations (holomorphic partials in complex mode, no conjugation) --

    def _grad_at(self, x):
        return np.array([g.evaluate(x) for g in self._grad],
                        dtype=complex if self.mode == "complex" else float)

    def _hess_at(self, x):
        dt = complex if self.mode == "complex" else float
        return np.array([[h.evaluate(x) for h in row] for row in self._hess], dtype=dt)

    def split(self, vec: np.ndarray):
        """Unknown vector -> (coordinates, multiplier)."""
        n = self.n
        if self.mode == "complex":
            z = vec[:n] + 1j * vec[n:2 * n]
            lam = complex(vec[2 * n], vec[2 * n + 1])
            return z, lam
        return vec[:n].copy(), float(vec[n])

    def pack(self, x, lam) -> np.ndarray:
        if self.mode == "complex":
            x = np.asarray(x, dtype=complex)
            return np.concatenate([x.real, x.imag, [complex(lam).real, complex(lam).imag]])
        return np.concatenate([np.asarray(x, dtype=float), [float(lam)]])

    def lambda_guess(self, x) -> float | complex:
        """Least-squares multiplier for the tangency equation at x."""
        xv = np.asarray(x, dtype=complex if self.mode == "complex" else float)
        xn2 = float(np.vdot(xv, xv).real)
        if xn2 == 0.0:
            return 0.0
        g = self._grad_at(xv)
        target = np.conj(g) if self.mode == "complex" else g
        lam = np.vdot(xv, target) / xn2
        return complex(lam) if self.mode == "complex" else float(lam.real)

    # -- residual / jacobian without the slice row (used for projections) --

    def residual_rows(self, vec: np.ndarray, R: float) -> np.ndarray:
        x, lam = self.split(vec)
        g = self._grad_at(x)
        if self.mode == "complex":
            G = np.conj(g) - lam * x
            sphere = (float(np.vdot(x, x).real) - R * R) / (2.0 * R)
            return np.concatenate([G.real, G.imag, [sphere]])
        G = g - lam * x
        sphere = (float(x @ x) - R * R) / (2.0 * R)
        return np.concatenate([G, [sphere]])

    def jacobian_rows(self, vec: np.ndarray, R: float) -> np.ndarray:
        n = self.n
        x, lam = self.split(vec)
        H = self._hess_at(x)
        if self.mode == "complex":
            # d(conj g_i - lam z_i)/d(a_j, b_j, lam_r, lam_i) via Wirtinger calculus
            A = np.conj(H) - lam * np.eye(n, dtype=complex)
            B = -1j * np.conj(H) - 1j * lam * np.eye(n, dtype=complex)
            dlam_r = -x
            dlam_i = -1j * x
            top = np.zeros((2 * n, 2 * n + 2))
            top[:n, :n] = A.real
            top[:n, n:2 * n] = B.real
            top[:n, 2 * n] = dlam_r.real
            top[:n, 2 * n + 1] = dlam_i.real
            top[n:, :n] = A.imag
            top[n:, n:2 * n] = B.imag
            top[n:, 2 * n] = dlam_r.imag
            top[n:, 2 * n + 1] = dlam_i.imag
            sphere = np.concatenate([x.real / R, x.imag / R, [0.0, 0.0]])
            return np.vstack([top, sphere])
        J = np.zeros((n + 1, n + 1))
        J[:n, :n] = H - lam * np.eye(n)
        J[:n, n] = -x
        J[n, :n] = x / R
        return J

    def system(self, R: float, slice_: Slice | None = None) -> SquareSystem:
        if self.mode == "complex":
            if slice_ is None:
                raise ValueError("complex tangency systems need a hyperplane slice")
            u = slice_.normal
            c = slice_.c0 * R
            s = max(1.0, R)

            def residual(vec):
                rows = self.residual_rows(vec, R)
                cut = (float(u @ vec[: self.ambient_dim]) - c) / s
                return np.concatenate([rows, [cut]])

            def jacobian(vec):
                rows = self.jacobian_rows(vec, R)
                cut = np.zeros(self.unknowns)
                cut[: self.ambient_dim] = u / s
                return np.vstack([rows, cut])

            return SquareSystem(self.unknowns, residual, jacobian)

        return SquareSystem(
            self.unknowns,
            lambda vec: self.residual_rows(vec, R),
            lambda vec: self.jacobian_rows(vec, R),
        )

    # -- rich point construction --

    def point(self, vec: np.ndarray, R: float, tol_residual: float,
              slice_: Slice | None = None) -> TangencyPoint:
        x, lam = self.split(vec)
        system = self.system(R, slice_) if (self.mode == "complex") else self.system(R)
        res = float(np.linalg.norm(system.residual(vec)))
        sharp = bool(_sharpness(system.jacobian(vec)) > _SHARP_RATIO)
        g = self._grad_at(x)
        if self.mode == "complex":
            g = np.conj(g)
        gn = float(np.linalg.norm(g))
        if gn <= _GRAD_FLOOR_FACTOR * tol_residual * (1.0 + R):
            # Within noise of a critical point: the orthogonal-defect ratio is
            # 0/0 and means nothing, report exact tangency.
            tau = 0.0
        else:
            w = g - (np.vdot(x, g) / float(np.vdot(x, x).real)) * x
            tau = float(np.linalg.norm(w)) / gn
        fv = self.f.evaluate(x)
        return TangencyPoint(x=np.array(x), lam=lam, radius=R, f_value=fv,
                             residual=res, tau=tau, sharp=sharp, slice_=slice_)


def as_family(f) -> LagrangeFamily:
    """Accept an Expression or an already-built LagrangeFamily."""
    if isinstance(f, LagrangeFamily):
        return f
    if isinstance(f, Expression):
        return LagrangeFamily(f)
    raise TypeError("expected an Expression or LagrangeFamily")


def gauss_newton_project(residual, jacobian, start: np.ndarray, tol: float,
                         max_iter: int = 25) -> np.ndarray | None:
    """Minimal-norm Gauss-Newton onto {residual = 0}.

    Works for square and underdetermined systems alike; returns None when it
    fails to reach the tolerance.
    """
    x = np.asarray(start, dtype=float).copy()
    F = np.asarray(residual(x), dtype=float)
    fnorm = float(np.linalg.norm(F))
    for _ in range(max_iter):
        if not np.isfinite(fnorm):
            return None
        if fnorm <= tol:
            return x
        J = np.asarray(jacobian(x), dtype=float)
        if not np.all(np.isfinite(J)):
            return None
        d, *_ = np.linalg.lstsq(J, -F, rcond=1e-12)
        t = 1.0
        moved = False
        for _ in range(20):
            x2 = x + t * d
            F2 = np.asarray(residual(x2), dtype=float)
            f2 = float(np.linalg.norm(F2))
            if np.isfinite(f2) and f2 < fnorm:
                x, F, fnorm = x2, F2, f2
                moved = True
                break
            t *= 0.5
        if not moved:
            return x if fnorm <= tol else None
    return x if fnorm <= tol else None


def dedup_tangency_points(points: list, scale: float = 1e-5) -> list:
    """Merge coincident tangency points, preferring smaller residuals."""
    kept: list[TangencyPoint] = []
    for p in sorted(points, key=lambda p: p.residual):
        e = p.embedded()
        dup = False
        for k in kept:
            if np.linalg.norm(e - k.embedded()) <= scale * (1.0 + np.linalg.norm(k.embedded())):
                dup = True
                break
        if not dup:
            kept.append(p)
    kept.sort(key=lambda p: tuple(p.embedded()))
    return kept


def _slice_starts(family: LagrangeFamily, rng: np.random.Generator, count: int,
                  R: float, slice_: Slice | None) -> np.ndarray:
    """Start vectors on the sphere (projected toward the slice when given),
    with the least-squares multiplier attached."""
    d = family.ambient_dim
    g = rng.normal(size=(count, d))
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    pts = R * g / norms
    if slice_ is not None:
        c = slice_.c0 * R
        u = slice_.normal
        for _ in range(3):
            pts = pts - np.outer(pts @ u - c, u)
            norms = np.linalg.norm(pts, axis=1, keepdims=True)
            norms[norms == 0.0] = 1.0
            pts = R * pts / norms
    starts = np.zeros((count, family.unknowns))
    for i in range(count):
        if family.mode == "complex":
            z = pts[i, : family.n] + 1j * pts[i, family.n:]
            lam = family.lambda_guess(z)
            starts[i] = family.pack(z, lam)
        else:
            starts[i] = family.pack(pts[i], family.lambda_guess(pts[i]))
    return starts


def _solve_slice(family: LagrangeFamily, R: float, slice_: Slice | None,
                 starts: np.ndarray, tol_residual: float,
                 threads: int = 1) -> list[Root]:
    system = family.system(R, slice_)
    region = SphereSurface(R, family.ambient_dim)
    return solve_from_starts(system, starts, tol_residual, max_iter=60,
                             region=region, threads=threads)


def sphere_slice(f, R: float, n_starts: int, seed: int = 42,
                 tol_residual: float = 1e-9, tol_tau: float = 1e-7,
                 k_slices: int = 8, probe_count: int = 64,
                 threads: int = 1) -> SliceResult:
    """All isolated tangency points found on the sphere of radius R.

    Real mode with one variable is exact: both rays meet the sphere at +/-R
    and every nonzero point satisfies the tangency condition.  Real mode with
    two or more variables first probes random sphere points; when at least
    90 percent are already tangent the slice is degenerate (the whole sphere
    is tangency) and only the value range is reported.  Complex mode runs one
    multistart per hyperplane slice.  Converged solutions that fail the
    isolation (sharpness) test are reported separately as soft points.
    """
    family = as_family(f)
    rng = np.random.default_rng(seed)
    if family.mode == "real" and family.n == 1:
        pts = []
        for sgn in (-1.0, 1.0):
            x = np.array([sgn * R])
            lam = family.lambda_guess(x)
            vec = family.pack(x, lam)
            if np.all(np.isfinite(vec)) and np.isfinite(
                    float(np.linalg.norm(family.residual_rows(vec, R)))):
                pts.append(family.point(vec, R, tol_residual))
        return _split_soft(pts, tol_tau)

    if family.mode == "real" and family.n >= 2:
        g = rng.normal(size=(probe_count, family.n))
        norms = np.linalg.norm(g, axis=1, keepdims=True)
        norms[norms == 0.0] = 1.0
        probe = R * g / norms
        taus = np.array([tangency_residual(family.f, p) for p in probe])
        if np.mean(taus <= tol_tau) >= 0.9:
            vals = np.array([family.f.evaluate(p) for p in probe], dtype=float)
            finite = vals[np.isfinite(vals)]
            rng_f = (float(np.min(finite)), float(np.max(finite))) if finite.size else None
            return SliceResult(points=[], degenerate=True, f_range=rng_f)
        starts = _slice_starts(family, rng, n_starts, R, None)
        roots = _solve_slice(family, R, None, starts, tol_residual, threads)
        pts = [family.point(r.point, R, tol_residual) for r in roots]
        return _split_soft(dedup_tangency_points(pts), tol_tau)

    # complex mode: several random affine slices, offsets scale with R
    per_slice = max(32, int(np.ceil(n_starts / max(k_slices, 1))))
    pts = []
    for _ in range(k_slices):
        u = rng.normal(size=family.ambient_dim)
        u /= np.linalg.norm(u)
        slice_ = Slice(normal=u, c0=float(rng.uniform(-0.3, 0.3)))
        starts = _slice_starts(family, rng, per_slice, R, slice_)
        roots = _solve_slice(family, R, slice_, starts, tol_residual, threads)
        pts.extend(family.point(r.point, R, tol_residual, slice_) for r in roots)
    return _split_soft(dedup_tangency_points(pts), tol_tau)


def _split_soft(pts: list, tol_tau: float) -> SliceResult:
    """Partition converged points into isolated (kept) and soft (diagnostic).

    Points whose orthogonal defect genuinely exceeds the tolerance are
    discarded outright; they are borderline-gradient artifacts that fail the
    tangency membership contract.
    """
    ok = [p for p in pts if p.tau <= tol_tau]
    sharp = [p for p in ok if p.sharp]
    soft = [p for p in ok if not p.sharp]
    return SliceResult(points=sharp, degenerate=False, soft_points=soft)


def _project_to_variety(family: LagrangeFamily, m: np.ndarray, R: float,
                        tol: float) -> np.ndarray | None:
    """Project an ambient sphere point onto the tangency variety on that
    sphere (slice row omitted, minimal-norm steps).  Returns the embedded
    coordinates of the projected point or None."""
    if family.mode == "complex":
        z = m[: family.n] + 1j * m[family.n:]
        start = family.pack(z, family.lambda_guess(z))
    else:
        start = family.pack(m, family.lambda_guess(m))
    res = gauss_newton_project(lambda v: family.residual_rows(v, R),
                               lambda v: family.jacobian_rows(v, R),
                               start, tol)
    if res is None:
        return None
    x, _ = family.split(res)
    return embed(np.asarray(x))


def _arc_connected(family: LagrangeFamily, a: np.ndarray, b: np.ndarray,
                   R: float, tol: float, samples: int) -> bool:
    """Sampled great-circle connectivity between two embedded slice points.

    Interior points along the spherical path from a to b are projected back
    onto the tangency variety; the pair is connected when every projection
    exists and stays inside a tube around the path.  Isolated regular points
    fail immediately (the projection snaps to a far-away root)."""
    gap = float(np.linalg.norm(a - b))
    if gap <= 1e-4 * (1.0 + R):
        return True
    tube = 0.35 * gap
    for i in range(1, samples + 1):
        t = i / (samples + 1)
        m = (1.0 - t) * a + t * b
        mn = float(np.linalg.norm(m))
        if mn < 1e-12 * R:
            return False
        m = m * (R / mn)
        proj = _project_to_variety(family, m, R, tol)
        if proj is None:
            return False
        if float(np.linalg.norm(proj - m)) > tube:
            return False
    return True


def slice_components(points: list, f, R: float, tol_tau: float = 1e-7,
                     tol_residual: float = 1e-9,
                     samples_per_edge: int = 16) -> int:
    """Number of connected components the slice points witness.

    Real slices of a bivariate function are generically finite point sets, so
    the count is the number of points.  In complex mode the slice is a curve
    and points from different hyperplane cuts can lie on one component, so
    points are joined when the sampled great-circle path between them stays
    on the variety.
    """
    family = as_family(f)
    k = len(points)
    if k <= 1:
        return k
    if family.mode == "real":
        return k
    parent = list(range(k))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    embeds = [p.embedded() for p in points]
    proj_tol = max(tol_residual * 1e3, 1e-8)
    for i in range(k):
        for j in range(i + 1, k):
            if find(i) == find(j):
                continue
            if _arc_connected(family, embeds[i], embeds[j], R, proj_tol,
                              samples_per_edge):
                parent[find(i)] = find(j)
    return len({find(i) for i in range(k)})


def lagrange_system(f: Expression, R: float, slice_: Slice | None = None) -> SquareSystem:
    """One-off square tangency system at radius R."""
    return LagrangeFamily(f).system(R, slice_)
