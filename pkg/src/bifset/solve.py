"""Damped Newton solving, seeded multistart, and pseudo-arclength continuation.

Everything here works on plain real systems F: R^m -> R^m given as a pair of
callables (residual, jacobian).  Complex problems are real-ified before they
reach this module.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_ARMIJO = 1e-4
_MAX_HALVINGS = 30
_ESCAPE_NORM = 1e10
_REGULARIZATION = 1e-10
_STEP_BLOWUP = 1e3


@dataclass(frozen=True)
class SquareSystem:
    """Square nonlinear system with an explicit Jacobian."""

    dimension: int
    residual: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class Root:
    point: np.ndarray
    residual_norm: float
    converged: bool
    iterations: int
    singular_steps: int = 0


def _solve_step(J: np.ndarray, F: np.ndarray, x_norm: float) -> tuple[np.ndarray, bool]:
    """Newton step d with J d = -F.  Returns (d, used_fallback).

    Singular or badly scaled Jacobians first get a small diagonal shift; if
    the shifted step is still enormous the minimal-norm least-squares step is
    used instead, which is what rank-deficient root curves need.
    """
    try:
        d = np.linalg.solve(J, -F)
        if np.all(np.isfinite(d)) and np.linalg.norm(d) <= _STEP_BLOWUP * (1.0 + x_norm):
            return d, False
    except np.linalg.LinAlgError:
        pass
    try:
        J2 = J + _REGULARIZATION * np.eye(J.shape[0])
        d = np.linalg.solve(J2, -F)
        if np.all(np.isfinite(d)) and np.linalg.norm(d) <= _STEP_BLOWUP * (1.0 + x_norm):
            return d, True
    except np.linalg.LinAlgError:
        pass
    d, *_ = np.linalg.lstsq(J, -F, rcond=1e-12)
    return d, True


def newton_solve(system: SquareSystem, start: Sequence[float],
                 tol_residual: float = 1e-9, max_iter: int = 50) -> Root:
    """Damped Newton with Armijo backtracking.

    Convergence means the final residual norm is at most ``tol_residual``.
    The method bails out early when the line search stalls or the iterate
    escapes to a huge norm, reporting a non-converged Root.
    """
    x = np.asarray(start, dtype=float).copy()
    F = np.asarray(system.residual(x), dtype=float)
    fnorm = float(np.linalg.norm(F))
    singular = 0
    best_x, best_norm = x.copy(), fnorm
    for it in range(max_iter):
        if not np.isfinite(fnorm):
            return Root(best_x, best_norm, False, it, singular)
        if fnorm <= tol_residual:
            return Root(x, fnorm, True, it, singular)
        J = np.asarray(system.jacobian(x), dtype=float)
        if not np.all(np.isfinite(J)):
            return Root(best_x, best_norm, False, it, singular)
        d, fell_back = _solve_step(J, F, float(np.linalg.norm(x)))
        if fell_back:
            singular += 1
        if not np.all(np.isfinite(d)):
            return Root(best_x, best_norm, False, it, singular)
        t = 1.0
        accepted = False
        for _ in range(_MAX_HALVINGS):
            x2 = x + t * d
            F2 = np.asarray(system.residual(x2), dtype=float)
            f2 = float(np.linalg.norm(F2))
            if np.isfinite(f2) and f2 < (1.0 - _ARMIJO * t) * fnorm:
                x, F, fnorm = x2, F2, f2
                accepted = True
                break
            t *= 0.5
        if not accepted:
            return Root(best_x, best_norm, fnorm <= tol_residual, it + 1, singular)
        if fnorm < best_norm:
            best_x, best_norm = x.copy(), fnorm
        if np.linalg.norm(x) > _ESCAPE_NORM:
            return Root(x, fnorm, False, it + 1, singular)
    return Root(x, fnorm, fnorm <= tol_residual, max_iter, singular)


def polish_root(system: SquareSystem, root: Root, steps: int = 3) -> Root:
    """A few undamped Newton steps to push the residual toward machine floor.

    Keeps the best iterate seen, so polishing can only improve the residual.
    """
    if not root.converged:
        return root
    x = root.point.copy()
    best_x, best_norm = x.copy(), root.residual_norm
    for _ in range(steps):
        F = np.asarray(system.residual(x), dtype=float)
        J = np.asarray(system.jacobian(x), dtype=float)
        if not (np.all(np.isfinite(F)) and np.all(np.isfinite(J))):
            break
        d, _ = _solve_step(J, F, float(np.linalg.norm(x)))
        x = x + d
        fnorm = float(np.linalg.norm(np.asarray(system.residual(x), dtype=float)))
        if np.isfinite(fnorm) and fnorm < best_norm:
            best_x, best_norm = x.copy(), fnorm
        else:
            break
    return Root(best_x, best_norm, True, root.iterations, root.singular_steps)


# ---- Start regions ----

@dataclass(frozen=True)
class Box:
    """Axis-aligned box centered at the origin, half-width per coordinate."""

    half_widths: tuple[float, ...]

    @classmethod
    def cube(cls, half_width: float, dim: int) -> "Box":
        return cls(tuple(float(half_width) for _ in range(dim)))

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        h = np.asarray(self.half_widths)
        return rng.uniform(-h, h, size=(count, len(h)))

    def contains(self, point: np.ndarray, slack: float = 1e-6) -> bool:
        h = np.asarray(self.half_widths)
        return bool(np.all(np.abs(point[: len(h)]) <= h * (1.0 + slack) + slack))


@dataclass(frozen=True)
class SphereSurface:
    """Sphere of given radius about the origin in the leading coordinates.

    Extra trailing coordinates (multipliers and the like) are sampled from a
    modest interval so Newton has somewhere to start.
    """

    radius: float
    dim: int
    extra: int = 0
    extra_scale: float = 1.0

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        g = rng.normal(size=(count, self.dim))
        norms = np.linalg.norm(g, axis=1, keepdims=True)
        norms[norms == 0.0] = 1.0
        pts = self.radius * g / norms
        if self.extra:
            tail = rng.uniform(-self.extra_scale, self.extra_scale,
                               size=(count, self.extra))
            pts = np.hstack([pts, tail])
        return pts

    def contains(self, point: np.ndarray, slack: float = 1e-6) -> bool:
        r = float(np.linalg.norm(point[: self.dim]))
        return abs(r - self.radius) <= self.radius * max(slack, 1e-4) + slack


def dedup_roots(roots: list[Root], radius_scale: float = 1e-5) -> list[Root]:
    """Merge near-duplicate roots, keeping the smaller residual.

    Two roots are the same when their distance is below
    radius_scale * (1 + |point|).
    """
    kept: list[Root] = []
    for r in sorted(roots, key=lambda r: r.residual_norm):
        dup = False
        for k in kept:
            lim = radius_scale * (1.0 + float(np.linalg.norm(k.point)))
            if np.linalg.norm(r.point - k.point) <= lim:
                dup = True
                break
        if not dup:
            kept.append(r)
    kept.sort(key=lambda r: tuple(r.point))
    return kept


def solve_from_starts(system: SquareSystem, starts: np.ndarray,
                      tol_residual: float, max_iter: int = 50, region=None,
                      threads: int = 1, dedup_radius: float = 1e-5) -> list[Root]:
    """Solve from every start, keep converged roots inside ``region``, dedup.

    The containment filter matters: flat tails and unbounded root curves
    produce tolerance-level pseudo-roots far outside the search region, and
    keeping them would pollute the value set.  Results are deterministic for
    any thread count because the merge order is fixed by the start order.
    """
    def run(start):
        r = newton_solve(system, start, tol_residual=tol_residual,
                         max_iter=max_iter)
        if r.converged:
            r = polish_root(system, r)
        return r

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, starts))
    else:
        results = [run(s) for s in starts]
    roots = [r for r in results if r.converged]
    if region is not None:
        roots = [r for r in roots if region.contains(r.point)]
    return dedup_roots(roots, radius_scale=dedup_radius)


def multistart_solve(system: SquareSystem, region, n_starts: int, seed: int,
                     tol_residual: float = 1e-9, max_iter: int = 50,
                     threads: int = 1, dedup_radius: float = 1e-5) -> list[Root]:
    rng = np.random.default_rng(seed)
    starts = region.sample(rng, n_starts)
    return solve_from_starts(system, starts, tol_residual, max_iter=max_iter,
                             region=region, threads=threads,
                             dedup_radius=dedup_radius)


# ---- Parameter continuation ----

@dataclass
class ContinuationPath:
    """Trace of a solution branch x(R) of F(x; R) = 0.

    ``steps`` holds accepted (R, Root) pairs in trace order.
    """

    steps: list[tuple[float, Root]] = field(default_factory=list)
    reached_target: bool = False
    lost_at: float | None = None

    @property
    def parameters(self) -> list[float]:
        return [r for r, _ in self.steps]

    @property
    def points(self) -> list[np.ndarray]:
        return [root.point for _, root in self.steps]

    def __len__(self) -> int:
        return len(self.steps)


def continue_path(make_system: Callable[[float], SquareSystem], start: np.ndarray,
                  r_start: float, r_target: float, tol_residual: float = 1e-9,
                  corrector_iters: int = 8,
                  record: Callable[[float, np.ndarray], None] | None = None,
                  stop: Callable[[float, np.ndarray], bool] | None = None,
                  ) -> ContinuationPath:
    """Trace x(R) from r_start to r_target with a secant predictor and Newton
    corrector.  The step starts at a tenth of the starting radius, halves on
    corrector failure, and grows by half after three consecutive accepts.  The
    path is declared lost when the step underflows.  ``stop`` can end the
    trace early (divergence detection); the path then reports lost_at at that
    radius.
    """
    path = ContinuationPath()
    x = np.asarray(start, dtype=float).copy()
    r = float(r_start)
    root = newton_solve(make_system(r), x, tol_residual=tol_residual,
                        max_iter=corrector_iters * 4)
    if not root.converged:
        path.lost_at = r
        return path
    x = root.point
    path.steps.append((r, root))
    if record is not None:
        record(r, x)
    if stop is not None and stop(r, x):
        path.lost_at = r
        return path
    if r_target == r_start:
        path.reached_target = True
        return path

    direction = 1.0 if r_target > r_start else -1.0
    dr = 0.1 * max(abs(r_start), 1e-6) * direction
    prev_x, prev_r = None, None
    streak = 0
    while True:
        remaining = r_target - r
        if direction * remaining <= 0.0:
            path.reached_target = True
            return path
        if abs(dr) > abs(remaining):
            dr = remaining
        r_next = r + dr
        if prev_x is not None and abs(r - prev_r) > 0.0:
            guess = x + (x - prev_x) * (dr / (r - prev_r))
        else:
            guess = x.copy()
        root = newton_solve(make_system(r_next), guess,
                            tol_residual=tol_residual,
                            max_iter=corrector_iters)
        ok = root.converged and np.linalg.norm(root.point - x) <= 10.0 * (
            np.linalg.norm(x) + abs(dr) + 1.0)
        if ok:
            prev_x, prev_r = x, r
            x, r = root.point, r_next
            path.steps.append((r, root))
            if record is not None:
                record(r, x)
            if stop is not None and stop(r, x):
                path.lost_at = r
                return path
            streak += 1
            if streak % 3 == 0:
                dr *= 1.5
        else:
            streak = 0
            dr *= 0.5
            if abs(dr) < 1e-10 * max(abs(r), 1.0):
                path.lost_at = r
                return path
