"""Explicit trivialization of f over an interval of values, and fiber
topology checks.

The transport field v is built so that f increases along v at unit speed:
inside a ball the normalized gradient field grad/|grad|^2 is used, far out
the gradient component orthogonal to the position (normalized the same way)
keeps the flow on spheres, and a smoothstep blends the two in an annulus.
Both ingredients satisfy <grad, v> = 1 exactly, so any blend does too, and
the level along a trajectory is c0 + t up to pure integration error.

If the interval avoids the bifurcation set this transport realizes a
trivialization: fibers flow to fibers.  Failures are reported as verdicts,
never exceptions, because a failed transport is a finding about f.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CriticalPointError, FieldSingularError, UnsupportedDimensionError
from .expr import Expression

# Cash-Karp embedded Runge-Kutta pair (orders 5 and 4)
_CK_A = (
    (),
    (1.0 / 5.0,),
    (3.0 / 40.0, 9.0 / 40.0),
    (3.0 / 10.0, -9.0 / 10.0, 6.0 / 5.0),
    (-11.0 / 54.0, 5.0 / 2.0, -70.0 / 27.0, 35.0 / 27.0),
    (1631.0 / 55296.0, 175.0 / 512.0, 575.0 / 13824.0, 44275.0 / 110592.0,
     253.0 / 4096.0),
)
_CK_B5 = (37.0 / 378.0, 0.0, 250.0 / 621.0, 125.0 / 594.0, 0.0, 512.0 / 1771.0)
_CK_B4 = (2825.0 / 27648.0, 0.0, 18575.0 / 48384.0, 13525.0 / 55296.0,
          277.0 / 14336.0, 1.0 / 4.0)


def _smoothstep(u: float) -> float:
    u = min(max(u, 0.0), 1.0)
    return u * u * (3.0 - 2.0 * u)


@dataclass
class TrivializationField:
    f: Expression
    r_inner: float
    r_outer: float
    tol_field: float = 1e-9

    def __post_init__(self):
        if self.f.mode != "real":
            raise UnsupportedDimensionError("transport fields are real-mode only")
        if not (0.0 < self.r_inner < self.r_outer):
            raise ValueError("need 0 < r_inner < r_outer")
        self._grad = self.f.gradient()

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        r = float(np.linalg.norm(x))
        u = (r - self.r_inner) / (self.r_outer - self.r_inner)
        s = _smoothstep(u)
        g = self._grad.evaluate(x)
        if not np.all(np.isfinite(g)):
            raise FieldSingularError(f"gradient not finite at |x|={r:.3g}")
        v = np.zeros_like(x)
        if s < 1.0:
            gn2 = float(g @ g)
            if gn2 <= self.tol_field ** 2:
                raise CriticalPointError(
                    f"gradient vanishes at |x|={r:.3g}, level {self.f.evaluate(x):.6g}")
            v += (1.0 - s) * g / gn2
        if s > 0.0:
            w = g - (float(g @ x) / float(x @ x)) * x
            wn2 = float(w @ w)
            if wn2 <= self.tol_field ** 2:
                raise FieldSingularError(
                    f"position-orthogonal gradient vanishes at |x|={r:.3g} "
                    "(tangency point)")
            v += s * w / wn2
        return v


def trivialization_field(f: Expression, samples=None, r_inner: float | None = None,
                         r_outer: float | None = None,
                         tol_field: float = 1e-9) -> TrivializationField:
    """Build the blended transport field.  Without explicit radii the annulus
    is placed just beyond the given sample points."""
    if r_outer is None:
        reach = 0.0
        if samples is not None:
            reach = max((float(np.linalg.norm(s)) for s in samples), default=0.0)
        r_outer = 1.25 * (reach + 1.0)
    if r_inner is None:
        r_inner = 0.8 * r_outer
    return TrivializationField(f=f, r_inner=float(r_inner), r_outer=float(r_outer),
                               tol_field=tol_field)


@dataclass
class TransportResult:
    verdict: str  # "success" | "field-singular" | "integration-failure"
    point: np.ndarray
    t_reached: float
    t_target: float
    level_start: float
    max_level_error: float
    steps: int
    message: str = ""
    trajectory: list | None = None

    @property
    def success(self) -> bool:
        return self.verdict == "success"


def transport_fiber(f: Expression, start, t_target: float,
                    field_: TrivializationField | None = None,
                    tol_transport: float = 1e-6, rk_tol: float = 1e-8,
                    max_steps: int = 100000, record: bool = False) -> TransportResult:
    """Flow a fiber point so its level moves by t_target.

    Adaptive Cash-Karp integration; a step is rejected when the embedded
    error estimate or the level drift |f(x) - (c0 + t)| exceeds budget.
    """
    x = np.asarray(start, dtype=float).copy()
    if field_ is None:
        field_ = trivialization_field(f, samples=[x])
    c0 = float(f.evaluate(x))
    traj = [(0.0, x.copy())] if record else None
    if t_target == 0.0:
        return TransportResult("success", x, 0.0, 0.0, c0, 0.0, 0, trajectory=traj)
    budget = 0.5 * tol_transport
    direction = 1.0 if t_target > 0.0 else -1.0
    h = direction * min(0.05 * abs(t_target), 0.1)
    t = 0.0
    steps = 0
    max_err = 0.0
    k = [None] * 6
    while steps < max_steps:
        remaining = t_target - t
        if direction * remaining <= 0.0:
            break
        if abs(h) > abs(remaining):
            h = remaining
        try:
            k[0] = field_(x)
            for i in range(1, 6):
                xi = x + h * sum(a * k[j] for j, a in enumerate(_CK_A[i]))
                k[i] = field_(xi)
        except FieldSingularError as e:
            return TransportResult("field-singular", x, t, t_target, c0, max_err,
                                   steps, message=str(e), trajectory=traj)
        y5 = x + h * sum(b * ki for b, ki in zip(_CK_B5, k))
        y4 = x + h * sum(b * ki for b, ki in zip(_CK_B4, k))
        steps += 1
        err = float(np.linalg.norm(y5 - y4))
        tol_step = rk_tol * (1.0 + float(np.linalg.norm(x)))
        drift = abs(float(f.evaluate(y5)) - (c0 + t + h))
        ok = np.all(np.isfinite(y5)) and err <= tol_step and drift <= budget
        if ok:
            x = y5
            t += h
            max_err = max(max_err, drift)
            if record:
                traj.append((t, x.copy()))
            if err > 0.0:
                h *= min(5.0, max(0.2, 0.9 * (tol_step / err) ** 0.2))
            else:
                h *= 5.0
        else:
            if err > tol_step and err > 0.0 and np.isfinite(err):
                h *= max(0.2, 0.9 * (tol_step / err) ** 0.25)
            else:
                h *= 0.5
        if abs(h) < 1e-14 * max(abs(t_target), 1.0):
            return TransportResult("integration-failure", x, t, t_target, c0,
                                   max_err, steps, message="step size underflow",
                                   trajectory=traj)
    if steps >= max_steps:
        return TransportResult("integration-failure", x, t, t_target, c0, max_err,
                               steps, message="step budget exhausted",
                               trajectory=traj)
    final_err = abs(float(f.evaluate(x)) - (c0 + t_target))
    max_err = max(max_err, final_err)
    if final_err > tol_transport:
        return TransportResult("integration-failure", x, t, t_target, c0, max_err,
                               steps, message="final level error above tolerance",
                               trajectory=traj)
    return TransportResult("success", x, t, t_target, c0, max_err, steps,
                           trajectory=traj)


def sample_fiber(f: Expression, level: float, n_samples: int = 20,
                 ball_radius: float = 5.0, seed: int = 42,
                 tol: float = 1e-10) -> list[np.ndarray]:
    """Points on {f = level} found by projecting random ball points along the
    gradient (1-D Newton in the level)."""
    n = len(f.variables)
    grad = f.gradient()
    rng = np.random.default_rng(seed)
    found: list[np.ndarray] = []
    for _ in range(20 * n_samples):
        if len(found) >= n_samples:
            break
        x = rng.uniform(-ball_radius, ball_radius, size=n)
        ok = False
        for _ in range(60):
            fx = float(f.evaluate(x))
            diff = fx - level
            if not np.isfinite(diff):
                break
            if abs(diff) <= tol * max(1.0, abs(level)):
                ok = True
                break
            g = grad.evaluate(x)
            gn2 = float(g @ g)
            if not np.isfinite(gn2) or gn2 <= 1e-18:
                break
            x = x - diff * g / gn2
        if ok and float(np.linalg.norm(x)) <= 4.0 * ball_radius:
            found.append(x)
    return found


@dataclass
class VerifyReport:
    verdict: str  # "success" | "refused" | "transport-failure" | "no-fiber"
    interval: tuple[float, float]
    refusals: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    n_samples: int = 0
    max_level_error: float = 0.0
    messages: list = field(default_factory=list)

    @property
    def success(self) -> bool:
        return self.verdict == "success"


def verify_interval(f: Expression, a: float, b: float, clusters=(),
                    n_samples: int = 20, ball_radius: float = 5.0, seed: int = 42,
                    tol_transport: float = 1e-6, rk_tol: float = 1e-8,
                    tol_value: float = 1e-5) -> VerifyReport:
    """Attempt to certify that f is a trivial fibration over [a, b].

    Refuses outright when the interval contains a critical-value cluster:
    transport across a critical value cannot succeed and the correct report
    is the obstruction, not an integration failure.  A cluster of purely
    asymptotic provenance only earns a note; transport often still works
    since nothing singular happens at finite radius.
    """
    lo, hi = (float(a), float(b)) if a <= b else (float(b), float(a))
    report = VerifyReport(verdict="success", interval=(lo, hi))
    for c in clusters:
        v = complex(c.value)
        if abs(v.imag) > tol_value:
            continue
        inside = lo - tol_value <= v.real <= hi + tol_value
        if not inside:
            continue
        if "critical" in c.provenance:
            report.refusals.append(v.real)
        else:
            report.notes.append(
                f"interval contains asymptotic value candidate {v.real:.6g}; "
                "transport at finite radius may still succeed")
    if report.refusals:
        report.verdict = "refused"
        return report

    mid = 0.5 * (lo + hi)
    samples = sample_fiber(f, mid, n_samples=n_samples, ball_radius=ball_radius,
                           seed=seed)
    report.n_samples = len(samples)
    if not samples:
        report.verdict = "no-fiber"
        report.messages.append(
            f"no points of the level set f = {mid:.6g} found in the sampling ball")
        return report

    field_ = trivialization_field(f, samples=samples)
    worst = 0.0
    for x in samples:
        for target in (hi - mid, lo - mid):
            if target == 0.0:
                continue
            res = transport_fiber(f, x, target, field_=field_,
                                  tol_transport=tol_transport, rk_tol=rk_tol)
            worst = max(worst, res.max_level_error)
            if not res.success:
                report.verdict = "transport-failure"
                report.messages.append(
                    f"transport from level {mid:.6g} toward {mid + target:.6g} "
                    f"failed: {res.verdict} ({res.message})")
                report.max_level_error = worst
                return report
    report.max_level_error = worst
    return report


# ---- fiber component counting ----

_MS_SEGMENTS = {
    1: (("L", "B"),),
    2: (("B", "R"),),
    3: (("L", "R"),),
    4: (("R", "T"),),
    6: (("B", "T"),),
    7: (("L", "T"),),
    8: (("L", "T"),),
    9: (("B", "T"),),
    11: (("R", "T"),),
    12: (("L", "R"),),
    13: (("B", "R"),),
    14: (("L", "B"),),
}


def _edge_key(side: str, i: int, j: int):
    if side == "B":
        return ("h", i, j)
    if side == "T":
        return ("h", i, j + 1)
    if side == "L":
        return ("v", i, j)
    return ("v", i + 1, j)  # "R"


class _UnionFind:
    def __init__(self):
        self.parent: dict = {}

    def find(self, a):
        p = self.parent.setdefault(a, a)
        if p != a:
            p = self.parent[a] = self.find(p)
        return p

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[ra] = rb


def _components_2d(values: np.ndarray) -> int:
    """Count contour components of {values = 0} with marching squares.

    Vertices live on grid edges, so two separate curves passing through
    adjacent cells never get glued; saddle cells are disambiguated by the
    cell-center sign.
    """
    v = values.copy()
    v[v == 0.0] = 1e-300
    v[np.isnan(v)] = np.inf
    pos = v > 0.0
    uf = _UnionFind()
    seen = False
    nx, ny = v.shape
    for i in range(nx - 1):
        for j in range(ny - 1):
            c0 = pos[i, j]
            c1 = pos[i + 1, j]
            c2 = pos[i + 1, j + 1]
            c3 = pos[i, j + 1]
            case = int(c0) | int(c1) << 1 | int(c2) << 2 | int(c3) << 3
            if case in (0, 15):
                continue
            if case in (5, 10):
                center = v[i, j] + v[i + 1, j] + v[i + 1, j + 1] + v[i, j + 1]
                if case == 5:
                    segs = (("B", "R"), ("L", "T")) if center > 0.0 \
                        else (("L", "B"), ("R", "T"))
                else:
                    segs = (("L", "B"), ("R", "T")) if center > 0.0 \
                        else (("B", "R"), ("L", "T"))
            else:
                segs = _MS_SEGMENTS[case]
            for s0, s1 in segs:
                uf.union(_edge_key(s0, i, j), _edge_key(s1, i, j))
                seen = True
    if not seen:
        return 0
    roots = {uf.find(k) for k in list(uf.parent)}
    return len(roots)


def _components_3d(values: np.ndarray, level: float) -> int:
    from skimage import measure
    try:
        _verts, faces, *_ = measure.marching_cubes(values, level=level)
    except (ValueError, RuntimeError):
        return 0
    uf = _UnionFind()
    for tri in faces:
        a, b, c = int(tri[0]), int(tri[1]), int(tri[2])
        uf.union(a, b)
        uf.union(b, c)
    roots = {uf.find(k) for k in list(uf.parent)}
    return len(roots)


def fiber_components(f: Expression, c: float, box_half_width: float = 20.0,
                     grid_n: int = 512) -> int:
    """Number of connected components of {f = c} inside the centered box.

    One variable: bracketed roots on a line grid.  Two variables: marching
    squares with edge-based gluing.  Three variables: marching cubes.
    """
    if f.mode != "real":
        raise UnsupportedDimensionError("fiber counting is real-mode only")
    n = len(f.variables)
    if n > 3:
        raise UnsupportedDimensionError(
            "fiber counting supports at most 3 variables")
    if n == 1:
        xs = np.linspace(-box_half_width, box_half_width, int(grid_n) + 1)
        vals = f.evaluate_grid([xs]) - c
        vals[vals == 0.0] = 1e-300
        vals[np.isnan(vals)] = np.inf
        sign = np.sign(vals)
        return int(np.sum(sign[:-1] * sign[1:] < 0))
    if n == 2:
        cells = int(grid_n)
        xs = np.linspace(-box_half_width, box_half_width, cells + 1)
        mesh = np.meshgrid(xs, xs, indexing="ij")
        vals = f.evaluate_grid(mesh) - c
        return _components_2d(np.asarray(vals, dtype=float))
    cells = min(int(grid_n), 128)
    xs = np.linspace(-box_half_width, box_half_width, cells + 1)
    mesh = np.meshgrid(xs, xs, xs, indexing="ij")
    vals = np.asarray(f.evaluate_grid(mesh), dtype=float) - c
    vals[np.isnan(vals)] = np.inf
    finite = vals[np.isfinite(vals)]
    if finite.size == 0 or finite.min() > 0.0 or finite.max() < 0.0:
        return 0
    big = np.nanmax(np.abs(finite)) * 2.0 + 1.0
    vals[~np.isfinite(vals)] = np.sign(vals[~np.isfinite(vals)]) * big
    return _components_3d(vals, 0.0)
