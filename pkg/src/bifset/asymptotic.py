"""Branches of the tangency variety traced to infinity along a geometric
radius ladder, and the asymptotic values they carry.

A branch is followed from rung to rung by parameter continuation in the
radius.  Fresh multistarts at every rung rediscover points the continuation
lost and detect branches that only become visible far out.  The function
values along each branch are accelerated with Aitken's delta-squared rule and
classified as finite (an asymptotic value), divergent, or undetermined.

Oscillating bounded branches (possible only for non-definable inputs) get a
second layer: every Aitken window produces a pseudo-limit, and when several
distinct pseudo-limits accumulate they are reported as explicitly unstable
clusters together with an instability flag.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .critical import PROV_ASYMPTOTIC, ValueCluster, cluster_values
from .solve import continue_path
from .tangency import (LagrangeFamily, SliceResult, TangencyPoint, as_family,
                       dedup_tangency_points, slice_components, sphere_slice)

_MATCH_SCALE = 1e-4


@dataclass(frozen=True)
class RadiusLadder:
    """Geometric radius schedule r0, r0*rho, ..., r0*rho^rungs."""

    r0: float = 5.0
    rho: float = 2.0
    rungs: int = 10

    def __post_init__(self):
        if self.r0 <= 0.0:
            raise ValueError("ladder needs r0 > 0")
        if not (1.0 < self.rho <= 10.0):
            raise ValueError("ladder growth factor must be in (1, 10]")
        if self.rungs < 4:
            raise ValueError("ladder needs at least 4 rungs")

    def radii(self) -> list[float]:
        return [self.r0 * self.rho ** k for k in range(self.rungs + 1)]

    @property
    def top_radius(self) -> float:
        return self.r0 * self.rho ** self.rungs


@dataclass(frozen=True)
class Classification:
    kind: str  # "finite" | "divergent" | "undetermined"
    limit: float | complex | None = None
    estimates: tuple = ()
    ratios: tuple = ()


@dataclass
class Branch:
    id: int
    samples: list[tuple[float, TangencyPoint]] = field(default_factory=list)
    status: str = "live"  # live | done | divergent | lost | merged
    classification: Classification | None = None

    @property
    def values(self) -> list:
        return [pt.f_value for _, pt in self.samples]

    @property
    def last_point(self) -> TangencyPoint:
        return self.samples[-1][1]

    @property
    def first_radius(self) -> float:
        return self.samples[0][0]


def aitken(values) -> list:
    """Delta-squared accelerated sequence.  A window whose second difference
    collapses falls back to its last raw value."""
    v = list(values)
    out = []
    for k in range(len(v) - 2):
        d1 = v[k + 1] - v[k]
        d2 = v[k + 2] - v[k + 1]
        den = d2 - d1
        scale = max(abs(d1), abs(d2), 1e-300)
        if abs(den) <= 1e-12 * scale:
            out.append(v[k + 2])
        else:
            out.append(v[k] - d1 * d1 / den)
    return out


def _agree(values, tol_abs: float, tol_rel: float) -> bool:
    for i in range(len(values)):
        for j in range(i + 1, len(values)):
            scale = max(abs(values[i]), abs(values[j]))
            if abs(values[i] - values[j]) > max(tol_abs, tol_rel * scale):
                return False
    return True


def _ratio_tail(absd: list[float], count: int = 3) -> tuple:
    out = []
    for k in range(max(1, len(absd) - count), len(absd)):
        prev = absd[k - 1]
        out.append(float("inf") if prev == 0.0 else absd[k] / prev)
    return tuple(out)


def classify_branch(branch, tol_value: float = 1e-5, rel_tol: float = 1e-6,
                    divergence_threshold: float = 1e8) -> Classification:
    """Trichotomy for a branch's value sequence along the ladder.

    Accepts a Branch or a raw value sequence.  Finite requires more than
    agreement of the accelerated values: the raw increments must actually
    decay.  Geometric divergence fools Aitken into a perfectly stable fake
    limit, and the decay requirement is what rejects it.  Divergent needs a
    value past the threshold or increments growing over three consecutive
    rung steps.  Everything else stays undetermined, the safe verdict.
    """
    vals = list(branch.values) if isinstance(branch, Branch) else list(branch)
    if not vals:
        return Classification("undetermined")
    mags = [abs(v) for v in vals]
    if any((not np.isfinite(m)) or m > divergence_threshold for m in mags):
        return Classification("divergent")
    m = len(vals)
    if m < 3:
        return Classification("undetermined")
    deltas = [vals[k + 1] - vals[k] for k in range(m - 1)]
    absd = [abs(d) for d in deltas]
    ratios = _ratio_tail(absd)
    tail = absd[-3:]
    if all(d <= tol_value for d in tail):
        limit = sum(vals[-3:]) / 3
        est = tuple(aitken(vals)[-3:]) if m >= 5 else tuple(vals[-3:])
        return Classification("finite", _realify(limit, vals), est, ratios)
    if len(absd) >= 4 and absd[-4] < absd[-3] < absd[-2] < absd[-1]:
        return Classification("divergent", None, (), ratios)
    if m >= 5:
        est = aitken(vals)
        last3 = est[-3:]
        decays = all(r <= 0.95 for r in ratios[-2:]) or all(
            d <= tol_value for d in tail)
        if _agree(last3, tol_value, rel_tol) and decays:
            limit = sum(last3) / 3
            return Classification("finite", _realify(limit, vals),
                                  tuple(last3), ratios)
    return Classification("undetermined", None, (), ratios)


def _realify(limit, vals):
    if any(isinstance(v, complex) for v in vals):
        return complex(limit)
    return float(limit)


@dataclass
class TraceResult:
    """Branches plus per-rung slice data.  Iterates over the branches.

    rung_counts holds the point (or component, in complex mode) count of each
    countable rung and None where converged slice points existed but none was
    numerically isolated (underflow-degenerate far rungs).
    """

    ladder: RadiusLadder
    branches: list[Branch]
    rung_points: list[list[TangencyPoint]]
    rung_counts: list[int | None]
    degenerate: bool = False
    rung_f_ranges: list[tuple[float, float] | None] = field(default_factory=list)

    def radii(self) -> list[float]:
        return self.ladder.radii()

    def __iter__(self):
        return iter(self.branches)

    def __len__(self) -> int:
        return len(self.branches)

    def __getitem__(self, i):
        return self.branches[i]


def _match_distance(R: float) -> float:
    return _MATCH_SCALE * max(R, 1.0)


def trace_branches(f, ladder: RadiusLadder | None = None, *,
                   n_starts: int = 200, seed: int = 42,
                   tol_residual: float = 1e-9, tol_tau: float = 1e-7,
                   k_slices: int = 8, divergence_threshold: float = 1e8,
                   tol_value: float = 1e-5, rel_tol: float = 1e-6,
                   count_components: bool | None = None,
                   threads: int = 1) -> TraceResult:
    """Trace tangency branches outward along the ladder.

    Per rung: live branches are continued in the radius (closing early on
    value blow-up), a fresh multistart rediscovers what continuation missed,
    matches within a radius-scaled distance are merged, and unmatched points
    with moderate values seed new branches.  Slice points are the numerically
    isolated solutions only, so tolerance-fattened arcs around flat regions
    cannot pollute the counts.
    """
    family = as_family(f)
    if ladder is None:
        ladder = RadiusLadder()
    radii = ladder.radii()
    if count_components is None:
        count_components = family.mode == "complex"
    branches: list[Branch] = []
    rung_points: list[list[TangencyPoint]] = []
    rung_counts: list[int | None] = []
    f_ranges: list[tuple[float, float] | None] = []
    degenerate = False
    next_id = 0

    for k, R in enumerate(radii):
        if degenerate:
            sl = sphere_slice(family, R, 0, seed + k, tol_residual, tol_tau,
                              k_slices)
            f_ranges.append(sl.f_range)
            rung_points.append([])
            rung_counts.append(None)
            continue

        continued: list[tuple[Branch, TangencyPoint]] = []
        if k > 0:
            r_prev = radii[k - 1]
            for b in branches:
                if b.status != "live":
                    continue
                pt = _extend_branch(family, b, r_prev, R, tol_residual,
                                    divergence_threshold)
                if pt is not None:
                    b.samples.append((R, pt))
                    continued.append((b, pt))
            _merge_coincident(branches, R)
            continued = [(b, pt) for b, pt in continued if b.status == "live"]

        n_disc = n_starts if k == 0 else max(32, n_starts // 4)
        sl: SliceResult = sphere_slice(family, R, n_disc, seed + k,
                                       tol_residual, tol_tau, k_slices,
                                       threads=threads)
        if sl.degenerate:
            degenerate = True
            for b in branches:
                if b.status == "live":
                    b.status = "done"
            f_ranges.append(sl.f_range)
            rung_points.append([])
            rung_counts.append(None)
            continue
        f_ranges.append(None)

        live_pts = [pt for _, pt in continued]
        discovered = []
        for pt in sl.points:
            matched = any(
                np.linalg.norm(pt.embedded() - q.embedded()) <= _match_distance(R)
                for q in live_pts)
            if not matched:
                discovered.append(pt)

        for pt in discovered:
            mag = abs(pt.f_value)
            if np.isfinite(mag) and mag <= divergence_threshold:
                b = Branch(id=next_id, samples=[(R, pt)])
                next_id += 1
                branches.append(b)
                live_pts.append(pt)

        pts = dedup_tangency_points(live_pts + sl.points, scale=_MATCH_SCALE)
        rung_points.append(pts)
        isolated = [p for p in pts if p.sharp]
        if not isolated:
            rung_counts.append(None)
        elif count_components and len(isolated) > 1:
            rung_counts.append(slice_components(isolated, family, R,
                                                tol_tau=tol_tau,
                                                tol_residual=tol_residual))
        else:
            rung_counts.append(len(isolated))

    for b in branches:
        if b.status == "live":
            b.status = "done"
        if b.status == "divergent":
            b.classification = Classification("divergent")
        else:
            b.classification = classify_branch(
                b.values, tol_value, rel_tol,
                divergence_threshold=divergence_threshold)
    return TraceResult(ladder=ladder, branches=branches,
                       rung_points=rung_points, rung_counts=rung_counts,
                       degenerate=degenerate, rung_f_ranges=f_ranges)


def _extend_branch(family: LagrangeFamily, b: Branch, r_prev: float, R: float,
                   tol_residual: float, divergence_threshold: float):
    start = family.pack(b.last_point.x, b.last_point.lam)
    hit = {"divergent": False}

    def stop(r, vec):
        x, _ = family.split(vec)
        fv = family.f.evaluate(x)
        mag = abs(fv)
        if (not np.isfinite(mag)) or mag > divergence_threshold:
            hit["divergent"] = True
            return True
        return False

    path = continue_path(lambda r: family.system(r, b.last_point.slice_),
                         start, r_prev, R, tol_residual=tol_residual, stop=stop)
    if hit["divergent"]:
        b.status = "divergent"
        return None
    if not path.reached_target:
        b.status = "lost"
        return None
    vec = path.steps[-1][1].point
    return family.point(vec, R, tol_residual, b.last_point.slice_)


def _merge_coincident(branches: list[Branch], R: float) -> None:
    live = [b for b in branches if b.status == "live"
            and b.samples and b.samples[-1][0] == R]
    for i in range(len(live)):
        if live[i].status != "live":
            continue
        for j in range(i + 1, len(live)):
            if live[j].status != "live":
                continue
            d = np.linalg.norm(live[i].last_point.embedded()
                               - live[j].last_point.embedded())
            if d <= _match_distance(R):
                keep, drop = live[i], live[j]
                if drop.samples[0][0] < keep.samples[0][0]:
                    keep, drop = drop, keep
                drop.status = "merged"


def stabilized_suffix(counts: list[int | None]) -> tuple[int, int] | None:
    """Longest constant suffix of the countable per-rung counts, when it
    spans at least two counted rungs.  Returns (count, start_rung_index),
    the index referring to the full rung list.
    """
    counted = [(i, c) for i, c in enumerate(counts) if c is not None]
    if len(counted) < 2:
        return None
    pos = len(counted) - 1
    while pos > 0 and counted[pos - 1][1] == counted[-1][1]:
        pos -= 1
    if len(counted) - pos < 2:
        return None
    return counted[-1][1], counted[pos][0]


def pseudo_limits(branch: Branch, divergence_threshold: float = 1e8) -> list:
    """Aitken window estimates for a bounded oscillating branch.

    Only meaningful when the branch has enough samples, never blew past the
    divergence threshold, is not classified finite, and its magnitudes over
    the last four samples are not monotonically climbing (which would be an
    ordinary divergent arm).
    """
    vals = branch.values
    if len(vals) < 5:
        return []
    mags = [abs(v) for v in vals]
    if any((not np.isfinite(m)) or m > divergence_threshold for m in mags):
        return []
    if branch.classification is not None and branch.classification.kind == "finite":
        return []
    last4 = mags[-4:]
    if all(last4[i] < last4[i + 1] for i in range(3)):
        return []
    return [a for a in aitken(vals)
            if np.isfinite(abs(a)) and abs(a) <= divergence_threshold]


@dataclass(frozen=True)
class AsymptoticSet:
    """Asymptotic value clusters.  Iterates over stable then unstable."""

    stable: list[ValueCluster]
    unstable: list[ValueCluster]
    instability: bool

    @property
    def clusters(self) -> list[ValueCluster]:
        return list(self.stable) + list(self.unstable)

    def __iter__(self):
        return iter(self.clusters)

    def __len__(self) -> int:
        return len(self.stable) + len(self.unstable)

    def __getitem__(self, i):
        return self.clusters[i]


def s_infinity(f, ladder: RadiusLadder | None = None, *,
               tol_value: float = 1e-5, rel_tol: float = 1e-6,
               divergence_threshold: float = 1e8,
               trace: TraceResult | None = None,
               n_starts: int = 200, seed: int = 42,
               tol_residual: float = 1e-9, tol_tau: float = 1e-7,
               k_slices: int = 8, threads: int = 1) -> AsymptoticSet:
    """Asymptotic value clusters of f from traced tangency branches.

    Stable clusters come from branches with a genuine finite classification.
    Unstable clusters collect pseudo-limits of bounded oscillating branches.
    The instability flag fires when three or more distinct unstable clusters
    accumulate, or when finite-limit branches keep appearing only at the top
    rungs; both patterns are evidence of non-definable input.
    """
    if trace is None:
        if isinstance(f, TraceResult):
            trace = f
        else:
            trace = trace_branches(f, ladder, n_starts=n_starts, seed=seed,
                                   tol_residual=tol_residual, tol_tau=tol_tau,
                                   k_slices=k_slices,
                                   divergence_threshold=divergence_threshold,
                                   tol_value=tol_value, rel_tol=rel_tol,
                                   threads=threads)
    finite_limits = []
    pseudo = []
    late_finite = 0
    radii = trace.radii()
    late_radii = set(radii[-3:])
    for b in trace.branches:
        cls = b.classification
        if cls is None:
            cls = classify_branch(b.values, tol_value, rel_tol,
                                  divergence_threshold)
        if cls.kind == "finite":
            finite_limits.append(cls.limit)
            if b.first_radius in late_radii:
                late_finite += 1
        else:
            pseudo.extend(pseudo_limits(b, divergence_threshold))
    stable = cluster_values(finite_limits, tol_value, rel_tol,
                            provenance=PROV_ASYMPTOTIC, stable=True)
    unstable = cluster_values(pseudo, tol_value, rel_tol,
                              provenance=PROV_ASYMPTOTIC, stable=False)
    instability = len(unstable) >= 3 or late_finite >= 3
    return AsymptoticSet(stable=stable, unstable=unstable,
                         instability=instability)


def trace_csv_rows(trace: TraceResult) -> list[tuple]:
    """Branch samples as flat rows (branch_id, rung, R, x..., lambda,
    f_value, tau).  Complex coordinates are expanded into re/im pairs."""
    radii = trace.radii()
    rows = []
    for b in trace.branches:
        for R, pt in b.samples:
            rung = min(range(len(radii)), key=lambda i: abs(radii[i] - R))
            coords = []
            for c in np.atleast_1d(pt.x):
                if np.iscomplexobj(pt.x):
                    coords.extend([float(np.real(c)), float(np.imag(c))])
                else:
                    coords.append(float(c))
            lam = pt.lam
            if isinstance(lam, complex):
                lam_cols = [float(lam.real), float(lam.imag)]
            else:
                lam_cols = [float(lam)]
            fv = pt.f_value
            if isinstance(fv, complex):
                f_cols = [float(fv.real), float(fv.imag)]
            else:
                f_cols = [float(fv)]
            rows.append(tuple([b.id, rung, float(R)] + coords + lam_cols
                              + f_cols + [float(pt.tau)]))
    return rows
