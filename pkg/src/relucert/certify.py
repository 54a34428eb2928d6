"""Hyperplane distances, per-norm robustness guarantees and the universal
all-lp certificate built from the l1 and linf distance profiles.

All operations are pure functions over immutable nets.  Distances follow the
convention that decision distances are signed with the true label as
reference class, so a misclassified point has a negative minimum decision
distance and certifies to zero.
"""

from __future__ import annotations

import math
import weakref
from collections import namedtuple
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import geometry, net_core
from .regions import RegionAtlas

__all__ = [
    "DistanceProfile",
    "PointCertificate",
    "EpsTriple",
    "OracleResult",
    "distance_profile",
    "certify_single_norm",
    "certify_universal",
    "point_certificate",
    "exact_robustness_oracle",
    "robust_error_upper_bound",
]

EpsTriple = namedtuple("EpsTriple", ["eps1", "eps2", "eps_inf"])

OracleResult = namedtuple("OracleResult", ["value", "exact", "num_regions"])


@dataclass(frozen=True)
class DistanceProfile:
    """lp-distances of a point to its region's hyperplanes.

    boundary_dists[i] is the distance to hidden hyperplane i (layer, unit in
    unit_index[i]); decision_dists[s] is the signed distance to the decision
    hyperplane against class classes[s].  min_decision < 0 iff the point is
    misclassified.
    """

    p: float
    label: int
    boundary_dists: np.ndarray
    decision_dists: np.ndarray
    unit_index: np.ndarray
    classes: np.ndarray

    @property
    def min_boundary(self) -> float:
        if self.boundary_dists.size == 0:
            return math.inf
        return float(self.boundary_dists.min())

    @property
    def min_decision(self) -> float:
        if self.decision_dists.size == 0:
            return math.inf
        return float(self.decision_dists.min())


@dataclass(frozen=True)
class PointCertificate:
    """Per-norm robustness lower bounds at one input.

    lb_l1 / lb_linf come from the single-norm guarantee (equivalently the
    rho limits), lb_l2 from the universal certificate; all are zero when the
    point is misclassified.
    """

    label: int
    predicted: int
    correct: bool
    rho1: float
    rho_inf: float
    lb_l1: float
    lb_l2: float
    lb_linf: float

    def universal_bound(self, p) -> float:
        """Lower bound on robustness at any norm order p >= 1."""
        if not self.correct:
            return 0.0
        if self.rho_inf <= 0.0:
            return 0.0
        if math.isinf(self.rho1):
            return math.inf
        return geometry.hull_min_norm(self.rho1, self.rho_inf, p)


def _dual_norms(mat: np.ndarray, q: float) -> np.ndarray:
    """Row-wise lq-norms used as denominators of point-to-hyperplane distances."""
    if mat.shape[0] == 0:
        return np.zeros(0)
    if math.isinf(q):
        return np.abs(mat).max(axis=1)
    if q == 1.0:
        return np.abs(mat).sum(axis=1)
    return (np.abs(mat) ** q).sum(axis=1) ** (1.0 / q)


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    """num/den with den == 0 mapped to sign(num)*inf (constant hyperplane)."""
    out = np.full(num.shape, math.inf)
    np.divide(num, den, out=out, where=den > 0)
    zero = den == 0
    if zero.any():
        out[zero & (num < 0)] = -math.inf
        out[zero & (num >= 0)] = math.inf
    return out


def distance_profile(net, x, label: int, p) -> DistanceProfile:
    """lp-distances of x to its region's boundary and decision hyperplanes.

    Boundary distances are |V_j.x + a_j| / ||V_j||_q with q dual to p;
    decision distances are (f_label - f_s) / ||V_label - V_s||_q, signed.
    Zero rows give +inf distances (a constant unit cannot be crossed).
    """
    p = float(p.p) if isinstance(p, geometry.NormOrder) else float(p)
    if not p >= 1.0:
        raise ValueError(f"norm order must satisfy p >= 1, got {p}")
    label = int(label)
    if not 1 <= label <= net.num_classes:
        raise ValueError(f"label {label} out of range 1..{net.num_classes}")
    q = geometry.dual_exponent(p)
    desc = net_core.region_description(net, x)
    x = np.asarray(x, dtype=np.float64)

    num_b = np.abs(desc.normals @ x + desc.offsets)
    den_b = _dual_norms(desc.normals, q)
    boundary = _safe_div(num_b, den_b)

    v_out, a_out = desc.output_map
    c = label - 1
    others = np.array([s for s in range(net.num_classes) if s != c], dtype=np.int64)
    diff = v_out[c] - v_out[others]
    num_d = diff @ x + (a_out[c] - a_out[others])
    den_d = _dual_norms(diff, q)
    decision = _safe_div(num_d, den_d)

    return DistanceProfile(
        p=p,
        label=label,
        boundary_dists=boundary,
        decision_dists=decision,
        unit_index=desc.unit_index,
        classes=others + 1,
    )


def certify_single_norm(net, x, label: int, p) -> float:
    """Guaranteed lower bound on the lp-robustness at x.

    Inside the region the net is affine, so the robustness is at least the
    smaller of the nearest region hyperplane and the nearest decision
    hyperplane; misclassified points certify to zero.
    """
    prof = distance_profile(net, x, label, p)
    d_b, d_d = prof.min_boundary, prof.min_decision
    if d_d < 0.0:
        return 0.0
    return min(d_b, d_d)


def certify_universal(net, x, label: int, p) -> float:
    """Lower bound on the lp-robustness for any p, from l1/linf profiles only.

    rho1 and rho_inf are the minima of boundary and absolute decision
    distances wrt l1 and linf; the bound is the smallest lp-norm outside the
    convex hull of the corresponding l1/linf balls, which no decision or
    region hyperplane can enter.  At p = 1 and p = inf the bound continuously
    equals rho1 and rho_inf.
    """
    prof1 = distance_profile(net, x, label, 1.0)
    prof_inf = distance_profile(net, x, label, math.inf)
    if prof1.min_decision < 0.0:
        return 0.0
    rho1 = min(prof1.min_boundary, abs(prof1.min_decision))
    rho_inf = min(prof_inf.min_boundary, abs(prof_inf.min_decision))
    if rho_inf <= 0.0:
        return 0.0
    if math.isinf(rho1):
        return math.inf
    return geometry.hull_min_norm(rho1, rho_inf, p)


def point_certificate(net, x, label: int) -> PointCertificate:
    """Bundle of per-norm lower bounds at x (l1/linf single-norm, l2 universal)."""
    label = int(label)
    predicted = net_core.classify(net, x)
    prof1 = distance_profile(net, x, label, 1.0)
    prof_inf = distance_profile(net, x, label, math.inf)
    correct = predicted == label
    if prof1.min_decision < 0.0 or not correct:
        return PointCertificate(label, predicted, False, 0.0, 0.0, 0.0, 0.0, 0.0)
    rho1 = float(min(prof1.min_boundary, abs(prof1.min_decision)))
    rho_inf = float(min(prof_inf.min_boundary, abs(prof_inf.min_decision)))
    lb1 = float(max(min(prof1.min_boundary, prof1.min_decision), rho1))
    lbinf = float(max(min(prof_inf.min_boundary, prof_inf.min_decision), rho_inf))
    if rho_inf <= 0.0 or math.isinf(rho1):
        lb2 = math.inf if math.isinf(rho1) else 0.0
    else:
        lb2 = geometry.hull_min_norm(rho1, rho_inf, 2.0)
    return PointCertificate(label, predicted, True, rho1, rho_inf, lb1, lb2, lbinf)


# -- exact robustness oracle -------------------------------------------------

_ATLAS_CACHE: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


def _atlas_for(net, budget: int) -> RegionAtlas:
    # a complete atlas serves any budget; a truncated one only smaller budgets
    atlas = _ATLAS_CACHE.get(net)
    if atlas is None or (not atlas.complete and atlas.max_regions < budget):
        atlas = RegionAtlas(net, max_regions=budget)
        _ATLAS_CACHE[net] = atlas
    return atlas


def _lp_norm_rows(mat: np.ndarray, p: float) -> np.ndarray:
    if math.isinf(p):
        return np.abs(mat).max(axis=1)
    if p == 1.0:
        return np.abs(mat).sum(axis=1)
    return (np.abs(mat) ** p).sum(axis=1) ** (1.0 / p)


def _min_lp_to_segments(x: np.ndarray, starts: np.ndarray, ends: np.ndarray,
                        p: float) -> float:
    """min over segments of min_t ||x - (a + t(b-a))||_p, t in [0,1].

    The objective is convex in t.  For p in {1, 2, inf} the minimum over t is
    found exactly from the finitely many candidate t where the gradient can
    vanish or kink; other p fall back to a vectorized ternary search.
    """
    if len(starts) == 0:
        return math.inf
    c = x[None, :] - starts          # distance vector at t = 0
    e = ends - starts                # derivative of the segment point
    if p == 2.0:
        ee = (e * e).sum(axis=1)
        t = np.zeros(len(starts))
        nz = ee > 0
        t[nz] = np.clip((c[nz] * e[nz]).sum(axis=1) / ee[nz], 0.0, 1.0)
        diff = c - t[:, None] * e
        return float(np.sqrt((diff * diff).sum(axis=1)).min())
    if p == 1.0 or math.isinf(p):
        cands = [np.zeros(len(starts)), np.ones(len(starts))]
        with np.errstate(divide="ignore", invalid="ignore"):
            for i in range(x.shape[0]):
                cands.append(np.where(e[:, i] != 0, c[:, i] / e[:, i], 0.0))
            if math.isinf(p) and x.shape[0] == 2:
                # crossings of the two coordinate envelopes |c_i - t e_i|
                den1 = e[:, 0] - e[:, 1]
                den2 = e[:, 0] + e[:, 1]
                cands.append(np.where(den1 != 0, (c[:, 0] - c[:, 1]) / den1, 0.0))
                cands.append(np.where(den2 != 0, (c[:, 0] + c[:, 1]) / den2, 0.0))
        best = np.full(len(starts), math.inf)
        for t in cands:
            t = np.clip(np.nan_to_num(t, nan=0.0), 0.0, 1.0)
            best = np.minimum(best, _lp_norm_rows(c - t[:, None] * e, p))
        return float(best.min())
    # general p: ternary search on the convex per-segment objective
    lo = np.zeros(len(starts))
    hi = np.ones(len(starts))
    for _ in range(96):
        t1 = lo + (hi - lo) / 3.0
        t2 = hi - (hi - lo) / 3.0
        f1 = _lp_norm_rows(c - t1[:, None] * e, p)
        f2 = _lp_norm_rows(c - t2[:, None] * e, p)
        take_lo = f1 <= f2
        hi = np.where(take_lo, t2, hi)
        lo = np.where(take_lo, lo, t1)
    tm = 0.5 * (lo + hi)
    return float(_lp_norm_rows(c - tm[:, None] * e, p).min())


def _directional_upper_bound(net, x, label: int, p: float, num_directions: int,
                             seed: int, cap: float = 12.0) -> float:
    """Upper bound on robustness from bisection along rays until the class flips."""
    d = net.input_dim
    rng = np.random.default_rng(seed)
    dirs = [np.eye(d), -np.eye(d)]
    extra = max(0, num_directions - 2 * d)
    if extra:
        g = rng.standard_normal((extra, d))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        dirs.append(g)
    dirs = np.vstack(dirs)
    scales = np.geomspace(1e-4, cap, 48)
    pts = x[None, None, :] + scales[:, None, None] * dirs[None, :, :]
    pred = net_core.classify_batch(net, pts.reshape(-1, d)).reshape(len(scales), -1)
    flipped = pred != label
    any_flip = flipped.any(axis=0)
    if not any_flip.any():
        return math.inf
    dirs = dirs[any_flip]
    flipped = flipped[:, any_flip]
    first = flipped.argmax(axis=0)
    hi = scales[first]
    lo = np.where(first > 0, scales[np.maximum(first - 1, 0)], 0.0)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        pred = net_core.classify_batch(net, x[None, :] + mid[:, None] * dirs)
        bad = pred != label
        hi = np.where(bad, mid, hi)
        lo = np.where(bad, lo, mid)
    return float((hi * _lp_norm_rows(dirs, p)).min())


def exact_robustness_oracle(net, x, label: int, p, budget: int = 20000,
                            num_directions: int = 64, seed: int = 0) -> OracleResult:
    """Upper bound on the true lp-robustness at x by exhaustive search.

    Combines (a) bisection along random and axis directions and, for 2-D
    inputs, (b) the exact minimum distance to the class-change set assembled
    from every linear region's decision polygon.  With a complete region map
    the result equals the true robustness; otherwise ``exact`` is False and
    the value is still a valid upper bound.  Intended for nets with a few
    dozen hidden units.
    """
    p = float(p.p) if isinstance(p, geometry.NormOrder) else float(p)
    x = np.asarray(x, dtype=np.float64)
    if net_core.classify(net, x) != int(label):
        return OracleResult(0.0, True, 0)
    best_dir = _directional_upper_bound(net, x, label, p, num_directions, seed)
    if net.input_dim != 2:
        return OracleResult(best_dir, False, 0)
    atlas = _atlas_for(net, budget)
    starts, ends = atlas.decision_edges(int(label))
    best_reg = _min_lp_to_segments(x, starts, ends, p)
    value = min(best_dir, best_reg)
    # distance from x to the box boundary (same in every lp: one coordinate)
    margin = min(float((x - atlas.lo).min()), float((atlas.hi - x).min()))
    exact = atlas.complete and value < 0.9 * margin
    return OracleResult(value, exact, len(atlas.regions))


# -- dataset-level upper bound ------------------------------------------------


def _map_points(fn, n, threads):
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, range(n)))
    return [fn(i) for i in range(n)]


def dataset_certificates(net, dataset, threads: int = 1):
    """point_certificate for every dataset row, in order."""
    X, y = np.asarray(dataset.features), np.asarray(dataset.labels)
    if len(X) == 0:
        raise ValueError("dataset is empty")
    return _map_points(lambda i: point_certificate(net, X[i], int(y[i])),
                       len(X), threads)


def robust_mask(certs, eps) -> np.ndarray:
    """True where a point is certified robust for the whole ball union."""
    eps = EpsTriple(*eps) if not isinstance(eps, EpsTriple) else eps
    return np.array([
        pc.correct and pc.lb_l1 >= eps.eps1 and pc.lb_l2 >= eps.eps2
        and pc.lb_linf >= eps.eps_inf
        for pc in certs
    ])


def robust_error_upper_bound(net, dataset, eps, threads: int = 1) -> float:
    """Upper bound on the robust test error wrt the union of the three balls.

    A point counts as potentially non-robust when it is misclassified or one
    of its certificates falls short: the l1/linf single-norm bounds against
    eps1/eps_inf, or the universal l2 bound against eps2.
    """
    certs = dataset_certificates(net, dataset, threads)
    return 1.0 - float(np.mean(robust_mask(certs, eps)))
