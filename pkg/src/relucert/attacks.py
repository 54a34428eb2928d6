"""Projected-gradient attacks wrt l1, l2 and linf with random restarts.

Used to lower-bound the robust test error and to measure how often the
adversarial perturbations found for one norm fit inside the other norms'
balls.  All attacks respect the [0, 1] box: iterates are projected onto the
norm ball and the box alternately, and final feasibility is re-checked
exactly before a perturbation is reported.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import net_core
from .certify import EpsTriple

__all__ = [
    "PgdConfig",
    "project_lp_ball",
    "pgd_attack",
    "attack_dataset",
    "robust_error_lower_bound",
    "overlap_stats",
]

_FEAS_TOL = 1e-9


@dataclass(frozen=True)
class PgdConfig:
    """Attack protocol: norm order p in {1, 2, inf}, budget eps, iterations
    and restarts; sparsity_frac controls how many coordinates the l1 step
    touches.  step_size None selects the default rule (2*eps/iterations for
    l2/linf, eps/4 for the sparse l1 step)."""

    p: float
    eps: float
    iterations: int = 100
    restarts: int = 10
    step_size: float | None = None
    sparsity_frac: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.p not in (1.0, 2.0, math.inf):
            raise ValueError("p must be 1, 2 or inf")
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")
        if self.iterations < 1 or self.restarts < 1:
            raise ValueError("iterations and restarts must be >= 1")
        if not (0.0 < self.sparsity_frac <= 1.0):
            raise ValueError("sparsity_frac must be in (0, 1]")


def _lp_rows(D, p):
    if math.isinf(p):
        return np.abs(D).max(axis=1)
    if p == 1.0:
        return np.abs(D).sum(axis=1)
    return np.sqrt((D * D).sum(axis=1))


def _proj_l1_rows(D, eps):
    """Row-wise Euclidean projection onto the l1 ball, by sorting."""
    out = D.copy()
    norms = np.abs(D).sum(axis=1)
    over = norms > eps
    if not over.any():
        return out
    A = np.abs(D[over])
    if eps == 0.0:
        out[over] = 0.0
        return out
    S = np.sort(A, axis=1)[:, ::-1]
    css = np.cumsum(S, axis=1)
    ks = np.arange(1, A.shape[1] + 1)
    cond = S * ks > css - eps
    rho = np.count_nonzero(cond, axis=1) - 1
    theta = (css[np.arange(len(A)), rho] - eps) / (rho + 1)
    out[over] = np.sign(D[over]) * np.maximum(A - theta[:, None], 0.0)
    return out


def _project_ball_rows(D, eps, p):
    if math.isinf(p):
        return np.clip(D, -eps, eps)
    if p == 2.0:
        norms = np.sqrt((D * D).sum(axis=1))
        scale = np.where(norms > eps, eps / np.maximum(norms, 1e-300), 1.0)
        return D * scale[:, None]
    return _proj_l1_rows(D, eps)


def project_lp_ball(v, eps, p):
    """Euclidean projection of v onto the lp ball of radius eps.

    linf by coordinate clipping, l2 by radial scaling, l1 by the sorting
    based soft-threshold projection.
    """
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    p = float(p)
    if p not in (1.0, 2.0, math.inf):
        raise ValueError("p must be 1, 2 or inf")
    v = np.asarray(v, dtype=np.float64)
    return _project_ball_rows(v[None, :], eps, p)[0]


def _sample_ball_rows(rng, m, d, eps, p):
    """Approximately uniform samples from the lp ball of radius eps."""
    if math.isinf(p):
        return rng.uniform(-eps, eps, size=(m, d))
    if p == 2.0:
        g = rng.standard_normal((m, d))
        g /= np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-300)
        r = eps * rng.random(m) ** (1.0 / d)
        return g * r[:, None]
    e = rng.standard_exponential((m, d))
    s = e / e.sum(axis=1, keepdims=True)
    signs = np.where(rng.random((m, d)) < 0.5, -1.0, 1.0)
    r = eps * rng.random(m) ** (1.0 / d)
    return signs * s * r[:, None]


def _input_gradient(net, logits, preacts, y0):
    """Gradient of the cross-entropy wrt the inputs, one row per example."""
    m = logits.max(axis=1, keepdims=True)
    probs = np.exp(logits - m)
    probs /= probs.sum(axis=1, keepdims=True)
    g = probs
    g[np.arange(len(g)), y0] -= 1.0
    for l in range(len(net.weights) - 1, 0, -1):
        g = (g @ net.weights[l]) * (preacts[l - 1] > 0)
    return g @ net.weights[0]


def _ascent_step(G, p, sparsity_frac):
    if math.isinf(p):
        return np.sign(G)
    if p == 2.0:
        norms = np.linalg.norm(G, axis=1, keepdims=True)
        return G / np.maximum(norms, 1e-300)
    d = G.shape[1]
    k = max(1, int(round(sparsity_frac * d)))
    A = np.abs(G)
    if k < d:
        thresh = np.partition(A, d - k, axis=1)[:, d - k]
        mask = A >= thresh[:, None]
    else:
        mask = np.ones_like(A, dtype=bool)
    V = G * mask
    norms = np.abs(V).sum(axis=1, keepdims=True)
    return V / np.maximum(norms, 1e-300)


def _joint_project(Z, X_ref, eps, p):
    """Project onto {||z - x||_p <= eps} intersected with the [0,1] box.

    Clipping to the box never increases any coordinate gap to x, so one
    ball-then-box pass already lands in the intersection; the loop guards
    against pathological rounding and the result is re-checked exactly.
    """
    for _ in range(10):
        Z = X_ref + _project_ball_rows(Z - X_ref, eps, p)
        Z = np.clip(Z, 0.0, 1.0)
        if (_lp_rows(Z - X_ref, p) <= eps + _FEAS_TOL).all():
            break
    return Z


def _pgd_core(net, starts, X_ref, y, cfg: PgdConfig):
    """Run PGD from the given start rows; anchors and labels are per-row.

    Returns (success, best_norm, best_delta) per row; best_norm is the
    smallest perturbation norm among the misclassified feasible iterates.
    """
    eps, p = cfg.eps, cfg.p
    if cfg.step_size is not None:
        eta = cfg.step_size
    elif p == 1.0:
        eta = eps / 4.0
    else:
        eta = 2.0 * eps / cfg.iterations
    y0 = y - 1
    Z = _joint_project(starts.copy(), X_ref, eps, p)
    best_norm = np.full(len(Z), math.inf)
    best_delta = np.zeros_like(Z)
    for it in range(cfg.iterations + 1):
        logits, preacts = net_core.forward_batch(net, Z)
        pred = logits.argmax(axis=1)
        delta = Z - X_ref
        norms = _lp_rows(delta, p)
        hit = (pred != y0) & (norms <= eps + _FEAS_TOL) & (norms < best_norm)
        if hit.any():
            best_norm[hit] = norms[hit]
            best_delta[hit] = delta[hit]
        if it == cfg.iterations:
            break
        G = _input_gradient(net, logits, preacts, y0)
        Z = Z + eta * _ascent_step(G, p, cfg.sparsity_frac)
        Z = _joint_project(Z, X_ref, eps, p)
    return np.isfinite(best_norm), best_norm, best_delta


def pgd_attack(net, x, label: int, cfg: PgdConfig, extra_starts=None):
    """Attack a single point; returns the best adversarial found or None.

    Restart 0 starts at x itself, the remaining restarts at random points of
    the ball intersected with the box; extra_starts, when given, are used as
    additional warm starts (projected onto the feasible set first).
    """
    x = np.asarray(x, dtype=np.float64)
    if ((x < 0) | (x > 1)).any():
        raise ValueError("attack anchor must lie in [0, 1]^d")
    rng = np.random.default_rng(cfg.seed)
    d = x.shape[0]
    starts = [x[None, :]]
    if cfg.restarts > 1:
        starts.append(x[None, :] + _sample_ball_rows(rng, cfg.restarts - 1, d, cfg.eps, cfg.p))
    if extra_starts is not None and len(extra_starts):
        starts.append(np.asarray(extra_starts, dtype=np.float64).reshape(-1, d))
    starts = np.vstack(starts)
    X_ref = np.broadcast_to(x, starts.shape).copy()
    y = np.full(len(starts), int(label), dtype=np.int64)
    success, norms, deltas = _pgd_core(net, starts, X_ref, y, cfg)
    if not success.any():
        return None
    i = int(np.argmin(norms))
    z = x + deltas[i]
    assert _lp_rows((z - x)[None, :], cfg.p)[0] <= cfg.eps + _FEAS_TOL
    assert net_core.classify(net, z) != int(label)
    return z


def attack_dataset(net, dataset, cfg: PgdConfig):
    """PGD over every point, vectorized over (point, restart) pairs.

    Returns (success (n,), best_norm (n,), best_delta (n, d)).
    """
    X = np.asarray(dataset.features, dtype=np.float64)
    y = np.asarray(dataset.labels, dtype=np.int64)
    if len(X) == 0:
        raise ValueError("dataset is empty")
    n, d = X.shape
    R = cfg.restarts
    rng = np.random.default_rng(cfg.seed)
    X_ref = np.repeat(X, R, axis=0)
    starts = X_ref.copy()
    if R > 1:
        noise = _sample_ball_rows(rng, n * R, d, cfg.eps, cfg.p)
        mask = (np.arange(n * R) % R) > 0
        starts[mask] += noise[mask]
    y_rep = np.repeat(y, R)
    success, norms, deltas = _pgd_core(net, starts, X_ref, y_rep, cfg)
    success = success.reshape(n, R)
    norms = norms.reshape(n, R)
    deltas = deltas.reshape(n, R, d)
    pick = norms.argmin(axis=1)
    idx = np.arange(n)
    return success.any(axis=1), norms[idx, pick], deltas[idx, pick]


def per_norm_successes(net, dataset, eps, iterations: int = 100,
                       restarts: int = 10, seed: int = 0,
                       sparsity_frac: float = 0.01) -> dict:
    """Per-norm PGD success masks under the shared seeding convention."""
    eps = EpsTriple(*eps) if not isinstance(eps, EpsTriple) else eps
    out = {}
    for name, p, e, sub in (("l1", 1.0, eps.eps1, 1), ("l2", 2.0, eps.eps2, 2),
                            ("linf", math.inf, eps.eps_inf, 3)):
        cfg = PgdConfig(p=p, eps=e, iterations=iterations, restarts=restarts,
                        seed=seed + sub, sparsity_frac=sparsity_frac)
        success, _, _ = attack_dataset(net, dataset, cfg)
        out[name] = success
    return out


def robust_error_lower_bound(net, dataset, eps, iterations: int = 100,
                             restarts: int = 10, seed: int = 0,
                             sparsity_frac: float = 0.01) -> float:
    """Fraction of points misclassified or attacked by one of the three PGD
    attacks within its ball; lower-bounds the union robust test error."""
    X = np.asarray(dataset.features)
    y = np.asarray(dataset.labels, dtype=np.int64)
    if len(X) == 0:
        raise ValueError("dataset is empty")
    bad = net_core.classify_batch(net, X) != y
    for success in per_norm_successes(net, dataset, eps, iterations, restarts,
                                      seed, sparsity_frac).values():
        bad |= success
    return float(np.mean(bad))


def overlap_stats(net, dataset, eps1: float, eps2: float, eps_inf: float,
                  iterations: int = 100, restarts: int = 10, seed: int = 0,
                  sparsity_frac: float = 0.01) -> dict:
    """For each ordered norm pair (p, q): how many successful p-attack
    perturbations also fit in the q-ball of radius eps_q.

    Entries are dicts with count/total/pct; pct is None when no p-attack
    succeeded (0 of 0).
    """
    radii = {"l1": eps1, "l2": eps2, "linf": eps_inf}
    orders = {"l1": 1.0, "l2": 2.0, "linf": math.inf}
    found = {}
    for i, (name, p) in enumerate(orders.items()):
        cfg = PgdConfig(p=p, eps=radii[name], iterations=iterations,
                        restarts=restarts, seed=seed + 10 * i,
                        sparsity_frac=sparsity_frac)
        success, _, deltas = attack_dataset(net, dataset, cfg)
        found[name] = deltas[success]
    table = {}
    for pn in orders:
        deltas = found[pn]
        total = len(deltas)
        for qn in orders:
            if qn == pn:
                continue
            if total == 0:
                table[(pn, qn)] = {"count": 0, "total": 0, "pct": None}
                continue
            inside = _lp_rows(deltas, orders[qn]) <= radii[qn] + _FEAS_TOL
            count = int(inside.sum())
            table[(pn, qn)] = {"count": count, "total": total,
                               "pct": 100.0 * count / total}
    return table
