import math

import numpy as np
import pytest
from scipy.optimize import linprog, minimize

from relucert import certify, geometry, net_core
from relucert.certify import (
    EpsTriple, certify_single_norm, certify_universal, distance_profile,
    exact_robustness_oracle, point_certificate, robust_error_upper_bound,
)
from relucert.net_core import ReluNet, random_net

from conftest import tiny_net


class _Points:
    def __init__(self, X, y):
        self.features = np.asarray(X, dtype=float)
        self.labels = np.asarray(y, dtype=np.int64)


def hyperplane_distance_lp(v, a, x, p):
    """Independent oracle: min ||z - x||_p s.t. v.z + a = 0.

    Linear programs for p in {1, inf}; SLSQP on the smooth objective for
    finite p > 1.
    """
    v = np.asarray(v, dtype=float)
    x = np.asarray(x, dtype=float)
    d = len(x)
    u = float(v @ x + a)
    if not np.any(v):
        return math.inf
    if p == 1.0:
        # variables (delta, t): min sum t, |delta| <= t, v.delta = -u
        c = np.concatenate([np.zeros(d), np.ones(d)])
        a_ub = np.block([[np.eye(d), -np.eye(d)], [-np.eye(d), -np.eye(d)]])
        b_ub = np.zeros(2 * d)
        a_eq = np.concatenate([v, np.zeros(d)])[None, :]
        res = linprog(c, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=[-u],
                      bounds=[(None, None)] * d + [(0, None)] * d, method="highs")
        assert res.status == 0
        return res.fun
    if math.isinf(p):
        # variables (delta, s): min s, |delta_i| <= s
        c = np.concatenate([np.zeros(d), [1.0]])
        a_ub = np.block([[np.eye(d), -np.ones((d, 1))],
                         [-np.eye(d), -np.ones((d, 1))]])
        b_ub = np.zeros(2 * d)
        a_eq = np.concatenate([v, [0.0]])[None, :]
        res = linprog(c, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=[-u],
                      bounds=[(None, None)] * d + [(0, None)], method="highs")
        assert res.status == 0
        return res.fun
    res = minimize(
        lambda dlt: (np.abs(dlt) ** p).sum(),
        x0=-u * v / (v @ v),
        constraints=[{"type": "eq", "fun": lambda dlt: v @ dlt + u}],
        method="SLSQP", options={"ftol": 1e-14, "maxiter": 400},
    )
    assert res.success
    return res.fun ** (1.0 / p)


def test_distance_profile_linear_two_class():
    net = ReluNet((np.array([[1.0, 0.0], [0.0, 0.0]]),), (np.zeros(2),))
    for p in (1.0, 1.5, 2.0, math.inf):
        prof = distance_profile(net, [1.0, 0.0], 1, p)
        assert prof.min_boundary == math.inf
        assert prof.decision_dists == pytest.approx([1.0])


def test_distance_profile_hand_value():
    net = ReluNet((np.array([[3.0, 4.0]]), np.array([[1.0], [0.0]])),
                  (np.zeros(1), np.zeros(2)))
    prof = distance_profile(net, [1.0, 0.0], 1, 2.0)
    assert prof.boundary_dists == pytest.approx([3.0 / 5.0])


def test_distance_profile_against_lp_oracle():
    rng = np.random.default_rng(42)
    for seed in range(4):
        net = random_net([2, 6, 3], seed=seed, bias_scale=0.4)
        x = rng.uniform(0, 1, size=2)
        desc = net_core.region_description(net, x)
        for p in (1.0, 1.5, 2.0, 3.0, math.inf):
            prof = distance_profile(net, x, 1, p)
            for i in range(desc.num_halfspaces):
                ref = hyperplane_distance_lp(desc.normals[i], desc.offsets[i], x, p)
                if math.isinf(ref):
                    assert math.isinf(prof.boundary_dists[i])
                else:
                    assert prof.boundary_dists[i] == pytest.approx(ref, rel=1e-6)


def test_distance_profile_signed_decision():
    net = ReluNet((np.array([[10.0, 3.0], [0.0, 0.0]]),), (np.array([-6.5, 0.0]),))
    x = np.array([0.3, 0.3])  # logits (-2.6, 0): class 2 wins
    prof = distance_profile(net, x, 1, 2.0)
    assert prof.min_decision < 0
    prof2 = distance_profile(net, x, 2, 2.0)
    assert prof2.min_decision > 0


def test_min_decision_sign_tracks_misclassification():
    rng = np.random.default_rng(27)
    checked = 0
    for seed in range(6):
        net = tiny_net(seed)
        for _ in range(30):
            x = rng.uniform(0, 1, size=2)
            label = int(rng.integers(1, net.num_classes + 1))
            md = distance_profile(net, x, label, 2.0).min_decision
            if abs(md) < 1e-9:
                continue  # exact ties are the only excluded case
            assert (md < 0) == (net_core.classify(net, x) != label)
            checked += 1
    assert checked > 150


def test_zero_normal_gives_infinite_distance():
    # first hidden unit has a zero incoming row: constant unit, never crossed
    net = ReluNet((np.array([[0.0, 0.0], [1.0, 0.0]]), np.array([[1.0, 1.0], [0.0, 0.0]])),
                  (np.array([1.0, 0.0]), np.zeros(2)))
    prof = distance_profile(net, [0.5, 0.2], 1, 2.0)
    assert math.isinf(prof.boundary_dists[0])
    assert np.isfinite(prof.boundary_dists[1])


def test_norm_monotonicity_per_hyperplane():
    rng = np.random.default_rng(3)
    for seed in range(5):
        net = tiny_net(seed)
        x = rng.uniform(0, 1, size=2)
        d1 = distance_profile(net, x, 1, 1.0).boundary_dists
        d2 = distance_profile(net, x, 1, 2.0).boundary_dists
        dinf = distance_profile(net, x, 1, math.inf).boundary_dists
        assert (dinf <= d2 + 1e-12).all()
        assert (d2 <= d1 + 1e-12).all()


def test_certify_single_norm_misclassified_is_zero():
    net = ReluNet((np.array([[10.0, 3.0], [0.0, 0.0]]),), (np.array([-6.5, 0.0]),))
    assert certify_single_norm(net, [0.3, 0.3], 1, 2.0) == 0.0


def test_certify_single_norm_linear_exact():
    net = ReluNet((np.array([[10.0, 3.0], [0.0, 0.0]]),), (np.array([-6.5, 0.0]),))
    x = np.array([0.53, 0.50])
    for p in (1.0, 2.0, math.inf):
        cert = certify_single_norm(net, x, 1, p)
        oracle = exact_robustness_oracle(net, x, 1, p)
        assert cert == pytest.approx(oracle.value, abs=1e-9)


def test_scale_covariance_of_certificates():
    rng = np.random.default_rng(8)
    net = tiny_net(3)
    ws = [w.copy() for w in net.weights]
    bs = [b.copy() for b in net.biases]
    ws[-1] = 7.5 * ws[-1]
    bs[-1] = 7.5 * bs[-1]
    scaled = ReluNet(tuple(ws), tuple(bs))
    for _ in range(20):
        x = rng.uniform(0, 1, size=2)
        for p in (1.0, 2.0, math.inf):
            a = certify_single_norm(net, x, 1, p)
            b = certify_single_norm(scaled, x, 1, p)
            assert a == pytest.approx(b, abs=1e-9)
        assert certify_universal(net, x, 1, 2.0) == pytest.approx(
            certify_universal(scaled, x, 1, 2.0), abs=1e-9)


def test_certify_universal_reference_value():
    # rho1 = 1, rho_inf = 0.1 gives the familiar 0.3162 radius at p = 2
    assert geometry.hull_min_norm(1.0, 0.1, 2.0) == pytest.approx(0.316228, abs=1e-6)
    # integer ratio: rho1 = k * rho_inf collapses to rho1 / k^(1/2)
    for k in (2, 3, 5):
        assert geometry.hull_min_norm(1.0, 1.0 / k, 2.0) == pytest.approx(
            1.0 / math.sqrt(k), abs=1e-12)


def test_certify_universal_vs_union_substitution():
    rng = np.random.default_rng(14)
    checked = 0
    for seed in range(6):
        net = tiny_net(seed)
        for _ in range(30):
            x = rng.uniform(0, 1, size=2)
            label = net_core.classify(net, x)
            pc = point_certificate(net, x, label)
            if not pc.correct or pc.rho_inf <= 0 or not math.isfinite(pc.rho1):
                continue
            cu = certify_universal(net, x, label, 2.0)
            union = geometry.union_min_norm(
                geometry.BallPair(pc.rho1, pc.rho_inf, 2), 2.0)
            assert cu >= union - 1e-12
            checked += 1
    assert checked > 100


def test_universal_bound_function_limits():
    net = tiny_net(1)
    rng = np.random.default_rng(2)
    x = rng.uniform(0, 1, size=2)
    label = net_core.classify(net, x)
    pc = point_certificate(net, x, label)
    if pc.correct and pc.rho_inf > 0:
        assert pc.universal_bound(1.0) == pytest.approx(pc.rho1, rel=1e-12)
        assert pc.universal_bound(math.inf) == pytest.approx(pc.rho_inf, rel=1e-12)
        assert pc.universal_bound(2.0) == pytest.approx(pc.lb_l2, rel=1e-12)


def test_oracle_two_unit_hand_enumeration():
    # f1 = relu(x1 - 1) + relu(x2 - 1), f2 = 0.5, x = (2, 2).
    # Four activation regions; the class-change set {f2 >= f1} is closest at
    # the segment x1 + x2 = 2.5 (both units active), giving r_1 = 1.5,
    # r_2 = 1.5/sqrt(2), r_inf = 0.75.
    net = ReluNet(
        (np.eye(2), np.array([[1.0, 1.0], [0.0, 0.0]])),
        (np.array([-1.0, -1.0]), np.array([0.0, 0.5])),
    )
    x = np.array([2.0, 2.0])
    expected = {1.0: 1.5, 2.0: 1.0606601717798212, math.inf: 0.75}
    for p, ref in expected.items():
        res = exact_robustness_oracle(net, x, 1, p)
        assert res.exact
        assert res.num_regions == 4
        assert res.value == pytest.approx(ref, abs=1e-9)
    # the certified bound stays below the true radius
    assert certify_single_norm(net, x, 1, 2.0) == pytest.approx(1.0)
    assert certify_universal(net, x, 1, 2.0) <= expected[2.0] + 1e-9


def test_oracle_budget_exhaustion_flags_inexact():
    net = ReluNet(
        (np.eye(2), np.array([[1.0, 1.0], [0.0, 0.0]])),
        (np.array([-1.0, -1.0]), np.array([0.0, 0.5])),
    )
    x = np.array([2.0, 2.0])
    certify._ATLAS_CACHE.pop(net, None)
    truncated = exact_robustness_oracle(net, x, 1, 2.0, budget=1)
    assert not truncated.exact
    assert truncated.num_regions == 1
    certify._ATLAS_CACHE.pop(net, None)
    full = exact_robustness_oracle(net, x, 1, 2.0)
    # best-so-far stays a valid upper bound on the exact value
    assert truncated.value >= full.value - 1e-12


def test_oracle_zero_for_misclassified():
    net = ReluNet((np.array([[10.0, 3.0], [0.0, 0.0]]),), (np.array([-6.5, 0.0]),))
    res = exact_robustness_oracle(net, [0.3, 0.3], 1, 2.0)
    assert res.value == 0.0 and res.exact


def test_certificates_below_oracle_spot_check():
    rng = np.random.default_rng(20)
    for seed in range(4):
        net = tiny_net(seed + 10)
        for _ in range(10):
            x = rng.uniform(0, 1, size=2)
            label = net_core.classify(net, x)
            for p in (1.0, 2.0, math.inf):
                cert = certify_single_norm(net, x, label, p)
                res = exact_robustness_oracle(net, x, label, p)
                assert cert <= res.value + 1e-9
            cu = certify_universal(net, x, label, 2.0)
            assert cu <= exact_robustness_oracle(net, x, label, 2.0).value + 1e-9


def test_robust_error_upper_bound_edges():
    # one misclassified point -> 1.0
    net = ReluNet((np.array([[10.0, 3.0], [0.0, 0.0]]),), (np.array([-6.5, 0.0]),))
    ds = _Points([[0.3, 0.3]], [1])
    assert robust_error_upper_bound(net, ds, EpsTriple(0.01, 0.01, 0.01)) == 1.0
    # linear classifier with margins 10x the radii -> 0.0
    x = np.array([0.53, 0.50])
    margins = {p: distance_profile(net, x, 1, p).min_decision
               for p in (1.0, 2.0, math.inf)}
    eps = EpsTriple(margins[1.0] / 10, margins[2.0] / 10, margins[math.inf] / 10)
    assert robust_error_upper_bound(net, _Points([x], [1]), eps) == 0.0
    with pytest.raises(ValueError):
        robust_error_upper_bound(net, _Points(np.zeros((0, 2)), []), eps)


def test_upper_bound_threads_deterministic():
    rng = np.random.default_rng(1)
    net = tiny_net(2)
    X = rng.uniform(0, 1, size=(40, 2))
    y = net_core.classify_batch(net, X)
    ds = _Points(X, y)
    eps = EpsTriple(0.05, 0.03, 0.01)
    assert robust_error_upper_bound(net, ds, eps, threads=1) == \
        robust_error_upper_bound(net, ds, eps, threads=4)
