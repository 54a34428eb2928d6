"""Margin regularizers, full training loss, manual gradients and the trainer.

The universal regularizer pushes the k_B nearest region hyperplanes and all
decision hyperplanes beyond gamma1 in l1-distance and gamma_inf in
linf-distance simultaneously, which widens the linear regions around the
training points and hence raises the certified radii for every norm order.

Gradients are assembled by reverse-mode accumulation through the per-layer
affine maps, with activation masks and sort orders treated as constants of
the forward pass.  Subgradient choices at the kinks: inactive branch at ReLU
kinks, zero at absolute-value and hinge kinks, lowest index at sort ties.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import certify, net_core
from .geometry import dual_exponent

__all__ = [
    "MmrLpConfig",
    "MmrUniversalConfig",
    "TrainConfig",
    "TrainingDiverged",
    "mmr_lp",
    "mmr_universal",
    "loss",
    "loss_gradient",
    "train",
    "kb_schedule",
    "lambda_ramp_factor",
]


class TrainingDiverged(RuntimeError):
    """Raised when the training loss becomes non-finite."""


@dataclass(frozen=True)
class MmrLpConfig:
    """Single-norm margin regularizer settings (k-smallest hinge averages)."""

    p: float
    k_b: int
    k_d: int
    gamma_b: float
    gamma_d: float

    def __post_init__(self):
        if not (self.p >= 1.0):
            raise ValueError("p must be >= 1")
        if self.k_b < 1 or self.k_d < 1:
            raise ValueError("k_b and k_d must be positive")
        if not (self.gamma_b > 0 and self.gamma_d > 0):
            raise ValueError("margins must be positive")


@dataclass(frozen=True)
class MmrUniversalConfig:
    """Joint l1/linf margin regularizer settings.

    lambda1/lambda_inf weight the two norms, gamma1/gamma_inf are the target
    margins.  k_B follows a per-epoch schedule from kb_start_frac to
    kb_end_frac of the total hidden unit count, and the lambdas ramp from a
    tenth of their value to full strength over lambda_ramp_epochs.
    """

    lambda1: float = 1.0
    lambda_inf: float = 6.0
    gamma1: float = 1.0
    gamma_inf: float = 0.1
    kb_start_frac: float = 0.20
    kb_end_frac: float = 0.05
    lambda_ramp_epochs: int = 10

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda_inf < 0:
            raise ValueError("lambdas must be nonnegative")
        if not (self.gamma1 > 0 and self.gamma_inf > 0):
            raise ValueError("margins must be positive")
        for f in (self.kb_start_frac, self.kb_end_frac):
            if not (0.0 < f <= 1.0):
                raise ValueError("k_B fractions must be in (0, 1]")
        if self.lambda_ramp_epochs < 0:
            raise ValueError("ramp length must be nonnegative")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    learning_rate: float = 5e-4
    lr_drop_factor: float = 10.0
    lr_drop_last: int = 10
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be positive")
        if self.learning_rate <= 0 or self.lr_drop_factor <= 0:
            raise ValueError("learning rate settings must be positive")


def kb_schedule(epoch: int, total_epochs: int, num_hidden: int,
                start_frac: float = 0.20, end_frac: float = 0.05) -> int:
    """Linear per-epoch interpolation of k_B, rounded to the nearest >= 1."""
    if total_epochs <= 1:
        frac = end_frac
    else:
        frac = start_frac + (end_frac - start_frac) * epoch / (total_epochs - 1)
    return max(1, int(np.rint(frac * num_hidden)))


def lambda_ramp_factor(epoch: int, ramp_epochs: int) -> float:
    """Factor from 0.1 at epoch 0 to 1.0 at epoch ramp_epochs, constant after."""
    if ramp_epochs <= 0:
        return 1.0
    return 0.1 + 0.9 * min(epoch, ramp_epochs) / ramp_epochs


# -- per-point region geometry -------------------------------------------------


def _point_geometry(net, x):
    """Masks, per-layer affine maps and the stacked hidden hyperplane rows."""
    x = np.asarray(x, dtype=np.float64)
    preacts = []
    h = x
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        g = w @ h + b
        preacts.append(g)
        h = np.maximum(g, 0.0)
    masks = [g > 0 for g in preacts]
    v_list, a_list = net_core.affine_maps(net, masks)
    if net.num_hidden_layers > 0:
        rows = np.vstack(v_list[:-1])
        offs = np.concatenate(a_list[:-1])
    else:
        rows = np.zeros((0, net.input_dim))
        offs = np.zeros(0)
    return masks, v_list, a_list, rows, offs


def _dual_den(mat, q):
    if mat.shape[0] == 0:
        return np.zeros(0)
    if math.isinf(q):
        return np.abs(mat).max(axis=1)
    if q == 1.0:
        return np.abs(mat).sum(axis=1)
    return (np.abs(mat) ** q).sum(axis=1) ** (1.0 / q)


def _signed_div(num, den):
    out = np.full(np.shape(num), math.inf)
    np.divide(num, den, out=out, where=den > 0)
    zero = den == 0
    if np.any(zero):
        out[zero & (num < 0)] = -math.inf
    return out


def _hinge(t):
    return np.maximum(0.0, 1.0 - t)


def mmr_lp(net, x, label: int, cfg: MmrLpConfig) -> float:
    """Average hinge on the k_b nearest region hyperplanes and the k_d
    smallest signed decision distances, all wrt the lp-metric of cfg."""
    q = dual_exponent(cfg.p)
    _, v_list, a_list, rows, offs = _point_geometry(net, x)
    x = np.asarray(x, dtype=np.float64)
    db = _signed_div(np.abs(rows @ x + offs), _dual_den(rows, q))
    c = int(label) - 1
    v_out, a_out = v_list[-1], a_list[-1]
    others = [s for s in range(net.num_classes) if s != c]
    diff = v_out[c] - v_out[others]
    dd = _signed_div(diff @ x + (a_out[c] - a_out[others]), _dual_den(diff, q))
    if cfg.k_b > db.size or cfg.k_d > dd.size:
        raise ValueError("k_b/k_d exceed the number of available hyperplanes")
    sel_b = np.sort(db, kind="stable")[: cfg.k_b]
    sel_d = np.sort(dd, kind="stable")[: cfg.k_d]
    return float(_hinge(sel_b / cfg.gamma_b).mean() + _hinge(sel_d / cfg.gamma_d).mean())


def _mmr_point(net, x, label, cfg: MmrUniversalConfig, kb_now, lam1, lam_inf,
               grads=None, weight=1.0):
    """Universal regularizer value at x; optionally accumulates its gradient.

    grads, when given, is a (dW, db) pair of per-layer arrays that receives
    weight * d(reg)/d(params).  Gradients flow through both the numerator
    and the dual-norm denominator of every selected distance, and through
    the affine-map recursion into all earlier layers.
    """
    x = np.asarray(x, dtype=np.float64)
    masks, v_list, a_list, rows, offs = _point_geometry(net, x)
    u = rows @ x + offs
    abs_u = np.abs(u)
    den_b = {1.0: _dual_den(rows, math.inf), math.inf: _dual_den(rows, 1.0)}
    db = {p: _signed_div(abs_u, den_b[p]) for p in (1.0, math.inf)}

    c = int(label) - 1
    k = net.num_classes
    others = [s for s in range(k) if s != c]
    v_out, a_out = v_list[-1], a_list[-1]
    diff = v_out[c] - v_out[others]
    w_num = diff @ x + (a_out[c] - a_out[others])
    den_d = {1.0: _dual_den(diff, math.inf), math.inf: _dual_den(diff, 1.0)}
    dd = {p: _signed_div(w_num, den_d[p]) for p in (1.0, math.inf)}

    n_rows = rows.shape[0]
    kb = min(int(kb_now), n_rows) if n_rows else 0

    want_grad = grads is not None
    if want_grad:
        g_rows = np.zeros_like(rows)
        g_offs = np.zeros_like(offs)
        gv_out = np.zeros_like(v_out)
        ga_out = np.zeros_like(a_out)

    value = 0.0
    for p, lam, gamma in ((1.0, lam1, cfg.gamma1), (math.inf, lam_inf, cfg.gamma_inf)):
        if lam == 0.0:
            continue
        q_inf = p == 1.0  # dual norm is linf for p = 1, l1 for p = inf
        if kb:
            dists, dens = db[p], den_b[p]
            sel = np.argsort(dists, kind="stable")[:kb]
            hv = _hinge(dists[sel] / gamma)
            value += lam * float(hv.sum()) / kb
            if want_grad:
                coef = -(weight * lam) / (kb * gamma)
                for idx in sel[(dists[sel] < gamma) & np.isfinite(dists[sel])]:
                    den = dens[idx]
                    row = rows[idx]
                    su = np.sign(u[idx]) / den
                    g_rows[idx] += coef * su * x
                    g_offs[idx] += coef * su
                    if q_inf:
                        j = int(np.argmax(np.abs(row)))
                        g_rows[idx, j] += coef * (-abs_u[idx] * np.sign(row[j]) / den**2)
                    else:
                        g_rows[idx] += coef * (-abs_u[idx] * np.sign(row) / den**2)
        dists, dens = dd[p], den_d[p]
        hv = _hinge(dists / gamma)
        value += lam * float(hv.sum()) / (k - 1)
        if want_grad:
            coef = -(weight * lam) / ((k - 1) * gamma)
            for i in np.nonzero((dists < gamma) & np.isfinite(dists))[0]:
                s = others[i]
                den = dens[i]
                gw = coef / den
                gv_out[c] += gw * x
                gv_out[s] -= gw * x
                ga_out[c] += gw
                ga_out[s] -= gw
                if q_inf:
                    j = int(np.argmax(np.abs(diff[i])))
                    dj = coef * (-w_num[i] * np.sign(diff[i, j]) / den**2)
                    gv_out[c, j] += dj
                    gv_out[s, j] -= dj
                else:
                    dvec = coef * (-w_num[i] * np.sign(diff[i]) / den**2)
                    gv_out[c] += dvec
                    gv_out[s] -= dvec

    if want_grad:
        _backprop_maps(net, masks, v_list, a_list, g_rows, g_offs, gv_out, ga_out, grads)
    return value


def _backprop_maps(net, masks, v_list, a_list, g_rows, g_offs, gv_out, ga_out, grads):
    """Push affine-map adjoints back through V^(l) = W^(l) (mask * V^(l-1))."""
    dW, db = grads
    sizes = net.hidden_sizes
    gv, ga = [], []
    pos = 0
    for n in sizes:
        gv.append(g_rows[pos:pos + n])
        ga.append(g_offs[pos:pos + n])
        pos += n
    gv.append(gv_out)
    ga.append(ga_out)
    for l in range(len(net.weights) - 1, 0, -1):
        m = masks[l - 1].astype(np.float64)
        mv = v_list[l - 1] * m[:, None]
        ma = a_list[l - 1] * m
        dW[l] += gv[l] @ mv.T + np.outer(ga[l], ma)
        db[l] += ga[l]
        back_v = (net.weights[l].T @ gv[l]) * m[:, None]
        back_a = (net.weights[l].T @ ga[l]) * m
        gv[l - 1] += back_v
        ga[l - 1] += back_a
    dW[0] += gv[0]
    db[0] += ga[0]


def mmr_universal(net, x, label: int, cfg: MmrUniversalConfig, kb_now: int) -> float:
    """Universal l1+linf margin regularizer value at one training point."""
    return _mmr_point(net, x, label, cfg, kb_now, cfg.lambda1, cfg.lambda_inf)


# -- loss and gradients ---------------------------------------------------------


def _as_batch(batch):
    X, y = batch
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y) or len(X) == 0:
        raise ValueError("batch must be a non-empty (features, labels) pair")
    return X, y


def _ce_value_and_grad(net, X, y):
    """Batched softmax cross-entropy value and parameter gradients."""
    B = len(X)
    hs = [X]
    preacts = []
    h = X
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        g = h @ w.T + b
        preacts.append(g)
        h = np.maximum(g, 0.0)
        hs.append(h)
    logits = h @ net.weights[-1].T + net.biases[-1]
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    idx = np.arange(B)
    ce = float(np.mean(lse - logits[idx, y - 1]))
    probs = np.exp(logits - lse[:, None])
    g_out = probs
    g_out[idx, y - 1] -= 1.0
    g_out /= B
    dW = [np.zeros_like(w) for w in net.weights]
    db = [np.zeros_like(b) for b in net.biases]
    dW[-1] = g_out.T @ hs[-1]
    db[-1] = g_out.sum(axis=0)
    g = g_out
    for l in range(len(net.weights) - 2, -1, -1):
        g = (g @ net.weights[l + 1]) * (preacts[l] > 0)
        dW[l] = g.T @ hs[l]
        db[l] = g.sum(axis=0)
    return ce, dW, db


def _effective(cfg: MmrUniversalConfig, net, kb_now, lam_scale):
    if kb_now is None:
        kb_now = max(1, int(np.rint(cfg.kb_start_frac * max(net.num_hidden_units, 1))))
    return kb_now, cfg.lambda1 * lam_scale, cfg.lambda_inf * lam_scale


def loss(net, batch, cfg: MmrUniversalConfig, kb_now=None, lam_scale: float = 1.0) -> float:
    """Mean over the batch of cross-entropy plus the universal regularizer."""
    X, y = _as_batch(batch)
    kb_now, lam1, lam_inf = _effective(cfg, net, kb_now, lam_scale)
    ce, _, _ = _ce_value_and_grad(net, X, y)
    total = ce
    if lam1 > 0 or lam_inf > 0:
        reg = 0.0
        for i in range(len(X)):
            reg += _mmr_point(net, X[i], int(y[i]), cfg, kb_now, lam1, lam_inf)
        total += reg / len(X)
    return total


def _loss_and_grad(net, X, y, cfg, kb_now, lam_scale):
    kb_now, lam1, lam_inf = _effective(cfg, net, kb_now, lam_scale)
    ce, dW, db = _ce_value_and_grad(net, X, y)
    total = ce
    if lam1 > 0 or lam_inf > 0:
        inv_b = 1.0 / len(X)
        reg = 0.0
        for i in range(len(X)):
            reg += _mmr_point(net, X[i], int(y[i]), cfg, kb_now, lam1, lam_inf,
                              grads=(dW, db), weight=inv_b)
        total += reg * inv_b
    return total, dW, db


def loss_gradient(net, batch, cfg: MmrUniversalConfig, kb_now=None,
                  lam_scale: float = 1.0):
    """Exact gradient of loss() wrt every weight matrix and bias vector."""
    X, y = _as_batch(batch)
    _, dW, db = _loss_and_grad(net, X, y, cfg, kb_now, lam_scale)
    return dW, db


# -- optimizer and training loop -------------------------------------------------


class _Adam:
    def __init__(self, shapes_w, shapes_b, beta1, beta2, eps):
        self.m_w = [np.zeros(s) for s in shapes_w]
        self.v_w = [np.zeros(s) for s in shapes_w]
        self.m_b = [np.zeros(s) for s in shapes_b]
        self.v_b = [np.zeros(s) for s in shapes_b]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, weights, biases, dW, db, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1**self.t
        corr2 = 1.0 - b2**self.t
        for i in range(len(weights)):
            self.m_w[i] = b1 * self.m_w[i] + (1 - b1) * dW[i]
            self.v_w[i] = b2 * self.v_w[i] + (1 - b2) * dW[i] ** 2
            weights[i] -= lr * (self.m_w[i] / corr1) / (np.sqrt(self.v_w[i] / corr2) + self.eps)
            self.m_b[i] = b1 * self.m_b[i] + (1 - b1) * db[i]
            self.v_b[i] = b2 * self.v_b[i] + (1 - b2) * db[i] ** 2
            biases[i] -= lr * (self.m_b[i] / corr1) / (np.sqrt(self.v_b[i] / corr2) + self.eps)


def _test_error(net, X, y):
    return float(np.mean(net_core.classify_batch(net, X) != y))


def train(net0, dataset, mmr_cfg: MmrUniversalConfig, train_cfg: TrainConfig,
          eval_dataset=None, cert_sample: int = 128):
    """Run the full training protocol and return (trained net, history).

    Shuffled mini-batches with Adam; k_B interpolates linearly per epoch from
    kb_start_frac to kb_end_frac of the hidden units, the lambdas ramp up
    over the first lambda_ramp_epochs epochs, and the learning rate is
    divided by lr_drop_factor for the final lr_drop_last epochs.  History
    records per-epoch loss, test error and mean certified radii on a sample
    of the evaluation set.
    """
    if train_cfg.epochs < mmr_cfg.lambda_ramp_epochs:
        raise ValueError("epochs must be at least lambda_ramp_epochs")
    X = np.asarray(dataset.features, dtype=np.float64)
    y = np.asarray(dataset.labels, dtype=np.int64)
    if eval_dataset is None:
        X_ev, y_ev = X, y
    else:
        X_ev = np.asarray(eval_dataset.features, dtype=np.float64)
        y_ev = np.asarray(eval_dataset.labels, dtype=np.int64)
    n = len(X)
    rng = np.random.default_rng(train_cfg.seed)
    weights = [w.copy() for w in net0.weights]
    biases = [b.copy() for b in net0.biases]
    adam = _Adam([w.shape for w in weights], [b.shape for b in biases],
                 train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps)
    num_hidden = net0.num_hidden_units
    history = []
    net = net0.with_parameters(weights, biases)
    for epoch in range(train_cfg.epochs):
        kb = kb_schedule(epoch, train_cfg.epochs, num_hidden,
                         mmr_cfg.kb_start_frac, mmr_cfg.kb_end_frac)
        lam_scale = lambda_ramp_factor(epoch, mmr_cfg.lambda_ramp_epochs)
        lr = train_cfg.learning_rate
        if epoch >= train_cfg.epochs - train_cfg.lr_drop_last:
            lr /= train_cfg.lr_drop_factor
        perm = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, train_cfg.batch_size):
            sel = perm[start:start + train_cfg.batch_size]
            value, dW, db = _loss_and_grad(net, X[sel], y[sel], mmr_cfg, kb, lam_scale)
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss {value} at epoch {epoch}, batch offset {start}")
            adam.step(weights, biases, dW, db, lr)
            net = net.with_parameters(weights, biases)
            epoch_losses.append(value)
        m = min(cert_sample, len(X_ev))
        rho1 = np.empty(m)
        rho_inf = np.empty(m)
        for i in range(m):
            pc = certify.point_certificate(net, X_ev[i], int(y_ev[i]))
            rho1[i] = pc.rho1 if math.isfinite(pc.rho1) else 0.0
            rho_inf[i] = pc.rho_inf if math.isfinite(pc.rho_inf) else 0.0
        history.append({
            "epoch": epoch,
            "loss": float(np.mean(epoch_losses)),
            "test_error": _test_error(net, X_ev, y_ev),
            "mean_rho1": float(rho1.mean()),
            "mean_rho_inf": float(rho_inf.mean()),
            "kb": kb,
            "lambda_scale": lam_scale,
            "lr": lr,
        })
    return net, history
