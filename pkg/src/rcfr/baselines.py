"""Comparison methods: importance sampling, (weighted) OLS, IPW and IPM-WNN."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .data import SourceSample, TargetSample
from .ipm import KernelConfig
from .model import TrainConfig, _imbalance_w, fit, imbalance_grams, normalize_weights
from .nn import AdamState, Mlp, adam_step, backward, forward, softplus
from .numerics import ShapeError, as_matrix, make_rng

OLS_REG = 1e-8
RIDGE_FALLBACK = 1e-3


# ---------------------------------------------------------------- importance sampling


def is_weights_gaussian_raw(x, m_mu, m_pi) -> np.ndarray:
    """Density ratio N(x; m_pi, I) / N(x; m_mu, I), unnormalised."""
    x = as_matrix(x, "x")
    m_mu = np.asarray(m_mu, dtype=np.float64).reshape(-1)
    m_pi = np.asarray(m_pi, dtype=np.float64).reshape(-1)
    if not (x.shape[1] == m_mu.shape[0] == m_pi.shape[0]):
        raise ShapeError(f"x has {x.shape[1]} columns, means have {m_mu.shape[0]} and {m_pi.shape[0]}")
    return np.exp(x @ (m_pi - m_mu) + 0.5 * (m_mu @ m_mu - m_pi @ m_pi))


def is_weights_gaussian(x, m_mu, m_pi) -> np.ndarray:
    """Exact importance weights for unit-covariance Gaussian designs, mean one."""
    raw = is_weights_gaussian_raw(x, m_mu, m_pi)
    return raw / raw.mean()


def clip_weights(w, M: float) -> np.ndarray:
    if not M > 0:
        raise ValueError("clip level must be positive")
    c = np.minimum(np.asarray(w, dtype=np.float64), M)
    return c / c.mean()


# ---------------------------------------------------------------- OLS


@dataclass
class LinearModel:
    coef: np.ndarray  # (n_arms, d)
    intercept: np.ndarray  # (n_arms,)

    def predict(self, x, t) -> np.ndarray:
        x = as_matrix(x, "x")
        t = np.asarray(t, dtype=np.int64).reshape(-1)
        if t.size and (t.min() < 0 or t.max() >= self.coef.shape[0]):
            raise ValueError("treatment outside arm set")
        return (x * self.coef[t]).sum(1) + self.intercept[t]


def _solve_weighted(x, y, w):
    n, d = x.shape
    a = np.hstack([x, np.ones((n, 1))])
    reg = OLS_REG if n > d else RIDGE_FALLBACK
    gram = a.T @ (w[:, None] * a) + reg * np.eye(d + 1)
    rhs = a.T @ (w * y)
    try:
        sol = np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"normal equations are singular ({n} rows, {d} features)") from exc
    return sol[:d], sol[d]


def ols_weighted_fit(x, t, y, w, n_arms: int | None = None) -> LinearModel:
    """Per-arm weighted least squares with a separate intercept per arm."""
    x = as_matrix(x, "x")
    t = np.asarray(t, dtype=np.int64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    n_arms = int(n_arms if n_arms is not None else t.max() + 1)
    coef = np.zeros((n_arms, x.shape[1]))
    icpt = np.zeros(n_arms)
    for a in range(n_arms):
        idx = t == a
        if not idx.any():
            continue
        coef[a], icpt[a] = _solve_weighted(x[idx], y[idx], w[idx])
    return LinearModel(coef, icpt)


def ols_fit(x, t, y, n_arms: int | None = None) -> LinearModel:
    return ols_weighted_fit(x, t, y, np.ones(np.asarray(y).size), n_arms)


# ---------------------------------------------------------------- propensity / IPW


@dataclass
class PropensityModel:
    coef: np.ndarray
    intercept: float

    def predict_proba(self, x) -> np.ndarray:
        """P(t = 1 | x), clipped into the open unit interval."""
        p = expit(as_matrix(x, "x") @ self.coef + self.intercept)
        return np.clip(p, 1e-12, 1 - 1e-12)


def propensity_fit(x, t, steps: int = 2000, lr: float = 1e-2, l2: float = 1e-4, seed: int = 0) -> PropensityModel:
    """Logistic regression trained with full-batch ADAM on the mean log-loss."""
    x = as_matrix(x, "x")
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if np.unique(t).size < 2:
        raise ValueError("propensity model needs both arms present")
    net = Mlp.init((x.shape[1], 1), ["linear"], make_rng(seed))
    state = AdamState(lr=lr)
    n = x.shape[0]
    for _ in range(steps):
        logit, cache = forward(net, x)
        g = (expit(logit[:, 0]) - t) / n
        grads, _ = backward(net, cache, g[:, None])
        grads[0] = grads[0] + 2.0 * l2 * net.layers[0].weight
        adam_step(state, net, grads)
    layer = net.layers[0]
    return PropensityModel(layer.weight[:, 0].copy(), float(layer.bias[0]))


def ipw_weights(pm: PropensityModel, x, t) -> np.ndarray:
    """Stabilised inverse-propensity weights, mean one within each arm."""
    t = np.asarray(t, dtype=np.int64).reshape(-1)
    p1 = pm.predict_proba(x)
    p_t = np.where(t == 1, p1, 1.0 - p1)
    u = np.array([np.mean(t == 0), np.mean(t == 1)])
    w = np.clip(u[t] / p_t, 1e-3, 1e3)
    return normalize_weights(w, t, per_arm=True)


def log_loss(p, t) -> float:
    p = np.clip(np.asarray(p, dtype=np.float64), 1e-12, 1 - 1e-12)
    t = np.asarray(t, dtype=np.float64)
    return float(-np.mean(t * np.log(p) + (1 - t) * np.log1p(-p)))


def ols_ipw_fit(x, t, y, seed: int = 0) -> LinearModel:
    pm = propensity_fit(x, t, seed=seed)
    return ols_weighted_fit(x, t, y, ipw_weights(pm, x, t))


# ---------------------------------------------------------------- IPM-WNN


def input_space_weights(
    x, t, x_tgt, lambda_w: float = 0.1, kernel: KernelConfig = KernelConfig(),
    steps: int = 500, lr: float = 1e-2, per_arm: bool = True,
) -> np.ndarray:
    """One free softplus-parameterised weight per row, balancing raw inputs.

    Minimises MMD^2 + lambda_w * ||w||_2 / n with ADAM, starting from uniform
    weights.  ``x_tgt=None`` balances each arm against the pooled rows.
    """
    x = as_matrix(x, "x")
    t = np.asarray(t, dtype=np.int64).reshape(-1)
    n = x.shape[0]
    x_tgt = None if x_tgt is None else as_matrix(x_tgt, "x_tgt")
    groups = [np.flatnonzero(t == a) for a in np.unique(t)] if per_arm else [np.arange(n)]
    theta = np.full(n, np.log(np.expm1(1.0)))  # softplus(theta) = 1
    state = AdamState(lr=lr)

    def weights(th):
        raw = softplus(th) + 1e-6
        w = np.empty(n)
        for idx in groups:
            w[idx] = raw[idx] / raw[idx].mean()
        return raw, w

    # inputs never move, so the kernel sums are computed once
    grams = imbalance_grams(x, t, x_tgt, kernel)
    for _ in range(steps):
        raw, w = weights(theta)
        _, gw = _imbalance_w(grams, w)
        norm = np.linalg.norm(w)
        gw = gw + lambda_w * w / (norm * n)
        graw = np.empty(n)
        for idx in groups:
            s = raw[idx].mean()
            graw[idx] = (gw[idx] - (gw[idx] * w[idx]).sum() / idx.size) / s
        gtheta = graw * expit(theta)
        adam_step(state, [theta], [gtheta])
    return weights(theta)[1]


@dataclass
class IpmWnnModel:
    weights: np.ndarray
    net: object

    def predict(self, x, t):
        return self.net.predict(x, t)


def ipm_wnn_fit(
    source: SourceSample,
    target: TargetSample | None,
    cfg: TrainConfig,
    validation: SourceSample | None = None,
    stage1_steps: int = 500,
) -> IpmWnnModel:
    """Input-space weights first, then a weighted network fit with alpha = 0."""
    x_tgt = None if target is None else target.x
    w = input_space_weights(
        source.x, source.t, x_tgt, cfg.lambda_w, cfg.kernel, steps=stage1_steps,
        per_arm=cfg.per_arm_weights,
    )
    net, _ = fit(source, target, cfg.replace(alpha=0.0, alpha_mode="fixed"), validation, fixed_weights=w)
    return IpmWnnModel(w, net)
