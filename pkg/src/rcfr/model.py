"""Re-weighted counterfactual regression.

The predictor is ``f(x, t) = h_t(Phi(x))`` where ``Phi`` is a small ELU
network whose output rows are projected onto the unit sphere, and each arm
``t`` has its own head ``h_t``.  A separate weight network maps
``(Phi(x), onehot(t))`` to a positive sample weight.

Training alternates two sub-problems:

* heads and representation minimise the weighted factual risk plus
  ``alpha`` times the weighted MMD, with the weights held fixed;
* the weight network minimises ``alpha`` times the weighted MMD plus the
  weight-norm penalty, with the representation held fixed.

The weight network never sees the factual risk.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from .data import SourceSample, TargetSample
from .ipm import GramSummary, KernelConfig, gram_summary, mmd2_weights, rbf_gram, weighted_mmd2
from .nn import AdamState, Mlp, adam_step, backward, forward
from .numerics import ShapeError, as_matrix, make_rng, pairwise_sq_dists

log = logging.getLogger(__name__)

REP_EPS = 1e-8
WEIGHT_EPS = 1e-6
ALPHA_MIN, ALPHA_MAX = 1e-6, 1e4


class NumericalError(FloatingPointError):
    """A training objective became non-finite."""


@dataclass
class TrainConfig:
    alpha_mode: str = "fixed"  # fixed | adaptive | oracle
    alpha: float = 1.0  # fixed value, or starting value in adaptive mode
    ema_decay: float = 0.99
    lambda_h: float = 1e-4
    lambda_w: float = 0.1
    bandwidth: float = 1.0
    learning_rate: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 300
    patience: int = 30
    seed: int = 0
    w_steps_per_cycle: int = 10
    hphi_steps_per_cycle: int | None = None  # None: one pass over the data
    w_batch_size: int | None = None  # None: full batch for weight updates
    rep_layers: tuple = (32, 16)
    head_layers: tuple = (16,)
    weight_layers: tuple = (32, 32)
    normalize_rep: bool = True
    learn_weights: bool = True
    per_arm_weights: bool = True
    early_stop_metric: str = "objective"  # objective | factual

    def __post_init__(self):
        for name in ("rep_layers", "head_layers", "weight_layers"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.alpha_mode not in ("fixed", "adaptive", "oracle"):
            raise ValueError(f"alpha_mode must be fixed, adaptive or oracle, got {self.alpha_mode!r}")
        if self.early_stop_metric not in ("objective", "factual"):
            raise ValueError(f"unknown early_stop_metric {self.early_stop_metric!r}")
        if not (self.learning_rate > 0 and self.bandwidth > 0 and self.batch_size >= 1):
            raise ValueError("learning_rate, bandwidth and batch_size must be positive")
        if self.patience < 1 or self.max_epochs < 1:
            raise ValueError("patience and max_epochs must be at least 1")
        if self.lambda_h < 0 or self.lambda_w < 0 or self.alpha < 0:
            raise ValueError("alpha, lambda_h and lambda_w must be non-negative")
        if not 0 < self.ema_decay <= 1:
            raise ValueError("ema_decay must lie in (0, 1]")

    @property
    def kernel(self) -> KernelConfig:
        return KernelConfig(self.bandwidth)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise KeyError(f"unknown TrainConfig keys: {', '.join(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        doc = asdict(self)
        for name in ("rep_layers", "head_layers", "weight_layers"):
            doc[name] = list(doc[name])
        return doc

    def replace(self, **changes) -> "TrainConfig":
        doc = asdict(self)
        doc.update(changes)
        return TrainConfig.from_dict(doc)


@dataclass
class RcfrModel:
    rep_net: Mlp | None  # None: identity representation
    heads: list[Mlp]
    weight_net: Mlp
    in_dim: int
    normalize_rep: bool = True
    alpha: float = 1.0

    @classmethod
    def init(cls, in_dim: int, n_arms: int, cfg: TrainConfig, rng: np.random.Generator) -> "RcfrModel":
        if cfg.rep_layers:
            sizes = (in_dim, *cfg.rep_layers)
            rep = Mlp.init(sizes, ["elu"] * len(cfg.rep_layers), rng)
            rep_dim = cfg.rep_layers[-1]
        else:
            rep, rep_dim = None, in_dim
        heads = [
            Mlp.init((rep_dim, *cfg.head_layers, 1), ["elu"] * len(cfg.head_layers) + ["linear"], rng)
            for _ in range(n_arms)
        ]
        w_in = rep_dim + (n_arms if n_arms > 1 else 0)
        # zero output layer: training starts from uniform weights
        wnet = Mlp.init(
            (w_in, *cfg.weight_layers, 1),
            ["elu"] * len(cfg.weight_layers) + ["softplus"],
            rng,
            zero_last=True,
        )
        return cls(rep, heads, wnet, in_dim, cfg.normalize_rep, cfg.alpha)

    @property
    def n_arms(self) -> int:
        return len(self.heads)

    @property
    def rep_dim(self) -> int:
        return self.rep_net.out_dim if self.rep_net is not None else self.in_dim

    def predict(self, x, t) -> np.ndarray:
        return predict(self, x, t)

    def copy(self) -> "RcfrModel":
        return RcfrModel(
            None if self.rep_net is None else self.rep_net.copy(),
            [h.copy() for h in self.heads],
            self.weight_net.copy(),
            self.in_dim,
            self.normalize_rep,
            self.alpha,
        )

    def to_dict(self, cfg: TrainConfig | None = None) -> dict:
        return {
            "header": {
                "in_dim": self.in_dim,
                "rep_dim": self.rep_dim,
                "n_arms": self.n_arms,
                "normalize_rep": self.normalize_rep,
                "alpha": self.alpha,
                "config": None if cfg is None else cfg.to_dict(),
            },
            "rep_net": None if self.rep_net is None else self.rep_net.to_dict(),
            "heads": [h.to_dict() for h in self.heads],
            "weight_net": self.weight_net.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RcfrModel":
        hdr = doc["header"]
        rep = None if doc["rep_net"] is None else Mlp.from_dict(doc["rep_net"])
        return cls(
            rep,
            [Mlp.from_dict(h) for h in doc["heads"]],
            Mlp.from_dict(doc["weight_net"]),
            int(hdr["in_dim"]),
            bool(hdr["normalize_rep"]),
            float(hdr["alpha"]),
        )

    def save(self, path, cfg: TrainConfig | None = None) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(cfg), fh)

    @classmethod
    def load(cls, path) -> "RcfrModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------- forward parts


@dataclass
class _RepCache:
    net_cache: object
    raw: np.ndarray
    norms: np.ndarray | None


def _rep_forward(model: RcfrModel, x) -> tuple[np.ndarray, _RepCache]:
    x = as_matrix(x, "x")
    if x.shape[1] != model.in_dim:
        raise ShapeError(f"x has {x.shape[1]} columns, model expects {model.in_dim}")
    if model.rep_net is None:
        raw, nc = x, None
    else:
        raw, nc = forward(model.rep_net, x)
    if not model.normalize_rep:
        return raw, _RepCache(nc, raw, None)
    norms = np.maximum(np.linalg.norm(raw, axis=1), REP_EPS)
    return raw / norms[:, None], _RepCache(nc, raw, norms)


def _rep_backward(model: RcfrModel, cache: _RepCache, dz: np.ndarray) -> list[np.ndarray]:
    if cache.norms is not None:
        z = cache.raw / cache.norms[:, None]
        active = np.linalg.norm(cache.raw, axis=1) > REP_EPS
        proj = (dz * z).sum(1)
        dr = dz / cache.norms[:, None]
        dr[active] -= (proj[active] / cache.norms[active])[:, None] * z[active]
    else:
        dr = dz
    if model.rep_net is None:
        return []
    grads, _ = backward(model.rep_net, cache.net_cache, dr)
    return grads


def representation(model: RcfrModel, x) -> np.ndarray:
    """Unit-norm representation rows (a zero raw row stays zero)."""
    return _rep_forward(model, x)[0]


def _check_arms(model: RcfrModel, t) -> np.ndarray:
    t = np.asarray(t).reshape(-1)
    if t.size and (t.min() < 0 or t.max() >= model.n_arms or np.any(t != np.round(t))):
        raise ValueError(f"treatment outside arm set 0..{model.n_arms - 1}")
    return t.astype(np.int64)


def _heads_forward(model: RcfrModel, z: np.ndarray, t: np.ndarray):
    pred = np.empty(z.shape[0])
    caches = []
    for a, head in enumerate(model.heads):
        idx = np.flatnonzero(t == a)
        if idx.size == 0:
            continue
        out, c = forward(head, z[idx])
        pred[idx] = out[:, 0]
        caches.append((a, idx, c))
    return pred, caches


def _heads_backward(model: RcfrModel, caches, dpred: np.ndarray, rep_dim: int, n: int):
    head_grads = [h.zeros_like() for h in model.heads]
    dz = np.zeros((n, rep_dim))
    for a, idx, c in caches:
        g, dzi = backward(model.heads[a], c, dpred[idx][:, None])
        head_grads[a] = g
        dz[idx] = dzi
    return head_grads, dz


def predict(model: RcfrModel, x, t) -> np.ndarray:
    """``h_t(Phi(x))`` for each row."""
    x = as_matrix(x, "x")
    t = _check_arms(model, t)
    if t.shape[0] != x.shape[0]:
        raise ShapeError(f"{t.shape[0]} treatments for {x.shape[0]} rows")
    z = representation(model, x)
    return _heads_forward(model, z, t)[0]


def estimate_cate(model: RcfrModel, x) -> np.ndarray:
    if model.n_arms != 2:
        raise ValueError(f"CATE needs a binary-arm model, this one has {model.n_arms} arms")
    x = as_matrix(x, "x")
    z = representation(model, x)
    f1 = model.heads[1].forward(z)[0][:, 0]
    f0 = model.heads[0].forward(z)[0][:, 0]
    return f1 - f0


# ---------------------------------------------------------------- weights


def _groups(t: np.ndarray, per_arm: bool) -> list[np.ndarray]:
    if not per_arm:
        return [np.arange(t.shape[0])]
    return [np.flatnonzero(t == a) for a in np.unique(t)]


def _weight_input(model: RcfrModel, z: np.ndarray, t: np.ndarray) -> np.ndarray:
    if model.n_arms > 1:
        return np.hstack([z, np.eye(model.n_arms)[t]])
    return z


def normalize_weights(raw, t=None, per_arm: bool = True) -> np.ndarray:
    """Divide by the mean (within each arm when ``per_arm``)."""
    raw = np.asarray(raw, dtype=np.float64).reshape(-1)
    t = np.zeros(raw.shape[0], dtype=np.int64) if t is None else np.asarray(t)
    w = np.empty_like(raw)
    for idx in _groups(t, per_arm):
        r = raw[idx]
        w[idx] = 1.0 if np.ptp(r) == 0 else r / r.mean()
    return w


@dataclass
class _WeightCache:
    net_cache: object
    raw: np.ndarray
    groups: list


def _weights_forward(model: RcfrModel, z, t, per_arm: bool = True):
    z = as_matrix(z, "z")
    t = _check_arms(model, t)
    if z.shape[0] != t.shape[0]:
        raise ShapeError(f"{z.shape[0]} representation rows for {t.shape[0]} treatments")
    if z.shape[0] == 0:
        raise ValueError("cannot compute weights for an empty batch")
    out, nc = forward(model.weight_net, _weight_input(model, z, t))
    raw = out[:, 0] + WEIGHT_EPS
    groups = _groups(t, per_arm and model.n_arms > 1)
    w = np.empty_like(raw)
    for idx in groups:
        r = raw[idx]
        # equal raw values must give exact ones, not ones up to rounding
        w[idx] = 1.0 if np.ptp(r) == 0 else r / r.mean()
    return w, _WeightCache(nc, raw, groups)


def _weights_backward(model: RcfrModel, cache: _WeightCache, gw: np.ndarray) -> list[np.ndarray]:
    graw = np.empty_like(gw)
    for idx in cache.groups:
        s = cache.raw[idx].mean()
        w = cache.raw[idx] / s
        graw[idx] = (gw[idx] - (gw[idx] * w).sum() / idx.size) / s
    grads, _ = backward(model.weight_net, cache.net_cache, graw[:, None])
    return grads


def compute_weights(model: RcfrModel, z, t, per_arm: bool = True) -> np.ndarray:
    """Positive weights with mean one (per arm for multi-arm models)."""
    return _weights_forward(model, z, t, per_arm)[0]


def weighted_factual_risk(model: RcfrModel, x, t, y, w) -> float:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if not (w.shape[0] == y.shape[0] == as_matrix(x).shape[0]):
        raise ShapeError("x, t, y and w must have the same length")
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise ValueError("weights must be finite and strictly positive")
    e = predict(model, x, t) - y
    return float(np.mean(w * e * e))


# ---------------------------------------------------------------- objectives


@dataclass
class ObjectiveResult:
    value: float
    risk: float = 0.0
    ipm: float = 0.0
    reg: float = 0.0
    rep_grads: list = field(default_factory=list)
    head_grads: list = field(default_factory=list)
    weight_grads: list = field(default_factory=list)
    losses: np.ndarray | None = None
    weights: np.ndarray | None = None


def imbalance(z, t, w, z_tgt, cfg: KernelConfig):
    """Weighted MMD^2 of the source against the target.

    With an explicit target the whole source is compared with it.  Without
    one (treatment effects), each arm's weighted group is compared with the
    uniform pool of all rows and the terms are mixed by arm fraction.

    Returns ``(value, grad_z, grad_w, grad_z_tgt)``.
    """
    n = z.shape[0]
    if z_tgt is not None:
        r = weighted_mmd2(z, w, z_tgt, cfg)
        return r.value, r.grad_src, r.grad_w, r.grad_tgt
    value = 0.0
    gz = np.zeros_like(z)
    gw = np.zeros(n)
    for a in np.unique(t):
        idx = np.flatnonzero(t == a)
        u = idx.size / n
        r = weighted_mmd2(z[idx], w[idx], z, cfg)
        value += u * r.value
        gz[idx] += u * r.grad_src
        gz += u * r.grad_tgt
        gw[idx] += u * r.grad_w
    return value, gz, gw, None


def _head_l2(model: RcfrModel) -> float:
    return float(sum((W * W).sum() for h in model.heads for W in h.weight_matrices()))


def objective_h_phi(model, x, t, y, w, x_tgt, cfg: TrainConfig, alpha: float,
                    skip_fixed_ipm: bool = False) -> ObjectiveResult:
    """Weighted risk + alpha * MMD^2 + lambda_h/sqrt(n) * ||heads||^2 with ``w`` frozen."""
    x = as_matrix(x, "x")
    t = _check_arms(model, t)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    n = x.shape[0]
    z, rc = _rep_forward(model, x)
    pred, hc = _heads_forward(model, z, t)
    e = pred - y
    losses = e * e
    risk = float(np.mean(w * losses))
    head_grads, dz = _heads_backward(model, hc, 2.0 * w * e / n, z.shape[1], n)

    ipm = 0.0
    tgt_rep_grads = []
    # an identity representation has nothing for the imbalance term to move
    if alpha > 0 and (model.rep_net is not None or not skip_fixed_ipm):
        if x_tgt is not None:
            zt, tc = _rep_forward(model, x_tgt)
        else:
            zt, tc = None, None
        ipm, gz, _, gzt = imbalance(z, t, w, zt, cfg.kernel)
        dz = dz + alpha * gz
        if gzt is not None:
            tgt_rep_grads = _rep_backward(model, tc, alpha * gzt)

    coef = cfg.lambda_h / math.sqrt(n)
    reg = coef * _head_l2(model)
    if coef > 0:
        for a, head in enumerate(model.heads):
            for k, W in enumerate(head.weight_matrices()):
                head_grads[a][2 * k] = head_grads[a][2 * k] + 2.0 * coef * W

    rep_grads = _rep_backward(model, rc, dz)
    if tgt_rep_grads:
        rep_grads = [g1 + g2 for g1, g2 in zip(rep_grads, tgt_rep_grads)]
    return ObjectiveResult(
        risk + alpha * ipm + reg, risk, ipm, reg,
        rep_grads=rep_grads, head_grads=head_grads, losses=losses, weights=w,
    )


def imbalance_grams(z, t, z_tgt, cfg: KernelConfig) -> list[tuple]:
    """Per-group kernel sums for ``imbalance`` with the representation frozen."""
    if z_tgt is not None:
        return [(np.arange(z.shape[0]), 1.0, gram_summary(z, z_tgt, cfg))]
    n = z.shape[0]
    k = rbf_gram(z, z, cfg)
    total = float(k.sum())
    out = []
    for a in np.unique(t):
        idx = np.flatnonzero(t == a)
        out.append((idx, idx.size / n, GramSummary(k[np.ix_(idx, idx)], k[idx].sum(1), total, n)))
    return out


def _imbalance_w(grams, w) -> tuple[float, np.ndarray]:
    value = 0.0
    gw = np.zeros_like(w)
    for idx, u, g in grams:
        v, gi = mmd2_weights(g, w[idx])
        value += u * v
        gw[idx] += u * gi
    return value, gw


def objective_w(model, x, t, x_tgt, cfg: TrainConfig, alpha: float, grams=None) -> ObjectiveResult:
    """alpha * MMD^2 + lambda_w * ||w||_2 / n, differentiated w.r.t. the weight net only.

    ``grams`` may carry ``imbalance_grams`` of the current (frozen)
    representation so repeated weight steps skip the kernel evaluations.
    """
    x = as_matrix(x, "x")
    t = _check_arms(model, t)
    n = x.shape[0]
    z = representation(model, x)
    w, wc = _weights_forward(model, z, t, cfg.per_arm_weights)
    gw = np.zeros(n)
    ipm = 0.0
    if alpha > 0:
        if grams is None:
            zt = None if x_tgt is None else representation(model, x_tgt)
            grams = imbalance_grams(z, t, zt, cfg.kernel)
        ipm, gw_ipm = _imbalance_w(grams, w)
        gw = gw + alpha * gw_ipm
    norm = float(np.linalg.norm(w))
    reg = cfg.lambda_w * norm / n
    if cfg.lambda_w > 0:
        gw = gw + cfg.lambda_w * w / (norm * n)
    grads = _weights_backward(model, wc, gw)
    return ObjectiveResult(alpha * ipm + reg, 0.0, ipm, reg, weight_grads=grads, weights=w)


def full_objective(model, x, t, y, x_tgt, cfg: TrainConfig, alpha: float) -> float:
    """The joint objective evaluated directly (no gradients)."""
    x = as_matrix(x, "x")
    t = _check_arms(model, t)
    n = x.shape[0]
    z = representation(model, x)
    w = compute_weights(model, z, t, cfg.per_arm_weights)
    e = predict(model, x, t) - np.asarray(y, dtype=np.float64)
    zt = None if x_tgt is None else representation(model, x_tgt)
    ipm = imbalance(z, t, w, zt, cfg.kernel)[0]
    return float(
        np.mean(w * e * e)
        + cfg.lambda_h / math.sqrt(n) * _head_l2(model)
        + alpha * ipm
        + cfg.lambda_w * np.linalg.norm(w) / n
    )


# ---------------------------------------------------------------- adaptive alpha


@dataclass
class AlphaState:
    alpha: float = 1.0
    decay: float = 0.99
    last_raw: float | None = None

    def __post_init__(self):
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")


def lipschitz_estimate(losses, x) -> float | None:
    """max |l_i - l_j| / ||x_i - x_j|| over pairs that are not coincident."""
    losses = np.asarray(losses, dtype=np.float64).reshape(-1)
    x = as_matrix(x, "x")
    if losses.shape[0] < 2:
        raise ValueError("need at least two samples")
    dist = np.sqrt(pairwise_sq_dists(x, x))
    ok = dist >= 1e-8
    np.fill_diagonal(ok, False)
    if not ok.any():
        return None
    diff = np.abs(losses[:, None] - losses[None, :])
    return float((diff[ok] / dist[ok]).max())


def adaptive_alpha(state: AlphaState, losses, x) -> AlphaState:
    raw = lipschitz_estimate(losses, x)
    if raw is None:
        return state
    alpha = state.decay * state.alpha + (1.0 - state.decay) * raw
    if state.decay < 1:
        alpha = min(max(alpha, ALPHA_MIN), ALPHA_MAX)
    return AlphaState(alpha, state.decay, raw)


# ---------------------------------------------------------------- training


@dataclass
class EpochRecord:
    epoch: int
    risk: float
    ipm: float
    weight_norm: float
    validation: float
    alpha: float
    weight_mean_dev: float
    weight_min: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])


def _batch_indices(rng, n, bs, t, n_arms, order, pos):
    """Next minibatch from a running permutation; reshuffles when exhausted."""
    if pos + bs > n:
        order, pos = rng.permutation(n), 0
    idx = order[pos: pos + bs]
    pos += bs
    if n_arms > 1:
        present = np.unique(t)
        tries = 0
        while np.unique(t[idx]).size < present.size and tries < 100:
            idx = rng.choice(n, size=min(bs, n), replace=False)
            tries += 1
    return idx, order, pos


def _target_batch(rng, m, size):
    if size >= m:
        return np.arange(m)
    return np.sort(rng.choice(m, size=size, replace=False))


def _finite(value, what, epoch, step):
    if not np.isfinite(value):
        raise NumericalError(f"{what} became non-finite at epoch {epoch}, step {step}")


def _stopping_score(model, val: SourceSample, x_tgt, cfg, alpha, learned: bool) -> float:
    t = _check_arms(model, val.t)
    z = representation(model, val.x)
    e = _heads_forward(model, z, t)[0] - val.y
    if cfg.early_stop_metric == "factual":
        return float(np.mean(e * e))
    w = compute_weights(model, z, t, cfg.per_arm_weights) if learned else np.ones(len(val))
    score = float(np.mean(w * e * e))
    if alpha > 0:
        zt = None if x_tgt is None else representation(model, x_tgt)
        score += alpha * imbalance(z, t, w, zt, cfg.kernel)[0]
    return score


def fit(
    source: SourceSample,
    target: TargetSample | None,
    cfg: TrainConfig,
    validation: SourceSample | None = None,
    *,
    n_arms: int | None = None,
    fixed_weights=None,
    weight_monitor: Callable[[np.ndarray], None] | None = None,
) -> tuple[RcfrModel, TrainHistory]:
    """Alternating minimisation of the split objective.

    ``target=None`` means the treatment-effect setting, where every arm is
    balanced against the pooled covariates of the batch.  ``fixed_weights``
    (one per source row) replaces the weight network, which is then never
    updated.  With a ``validation`` sample the parameters with the lowest
    stopping score are returned; otherwise the final parameters are.
    """
    if len(source) == 0:
        raise ValueError("empty source sample")
    rng = make_rng(cfg.seed)
    x, t, y = source.x, source.t, source.y
    n, d = x.shape
    n_arms = int(n_arms if n_arms is not None else t.max() + 1)
    model = RcfrModel.init(d, n_arms, cfg, rng)
    x_tgt = None if target is None else target.x
    per_arm = cfg.per_arm_weights and n_arms > 1

    learn_w = cfg.learn_weights and fixed_weights is None
    if fixed_weights is not None:
        fixed_weights = np.asarray(fixed_weights, dtype=np.float64).reshape(-1)
        if fixed_weights.shape[0] != n or np.any(fixed_weights <= 0):
            raise ValueError("fixed_weights must be positive, one per source row")

    opt_h = AdamState(lr=cfg.learning_rate)
    opt_w = AdamState(lr=cfg.learning_rate)
    alpha_state = AlphaState(cfg.alpha, cfg.ema_decay)
    adaptive = cfg.alpha_mode == "adaptive"
    bs = min(cfg.batch_size, n)
    steps_h = cfg.hphi_steps_per_cycle or math.ceil(n / bs)
    h_nets = ([model.rep_net] if model.rep_net is not None else []) + model.heads

    history = TrainHistory()
    best_score, best_model, stale = np.inf, None, 0
    order, pos = rng.permutation(n), 0
    step = 0
    grams = None
    for epoch in range(cfg.max_epochs):
        dev, wmin = 0.0, np.inf
        for _ in range(steps_h):
            idx, order, pos = _batch_indices(rng, n, bs, t, n_arms, order, pos)
            xt_b = None
            if x_tgt is not None:
                xt_b = x_tgt[_target_batch(rng, x_tgt.shape[0], idx.size)]
            if learn_w:
                w = compute_weights(model, representation(model, x[idx]), t[idx], per_arm)
                if weight_monitor is not None:
                    weight_monitor(w)
                dev = max(dev, abs(w.mean() - 1.0))
                wmin = min(wmin, w.min())
            elif fixed_weights is not None:
                w = normalize_weights(fixed_weights[idx], t[idx], per_arm)
            else:
                w = np.ones(idx.size)
            alpha = alpha_state.alpha
            res = objective_h_phi(model, x[idx], t[idx], y[idx], w, xt_b, cfg, alpha, skip_fixed_ipm=True)
            _finite(res.value, "representation/hypothesis objective", epoch, step)
            grads = res.rep_grads + [g for hg in res.head_grads for g in hg]
            adam_step(opt_h, h_nets, grads)
            if adaptive:
                alpha_state = adaptive_alpha(alpha_state, res.losses, x[idx])
            step += 1

        wnorm, ipm_logged = 0.0, res.ipm
        if learn_w:
            subsample = bool(cfg.w_batch_size) and cfg.w_batch_size < max(n, 0 if x_tgt is None else x_tgt.shape[0])
            if not subsample and (grams is None or model.rep_net is not None):
                zt = None if x_tgt is None else representation(model, x_tgt)
                grams = imbalance_grams(representation(model, x), t, zt, cfg.kernel)
            for _ in range(cfg.w_steps_per_cycle):
                widx, xt_w = slice(None), x_tgt
                if subsample:
                    if cfg.w_batch_size < n:
                        widx = np.sort(rng.choice(n, size=cfg.w_batch_size, replace=False))
                    if x_tgt is not None:
                        xt_w = x_tgt[_target_batch(rng, x_tgt.shape[0], cfg.w_batch_size)]
                res_w = objective_w(model, x[widx], t[widx], xt_w, cfg, alpha_state.alpha,
                                    grams=None if subsample else grams)
                _finite(res_w.value, "weight objective", epoch, step)
                if weight_monitor is not None:
                    weight_monitor(res_w.weights)
                dev = max(dev, abs(res_w.weights.mean() - 1.0))
                wmin = min(wmin, res_w.weights.min())
                adam_step(opt_w, model.weight_net, res_w.weight_grads)
                wnorm, ipm_logged = res_w.reg, res_w.ipm
                step += 1

        alpha = alpha_state.alpha
        model.alpha = alpha
        score = np.nan
        if validation is not None and len(validation):
            val_tgt = x_tgt
            score = _stopping_score(model, validation, val_tgt, cfg, alpha, learn_w)
            _finite(score, "validation objective", epoch, step)
        history.records.append(
            EpochRecord(epoch, res.risk, ipm_logged, wnorm, score, alpha, dev, wmin if wmin < np.inf else 1.0)
        )
        if validation is None or not len(validation):
            continue
        if score < best_score:
            best_score, best_model, stale = score, model.copy(), 0
            history.best_epoch = epoch
        else:
            stale += 1
            if stale >= cfg.patience:
                log.debug("early stop at epoch %d (best %d)", epoch, history.best_epoch)
                break

    if best_model is not None:
        return best_model, history
    history.best_epoch = len(history.records) - 1
    return model, history
