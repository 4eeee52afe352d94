"""Data generators, dataset I/O, evaluation metrics and experiment harnesses.

Two protocols are provided:

* synthetic domain adaptation: Gaussian source/target domains with a
  logistic outcome, a linear hypothesis on the raw inputs and a choice of
  sample weights (learned, exact importance weights, clipped, uniform);
* treatment effects: binary-arm datasets (synthetic, or loaded from CSV in
  the IHDP column layout) split into fit / early-stopping / test rows.
"""
from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .baselines import (
    clip_weights,
    ipm_wnn_fit,
    is_weights_gaussian,
    is_weights_gaussian_raw,
    ols_fit,
    ols_ipw_fit,
)
from .data import CateDataset, SourceSample, TargetSample
from .model import NumericalError, TrainConfig, fit
from .numerics import derive_seed, make_rng

log = logging.getLogger(__name__)

RESULT_COLUMNS = [
    "method", "dataset", "seed", "alpha", "lambda_w", "lambda_h",
    "rmse_tau", "target_risk", "risk_arm0", "risk_arm1", "wall_ms",
]
IHDP_FEATURES = 25
DA_SAMPLE_SIZES = (10, 25, 50, 100, 200, 400, 600)
SPLIT = (0.63, 0.27, 0.10)
ORACLE_ALPHAS = (0.1, 1.0, 10.0, 100.0, 1000.0)


# ---------------------------------------------------------------- generators


@dataclass
class DaTruth:
    beta: np.ndarray
    c: float
    m_mu: np.ndarray
    m_pi: np.ndarray

    def outcome(self, x) -> np.ndarray:
        return expit(np.asarray(x) @ self.beta + self.c)

    def is_weight(self, x) -> np.ndarray:
        """Unnormalised density ratio p_pi(x) / p_mu(x)."""
        return is_weights_gaussian_raw(x, self.m_mu, self.m_pi)


def gen_synthetic_da(
    n: int, m: int, d: int = 10, seed: int = 0, *,
    m_mu=None, m_pi=None, beta=None, c: float | None = None,
) -> tuple[SourceSample, TargetSample, Callable, DaTruth]:
    """Gaussian covariate shift with y = sigmoid(beta'x + c).

    Source rows come from N(1/2, I_d), target rows from N(-1/2, I_d).
    Returns ``(source, target, is_weight_fn, truth)``.
    """
    if n < 1 or m < 1:
        raise ValueError("n and m must be at least 1")
    rng = make_rng(seed)
    b = rng.normal(0.0, math.sqrt(1.5), d)
    cc = rng.normal()
    beta = b if beta is None else np.asarray(beta, dtype=np.float64)
    c = cc if c is None else float(c)
    m_mu = np.full(d, 0.5) if m_mu is None else np.asarray(m_mu, dtype=np.float64)
    m_pi = np.full(d, -0.5) if m_pi is None else np.asarray(m_pi, dtype=np.float64)
    xs = m_mu + rng.standard_normal((n, d))
    xt = m_pi + rng.standard_normal((m, d))
    truth = DaTruth(beta, c, m_mu, m_pi)
    source = SourceSample(xs, np.zeros(n, dtype=np.int64), truth.outcome(xs))
    target = TargetSample(xt, np.zeros(m, dtype=np.int64), truth.outcome(xt))
    return source, target, truth.is_weight, truth


@dataclass
class CateSpec:
    gamma: float = 1.0  # confounding strength: p(t=1|x) = sigmoid(gamma * x1)
    effect: str = "linear"  # linear | quadratic
    noise: float = 0.0
    b: Sequence[float] | None = None  # linear effect slope; drawn when None
    b0: float = 1.0

    def __post_init__(self):
        if self.effect not in ("linear", "quadratic"):
            raise ValueError(f"effect must be linear or quadratic, got {self.effect!r}")
        if self.noise < 0:
            raise ValueError("noise level must be non-negative")


def gen_synthetic_cate(n: int, d: int, seed: int, spec: CateSpec = CateSpec()) -> CateDataset:
    if spec.effect == "quadratic" and d < 2:
        raise ValueError("quadratic effect needs d >= 2")
    rng = make_rng(seed)
    x = rng.standard_normal((n, d))
    t = (rng.random(n) < expit(spec.gamma * x[:, 0])).astype(np.int64)
    a = rng.standard_normal(d)
    b = rng.standard_normal(d) if spec.b is None else np.asarray(spec.b, dtype=np.float64)
    if spec.effect == "linear":
        tau = x @ b + spec.b0
    else:
        tau = x[:, 0] ** 2 - x[:, 1] + spec.b0
    mu0 = x @ a
    mu1 = mu0 + tau
    e_f = spec.noise * rng.standard_normal(n)
    e_cf = spec.noise * rng.standard_normal(n)
    yf = np.where(t == 1, mu1, mu0) + e_f
    ycf = np.where(t == 1, mu0, mu1) + e_cf
    return CateDataset(x, t, yf, ycf, mu0, mu1)


# ---------------------------------------------------------------- CSV I/O


def cate_header(n_features: int = IHDP_FEATURES) -> list[str]:
    return ["treatment", "y_factual", "y_cfactual", "mu0", "mu1"] + [f"x{i}" for i in range(1, n_features + 1)]


class SchemaError(ValueError):
    pass


def _parse_cate_file(path, n_features: int) -> list[CateDataset]:
    header = cate_header(n_features)
    width = len(header)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError(f"{path}: empty file; expected header {','.join(header)}")
    head = [h.strip() for h in rows[0]]
    if len(head) % width or not head:
        raise SchemaError(
            f"{path}: {len(head)} columns; expected a multiple of {width} "
            f"({','.join(header[:6])},...,x{n_features})"
        )
    blocks = len(head) // width
    for k in range(blocks):
        if head[k * width:(k + 1) * width] != header:
            raise SchemaError(f"{path}: column block {k + 1} header does not match {','.join(header[:6])},...")
    values = np.empty((len(rows) - 1, len(head)))
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != len(head):
            raise SchemaError(f"{path}: row {r} has {len(row)} cells, header has {len(head)}")
        for col, cell in enumerate(row):
            try:
                values[r - 2, col] = float(cell)
            except ValueError:
                raise SchemaError(f"{path}: non-numeric cell {cell!r} at row {r}, column {col + 1} ({head[col]})") from None
    out = []
    for k in range(blocks):
        v = values[:, k * width:(k + 1) * width]
        t = v[:, 0]
        bad = np.flatnonzero((t != 0) & (t != 1))
        if bad.size:
            raise SchemaError(f"{path}: treatment must be 0 or 1, found {t[bad[0]]:g} at row {bad[0] + 2}")

        def opt(col):
            return None if np.all(np.isnan(col)) else col.copy()

        out.append(CateDataset(v[:, 5:], t, v[:, 1].copy(), opt(v[:, 2]), opt(v[:, 3]), opt(v[:, 4])))
    return out


def load_cate_csv(paths, n_features: int = IHDP_FEATURES) -> list[CateDataset]:
    """Load one realization per column block, per file."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    out = []
    for p in paths:
        out.extend(_parse_cate_file(p, n_features))
    return out


def save_cate_csv(datasets, path) -> None:
    """Write realizations side by side as repeated column blocks."""
    if isinstance(datasets, CateDataset):
        datasets = [datasets]
    n = len(datasets[0])
    d = datasets[0].x.shape[1]
    if any(len(ds) != n or ds.x.shape[1] != d for ds in datasets):
        raise ValueError("all realizations in one file must share n and d")
    nan = np.full(n, np.nan)
    cols = []
    for ds in datasets:
        cols.extend([ds.t.astype(np.float64), ds.y_factual])
        for v in (ds.y_cfactual, ds.mu0, ds.mu1):
            cols.append(nan if v is None else v)
        cols.extend(ds.x.T)
    mat = np.column_stack(cols)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cate_header(d) * len(datasets))
        for row in mat:
            w.writerow([repr(float(v)) for v in row])


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    method: str
    dataset: str = ""
    seed: int | str = 0
    alpha: float = math.nan
    lambda_w: float = math.nan
    lambda_h: float = math.nan
    rmse_tau: float = math.nan
    target_risk: float = math.nan
    risk_arm0: float = math.nan
    risk_arm1: float = math.nan
    wall_ms: float = 0.0
    config: dict = field(default_factory=dict)
    error: str = ""

    def row(self) -> list[str]:
        out = []
        for col in RESULT_COLUMNS:
            v = getattr(self, col)
            out.append(_fmt(v))
        return out


def _fmt(v) -> str:
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return repr(v)
    return str(v)


def write_results(reports: Sequence[EvalReport], path_or_fh) -> None:
    def emit(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in reports:
            w.writerow(r.row())

    if hasattr(path_or_fh, "write"):
        emit(path_or_fh)
    else:
        with open(path_or_fh, "w", newline="", encoding="utf-8") as fh:
            emit(fh)


def _predict_arm(model, x, arm):
    return np.asarray(model.predict(x, np.full(x.shape[0], arm, dtype=np.int64)), dtype=np.float64)


def eval_cate(model, data: CateDataset, test_mask=None, method: str = "", seed=0) -> EvalReport:
    """CATE RMSE and the mean of the two constant-policy outcome RMSEs."""
    if not data.has_truth:
        raise ValueError("eval_cate needs mu0 and mu1")
    idx = slice(None) if test_mask is None else np.asarray(test_mask)
    x = data.x[idx]
    f0, f1 = _predict_arm(model, x, 0), _predict_arm(model, x, 1)
    mu0, mu1 = data.mu0[idx], data.mu1[idx]
    rmse_tau = float(np.sqrt(np.mean(((f1 - f0) - (mu1 - mu0)) ** 2)))
    r0 = float(np.sqrt(np.mean((f0 - mu0) ** 2)))
    r1 = float(np.sqrt(np.mean((f1 - mu1) ** 2)))
    return EvalReport(method, seed=seed, rmse_tau=rmse_tau, target_risk=0.5 * (r0 + r1), risk_arm0=r0, risk_arm1=r1)


def eval_da(model, target: TargetSample) -> float:
    y = target.evaluation_outcomes()
    pred = np.asarray(model.predict(target.x, target.t), dtype=np.float64)
    return float(np.sqrt(np.mean((pred - y) ** 2)))


def prop1_check(model, data: CateDataset) -> tuple[float, float, bool]:
    """MSE of the CATE estimate against twice the summed constant-policy risks."""
    if not data.has_truth:
        raise ValueError("prop1_check needs mu0 and mu1")
    f0, f1 = _predict_arm(model, data.x, 0), _predict_arm(model, data.x, 1)
    lhs = float(np.mean(((f1 - f0) - data.tau) ** 2))
    rhs = float(2.0 * (np.mean((f1 - data.mu1) ** 2) + np.mean((f0 - data.mu0) ** 2)))
    return lhs, rhs, lhs <= rhs + 1e-9


# ---------------------------------------------------------------- domain adaptation harness


def da_config(**overrides) -> TrainConfig:
    """Linear hypothesis on raw inputs with a small weight network."""
    base = dict(
        alpha=10.0, lambda_w=1e-3, lambda_h=0.0, bandwidth=1.0,
        rep_layers=(), head_layers=(), weight_layers=(10, 10), normalize_rep=False,
        learning_rate=1e-2, batch_size=1000, max_epochs=300,
        hphi_steps_per_cycle=10, w_steps_per_cycle=10, patience=1000,
    )
    base.update(overrides)
    return TrainConfig.from_dict(base)


DA_METHODS = ("rcfr", "is", "isc5", "isc10", "uniform")


def fit_da(method: str, source: SourceSample, target: TargetSample, truth: DaTruth, cfg: TrainConfig):
    """Train the linear hypothesis with the weights named by ``method``."""
    if method not in DA_METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(DA_METHODS)}")
    if method == "rcfr":
        return fit(source, target, cfg)[0]
    plain = cfg.replace(alpha=0.0, alpha_mode="fixed")
    if method == "uniform":
        return fit(source, target, plain.replace(learn_weights=False))[0]
    w = is_weights_gaussian(source.x, truth.m_mu, truth.m_pi)
    if method.startswith("isc"):
        w = clip_weights(w, float(method[3:]))
    return fit(source, target, plain, fixed_weights=w)[0]


def run_da_cell(n: int, m: int, d: int, seed: int, method: str, cfg: TrainConfig | None = None,
                data_seed: int | None = None, timing: bool = False) -> EvalReport:
    cfg = (cfg or da_config()).replace(seed=seed)
    source, target, _, truth = gen_synthetic_da(n, m, d, seed if data_seed is None else data_seed)
    t0 = time.perf_counter()
    model = fit_da(method, source, target, truth, cfg)
    err = eval_da(model, target)
    wall = (time.perf_counter() - t0) * 1e3 if timing else 0.0
    return EvalReport(
        method, f"synth-da(n={n},m={m},d={d})", seed, cfg.alpha if method == "rcfr" else 0.0,
        cfg.lambda_w, cfg.lambda_h, target_risk=err, wall_ms=round(wall, 3), config=cfg.to_dict(),
    )


# ---------------------------------------------------------------- treatment effect harness


def cate_config(**overrides) -> TrainConfig:
    base = dict(alpha=10.0, lambda_w=0.1, lambda_h=1e-4, bandwidth=1.0, learning_rate=1e-3,
                batch_size=128, max_epochs=300, patience=30)
    base.update(overrides)
    return TrainConfig.from_dict(base)


CATE_METHODS = ("rcfr", "rcfr-w1", "ols", "ols-ipw", "ipm-wnn")


def split_indices(n: int, seed: int, fractions=SPLIT):
    """Seeded permutation split into fit / early-stopping / test index arrays."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ValueError("split fractions must be three non-negative numbers summing to one")
    perm = make_rng(seed).permutation(n)
    n_tr = int(round(fractions[0] * n))
    n_va = int(round(fractions[1] * n))
    return perm[:n_tr], perm[n_tr:n_tr + n_va], perm[n_tr + n_va:]


def fit_cate(method: str, data: CateDataset, train, valid, cfg: TrainConfig):
    if method not in CATE_METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(CATE_METHODS)}")
    src, val = data.source(train), data.source(valid)
    if method == "ols":
        return ols_fit(src.x, src.t, src.y, n_arms=2)
    if method == "ols-ipw":
        return ols_ipw_fit(src.x, src.t, src.y, seed=cfg.seed)
    if method == "ipm-wnn":
        return ipm_wnn_fit(src, None, cfg, val)
    if method == "rcfr-w1":
        cfg = cfg.replace(learn_weights=False)
    return fit(src, None, cfg, val, n_arms=2)[0]


def run_cate_realization(data: CateDataset, method: str, cfg: TrainConfig, seed: int,
                         dataset_name: str = "", split=SPLIT, timing: bool = False) -> EvalReport:
    cfg = cfg.replace(seed=seed)
    train, valid, test = split_indices(len(data), seed, split)
    t0 = time.perf_counter()
    model = fit_cate(method, data, train, valid, cfg)
    rep = eval_cate(model, data, test, method, seed)
    rep.dataset = dataset_name
    neural = method in ("rcfr", "rcfr-w1", "ipm-wnn")
    rep.alpha = getattr(model, "alpha", cfg.alpha) if method in ("rcfr", "rcfr-w1") else (0.0 if neural else math.nan)
    rep.lambda_w = cfg.lambda_w if method in ("rcfr", "ipm-wnn") else math.nan
    rep.lambda_h = cfg.lambda_h if neural else math.nan
    rep.wall_ms = round((time.perf_counter() - t0) * 1e3, 3) if timing else 0.0
    rep.config = cfg.to_dict()
    return rep


def run_cate_oracle(data: CateDataset, cfg: TrainConfig, seed: int, dataset_name: str = "",
                    alphas=ORACLE_ALPHAS, learn_weights: bool = True, split=SPLIT) -> EvalReport:
    """Fixed alpha chosen by test-set CATE error (only possible with ground truth)."""
    method = "rcfr" if learn_weights else "rcfr-w1"
    best = None
    for a in alphas:
        rep = run_cate_realization(data, method, cfg.replace(alpha=a, alpha_mode="fixed"), seed, dataset_name, split)
        if best is None or rep.rmse_tau < best.rmse_tau:
            best = rep
    best.method = f"{method}-oracle"
    return best


def summarize(reports: Sequence[EvalReport], method: str, dataset: str = "") -> list[EvalReport]:
    """Mean and standard-error rows over the finite reports."""
    ok = [r for r in reports if np.isfinite(r.rmse_tau) or np.isfinite(r.target_risk)]
    cols = ("rmse_tau", "target_risk", "risk_arm0", "risk_arm1")
    mean = EvalReport(method, dataset, "mean")
    se = EvalReport(method, dataset, "stderr")
    for c in cols:
        v = np.array([getattr(r, c) for r in ok], dtype=np.float64)
        v = v[np.isfinite(v)]
        if v.size:
            setattr(mean, c, float(v.mean()))
            setattr(se, c, float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0)
    for c in ("alpha", "lambda_w", "lambda_h"):
        vals = {getattr(r, c) for r in ok if not (isinstance(getattr(r, c), float) and math.isnan(getattr(r, c)))}
        if len(vals) == 1:
            setattr(mean, c, vals.pop())
            setattr(se, c, getattr(mean, c))
    return [mean, se]


def table1_line(mean: EvalReport, se: EvalReport) -> str:
    return (f"{mean.method:<16s} RMSE(tau) {mean.rmse_tau:.3f} +/- {se.rmse_tau:.3f}   "
            f"R_pi(f) {mean.target_risk:.3f} +/- {se.target_risk:.3f}")


# ---------------------------------------------------------------- sweeps


@dataclass
class SweepCell:
    method: str
    dataset: dict
    config: TrainConfig


def _dataset_name(spec: dict) -> str:
    return ",".join(f"{k}={spec[k]}" for k in sorted(spec) if k != "kind").join((f"{spec['kind']}(", ")"))


def _cate_from_spec(spec: dict) -> CateDataset:
    kind = spec["kind"]
    if kind == "synthetic-cate":
        cs = CateSpec(**{k: spec[k] for k in ("gamma", "effect", "noise", "b", "b0") if k in spec})
        return gen_synthetic_cate(int(spec.get("n", 500)), int(spec.get("d", 5)), int(spec.get("seed", 0)), cs)
    if kind == "csv":
        sets = load_cate_csv(spec["path"], int(spec.get("n_features", IHDP_FEATURES)))
        return sets[int(spec.get("realization", 0))]
    raise ValueError(f"unknown dataset kind {kind!r}")


_DATASET_KEYS = {
    "synthetic-da": {"kind", "n", "m", "d", "seed"},
    "synthetic-cate": {"kind", "n", "d", "seed", "gamma", "effect", "noise", "b", "b0"},
    "csv": {"kind", "path", "realization", "n_features"},
}


def validate_dataset_spec(spec: dict) -> None:
    kind = spec.get("kind")
    if kind not in _DATASET_KEYS:
        raise ValueError(f"dataset kind must be one of {sorted(_DATASET_KEYS)}, got {kind!r}")
    unknown = set(spec) - _DATASET_KEYS[kind]
    if unknown:
        raise KeyError(f"unknown keys for {kind} dataset: {', '.join(sorted(unknown))}")


def run_cell(cell: SweepCell, seed: int, timing: bool = False) -> EvalReport:
    spec = cell.dataset
    name = _dataset_name(spec)
    try:
        if spec["kind"] == "synthetic-da":
            rep = run_da_cell(int(spec.get("n", 100)), int(spec.get("m", spec.get("n", 100))), int(spec.get("d", 10)),
                              seed, cell.method, cell.config, data_seed=int(spec.get("seed", 0)), timing=timing)
            rep.dataset = name
            return rep
        data = _cate_from_spec(spec)
        if cell.config.alpha_mode == "oracle" and cell.method in ("rcfr", "rcfr-w1"):
            return run_cate_oracle(data, cell.config, seed, name, learn_weights=cell.method == "rcfr")
        return run_cate_realization(data, cell.method, cell.config, seed, name, timing=timing)
    except (NumericalError, FloatingPointError, ValueError, np.linalg.LinAlgError) as exc:
        log.warning("cell %s/%s failed: %s", cell.method, name, exc)
        return EvalReport(cell.method, name, seed, cell.config.alpha, cell.config.lambda_w,
                          cell.config.lambda_h, error=f"{type(exc).__name__}: {exc}")


def _run_indexed(args):
    cell, seed, timing = args
    return run_cell(cell, seed, timing)


def run_sweep(cells: Sequence[SweepCell], jobs: int = 1, master_seed: int = 0, timing: bool = False) -> list[EvalReport]:
    """One report per cell, in cell order; cell ``i`` trains with a seed derived from ``(master_seed, i)``."""
    if not cells:
        raise ValueError("empty sweep grid")
    work = [(c, derive_seed(master_seed, i), timing) for i, c in enumerate(cells)]
    if jobs <= 1:
        return [_run_indexed(w) for w in work]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_indexed, work))


_SWEEP_KEYS = {"master_seed", "methods", "datasets", "base_config", "grid"}


def sweep_cells_from_config(doc: dict) -> tuple[list[SweepCell], int]:
    """Expand a sweep document into cells: datasets x methods x grid product."""
    unknown = set(doc) - _SWEEP_KEYS
    if unknown:
        raise KeyError(f"unknown sweep keys: {', '.join(sorted(unknown))}")
    base = TrainConfig.from_dict(doc.get("base_config", {}))
    grid = doc.get("grid", {})
    TrainConfig.from_dict({k: v[0] for k, v in grid.items()} if grid else {})
    datasets = doc.get("datasets") or []
    methods = doc.get("methods") or []
    for spec in datasets:
        validate_dataset_spec(spec)
    keys = sorted(grid)
    cells = []
    for spec in datasets:
        for method in methods:
            for combo in itertools.product(*(grid[k] for k in keys)):
                cells.append(SweepCell(method, spec, base.replace(**dict(zip(keys, combo)))))
    return cells, int(doc.get("master_seed", 0))


def fig3_grid(dataset: dict, alphas=(0.1, 1, 10, 100, 1000), lambda_ws=(1e-3, 1e-2, 1e-1, 1, 10, 100, 1000),
              base: TrainConfig | None = None) -> list[SweepCell]:
    base = base or cate_config()
    return [SweepCell("rcfr", dataset, base.replace(alpha=float(a), lambda_w=float(lw)))
            for a in alphas for lw in lambda_ws]


def load_config_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ValueError("config document must be a JSON object")
    return doc
