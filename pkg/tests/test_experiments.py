import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rcfr import experiments as ex
from rcfr.baselines import LinearModel, ols_fit
from rcfr.data import CateDataset, TargetSample
from rcfr.model import TrainConfig


class ArmPredictor:
    """Per-arm outputs fixed for each row of a reference covariate matrix."""

    def __init__(self, f0, f1, x_ref=None):
        self.f0, self.f1, self.x_ref = f0, f1, x_ref

    def predict(self, x, t):
        if self.x_ref is not None:
            rows = [int(np.flatnonzero((self.x_ref == r).all(1))[0]) for r in x]
            f0, f1 = self.f0[rows], self.f1[rows]
        else:
            f0, f1 = np.broadcast_to(self.f0, len(x)), np.broadcast_to(self.f1, len(x))
        return np.where(np.asarray(t) == 1, f1, f0)


# ---------------------------------------------------------------- generators


def test_synthetic_da_examples():
    src, tgt, oracle, truth = ex.gen_synthetic_da(50, 40, seed=3)
    assert src.x.shape == (50, 10) and tgt.x.shape == (40, 10)
    assert np.all(src.t == 0) and np.all(tgt.t == 0)
    assert oracle(np.zeros((1, 10)))[0] == pytest.approx(1.0)
    flat, flat_tgt, _, _ = ex.gen_synthetic_da(20, 20, 4, 0, beta=np.zeros(4), c=0.0)
    assert np.all(flat.y == 0.5) and np.all(flat_tgt.evaluation_outcomes() == 0.5)
    with pytest.raises(ValueError):
        ex.gen_synthetic_da(0, 5)


def test_synthetic_da_means_and_determinism():
    a = ex.gen_synthetic_da(4000, 4000, 3, 9)
    b = ex.gen_synthetic_da(4000, 4000, 3, 9)
    assert np.array_equal(a[0].x, b[0].x) and np.array_equal(a[3].beta, b[3].beta)
    assert np.allclose(a[0].x.mean(0), 0.5, atol=0.06) and np.allclose(a[1].x.mean(0), -0.5, atol=0.06)


def test_identical_designs_give_unit_weights_and_equal_errors(rng):
    m = np.zeros(3)
    src, tgt, oracle, truth = ex.gen_synthetic_da(5000, 5000, 3, 1, m_mu=m, m_pi=m)
    assert np.allclose(oracle(src.x), 1.0)
    model = LinearModel(rng.standard_normal((1, 3)), rng.standard_normal(1))
    src_err = np.sqrt(np.mean((model.predict(src.x, src.t) - src.y) ** 2))
    assert abs(ex.eval_da(model, tgt) - src_err) < 0.02


def test_target_outcomes_are_gated():
    t = TargetSample(np.zeros((2, 1)), [0, 0])
    with pytest.raises(ValueError):
        t.evaluation_outcomes()
    assert "hidden" not in repr(ex.gen_synthetic_da(3, 3, 2, 0)[1])


def test_training_never_reads_target_outcomes(monkeypatch):
    src, tgt, _, truth = ex.gen_synthetic_da(40, 40, 3, 0)
    cfg = ex.da_config(max_epochs=5, weight_layers=(4,))
    blind = TargetSample(tgt.x, tgt.t)

    def leak(self):
        raise AssertionError("training read hidden outcomes")

    monkeypatch.setattr(TargetSample, "evaluation_outcomes", leak)
    for method in ex.DA_METHODS:
        a = ex.fit_da(method, src, tgt, truth, cfg)
        b = ex.fit_da(method, src, blind, truth, cfg)
        assert np.array_equal(a.predict(src.x, src.t), b.predict(src.x, src.t))


def test_synthetic_cate_examples():
    n = 4000
    rand = ex.gen_synthetic_cate(n, 3, 0, ex.CateSpec(gamma=0.0))
    assert abs(rand.t.mean() - 0.5) < 3 / np.sqrt(n)
    quiet = ex.gen_synthetic_cate(200, 3, 1, ex.CateSpec(gamma=2.0, effect="quadratic"))
    assert np.array_equal(quiet.y_factual, np.where(quiet.t == 1, quiet.mu1, quiet.mu0))
    const = ex.gen_synthetic_cate(50, 4, 2, ex.CateSpec(b=np.zeros(4), b0=2.0))
    assert np.allclose(const.tau, 2.0)
    with pytest.raises(ValueError):
        ex.CateSpec(effect="cubic")
    with pytest.raises(ValueError):
        ex.CateSpec(noise=-1)
    with pytest.raises(ValueError):
        ex.gen_synthetic_cate(10, 1, 0, ex.CateSpec(effect="quadratic"))


def test_confounding_shifts_treated_covariates():
    data = ex.gen_synthetic_cate(3000, 2, 0, ex.CateSpec(gamma=2.0))
    assert data.x[data.t == 1, 0].mean() > data.x[data.t == 0, 0].mean() + 1.0


# ---------------------------------------------------------------- CSV


def _write(path, header, rows):
    path.write_text(",".join(header) + "\n" + "\n".join(",".join(map(str, r)) for r in rows) + "\n")


def test_hand_written_file_round_trips(tmp_path):
    rows = [[1, 2.5, 1.0, 0.5, 2.0, 0.1, -0.2], [0, 0.3, 1.3, 0.3, 1.5, 1.0, 2.0], [1, -1.0, 0.0, -0.5, -1.0, 3.0, 4.5]]
    p = tmp_path / "hand.csv"
    _write(p, ex.cate_header(2), rows)
    (ds,) = ex.load_cate_csv(p, 2)
    v = np.array(rows, dtype=float)
    assert np.array_equal(ds.t, v[:, 0]) and np.array_equal(ds.x, v[:, 5:])
    assert np.array_equal(ds.y_factual, v[:, 1]) and np.array_equal(ds.mu1, v[:, 4])


def test_wrong_column_count_names_schema(tmp_path):
    p = tmp_path / "short.csv"
    _write(p, ex.cate_header(24), [[0] * 29])
    with pytest.raises(ex.SchemaError, match="treatment,y_factual"):
        ex.load_cate_csv(p)


def test_bad_cells_are_located(tmp_path):
    p = tmp_path / "t2.csv"
    _write(p, ex.cate_header(1), [[0, 1, 1, 1, 1, 0], [2, 1, 1, 1, 1, 0]])
    with pytest.raises(ex.SchemaError, match="row 3"):
        ex.load_cate_csv(p, 1)
    _write(p, ex.cate_header(1), [[0, 1, 1, 1, 1, 0], [1, 1, "oops", 1, 1, 0]])
    with pytest.raises(ex.SchemaError, match=r"row 3, column 3 \(y_cfactual\)"):
        ex.load_cate_csv(p, 1)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3))
def test_save_load_round_trip(tmp_path_factory, seed, blocks):
    sets = [ex.gen_synthetic_cate(12, 25, seed + k, ex.CateSpec(noise=0.3)) for k in range(blocks)]
    p = tmp_path_factory.mktemp("rt") / "data.csv"
    ex.save_cate_csv(sets, p)
    back = ex.load_cate_csv(p)
    assert len(back) == blocks
    for a, b in zip(sets, back):
        for f in ("x", "t", "y_factual", "y_cfactual", "mu0", "mu1"):
            assert np.array_equal(getattr(a, f), getattr(b, f))


def test_multiple_files_and_missing_truth(tmp_path):
    bare = CateDataset(np.ones((3, 2)), [0, 1, 0], [1.0, 2.0, 3.0])
    ex.save_cate_csv(bare, tmp_path / "a.csv")
    ex.save_cate_csv(ex.gen_synthetic_cate(3, 2, 0), tmp_path / "b.csv")
    sets = ex.load_cate_csv([tmp_path / "a.csv", tmp_path / "b.csv"], 2)
    assert not sets[0].has_truth and sets[1].has_truth
    with pytest.raises(ValueError):
        ex.eval_cate(ArmPredictor(0.0, 0.0), sets[0])


# ---------------------------------------------------------------- metrics


def test_eval_cate_examples():
    data = ex.gen_synthetic_cate(100, 3, 0)
    perfect = ex.eval_cate(ArmPredictor(data.mu0, data.mu1), data)
    assert perfect.rmse_tau == 0 and perfect.target_risk == 0
    off = ex.eval_cate(ArmPredictor(data.mu0 + 1, data.mu1), data)
    assert off.rmse_tau == pytest.approx(1.0) and off.target_risk == pytest.approx(0.5)
    zero_mu0 = CateDataset(data.x, data.t, np.zeros(100), None, np.zeros(100), np.full(100, 2.0))
    assert ex.eval_cate(ArmPredictor(0.0, 0.0), zero_mu0).rmse_tau == pytest.approx(2.0)


def test_eval_cate_respects_test_mask():
    data = ex.gen_synthetic_cate(10, 2, 0)
    f1 = data.mu1.copy()
    f1[5:] += 3.0
    rep = ex.eval_cate(ArmPredictor(data.mu0, f1, data.x), data, np.arange(5))
    assert rep.rmse_tau == 0.0


def test_eval_da_examples():
    src, tgt, _, truth = ex.gen_synthetic_da(300, 300, 3, 0)
    y = tgt.evaluation_outcomes()

    class Perfect:
        def predict(self, x, t):
            return truth.outcome(x)

    assert ex.eval_da(Perfect(), tgt) == 0.0
    const = LinearModel(np.zeros((1, 3)), np.array([y.mean()]))
    best_linear = ols_fit(tgt.x, tgt.t, y)
    assert ex.eval_da(const, tgt) >= ex.eval_da(best_linear, tgt)
    assert ex.eval_da(best_linear, tgt) == ex.eval_da(ols_fit(tgt.x, tgt.t, y), tgt)


def test_prop1_examples():
    data = ex.gen_synthetic_cate(100, 3, 0)
    lhs, rhs, ok = ex.prop1_check(ArmPredictor(data.mu0, data.mu1), data)
    assert (lhs, rhs, ok) == (0.0, 0.0, True)
    lhs, rhs, ok = ex.prop1_check(ArmPredictor(data.mu0, data.mu1 + 1), data)
    assert lhs == pytest.approx(1.0) and rhs == pytest.approx(2.0) and ok


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000))
def test_prop1_holds_for_arbitrary_predictions(seed):
    r = np.random.default_rng(seed)
    data = ex.gen_synthetic_cate(60, 3, seed % 97)
    assert ex.prop1_check(ArmPredictor(r.standard_normal(60) * 3, r.standard_normal(60) * 3), data)[2]


def test_summarize_mean_and_stderr():
    reps = [ex.EvalReport("m", rmse_tau=v, target_risk=2 * v) for v in (1.0, 2.0, 3.0)]
    mean, se = ex.summarize(reps, "m", "d")
    assert (mean.seed, se.seed) == ("mean", "stderr")
    assert mean.rmse_tau == pytest.approx(2.0) and se.rmse_tau == pytest.approx(1 / np.sqrt(3))
    assert "2.000 +/- 0.577" in ex.table1_line(mean, se)


def test_results_csv_layout():
    buf = io.StringIO()
    ex.write_results([ex.EvalReport("ols", "d", 3, rmse_tau=0.5)], buf)
    head, row = buf.getvalue().splitlines()
    assert head == ",".join(ex.RESULT_COLUMNS)
    assert row.startswith("ols,d,3,nan,nan,nan,0.5,")


def test_split_indices_partition():
    tr, va, te = ex.split_indices(100, 0)
    assert (len(tr), len(va), len(te)) == (63, 27, 10)
    assert sorted(np.concatenate([tr, va, te]).tolist()) == list(range(100))
    with pytest.raises(ValueError):
        ex.split_indices(10, 0, (0.5, 0.6, 0.1))


# ---------------------------------------------------------------- sweeps


def _tiny_cells():
    base = TrainConfig(max_epochs=3, rep_layers=(4,), head_layers=(4,), weight_layers=(4,))
    da = {"kind": "synthetic-da", "n": 20, "m": 20, "d": 3, "seed": 0}
    cate = {"kind": "synthetic-cate", "n": 60, "d": 3, "seed": 1, "gamma": 1.0}
    return [ex.SweepCell("rcfr", da, base), ex.SweepCell("is", da, base),
            ex.SweepCell("ols", cate, base), ex.SweepCell("rcfr", cate, base.replace(alpha=2.0))]


def _csv(reports):
    buf = io.StringIO()
    ex.write_results(reports, buf)
    return buf.getvalue()


def test_sweep_is_deterministic_and_order_preserving():
    cells = _tiny_cells()
    a = _csv(ex.run_sweep(cells, master_seed=5))
    assert a == _csv(ex.run_sweep(cells, master_seed=5))
    assert a == _csv(ex.run_sweep(cells, jobs=2, master_seed=5))
    assert a != _csv(ex.run_sweep(cells, master_seed=6))


def test_single_cell_sweep_equals_direct_run():
    cell = _tiny_cells()[2]
    (rep,) = ex.run_sweep([cell], master_seed=3)
    data = ex._cate_from_spec(cell.dataset)
    direct = ex.run_cate_realization(data, "ols", cell.config, ex.derive_seed(3, 0), rep.dataset)
    assert _csv([rep]) == _csv([direct])


def test_failed_cell_is_recorded_and_sweep_continues():
    cells = _tiny_cells()[:1] + [ex.SweepCell("nope", {"kind": "synthetic-da", "n": 5}, TrainConfig())]
    ok, bad = ex.run_sweep(cells)
    assert not ok.error and np.isfinite(ok.target_risk)
    assert "nope" in bad.error and np.isnan(bad.target_risk)
    with pytest.raises(ValueError):
        ex.run_sweep([])


def test_fig3_grid_shape():
    cells = ex.fig3_grid({"kind": "synthetic-cate"})
    assert len(cells) >= 30
    assert {(c.config.alpha, c.config.lambda_w) for c in cells} >= {(0.1, 1e-3), (1000.0, 1000.0)}


def test_sweep_document_parsing():
    doc = {"master_seed": 2, "methods": ["rcfr", "ols"], "datasets": [{"kind": "synthetic-cate", "n": 50}],
           "base_config": {"max_epochs": 4}, "grid": {"alpha": [1.0, 10.0], "lambda_w": [0.1]}}
    cells, seed = ex.sweep_cells_from_config(doc)
    assert seed == 2 and len(cells) == 4
    assert {c.config.alpha for c in cells} == {1.0, 10.0} and all(c.config.max_epochs == 4 for c in cells)
    with pytest.raises(KeyError):
        ex.sweep_cells_from_config({**doc, "extra": 1})
    with pytest.raises(KeyError):
        ex.sweep_cells_from_config({**doc, "base_config": {"alhpa": 1}})
    with pytest.raises(KeyError):
        ex.sweep_cells_from_config({**doc, "datasets": [{"kind": "synthetic-cate", "gama": 1}]})
