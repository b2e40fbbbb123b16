from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from netfx import evalkit as ek
from netfx.diffcore import as_tensor
from netfx.dwr_model import GraphIndex
from netfx.synthgen import Bundle, GenerationConfig, generate_dataset, oracle_effects
from netfx.trainer import TrainConfig, make_split


def tiny_bundle(seed=5, **gen_kw):
    kw = dict(seed=seed, n=60, sbm_blocks=3, sbm_p_in=0.3, sbm_p_out=0.03,
              d=3, sweeps=4, burn_in=2, noise_sd=0.1)
    kw.update(gen_kw)
    cfg = GenerationConfig(**kw)
    ds, oracle = generate_dataset(cfg)
    return Bundle(dataset=ds, oracle=oracle, config=cfg)


def tiny_train_config(**kw):
    base = dict(seed=2, outer_epochs=3, pi_epochs_per_outer=2,
                encoder_widths=(6, 6), head_widths=(8, 8), pi_widths=(6,))
    base.update(kw)
    return TrainConfig(**base)


class OracleModel:
    """Evaluation stand-in that answers every query from the oracle."""

    def __init__(self, oracle, z_true):
        self.oracle = oracle
        self.z_true = z_true

    def effect_estimates(self, gi, X, z_eval):
        return oracle_effects(self.oracle, X, np.asarray(z_eval, dtype=np.float64))

    def counterfactual_outcomes(self, gi, X, t, z):
        t = np.asarray(t, dtype=np.float64).astype(np.int64)
        return self.oracle.potential_outcomes(t, np.asarray(z, dtype=np.float64))

    def forward(self, gi, X, t):
        return SimpleNamespace(z_hat=as_tensor(self.z_true))


finite_vec = arrays(np.float64, st.shared(st.integers(1, 30), key="n"),
                    elements=st.floats(-50, 50))


# --- scalar metrics ---------------------------------------------------------


def test_pehe_zero_on_exact():
    tau = np.array([0.5, -1.0, 2.0])
    assert ek.pehe(tau, tau) == 0.0


def test_pehe_constant_shift():
    tau = np.array([0.0, 1.0, -2.0, 4.0])
    assert ek.pehe(tau + 0.75, tau) == pytest.approx(0.75, abs=1e-15)


def test_pehe_hand_value():
    assert ek.pehe(np.array([3.0, 4.0]), np.zeros(2)) == pytest.approx(
        3.5355339059327378, abs=1e-15)


def test_pehe_length_mismatch():
    with pytest.raises(ValueError, match="length mismatch"):
        ek.pehe(np.zeros(3), np.zeros(4))


def test_mae_ate_cancellation():
    tau = np.array([1.0, 2.0])
    assert ek.mae_ate(tau + np.array([1.0, -1.0]), tau) == 0.0


def test_mae_ate_uniform_bias():
    tau = np.linspace(-1, 1, 7)
    assert ek.mae_ate(tau - 0.3, tau) == pytest.approx(0.3, abs=1e-15)


@given(finite_vec, finite_vec)
@settings(max_examples=50, deadline=None)
def test_pehe_squared_is_mse(tau_hat, tau):
    assert ek.pehe(tau_hat, tau) ** 2 == pytest.approx(
        np.mean((tau_hat - tau) ** 2), rel=1e-9, abs=1e-12)


@given(finite_vec, finite_vec)
@settings(max_examples=50, deadline=None)
def test_mae_ate_bounded_by_mean_abs_error(tau_hat, tau):
    assert ek.mae_ate(tau_hat, tau) <= np.mean(np.abs(tau_hat - tau)) + 1e-12


@given(finite_vec, finite_vec, st.randoms(use_true_random=False))
@settings(max_examples=50, deadline=None)
def test_metrics_invariant_under_relabeling(tau_hat, tau, rnd):
    order = list(range(len(tau)))
    rnd.shuffle(order)
    order = np.array(order)
    assert ek.pehe(tau_hat[order], tau[order]) == pytest.approx(
        ek.pehe(tau_hat, tau), rel=1e-12, abs=1e-12)
    assert ek.mae_ate(tau_hat[order], tau[order]) == pytest.approx(
        ek.mae_ate(tau_hat, tau), rel=1e-12, abs=1e-12)


def test_exposure_recovery_perfect_and_reversed():
    rng = np.random.default_rng(0)
    z = rng.random(40)
    assert ek.exposure_recovery(z, z) == pytest.approx(1.0, abs=1e-12)
    assert ek.exposure_recovery(-z + 0.2, z) == pytest.approx(-1.0, abs=1e-12)


def test_exposure_recovery_rejects_constant():
    with pytest.raises(ValueError, match="zero variance"):
        ek.exposure_recovery(np.full(5, 0.3), np.arange(5.0))
    with pytest.raises(ValueError, match="zero variance"):
        ek.exposure_recovery(np.arange(5.0), np.full(5, 0.3))


def test_exposure_recovery_permutation_null():
    n = 400
    violations = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        z = rng.random(n)
        if abs(ek.exposure_recovery(rng.permutation(z), z)) > 3 / np.sqrt(n):
            violations += 1
    assert violations <= 2


# --- counterfactual RMSE ----------------------------------------------------


def test_counterfactual_rmse_zero_for_oracle_model():
    b = tiny_bundle()
    gi = GraphIndex.from_network(b.dataset.net)
    model = OracleModel(b.oracle, b.dataset.z_true)
    assert ek.counterfactual_rmse(model, gi, b.oracle, b.dataset.X, seed=3) == 0.0


def test_counterfactual_rmse_constant_zero_model():
    b = tiny_bundle()
    gi = GraphIndex.from_network(b.dataset.net)
    zero = SimpleNamespace(
        counterfactual_outcomes=lambda gi, X, t, z: np.zeros(X.shape[0]))
    seed = 11
    rng = np.random.default_rng(seed)
    n = b.dataset.n
    t = (rng.random(n) < 0.5).astype(np.int64)
    z = rng.random(n)
    expected = np.sqrt(np.mean(b.oracle.potential_outcomes(t, z) ** 2))
    got = ek.counterfactual_rmse(zero, gi, b.oracle, b.dataset.X, seed=seed)
    assert got == pytest.approx(expected, rel=1e-12)


def test_counterfactual_rmse_seed_determinism():
    b = tiny_bundle()
    gi = GraphIndex.from_network(b.dataset.net)
    model = OracleModel(b.oracle, b.dataset.z_true)
    noisy = SimpleNamespace(
        counterfactual_outcomes=lambda gi, X, t, z: model.counterfactual_outcomes(
            gi, X, t, z) + 0.1)
    a = ek.counterfactual_rmse(noisy, gi, b.oracle, b.dataset.X, seed=4)
    b2 = ek.counterfactual_rmse(noisy, gi, b.oracle, b.dataset.X, seed=4)
    assert a == b2 == pytest.approx(0.1, rel=1e-12)


# --- evaluate_model ---------------------------------------------------------


def test_evaluate_model_oracle_scores_zero():
    b = tiny_bundle()
    split = make_split(b.dataset.n, 0.8, seed=1)
    model = OracleModel(b.oracle, b.dataset.z_true)
    metrics = ek.evaluate_model(model, b.dataset, b.oracle, split, cf_seed=7)
    assert set(metrics) == set(ek.REPORT_KEYS)
    for key, value in metrics.items():
        if key.startswith("exposure_pearson"):
            assert value == pytest.approx(1.0, abs=1e-12)
        else:
            assert value == 0.0


def test_evaluate_model_z_eval_override():
    b = tiny_bundle()
    split = make_split(b.dataset.n, 0.8, seed=1)
    model = OracleModel(b.oracle, b.dataset.z_true)
    at_one = ek.evaluate_model(model, b.dataset, b.oracle, split,
                               z_eval=np.ones(b.dataset.n), cf_seed=7)
    assert at_one["sqrt_pehe_de_within"] == 0.0
    with pytest.raises(ValueError, match="z_eval"):
        ek.evaluate_model(model, b.dataset, b.oracle, split,
                          z_eval=np.ones(3), cf_seed=7)


# --- EffectReport -----------------------------------------------------------


def _rows(k, seed=0):
    rng = np.random.default_rng(seed)
    return [{key: float(rng.random()) for key in ek.REPORT_KEYS} for _ in range(k)]


def test_report_aggregates_mean_and_std():
    rows = _rows(4)
    rep = ek.EffectReport.from_rows(rows)
    key = ek.REPORT_KEYS[0]
    vals = [r[key] for r in rows]
    assert rep.mean[key] == pytest.approx(np.mean(vals), rel=1e-12)
    assert rep.std[key] == pytest.approx(np.std(vals), rel=1e-12)
    assert rep.repetitions == 4


def test_report_single_row_has_zero_std():
    rep = ek.EffectReport.from_rows(_rows(1))
    assert all(v == 0.0 for v in rep.std.values())


def test_report_schema_enforced():
    rows = _rows(2)
    del rows[0]["cf_rmse_out"]
    with pytest.raises(ValueError):
        ek.EffectReport.from_rows(rows)
    good = ek.EffectReport.from_rows(_rows(2))
    with pytest.raises(ValueError, match="schema"):
        ek.EffectReport(mean={"x": 1.0}, std=good.std, repetitions=2)


def test_report_rejects_negative_error_metric():
    rep = ek.EffectReport.from_rows(_rows(2))
    bad_mean = dict(rep.mean)
    bad_mean["sqrt_pehe_de_within"] = -0.5
    with pytest.raises(ValueError, match="negative"):
        ek.EffectReport(mean=bad_mean, std=rep.std, repetitions=2)


def test_report_json_round_trip(tmp_path):
    rep = ek.EffectReport.from_rows(_rows(3, seed=5))
    assert ek.EffectReport.from_jsonable(rep.to_jsonable()) == rep
    path = tmp_path / "report.json"
    ek.write_report(rep, path)
    assert ek.read_report(path) == rep


# --- run_experiment ---------------------------------------------------------


def test_run_experiment_deterministic():
    b = tiny_bundle()
    cfg = tiny_train_config()
    rep1, art1 = ek.run_experiment(b, cfg, repetitions=2)
    rep2, art2 = ek.run_experiment(b, cfg, repetitions=2)
    assert rep1 == rep2
    assert np.array_equal(art1.z_hat, art2.z_hat)
    rep3, _ = ek.run_experiment(b, cfg, repetitions=2, master_seed=99)
    assert rep3 != rep1


def test_run_experiment_parallel_matches_serial():
    b = tiny_bundle()
    cfg = tiny_train_config()
    serial, art_s = ek.run_experiment(b, cfg, repetitions=2)
    parallel, art_p = ek.run_experiment(b, cfg, repetitions=2, jobs=2)
    assert serial == parallel
    assert np.array_equal(art_s.estimated.direct, art_p.estimated.direct)


def test_run_experiment_reports_spread_across_reps():
    b = tiny_bundle()
    rep, _ = ek.run_experiment(b, tiny_train_config(), repetitions=3)
    assert rep.repetitions == 3
    assert any(v > 0 for v in rep.std.values())


def test_run_experiment_rejects_bad_repetitions():
    with pytest.raises(ValueError):
        ek.run_experiment(tiny_bundle(), tiny_train_config(), repetitions=0)


def test_artifacts_come_from_first_repetition():
    b = tiny_bundle()
    cfg = tiny_train_config()
    _, art = ek.run_experiment(b, cfg, repetitions=2)
    assert art.z_hat.shape == (b.dataset.n,)
    assert np.array_equal(art.z_true, b.dataset.z_true)
    assert art.estimated.direct.shape == (b.dataset.n,)
    assert art.split.train_ids.size + art.split.heldout_ids.size == b.dataset.n


# --- degenerate interference ------------------------------------------------


def test_zero_interference_pehe_se_is_rms_of_estimate():
    b = tiny_bundle(interference_scale=0.0)
    assert np.all(oracle_effects(b.oracle, b.dataset.X,
                                 b.dataset.z_true).spillover == 0.0)
    rep, art = ek.run_experiment(b, tiny_train_config(), repetitions=1)
    ids = art.split.train_ids
    rms = float(np.sqrt(np.mean(art.estimated.spillover[ids] ** 2)))
    assert rep.mean["sqrt_pehe_se_within"] == pytest.approx(rms, rel=1e-12)


def test_interference_sweep_rows_and_determinism(tmp_path):
    gen = GenerationConfig(seed=5, n=60, sbm_blocks=3, sbm_p_in=0.3,
                           sbm_p_out=0.03, d=3, sweeps=4, burn_in=2, noise_sd=0.1)
    cfg = tiny_train_config()
    rows = ek.interference_sweep(gen, cfg, [0.0, 1.5], repetitions=1)
    assert [s for s, _ in rows] == [0.0, 1.5]
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    ek.write_sweep_csv(rows, p1)
    ek.write_sweep_csv(ek.interference_sweep(gen, cfg, [0.0, 1.5], repetitions=1), p2)
    assert p1.read_bytes() == p2.read_bytes()
    lines = p1.read_text().splitlines()
    assert lines[0] == "scale,metric,mean,std"
    assert len(lines) == 1 + 2 * len(ek.REPORT_KEYS)


def test_interference_sweep_rejects_negative_scale():
    gen = GenerationConfig(seed=5, n=60, sbm_blocks=3, sbm_p_in=0.3,
                           sbm_p_out=0.03, d=3, sweeps=4, burn_in=2)
    with pytest.raises(ValueError, match="non-negative"):
        ek.interference_sweep(gen, tiny_train_config(), [-1.0], repetitions=1)


# --- artifact files ---------------------------------------------------------


def test_exposure_scatter_file(tmp_path):
    rng = np.random.default_rng(3)
    z_hat, z_true = rng.random(15), rng.random(15)
    path = tmp_path / "scatter.csv"
    ek.write_exposure_scatter(z_hat, z_true, path)
    back = np.loadtxt(path, delimiter=",", skiprows=1)
    assert np.array_equal(back[:, 0], z_hat)
    assert np.array_equal(back[:, 1], z_true)


def test_effects_tsv_file(tmp_path):
    b = tiny_bundle()
    true = oracle_effects(b.oracle, b.dataset.X, b.dataset.z_true)
    path = tmp_path / "effects.tsv"
    ek.write_effects_tsv(true, path)
    back = np.loadtxt(path, delimiter="\t", skiprows=1)
    assert back.shape == (b.dataset.n, 4)
    assert np.array_equal(back[:, 0], np.arange(b.dataset.n))
    assert np.array_equal(back[:, 1], true.direct)
    assert np.array_equal(back[:, 3], true.total)
