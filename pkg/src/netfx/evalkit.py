"""Effect-estimation metrics and the repeated-training experiment protocol.

Every metric is reported twice: over the nodes whose outcomes were visible
to the loss ("within") and over the transductive holdout ("out").  An
experiment trains one model per repetition from a derived seed and
aggregates mean and population standard deviation per metric.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
import torch

from netfx.diffcore import as_tensor
from netfx.dwr_model import GraphIndex
from netfx.seeding import derive_seed
from netfx.synthgen import (
    FLOAT_FMT,
    Bundle,
    Dataset,
    EffectTriple,
    GenerationConfig,
    Oracle,
    generate_dataset,
    oracle_effects,
)
from netfx.trainer import Split, TrainConfig, fit

METRIC_NAMES = ("sqrt_pehe_de", "mae_de", "sqrt_pehe_se", "mae_se",
                "sqrt_pehe_te", "cf_rmse", "exposure_pearson")
SIDES = ("within", "out")
REPORT_KEYS = tuple(f"{m}_{s}" for m in METRIC_NAMES for s in SIDES)


def _as_vector(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 1:
        raise ValueError(f"{name} must be a non-empty 1-d array")
    return arr


def _paired(tau_hat, tau) -> tuple[np.ndarray, np.ndarray]:
    a = _as_vector(tau_hat, "tau_hat")
    b = _as_vector(tau, "tau")
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    return a, b


def pehe(tau_hat, tau) -> float:
    """Root mean squared error of per-node effect estimates."""
    a, b = _paired(tau_hat, tau)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def mae_ate(tau_hat, tau) -> float:
    """Absolute error of the averaged effect; per-node errors may cancel."""
    a, b = _paired(tau_hat, tau)
    return float(abs(a.mean() - b.mean()))


def exposure_recovery(z_hat, z_true) -> float:
    """Pearson correlation between estimated and generating exposure."""
    a, b = _paired(z_hat, z_true)
    for name, v in (("z_hat", a), ("z_true", b)):
        if np.ptp(v) == 0.0:
            raise ValueError(f"{name} has zero variance, correlation undefined")
    return float(np.corrcoef(a, b)[0, 1])


def counterfactual_residuals(model, gi: GraphIndex, oracle: Oracle,
                             X: np.ndarray, seed: int) -> np.ndarray:
    """Per-node error of the model at randomized (t, z) interventions.

    Draws t ~ Bernoulli(1/2) and z ~ Uniform(0, 1) independently per node
    and compares against the noiseless oracle surface.
    """
    rng = np.random.default_rng(seed)
    n = X.shape[0]
    t = (rng.random(n) < 0.5).astype(np.float64)
    z = rng.random(n)
    y_hat = model.counterfactual_outcomes(gi, X, t, z)
    y_star = oracle.potential_outcomes(t.astype(np.int64), z)
    return np.asarray(y_hat, dtype=np.float64) - y_star


def counterfactual_rmse(model, gi: GraphIndex, oracle: Oracle,
                        X: np.ndarray, seed: int) -> float:
    res = counterfactual_residuals(model, gi, oracle, X, seed)
    return float(np.sqrt(np.mean(res ** 2)))


def evaluate_model(model, dataset: Dataset, oracle: Oracle, split: Split,
                   z_eval: np.ndarray | None = None, cf_seed: int = 0) -> dict[str, float]:
    """All report metrics for one trained model, keyed ``metric_side``.

    ``z_eval`` defaults to the realized generating exposure; passing a
    vector evaluates direct and spillover contrasts at those exposures
    instead.  The model only needs ``effect_estimates``,
    ``counterfactual_outcomes``, and a ``forward`` exposing ``z_hat``.
    """
    if z_eval is None:
        z_eval = dataset.z_true
    z_eval = _as_vector(z_eval, "z_eval")
    if z_eval.shape[0] != dataset.n:
        raise ValueError(f"z_eval has length {z_eval.shape[0]}, expected {dataset.n}")
    gi = GraphIndex.from_network(dataset.net)
    est = model.effect_estimates(gi, dataset.X, z_eval)
    true = oracle_effects(oracle, dataset.X, z_eval)
    with torch.no_grad():
        z_hat = model.forward(gi, as_tensor(dataset.X),
                              as_tensor(dataset.t.astype(np.float64))).z_hat
    z_hat = np.asarray(z_hat.detach().numpy() if torch.is_tensor(z_hat) else z_hat)
    cf_res = counterfactual_residuals(model, gi, oracle, dataset.X, cf_seed)

    out: dict[str, float] = {}
    for side, ids in (("within", split.train_ids), ("out", split.heldout_ids)):
        out[f"sqrt_pehe_de_{side}"] = pehe(est.direct[ids], true.direct[ids])
        out[f"mae_de_{side}"] = mae_ate(est.direct[ids], true.direct[ids])
        out[f"sqrt_pehe_se_{side}"] = pehe(est.spillover[ids], true.spillover[ids])
        out[f"mae_se_{side}"] = mae_ate(est.spillover[ids], true.spillover[ids])
        out[f"sqrt_pehe_te_{side}"] = pehe(est.total[ids], true.total[ids])
        out[f"cf_rmse_{side}"] = float(np.sqrt(np.mean(cf_res[ids] ** 2)))
        out[f"exposure_pearson_{side}"] = exposure_recovery(z_hat[ids],
                                                            dataset.z_true[ids])
    return out


@dataclass(frozen=True)
class EffectReport:
    """Mean and population std of every metric over the repetitions."""

    mean: dict[str, float]
    std: dict[str, float]
    repetitions: int

    def __post_init__(self):
        for name, d in (("mean", self.mean), ("std", self.std)):
            if set(d) != set(REPORT_KEYS):
                missing = set(REPORT_KEYS) ^ set(d)
                raise ValueError(f"{name} keys do not match report schema: {missing}")
        if self.repetitions < 1:
            raise ValueError("repetitions must be positive")
        for key, v in self.std.items():
            if v < 0:
                raise ValueError(f"negative std for {key}")
        for key in REPORT_KEYS:
            if key.startswith(("sqrt_pehe", "mae", "cf_rmse")) and self.mean[key] < 0:
                raise ValueError(f"negative error metric {key}")

    @classmethod
    def from_rows(cls, rows: list[dict[str, float]]) -> "EffectReport":
        if not rows:
            raise ValueError("no repetitions to aggregate")
        for i, row in enumerate(rows):
            if set(row) != set(REPORT_KEYS):
                raise ValueError(
                    f"repetition {i} keys do not match report schema: "
                    f"{set(row) ^ set(REPORT_KEYS)}"
                )
        mean = {k: float(np.mean([r[k] for r in rows])) for k in REPORT_KEYS}
        std = {k: float(np.std([r[k] for r in rows])) for k in REPORT_KEYS}
        return cls(mean=mean, std=std, repetitions=len(rows))

    def to_jsonable(self) -> dict:
        return {"repetitions": self.repetitions,
                "mean": dict(self.mean), "std": dict(self.std)}

    @classmethod
    def from_jsonable(cls, data) -> "EffectReport":
        return cls(mean=dict(data["mean"]), std=dict(data["std"]),
                   repetitions=int(data["repetitions"]))


@dataclass(frozen=True)
class ExperimentArtifacts:
    """Plot-ready byproducts of the first repetition of an experiment."""

    z_hat: np.ndarray
    z_true: np.ndarray
    estimated: EffectTriple
    true: EffectTriple
    split: Split


def _experiment_rep(bundle: Bundle, train_config: TrainConfig, master_seed: int,
                    k: int, z_eval: np.ndarray | None, want_artifacts: bool):
    rep_config = replace(train_config, seed=derive_seed(master_seed, "rep", k))
    result = fit(bundle.dataset, rep_config)
    metrics = evaluate_model(result.model, bundle.dataset, bundle.oracle,
                             result.split, z_eval,
                             cf_seed=derive_seed(master_seed, "cf", k))
    artifacts = None
    if want_artifacts:
        ds = bundle.dataset
        ze = ds.z_true if z_eval is None else z_eval
        gi = GraphIndex.from_network(ds.net)
        with torch.no_grad():
            z_hat = result.model.forward(gi, as_tensor(ds.X),
                                         as_tensor(ds.t.astype(np.float64))).z_hat
        artifacts = ExperimentArtifacts(
            z_hat=z_hat.numpy(),
            z_true=ds.z_true.copy(),
            estimated=result.model.effect_estimates(gi, ds.X, ze),
            true=oracle_effects(bundle.oracle, ds.X, ze),
            split=result.split,
        )
    return metrics, artifacts


def run_experiment(bundle: Bundle, train_config: TrainConfig,
                   repetitions: int = 10, master_seed: int | None = None,
                   z_eval: np.ndarray | None = None,
                   jobs: int = 1) -> tuple[EffectReport, ExperimentArtifacts]:
    """Train ``repetitions`` independently seeded models and aggregate.

    Repetition k trains with seed ``derive_seed(master, "rep", k)``; the
    master defaults to the training config's own seed.  Results do not
    depend on ``jobs``, only wall time does.
    """
    if repetitions < 1:
        raise ValueError(f"repetitions must be positive, got {repetitions}")
    if master_seed is None:
        master_seed = train_config.seed
    args = [(bundle, train_config, master_seed, k, z_eval, k == 0)
            for k in range(repetitions)]
    if jobs > 1 and repetitions > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, repetitions)) as pool:
            outcomes = list(pool.map(_experiment_rep_star, args))
    else:
        outcomes = [_experiment_rep(*a) for a in args]
    rows = [metrics for metrics, _ in outcomes]
    artifacts = outcomes[0][1]
    return EffectReport.from_rows(rows), artifacts


def _experiment_rep_star(args):
    return _experiment_rep(*args)


def interference_sweep(gen_config: GenerationConfig, train_config: TrainConfig,
                       scales, repetitions: int = 10,
                       master_seed: int | None = None,
                       jobs: int = 1) -> list[tuple[float, EffectReport]]:
    """Rerun the experiment while only the interference scale varies.

    Graph, features, treatments, and training seeds are identical across
    scales (the scale enters the outcome model only), so rows are directly
    comparable.
    """
    rows = []
    for scale in scales:
        scale = float(scale)
        if scale < 0:
            raise ValueError(f"interference scale must be non-negative, got {scale}")
        cfg = replace(gen_config, interference_scale=scale)
        dataset, oracle = generate_dataset(cfg)
        bundle = Bundle(dataset=dataset, oracle=oracle, config=cfg)
        report, _ = run_experiment(bundle, train_config, repetitions,
                                   master_seed=master_seed, jobs=jobs)
        rows.append((scale, report))
    return rows


# --- artifact writers -------------------------------------------------------


def _fmt(v: float) -> str:
    return FLOAT_FMT % v


def write_report(report: EffectReport, path) -> None:
    with open(path, "w", newline="\n") as fh:
        json.dump(report.to_jsonable(), fh, sort_keys=True, indent=2)
        fh.write("\n")


def read_report(path) -> EffectReport:
    with open(path) as fh:
        return EffectReport.from_jsonable(json.load(fh))


def write_sweep_csv(rows: list[tuple[float, EffectReport]], path) -> None:
    """One line per (scale, metric): scale, metric, mean, std."""
    with open(path, "w", newline="\n") as fh:
        fh.write("scale,metric,mean,std\n")
        for scale, report in rows:
            for key in REPORT_KEYS:
                fh.write(f"{_fmt(scale)},{key},{_fmt(report.mean[key])},"
                         f"{_fmt(report.std[key])}\n")


def write_exposure_scatter(z_hat: np.ndarray, z_true: np.ndarray, path) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write("z_hat,z_true\n")
        for a, b in zip(z_hat.tolist(), z_true.tolist()):
            fh.write(f"{_fmt(a)},{_fmt(b)}\n")


def write_effects_tsv(effects: EffectTriple, path) -> None:
    """Per-node estimates: id, direct, spillover, total."""
    with open(path, "w", newline="\n") as fh:
        fh.write("id\tdirect\tspillover\ttotal\n")
        for i in range(len(effects.direct)):
            fh.write(f"{i}\t{_fmt(effects.direct[i])}\t{_fmt(effects.spillover[i])}"
                     f"\t{_fmt(effects.total[i])}\n")
