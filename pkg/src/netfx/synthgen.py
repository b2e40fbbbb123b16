"""Semi-synthetic benchmark generator with a closed-form counterfactual oracle.

The pipeline mirrors how real networked observational data is assumed to
arise: node covariates determine heterogeneous attention between
neighbours, treatments are Gibbs-sampled so that a node's assignment
depends on its own covariates, its neighbours' covariates, and its peer
exposure, and outcomes are linear in covariates and exposure.  Because
every coefficient is known, individual direct and spillover effects have
closed forms and estimators can be scored exactly.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from netfx.netgraph import (
    GraphError,
    Network,
    degree_stats,
    load_edge_list,
    ring_lattice,
    save_edge_list,
    sbm,
)
from netfx.seeding import derive_seed

FLOAT_FMT = "%.17g"

DENSE_EIG_LIMIT = 1500

# Realized exposures inherit the 1e-12 row-sum slack of the attention map,
# so [0, 1] range checks allow this much float dust (values pass unchanged).
_Z_TOL = 1e-9


def _fmt(x: float) -> str:
    return FLOAT_FMT % float(x)


def _stable_sigmoid(s: float) -> float:
    if s >= 0.0:
        return 1.0 / (1.0 + math.exp(-s))
    e = math.exp(s)
    return e / (1.0 + e)


@dataclass(frozen=True, eq=False)
class AttentionMap:
    """Row-stochastic neighbour weights aligned with a CSR adjacency.

    ``values[indptr[i]:indptr[i+1]]`` are the weights node ``i`` puts on
    ``indices[indptr[i]:indptr[i+1]]``.  Construction validates strict
    positivity and that every row sums to 1 within 1e-12, so an isolated
    node (empty row) is unrepresentable by design.
    """

    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.indptr[0] != 0 or self.indptr[-1] != self.values.size:
            raise ValueError("indptr endpoints do not match values length")
        if self.indices.shape != self.values.shape:
            raise ValueError("indices and values disagree on length")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("non-finite attention weight")
        if self.values.size and not np.all(self.values > 0):
            raise ValueError("attention weights must be strictly positive")
        sums = self.row_sums()
        if np.any(np.abs(sums - 1.0) > 1e-12):
            bad = int(np.argmax(np.abs(sums - 1.0)))
            raise ValueError(f"row {bad} sums to {sums[bad]!r}, not 1")

    @property
    def n(self) -> int:
        return self.indptr.size - 1

    def edge_rows(self) -> np.ndarray:
        return np.repeat(np.arange(self.n, dtype=np.int64), np.diff(self.indptr))

    def row_sums(self) -> np.ndarray:
        return np.bincount(self.edge_rows(), weights=self.values, minlength=self.n)

    def matches_support(self, net: Network) -> bool:
        return (
            self.n == net.n
            and np.array_equal(self.indptr, net.indptr)
            and np.array_equal(self.indices, net.indices)
        )

    def exposure(self, t: np.ndarray) -> np.ndarray:
        """Weighted fraction of treated neighbours, ``z_i = sum_j a_ij t_j``."""
        t = np.asarray(t, dtype=np.float64)
        if t.shape != (self.n,):
            raise ValueError(f"t has shape {t.shape}, expected ({self.n},)")
        return np.bincount(self.edge_rows(), weights=self.values * t[self.indices],
                           minlength=self.n)

    def neighbor_average(self, X: np.ndarray) -> np.ndarray:
        """Attention-weighted neighbour covariates, row ``i`` is ``sum_j a_ij x_j``."""
        X = np.asarray(X, dtype=np.float64)
        rows = self.edge_rows()
        out = np.empty((self.n, X.shape[1]))
        for k in range(X.shape[1]):
            out[:, k] = np.bincount(rows, weights=self.values * X[self.indices, k],
                                    minlength=self.n)
        return out


def compute_exposure(attention: AttentionMap, t: np.ndarray) -> np.ndarray:
    """Peer exposure under an attention map; in [0, 1] for binary ``t``."""
    return attention.exposure(t)


def spectral_embed(net: Network, d: int, seed: int = 0) -> np.ndarray:
    """Node covariates from the spectrum of the normalized adjacency.

    Takes the ``d`` leading non-trivial eigenvectors of
    ``D^-1/2 A D^-1/2`` (the all-one-eigenvalue vector is dropped), fixes
    each eigenvector's sign so its first nonzero entry is positive, and
    shifts/scales every row to unit norm so cosine similarities downstream
    are well conditioned.  ``seed`` is accepted for interface uniformity;
    the computation is deterministic and does not consume randomness.
    """
    n = net.n
    stats = degree_stats(net)
    if stats.isolated_count:
        bad = int(np.flatnonzero(net.degrees == 0)[0])
        raise GraphError(f"spectral embedding undefined with isolated node {bad}")
    if not 1 <= d < n:
        raise ValueError(f"need 1 <= d < n, got d={d}, n={n}")
    deg = net.degrees.astype(np.float64)
    inv_sqrt = 1.0 / np.sqrt(deg)
    rows, cols = net.directed_pairs()
    vals = inv_sqrt[rows] * inv_sqrt[cols]
    if n <= DENSE_EIG_LIMIT or d + 2 >= n:
        dense = np.zeros((n, n))
        dense[rows, cols] = vals
        evals, evecs = np.linalg.eigh(dense)
        order = np.argsort(-evals, kind="stable")
    else:
        sp = scipy.sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
        v0 = np.full(n, 1.0 / math.sqrt(n))
        evals, evecs = scipy.sparse.linalg.eigsh(sp, k=d + 1, which="LA", v0=v0)
        order = np.argsort(-evals, kind="stable")
    picked = evecs[:, order[1:d + 1]].copy()
    for k in range(d):
        col = picked[:, k]
        nz = np.flatnonzero(np.abs(col) > 1e-12)
        if nz.size and col[nz[0]] < 0:
            picked[:, k] = -col
    norms = np.linalg.norm(picked, axis=1)
    flat = norms < 1e-12
    if np.any(flat):
        # A numerically zero row carries no direction; shift it onto the
        # uniform diagonal before normalizing.
        picked[flat] += 1.0 / math.sqrt(d)
        norms = np.linalg.norm(picked, axis=1)
    return picked / norms[:, None]


def ground_truth_attention(X: np.ndarray, net: Network) -> AttentionMap:
    """Row-softmax of cosine similarities between neighbour covariates."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] != net.n:
        raise ValueError(f"X has {X.shape[0]} rows for a {net.n}-node graph")
    stats = degree_stats(net)
    if stats.isolated_count:
        bad = int(np.flatnonzero(net.degrees == 0)[0])
        raise GraphError(f"attention undefined for isolated node {bad}")
    norms = np.linalg.norm(X, axis=1)
    if np.any(norms < 1e-12):
        bad = int(np.flatnonzero(norms < 1e-12)[0])
        raise ValueError(f"zero-norm covariate row {bad}")
    unit = X / norms[:, None]
    rows, cols = net.directed_pairs()
    scores = np.einsum("ij,ij->i", unit[rows], unit[cols])
    # Rows are contiguous in CSR order, so per-row reductions can use
    # reduceat; no empty rows exist past the isolated-node check.
    starts = net.indptr[:-1]
    shifted = scores - np.maximum.reduceat(scores, starts)[rows]
    ex = np.exp(shifted)
    weights = ex / np.add.reduceat(ex, starts)[rows]
    return AttentionMap(net.indptr.copy(), net.indices.copy(), weights)


@dataclass(frozen=True)
class OutcomeParams:
    """Coefficients of the treatment and outcome models.

    ``alpha``s drive the Gibbs treatment score
    ``alpha0.x_i + alpha1.xbar_i + alpha2 z_i``; ``beta``s drive the
    linear outcome surfaces, with the spillover coefficient equal to
    ``interference_scale * beta2``.
    """

    alpha0: np.ndarray
    alpha1: np.ndarray
    alpha2: float
    beta0: np.ndarray
    beta1: np.ndarray
    beta2: float
    interference_scale: float
    noise_sd: float
    seed: int

    @property
    def spillover_coef(self) -> float:
        return self.interference_scale * self.beta2

    def to_jsonable(self) -> dict:
        out = asdict(self)
        out["alpha0"] = self.alpha0.tolist()
        out["alpha1"] = self.alpha1.tolist()
        out["beta0"] = self.beta0.tolist()
        out["beta1"] = self.beta1.tolist()
        return out

    @classmethod
    def from_jsonable(cls, data: Mapping) -> "OutcomeParams":
        return cls(
            alpha0=np.asarray(data["alpha0"], dtype=np.float64),
            alpha1=np.asarray(data["alpha1"], dtype=np.float64),
            alpha2=float(data["alpha2"]),
            beta0=np.asarray(data["beta0"], dtype=np.float64),
            beta1=np.asarray(data["beta1"], dtype=np.float64),
            beta2=float(data["beta2"]),
            interference_scale=float(data["interference_scale"]),
            noise_sd=float(data["noise_sd"]),
            seed=int(data["seed"]),
        )


def draw_outcome_params(d: int, seed: int, interference_scale: float = 1.0,
                        noise_sd: float = 0.0, alpha_scale: float = 1.0,
                        alpha2_override: float | None = None) -> OutcomeParams:
    """Draw model coefficients from their generating distributions.

    ``alpha_scale`` multiplies all three treatment-score coefficients
    (``alpha_scale=0`` makes every Gibbs conditional Bernoulli(0.5));
    ``alpha2_override`` then replaces the exposure coefficient outright,
    which is how confounding strength between t and z is dialed up.  All
    draws happen in a fixed order regardless of overrides, so the betas
    do not shift when the alphas are pinned.
    """
    if interference_scale < 0:
        raise ValueError(f"interference_scale must be nonnegative, got {interference_scale}")
    if noise_sd < 0:
        raise ValueError(f"noise_sd must be nonnegative, got {noise_sd}")
    rng = np.random.default_rng(seed)
    alpha0 = rng.standard_normal(d) * alpha_scale
    alpha1 = rng.standard_normal(d) * alpha_scale
    alpha2 = float(rng.standard_normal() * alpha_scale)
    beta0 = rng.uniform(1.0, 2.0, size=d)
    beta1 = rng.uniform(0.0, 1.0, size=d)
    beta2 = float(rng.uniform())
    if alpha2_override is not None:
        alpha2 = float(alpha2_override)
    return OutcomeParams(alpha0, alpha1, alpha2, beta0, beta1, beta2,
                         float(interference_scale), float(noise_sd), int(seed))


def gibbs_sample_treatments(net: Network, X: np.ndarray, attention: AttentionMap,
                            params: OutcomeParams, sweeps: int, burn_in: int,
                            seed: int, init: np.ndarray | None = None) -> np.ndarray:
    """Sample binary treatments from the chain-graph conditional model.

    Runs ``sweeps`` sequential full sweeps over nodes in id order,
    resampling ``t_i ~ Bernoulli(sigmoid(alpha0.x_i + alpha1.xbar_i +
    alpha2 z_i))`` with the exposure ``z_i`` recomputed from the current
    neighbour states at every visit.  The state after the final sweep is
    the sample; ``burn_in`` only bounds how many of those sweeps count as
    mixing and must not exceed ``sweeps``.  The chain starts from iid
    Bernoulli(0.5) unless an explicit binary ``init`` state is supplied.
    """
    if not 0 <= burn_in <= sweeps:
        raise ValueError(f"need sweeps >= burn_in >= 0, got sweeps={sweeps}, burn_in={burn_in}")
    if not attention.matches_support(net):
        raise ValueError("attention support does not match the graph")
    X = np.asarray(X, dtype=np.float64)
    base = X @ params.alpha0 + attention.neighbor_average(X) @ params.alpha1
    rng = np.random.default_rng(seed)
    if init is None:
        t = (rng.random(net.n) < 0.5).astype(np.float64)
    else:
        t = np.asarray(init, dtype=np.float64).copy()
        if t.shape != (net.n,) or not np.all((t == 0) | (t == 1)):
            raise ValueError("init must be a binary vector of length n")
    indptr, indices, values = attention.indptr, attention.indices, attention.values
    a2 = params.alpha2
    for _ in range(sweeps):
        for i in range(net.n):
            lo, hi = indptr[i], indptr[i + 1]
            z_i = float(values[lo:hi] @ t[indices[lo:hi]])
            p = _stable_sigmoid(base[i] + a2 * z_i)
            t[i] = 1.0 if rng.random() < p else 0.0
    return t.astype(np.int64)


def generate_outcomes(X: np.ndarray, attention: AttentionMap, t: np.ndarray,
                      z: np.ndarray, params: OutcomeParams, seed: int) -> np.ndarray:
    """Linear potential outcomes plus optional Gaussian noise.

    ``y_i = t_i (beta0.(x_i + xbar_i) + c z_i) + (1 - t_i)(beta1.(x_i +
    xbar_i) + c z_i) + eps_i`` with ``c = interference_scale * beta2``.
    The noise vector is drawn once, indexed by node id, so outcomes for a
    subset of nodes never depend on which other nodes are present.
    """
    X = np.asarray(X, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    joint = X + attention.neighbor_average(X)
    treated_surface = joint @ params.beta0 + params.spillover_coef * z
    control_surface = joint @ params.beta1 + params.spillover_coef * z
    y = t * treated_surface + (1.0 - t) * control_surface
    if params.noise_sd > 0:
        y = y + params.noise_sd * np.random.default_rng(seed).standard_normal(X.shape[0])
    return y


class Oracle:
    """Noiseless potential outcomes with every coefficient known.

    ``potential_outcome(i, t, z)`` is affine in ``z`` for fixed ``t`` and
    reproduces observed outcomes exactly when ``noise_sd = 0``.
    """

    def __init__(self, params: OutcomeParams, attention: AttentionMap, X: np.ndarray):
        self.params = params
        self.attention = attention
        self.X = np.asarray(X, dtype=np.float64)
        joint = self.X + attention.neighbor_average(self.X)
        self._treated_base = joint @ params.beta0
        self._control_base = joint @ params.beta1

    def potential_outcome(self, i: int, t: int, z: float) -> float:
        if t not in (0, 1):
            raise ValueError(f"treatment must be 0 or 1, got {t}")
        if not -_Z_TOL <= z <= 1.0 + _Z_TOL:
            raise ValueError(f"exposure {z} outside [0, 1]")
        base = self._treated_base[i] if t == 1 else self._control_base[i]
        return float(base + self.params.spillover_coef * z)

    def potential_outcomes(self, t: np.ndarray, z: np.ndarray) -> np.ndarray:
        """Vectorized counterpart of :meth:`potential_outcome`."""
        t = np.asarray(t, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        if np.any((z < -_Z_TOL) | (z > 1.0 + _Z_TOL)):
            raise ValueError("exposure outside [0, 1]")
        return (t * self._treated_base + (1.0 - t) * self._control_base
                + self.params.spillover_coef * z)


@dataclass(frozen=True)
class EffectTriple:
    """Per-node direct, spillover, and total effects."""

    direct: np.ndarray
    spillover: np.ndarray
    total: np.ndarray


def oracle_effects(oracle: Oracle, X: np.ndarray, z_eval: np.ndarray) -> EffectTriple:
    """Ground-truth effects at the given evaluation exposures.

    Direct: flip own treatment at exposure ``z_eval_i``.  Spillover: move
    exposure from 0 to ``z_eval_i`` under control.  Total: flip both own
    treatment (0 to 1) and exposure (0 to 1).  Because outcomes are affine
    in ``z``, total = direct + spillover holds exactly at ``z_eval = 1``.
    """
    X = np.asarray(X, dtype=np.float64)
    z_eval = np.asarray(z_eval, dtype=np.float64)
    if np.any((z_eval < -_Z_TOL) | (z_eval > 1.0 + _Z_TOL)):
        raise ValueError("z_eval outside [0, 1]")
    params = oracle.params
    joint = X + oracle.attention.neighbor_average(X)
    direct = joint @ (params.beta0 - params.beta1)
    spillover = params.spillover_coef * z_eval
    total = direct + params.spillover_coef
    return EffectTriple(direct, spillover, total)


@dataclass(frozen=True)
class Dataset:
    """One generated observational dataset on a fixed graph."""

    X: np.ndarray
    t: np.ndarray
    y: np.ndarray
    z_true: np.ndarray
    net: Network

    @property
    def n(self) -> int:
        return self.net.n

    @property
    def d(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class GenerationConfig:
    """Everything needed to regenerate a benchmark byte for byte."""

    seed: int
    graph_source: str = "sbm"
    graph_path: str | None = None
    n: int = 1000
    ring_k: int = 4
    sbm_blocks: int = 10
    sbm_p_in: float = 0.05
    sbm_p_out: float = 0.002
    features_source: str = "spectral"
    features_path: str | None = None
    d: int = 10
    sweeps: int = 20
    burn_in: int = 10
    interference_scale: float = 1.0
    noise_sd: float = 0.0
    alpha_scale: float = 1.0
    alpha2: float | None = None

    def stage_seeds(self) -> dict[str, int]:
        return {name: derive_seed(self.seed, "generate", name)
                for name in ("graph", "features", "params", "treatments", "noise")}


def _build_graph(cfg: GenerationConfig, seeds: Mapping[str, int]) -> Network:
    if cfg.graph_source == "file":
        if not cfg.graph_path:
            raise ValueError("graph_source=file requires graph_path")
        return load_edge_list(cfg.graph_path)
    if cfg.graph_source == "ring":
        return ring_lattice(cfg.n, cfg.ring_k)
    if cfg.graph_source == "sbm":
        return sbm(cfg.n, cfg.sbm_blocks, cfg.sbm_p_in, cfg.sbm_p_out, seeds["graph"])
    raise ValueError(f"unknown graph_source {cfg.graph_source!r}")


def _load_features(path, n: int, d: int) -> np.ndarray:
    table = np.loadtxt(path, dtype=np.float64, ndmin=2)
    if table.shape != (n, d + 1):
        raise ValueError(
            f"feature file {path} has shape {table.shape}, expected ({n}, {d + 1})"
        )
    ids = table[:, 0].astype(np.int64)
    if not np.array_equal(ids, np.arange(n)):
        raise ValueError(f"feature file {path} ids are not 0..{n - 1} in order")
    return table[:, 1:].copy()


def generate_dataset(cfg: GenerationConfig) -> tuple[Dataset, Oracle]:
    """Run the full generation pipeline in memory."""
    seeds = cfg.stage_seeds()
    net = _build_graph(cfg, seeds)
    stats = degree_stats(net)
    if stats.isolated_count:
        bad = int(np.flatnonzero(net.degrees == 0)[0])
        raise GraphError(f"benchmark graphs may not contain isolated nodes (node {bad})")
    if cfg.features_source == "file":
        if not cfg.features_path:
            raise ValueError("features_source=file requires features_path")
        X = _load_features(cfg.features_path, net.n, cfg.d)
    elif cfg.features_source == "spectral":
        X = spectral_embed(net, cfg.d, seeds["features"])
    else:
        raise ValueError(f"unknown features_source {cfg.features_source!r}")
    attention = ground_truth_attention(X, net)
    params = draw_outcome_params(cfg.d, seeds["params"],
                                 interference_scale=cfg.interference_scale,
                                 noise_sd=cfg.noise_sd,
                                 alpha_scale=cfg.alpha_scale,
                                 alpha2_override=cfg.alpha2)
    t = gibbs_sample_treatments(net, X, attention, params, cfg.sweeps,
                                cfg.burn_in, seeds["treatments"])
    z = compute_exposure(attention, t)
    y = generate_outcomes(X, attention, t, z, params, seeds["noise"])
    dataset = Dataset(X=X, t=t, y=y, z_true=z, net=net)
    return dataset, Oracle(params, attention, X)


# --- bundle IO --------------------------------------------------------------


def write_bundle(outdir, dataset: Dataset, oracle: Oracle,
                 cfg: GenerationConfig) -> None:
    """Write the benchmark directory; identical inputs give identical bytes."""
    os.makedirs(outdir, exist_ok=True)
    save_edge_list(dataset.net, os.path.join(outdir, "edges.tsv"))
    with open(os.path.join(outdir, "features.tsv"), "w", newline="\n") as fh:
        for i in range(dataset.n):
            cells = "\t".join(_fmt(v) for v in dataset.X[i])
            fh.write(f"{i}\t{cells}\n")
    with open(os.path.join(outdir, "data.tsv"), "w", newline="\n") as fh:
        for i in range(dataset.n):
            fh.write(f"{i}\t{int(dataset.t[i])}\t{_fmt(dataset.z_true[i])}"
                     f"\t{_fmt(dataset.y[i])}\n")
    att = oracle.attention
    rows = att.edge_rows()
    with open(os.path.join(outdir, "attention.tsv"), "w", newline="\n") as fh:
        for r, c, v in zip(rows.tolist(), att.indices.tolist(), att.values.tolist()):
            fh.write(f"{r}\t{c}\t{_fmt(v)}\n")
    payload = {
        "params": oracle.params.to_jsonable(),
        "stage_seeds": cfg.stage_seeds(),
        "config": asdict(cfg),
    }
    with open(os.path.join(outdir, "oracle.json"), "w", newline="\n") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def generate_benchmark(cfg: GenerationConfig, outdir) -> tuple[Dataset, Oracle]:
    """Generate a dataset and persist it as a bundle directory."""
    dataset, oracle = generate_dataset(cfg)
    write_bundle(outdir, dataset, oracle, cfg)
    return dataset, oracle


@dataclass(frozen=True)
class Bundle:
    """A benchmark read back from disk."""

    dataset: Dataset
    oracle: Oracle
    config: GenerationConfig


def read_bundle(bundle_dir) -> Bundle:
    """Load a bundle directory written by :func:`write_bundle`.

    The attention map and oracle are rebuilt from the stored floats, so a
    round trip through disk preserves oracle outputs exactly (17
    significant digits round-trip float64).
    """
    net = load_edge_list(os.path.join(bundle_dir, "edges.tsv"))
    with open(os.path.join(bundle_dir, "oracle.json")) as fh:
        payload = json.load(fh)
    params = OutcomeParams.from_jsonable(payload["params"])
    raw_cfg = dict(payload["config"])
    cfg = GenerationConfig(**raw_cfg)
    X = _load_features(os.path.join(bundle_dir, "features.tsv"), net.n, cfg.d)
    data = np.loadtxt(os.path.join(bundle_dir, "data.tsv"), dtype=np.float64, ndmin=2)
    if data.shape != (net.n, 4):
        raise ValueError(f"data.tsv has shape {data.shape}, expected ({net.n}, 4)")
    t = data[:, 1].astype(np.int64)
    z_true = data[:, 2].copy()
    y = data[:, 3].copy()
    att_rows = np.loadtxt(os.path.join(bundle_dir, "attention.tsv"),
                          dtype=np.float64, ndmin=2)
    rows = att_rows[:, 0].astype(np.int64)
    cols = att_rows[:, 1].astype(np.int64)
    vals = att_rows[:, 2]
    expect_rows, expect_cols = net.directed_pairs()
    if not (np.array_equal(rows, expect_rows) and np.array_equal(cols, expect_cols)):
        raise ValueError("attention.tsv support does not match edges.tsv")
    attention = AttentionMap(net.indptr.copy(), net.indices.copy(), vals.copy())
    dataset = Dataset(X=X, t=t, y=y, z_true=z_true, net=net)
    return Bundle(dataset=dataset, oracle=Oracle(params, attention, X), config=cfg)
