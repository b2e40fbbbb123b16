"""Density-ratio sample weights from an observational-vs-permuted discriminator.

Treatments and exposures in observational network data are entangled with
the node representations (homophily plus the chain-graph assignment), so
a naive outcome regression absorbs that dependence.  Shuffling ``t`` and
``z`` independently yields calibration data whose components are jointly
independent while keeping every marginal exactly; a discriminator trained
to tell the two apart then estimates the density ratio
``p(r)p(t)p(z) / p(r, t, z)`` via ``w = (1 - pi) / pi``, and reweighting
the regression by ``w`` removes the dependence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from netfx.diffcore import (
    AdamState,
    ParamBlock,
    adam_step,
    affine,
    affine_params,
    as_tensor,
    bce_loss,
    grad,
    mlp_params,
    relu,
    sigmoid,
)

DEFAULT_CLIP_EPS = 0.01

# Weighted variance below this is treated as a constant column when
# computing correlations (squared float dust on standardized data).
_VAR_FLOOR = 1e-24


class PiNet:
    """Discriminator between observed and calibration samples.

    A small MLP with sigmoid output over inputs ``(r_i, t_i, z_i)``;
    probabilities near 1 mean "looks observational".
    """

    def __init__(self, input_dim: int, rng: np.random.Generator,
                 widths: tuple[int, ...] = (64, 64, 64)):
        if input_dim < 1 or not widths:
            raise ValueError(f"degenerate discriminator shape ({input_dim}, {widths})")
        self.input_dim = int(input_dim)
        self.widths = tuple(widths)
        self.block = ParamBlock({
            **mlp_params(rng, (input_dim,) + self.widths),
            **affine_params(rng, self.widths[-1], 1, "out_"),
        })

    def probabilities(self, inputs: torch.Tensor) -> torch.Tensor:
        h = as_tensor(inputs)
        for k in range(1, len(self.widths) + 1):
            h = relu(affine(h, self.block[f"l{k}_W"], self.block[f"l{k}_b"]))
        return sigmoid(affine(h, self.block["out_W"], self.block["out_b"]))[:, 0]


def pi_inputs(R, t, z) -> torch.Tensor:
    """Stack ``(r_i, t_i, z_i)`` rows for the discriminator."""
    R_t, t_t, z_t = as_tensor(R), as_tensor(t), as_tensor(z)
    if R_t.shape[0] != t_t.shape[0] or t_t.shape != z_t.shape:
        raise ValueError(
            f"length mismatch: R {tuple(R_t.shape)}, t {tuple(t_t.shape)}, "
            f"z {tuple(z_t.shape)}"
        )
    return torch.cat([R_t, t_t.unsqueeze(1), z_t.unsqueeze(1)], dim=1)


def make_calibration(R, t, z, seed: int):
    """Break the (R, t, z) dependence by permuting t and z independently.

    Two distinct uniform permutations are drawn, so ``t'`` and ``z'`` are
    independent of each other as well as of ``R``; all marginals are
    preserved exactly because values are only reordered.
    """
    t = np.asarray(t)
    z = np.asarray(z)
    if len(t) != len(z) or (hasattr(R, "__len__") and len(R) != len(t)):
        raise ValueError("R, t, z must have equal lengths")
    rng = np.random.default_rng(seed)
    t_perm = rng.permutation(len(t))
    z_perm = rng.permutation(len(z))
    return R, t[t_perm], z[z_perm]


def discriminator_loss(pi: PiNet, obs_inputs: torch.Tensor,
                       cal_inputs: torch.Tensor) -> torch.Tensor:
    """Mean BCE over the stacked 2n examples (observed=1, calibration=0)."""
    stacked = torch.cat([obs_inputs, cal_inputs], dim=0)
    labels = torch.cat([
        torch.ones(obs_inputs.shape[0], dtype=torch.float64),
        torch.zeros(cal_inputs.shape[0], dtype=torch.float64),
    ])
    return bce_loss(pi.probabilities(stacked), labels)


def train_pi_steps(pi: PiNet, state: AdamState, obs_inputs: torch.Tensor,
                   cal_inputs: torch.Tensor, steps: int, lr: float) -> float:
    """Run full-batch Adam steps on the discriminator; returns final loss."""
    loss_value = float(discriminator_loss(pi, obs_inputs, cal_inputs).detach())
    for _ in range(steps):
        loss_value, (g,) = grad(
            lambda: discriminator_loss(pi, obs_inputs, cal_inputs), [pi.block])
        adam_step(pi.block, g, state, lr=lr)
    return loss_value


def train_pi(obs, cal, epochs: int, lr: float, seed: int,
             widths: tuple[int, ...] = (64, 64, 64)) -> PiNet:
    """Train a fresh discriminator on observed vs calibration triples.

    ``obs`` and ``cal`` are ``(R, t, z)`` tuples of equal size, so the
    class prior is balanced and the learned odds are the density ratio
    without a prior-correction term.
    """
    obs_inputs = pi_inputs(*obs)
    cal_inputs = pi_inputs(*cal)
    if obs_inputs.shape != cal_inputs.shape:
        raise ValueError(
            f"observed {tuple(obs_inputs.shape)} and calibration "
            f"{tuple(cal_inputs.shape)} sets must match in size"
        )
    pi = PiNet(obs_inputs.shape[1], np.random.default_rng(seed), widths)
    state = AdamState.for_block(pi.block)
    train_pi_steps(pi, state, obs_inputs, cal_inputs, epochs, lr)
    return pi


@dataclass(frozen=True)
class Weights:
    """Positive per-sample weights, optionally normalized to mean 1."""

    values: np.ndarray
    normalized: bool

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)) or np.any(self.values <= 0):
            raise ValueError("weights must be positive and finite")
        if self.normalized and abs(self.values.mean() - 1.0) > 1e-9:
            raise ValueError(f"normalized weights have mean {self.values.mean()!r}")


def weights_from_probs(probs: np.ndarray, clip_eps: float = DEFAULT_CLIP_EPS,
                       normalize: bool = True) -> Weights:
    """Density-ratio weights ``(1 - pi)/pi`` from discriminator outputs."""
    if not 0.0 < clip_eps < 0.5:
        raise ValueError(f"clip_eps must be in (0, 0.5), got {clip_eps}")
    p = np.clip(np.asarray(probs, dtype=np.float64), clip_eps, 1.0 - clip_eps)
    w = (1.0 - p) / p
    if normalize:
        w = w / w.mean()
    return Weights(values=w, normalized=normalize)


def sample_weights(pi: PiNet, R, t, z, clip_eps: float = DEFAULT_CLIP_EPS,
                   normalize: bool = True) -> Weights:
    """Evaluate the frozen discriminator and convert odds to weights."""
    with torch.no_grad():
        probs = pi.probabilities(pi_inputs(R, t, z)).numpy()
    return weights_from_probs(probs, clip_eps=clip_eps, normalize=normalize)


def weighted_pearson(a: np.ndarray, b: np.ndarray, w: np.ndarray) -> float | None:
    """Weighted Pearson correlation, or None when either side is constant."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    total = w.sum()
    ma, mb = (w * a).sum() / total, (w * b).sum() / total
    va = (w * (a - ma) ** 2).sum() / total
    vb = (w * (b - mb) ** 2).sum() / total
    if va < _VAR_FLOOR or vb < _VAR_FLOOR:
        return None
    cov = (w * (a - ma) * (b - mb)).sum() / total
    return float(cov / np.sqrt(va * vb))


@dataclass(frozen=True)
class DecorrelationReport:
    """Weighted dependence diagnostics between (R, t, z).

    ``None`` correlations mean the corresponding column was constant;
    those columns are also listed in ``degenerate`` so callers can tell a
    perfectly balanced dataset from a degenerate one.
    """

    corr_t_z: float | None
    max_abs_corr_r_t: float | None
    max_abs_corr_r_z: float | None
    degenerate: tuple[str, ...]

    def to_jsonable(self) -> dict:
        return {
            "corr_t_z": self.corr_t_z,
            "max_abs_corr_r_t": self.max_abs_corr_r_t,
            "max_abs_corr_r_z": self.max_abs_corr_r_z,
            "degenerate": list(self.degenerate),
        }


def decorrelation_report(R, t, z, w) -> DecorrelationReport:
    """Report how much dependence is left after weighting.

    With ``w`` identically 1 this reduces to plain Pearson correlations;
    the headline numbers are corr_w(t, z) and the worst representation
    coordinate against each of t and z.
    """
    R = np.asarray(R, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    degenerate = []
    corr_tz = weighted_pearson(t, z, w)
    if weighted_pearson(t, t, w) is None:
        degenerate.append("t")
    if weighted_pearson(z, z, w) is None:
        degenerate.append("z")
    rt_vals, rz_vals = [], []
    for k in range(R.shape[1]):
        col = R[:, k]
        if weighted_pearson(col, col, w) is None:
            degenerate.append(f"R[{k}]")
            continue
        c_t = weighted_pearson(col, t, w)
        c_z = weighted_pearson(col, z, w)
        if c_t is not None:
            rt_vals.append(abs(c_t))
        if c_z is not None:
            rz_vals.append(abs(c_z))
    return DecorrelationReport(
        corr_t_z=corr_tz,
        max_abs_corr_r_t=max(rt_vals) if rt_vals else None,
        max_abs_corr_r_z=max(rz_vals) if rz_vals else None,
        degenerate=tuple(degenerate),
    )
