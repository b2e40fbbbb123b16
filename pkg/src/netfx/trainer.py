"""Alternating bi-level training: discriminator refresh, then outcome step.

Each outer epoch runs one forward pass, refreshes the weight learner on a
fresh calibration permutation (the lower level), freezes the resulting
weights, and takes one full-batch Adam step on the weighted outcome loss
(the upper level).  Weights enter the outcome step as constants; no
gradient flows from the regression into the discriminator or back.

Out-of-sample evaluation is transductive: the graph, covariates, and
treatments of held-out nodes stay visible to every forward pass, only
their outcomes are masked from the loss.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Any

import numpy as np
import torch

from netfx.diffcore import (
    AdamState,
    CheckpointError,
    NonFiniteError,
    adam_step,
    as_tensor,
    dropout_mask,
    grad,
    load_checkpoint,
    save_checkpoint,
    weighted_mse,
)
from netfx.dwr_model import DropoutPlan, DWRModel, GraphIndex, ModelArch
from netfx.reweighter import (
    PiNet,
    decorrelation_report,
    make_calibration,
    pi_inputs,
    sample_weights,
    train_pi_steps,
)
from netfx.seeding import derive_seed
from netfx.synthgen import Dataset


@dataclass(frozen=True)
class TrainConfig:
    """All knobs of one training run; hashable into checkpoints."""

    seed: int = 0
    outer_epochs: int = 300
    pi_epochs_per_outer: int = 5
    lr_outcome: float = 1e-3
    lr_pi: float = 1e-3
    clip_eps: float = 0.01
    normalize_weights: bool = True
    split_fraction: float = 0.8
    use_attention: bool = True
    use_weights: bool = True
    encoder_widths: tuple[int, ...] = (32, 64)
    head_widths: tuple[int, ...] = (128, 128, 128)
    pi_widths: tuple[int, ...] = (64, 64, 64)
    dropout: bool = False
    dropout_rate: float = 0.5

    def __post_init__(self):
        if self.outer_epochs < 1:
            raise ValueError(f"outer_epochs must be positive, got {self.outer_epochs}")
        if self.pi_epochs_per_outer < 1:
            raise ValueError(
                f"pi_epochs_per_outer must be positive, got {self.pi_epochs_per_outer}"
            )
        if self.lr_outcome <= 0 or self.lr_pi <= 0:
            raise ValueError("learning rates must be positive")
        if not 0.0 < self.clip_eps < 0.5:
            raise ValueError(f"clip_eps must be in (0, 0.5), got {self.clip_eps}")
        if not 0.0 < self.split_fraction < 1.0:
            raise ValueError(
                f"split_fraction must be in (0, 1), got {self.split_fraction}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        # tolerate lists from config files
        for name in ("encoder_widths", "head_widths", "pi_widths"):
            object.__setattr__(self, name, tuple(int(w) for w in getattr(self, name)))

    def to_jsonable(self) -> dict:
        out = asdict(self)
        for name in ("encoder_widths", "head_widths", "pi_widths"):
            out[name] = list(out[name])
        return out

    @classmethod
    def from_jsonable(cls, data) -> "TrainConfig":
        return cls(**data)


def config_hash(config: TrainConfig) -> str:
    """Stable hash of a training configuration (canonical JSON, SHA-256)."""
    blob = json.dumps(config.to_jsonable(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Split:
    """Disjoint covering partition into loss-visible and held-out nodes."""

    train_ids: np.ndarray
    heldout_ids: np.ndarray

    def __post_init__(self):
        overlap = np.intersect1d(self.train_ids, self.heldout_ids)
        if overlap.size:
            raise ValueError(f"split sides overlap at node {int(overlap[0])}")
        if self.train_ids.size == 0 or self.heldout_ids.size == 0:
            raise ValueError("both split sides must be non-empty")


def make_split(dataset, fraction: float, seed: int) -> Split:
    """Uniform random partition; ``dataset`` may be a Dataset or a node count."""
    n = dataset.n if hasattr(dataset, "n") else int(dataset)
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    k = int(round(n * fraction))
    if k < 1 or k >= n:
        raise ValueError(f"fraction {fraction} leaves an empty side for n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    return Split(train_ids=np.sort(perm[:k]), heldout_ids=np.sort(perm[k:]))


def default_split(n: int, config: TrainConfig) -> Split:
    """The split :func:`fit` uses when none is injected; shared so that a
    restored checkpoint can be evaluated on the exact holdout it was
    trained against."""
    return make_split(n, config.split_fraction,
                      derive_seed(config.seed, "train", "split"))


class TrainingDiverged(RuntimeError):
    """Loss or gradients became non-finite at some outer epoch."""

    def __init__(self, epoch: int, cause: str):
        super().__init__(f"training diverged at epoch {epoch}: {cause}")
        self.epoch = epoch


@dataclass
class FitResult:
    model: DWRModel
    pi: PiNet
    history: list[dict]
    split: Split
    config: TrainConfig


def _draw_dropout(rng: np.random.Generator, arch: ModelArch, n: int,
                  rate: float) -> DropoutPlan:
    return DropoutPlan(
        encoder=[dropout_mask(rng, (n, w), rate) for w in arch.encoder_widths],
        head0=[dropout_mask(rng, (n, w), rate) for w in arch.head_widths],
        head1=[dropout_mask(rng, (n, w), rate) for w in arch.head_widths],
    )


def fit(dataset: Dataset, config: TrainConfig, split: Split | None = None) -> FitResult:
    """Train a model on one dataset; deterministic given (config, seed)."""
    torch.set_num_threads(1)
    gi = GraphIndex.from_network(dataset.net)
    n = dataset.n
    arch = ModelArch(input_dim=dataset.d,
                     encoder_widths=config.encoder_widths,
                     head_widths=config.head_widths)
    model = DWRModel(arch, np.random.default_rng(derive_seed(config.seed, "train", "model")),
                     use_attention=config.use_attention)
    pi = PiNet(arch.rep_dim + 2,
               np.random.default_rng(derive_seed(config.seed, "train", "pi")),
               config.pi_widths)
    if split is None:
        split = default_split(n, config)
    states = {name: AdamState.for_block(b) for name, b in model.blocks().items()}
    pi_state = AdamState.for_block(pi.block)
    dropout_rng = np.random.default_rng(derive_seed(config.seed, "train", "dropout"))

    X_t = as_tensor(dataset.X)
    t_np = dataset.t.astype(np.float64)
    t_t = as_tensor(t_np)
    y_t = as_tensor(dataset.y)
    train_idx = torch.from_numpy(split.train_ids)
    unit_w = np.ones(n)

    history: list[dict] = []
    for epoch in range(config.outer_epochs):
        plan = (_draw_dropout(dropout_rng, arch, n, config.dropout_rate)
                if config.dropout else None)
        try:
            fs = model.forward(gi, X_t, t_t, plan)
            R_np = fs.R.detach().numpy()
            z_np = fs.z_hat.detach().numpy()
            if config.use_weights:
                cal = make_calibration(R_np, t_np, z_np,
                                       derive_seed(config.seed, "train", "calibration", epoch))
                pi_loss = train_pi_steps(pi, pi_state,
                                         pi_inputs(R_np, t_np, z_np),
                                         pi_inputs(*cal),
                                         config.pi_epochs_per_outer, config.lr_pi)
                w_np = sample_weights(pi, R_np, t_np, z_np,
                                      clip_eps=config.clip_eps,
                                      normalize=config.normalize_weights).values
            else:
                pi_loss = None
                w_np = unit_w
            w_t = torch.from_numpy(w_np)
            y_hat = model.predict(fs.R, t_t, fs.z_hat, plan)
            loss = weighted_mse(y_hat[train_idx], y_t[train_idx], w_t[train_idx])
            loss_value, grads = grad(lambda: loss, model.parameters())
            for (name, block), g in zip(model.blocks().items(), grads):
                adam_step(block, g, states[name], lr=config.lr_outcome)
        except NonFiniteError as exc:
            raise TrainingDiverged(epoch, exc.where) from exc
        weighted_diag = decorrelation_report(R_np, t_np, z_np, w_np)
        plain_diag = decorrelation_report(R_np, t_np, z_np, unit_w)
        history.append({
            "epoch": epoch,
            "outcome_loss": loss_value,
            "pi_loss": pi_loss,
            "weight_mean": float(w_np.mean()),
            "weight_min": float(w_np.min()),
            "weight_max": float(w_np.max()),
            "decorrelation": weighted_diag.to_jsonable(),
            "decorrelation_unweighted": plain_diag.to_jsonable(),
        })
    return FitResult(model=model, pi=pi, history=history, split=split, config=config)


def write_history(history: list[dict], path, header: dict | None = None) -> None:
    """One JSON object per epoch, in order, after an optional header line
    recording the run mode."""
    with open(path, "w", newline="\n") as fh:
        if header is not None:
            fh.write(json.dumps(header, sort_keys=True) + "\n")
        for entry in history:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


# --- checkpointing ----------------------------------------------------------


def checkpoint(model: DWRModel, pi: PiNet, path, config: TrainConfig,
               extra: dict[str, Any] | None = None) -> None:
    """Persist model + discriminator parameters with identifying metadata."""
    meta = {
        "arch": model.arch.to_jsonable(),
        "use_attention": model.use_attention,
        "pi_input_dim": pi.input_dim,
        "pi_widths": list(pi.widths),
        "config": config.to_jsonable(),
        "config_hash": config_hash(config),
    }
    if extra:
        meta.update(extra)
    blocks = dict(model.blocks())
    blocks["pi"] = pi.block
    save_checkpoint(path, blocks, meta)


def restore(path, expected_config_hash: str | None = None) -> tuple[DWRModel, PiNet, dict]:
    """Rebuild a trained model and discriminator from a checkpoint.

    If ``expected_config_hash`` is given it must match the stored hash;
    this guards against evaluating a checkpoint under a different
    configuration than it was trained with.
    """
    meta, arrays = load_checkpoint(path)
    if expected_config_hash is not None and meta.get("config_hash") != expected_config_hash:
        raise CheckpointError(
            f"{path}: config hash {meta.get('config_hash')!r} does not match "
            f"expected {expected_config_hash!r}"
        )
    arch = ModelArch.from_jsonable(meta["arch"])
    model = DWRModel(arch, np.random.default_rng(0),
                     use_attention=bool(meta["use_attention"]))
    pi = PiNet(int(meta["pi_input_dim"]), np.random.default_rng(0),
               tuple(meta["pi_widths"]))
    try:
        for name, block in model.blocks().items():
            block.load_state_arrays(arrays[name])
        pi.block.load_state_arrays(arrays["pi"])
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing parameter block {exc}") from None
    return model, pi, meta
