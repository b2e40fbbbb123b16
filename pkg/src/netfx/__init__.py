"""Estimation of individual treatment effects on networks with interference.

The package is organised around a small number of building blocks:

- :mod:`netfx.netgraph`: undirected graphs stored in CSR form, edge-list IO.
- :mod:`netfx.synthgen`: semi-synthetic benchmark generator (spectral
  features, ground-truth attention, Gibbs-sampled treatments, linear
  potential outcomes with a known oracle).
- :mod:`netfx.diffcore`: float64 differentiable primitives, gradient
  checking, Adam, and binary checkpoint IO.
- :mod:`netfx.dwr_model`: the attention-based outcome model (encoder,
  estimated exposure, neighbourhood aggregation, per-arm outcome heads).
- :mod:`netfx.reweighter`: density-ratio sample weights from a
  discriminator between observed and permuted (calibration) data.
- :mod:`netfx.trainer`: the bi-level training loop, splits, checkpoints.
- :mod:`netfx.evalkit`: PEHE-style metrics, repeated-run experiments,
  interference sweeps.
- :mod:`netfx.cli`: command line front end (``netfx generate|train|...``).
"""

from netfx.netgraph import Network, load_edge_list, save_edge_list
from netfx.seeding import derive_seed
from netfx.synthgen import (
    Bundle,
    Dataset,
    GenerationConfig,
    Oracle,
    generate_benchmark,
    generate_dataset,
    read_bundle,
    write_bundle,
)
from netfx.dwr_model import DWRModel, GraphIndex, ModelArch
from netfx.reweighter import PiNet, decorrelation_report, sample_weights
from netfx.trainer import FitResult, TrainConfig, fit, make_split, restore
from netfx.evalkit import (
    EffectReport,
    evaluate_model,
    interference_sweep,
    run_experiment,
)
from netfx.config import RunConfig, load_config, parse_config

__all__ = [
    "Bundle",
    "DWRModel",
    "Dataset",
    "EffectReport",
    "FitResult",
    "GenerationConfig",
    "GraphIndex",
    "ModelArch",
    "Network",
    "Oracle",
    "PiNet",
    "RunConfig",
    "TrainConfig",
    "decorrelation_report",
    "derive_seed",
    "evaluate_model",
    "fit",
    "generate_benchmark",
    "generate_dataset",
    "interference_sweep",
    "load_edge_list",
    "load_config",
    "make_split",
    "parse_config",
    "read_bundle",
    "restore",
    "run_experiment",
    "sample_weights",
    "save_edge_list",
    "write_bundle",
]

__version__ = "0.1.0"
