"""Sectioned key-value run configuration with strict validation.

Config files are INI-style.  Every key has a default, so the empty file is
a valid config; unknown sections or keys are rejected rather than ignored
so typos cannot silently fall back to defaults.  The environment variable
``NETFX_SEED`` overrides the master seed without editing the file.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass

from netfx.synthgen import GenerationConfig
from netfx.trainer import TrainConfig

SEED_ENV_VAR = "NETFX_SEED"


class ConfigError(ValueError):
    """Malformed, unknown, or out-of-range configuration input."""


_BOOL_WORDS = {"true": True, "yes": True, "on": True, "1": True,
               "false": False, "no": False, "off": False, "0": False}

# section -> key -> (parser, default); None parsers mark string passthrough
_SCHEMA: dict[str, dict[str, tuple[str, object]]] = {
    "run": {
        "seed": ("int", 0),
        "output_dir": ("str", ""),
    },
    "graph": {
        "source": ("choice:sbm,ring,file", "sbm"),
        "path": ("str", ""),
        "n": ("int", 1000),
        "ring_k": ("int", 4),
        "sbm_blocks": ("int", 10),
        "sbm_p_in": ("float", 0.05),
        "sbm_p_out": ("float", 0.002),
    },
    "features": {
        "source": ("choice:spectral,file", "spectral"),
        "path": ("str", ""),
        "d": ("int", 10),
    },
    "generate": {
        "sweeps": ("int", 20),
        "burn_in": ("int", 10),
        "interference_scale": ("float", 1.0),
        "noise_sd": ("float", 0.0),
        "alpha_scale": ("float", 1.0),
        "alpha2": ("optfloat", None),
    },
    "train": {
        "outer_epochs": ("int", 300),
        "pi_epochs_per_outer": ("int", 5),
        "lr_outcome": ("float", 1e-3),
        "lr_pi": ("float", 1e-3),
        "clip_eps": ("float", 0.01),
        "normalize_weights": ("bool", True),
        "split_fraction": ("float", 0.8),
        "use_attention": ("bool", True),
        "use_weights": ("bool", True),
        "encoder_widths": ("ints", (32, 64)),
        "head_widths": ("ints", (128, 128, 128)),
        "pi_widths": ("ints", (64, 64, 64)),
        "dropout": ("bool", False),
        "dropout_rate": ("float", 0.5),
    },
    "evaluate": {
        "repetitions": ("int", 10),
        "z_eval": ("zeval", None),
    },
    "sweep": {
        "scales": ("floats", (0.0, 0.5, 1.0, 2.0)),
        "repetitions": ("optint", None),
    },
    "gradcheck": {
        "n": ("int", 200),
        "d": ("int", 10),
        "ring_k": ("int", 4),
        "h": ("float", 1e-5),
        "tolerance": ("float", 1e-4),
        "sample": ("int", 0),
    },
}


def _parse_value(kind: str, raw: str, where: str):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "str":
            return raw
        if kind == "bool":
            if raw.lower() not in _BOOL_WORDS:
                raise ValueError(f"not a boolean: {raw!r}")
            return _BOOL_WORDS[raw.lower()]
        if kind == "ints":
            return tuple(int(p) for p in raw.split(",") if p.strip())
        if kind == "floats":
            return tuple(float(p) for p in raw.split(",") if p.strip())
        if kind == "optfloat":
            return None if raw == "" else float(raw)
        if kind == "optint":
            return None if raw == "" else int(raw)
        if kind == "zeval":
            if raw in ("", "realized"):
                return None
            return float(raw)
        if kind.startswith("choice:"):
            allowed = kind.split(":", 1)[1].split(",")
            if raw not in allowed:
                raise ValueError(f"must be one of {allowed}, got {raw!r}")
            return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    raise AssertionError(f"unhandled kind {kind}")


@dataclass(frozen=True)
class GradCheckConfig:
    n: int = 200
    d: int = 10
    ring_k: int = 4
    h: float = 1e-5
    tolerance: float = 1e-4
    sample: int = 0


@dataclass(frozen=True)
class RunConfig:
    """Everything a CLI invocation needs, plus the raw file for echoing."""

    master_seed: int
    output_dir: str
    generation: GenerationConfig
    train: TrainConfig
    repetitions: int
    z_eval: float | None
    scales: tuple[float, ...]
    sweep_repetitions: int
    gradcheck: GradCheckConfig
    raw_text: str


def parse_config(text: str, env=None) -> RunConfig:
    """Parse and validate config text; see :data:`_SCHEMA` for the keys."""
    env = os.environ if env is None else env
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax: {exc}") from None

    values: dict[str, dict[str, object]] = {
        s: {k: default for k, (_, default) in keys.items()}
        for s, keys in _SCHEMA.items()
    }
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            kind = _SCHEMA[section][key][0]
            values[section][key] = _parse_value(kind, raw, f"[{section}] {key}")

    master_seed = values["run"]["seed"]
    if SEED_ENV_VAR in env:
        try:
            master_seed = int(env[SEED_ENV_VAR])
        except ValueError:
            raise ConfigError(
                f"{SEED_ENV_VAR} must be an integer, got {env[SEED_ENV_VAR]!r}"
            ) from None

    g, f, gen = values["graph"], values["features"], values["generate"]
    generation = GenerationConfig(
        seed=master_seed,
        graph_source=g["source"],
        graph_path=g["path"] or None,
        n=g["n"],
        ring_k=g["ring_k"],
        sbm_blocks=g["sbm_blocks"],
        sbm_p_in=g["sbm_p_in"],
        sbm_p_out=g["sbm_p_out"],
        features_source=f["source"],
        features_path=f["path"] or None,
        d=f["d"],
        sweeps=gen["sweeps"],
        burn_in=gen["burn_in"],
        interference_scale=gen["interference_scale"],
        noise_sd=gen["noise_sd"],
        alpha_scale=gen["alpha_scale"],
        alpha2=gen["alpha2"],
    )
    try:
        train = TrainConfig(seed=master_seed, **values["train"])
    except ValueError as exc:
        raise ConfigError(f"[train]: {exc}") from None
    repetitions = values["evaluate"]["repetitions"]
    if repetitions < 1:
        raise ConfigError("[evaluate] repetitions must be positive")
    z_eval = values["evaluate"]["z_eval"]
    if z_eval is not None and not 0.0 <= z_eval <= 1.0:
        raise ConfigError(f"[evaluate] z_eval must lie in [0, 1], got {z_eval}")
    scales = values["sweep"]["scales"]
    if not scales:
        raise ConfigError("[sweep] scales must be non-empty")
    if any(s < 0 for s in scales):
        raise ConfigError("[sweep] scales must be non-negative")
    sweep_reps = values["sweep"]["repetitions"]
    return RunConfig(
        master_seed=master_seed,
        output_dir=values["run"]["output_dir"],
        generation=generation,
        train=train,
        repetitions=repetitions,
        z_eval=z_eval,
        scales=scales,
        sweep_repetitions=repetitions if sweep_reps is None else sweep_reps,
        gradcheck=GradCheckConfig(**values["gradcheck"]),
        raw_text=text,
    )


def load_config(path, env=None) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, env=env)
