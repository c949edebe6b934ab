"""Declarative run configuration.

One TOML file describes a full run: dataset, model family, training
budget, sampling settings, output directory. Parsing is strict — unknown
keys are rejected with their full path, types are checked, and every
field has a default documented in the README schema table.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

try:
    import tomllib
except ModuleNotFoundError:  # 3.10 fallback
    import tomli as tomllib

from .datasets import MixtureSpec, explicit_spec, grid_spec, halfmoon_spec
from .errors import ConfigError, ValidationError
from .flow import TrainConfig
from .moefm import MoeTrainConfig

FORMAT_VERSION = 1

_DATASET_KEYS = {
    "grid": {"kind", "seed", "side", "extent", "std"},
    "halfmoon": {"kind", "seed", "radius", "noise_std", "vertical_offset", "horizontal_offset"},
    "explicit": {"kind", "seed", "components", "dim"},
}
_MODEL_KEYS = {"family", "k", "sigma", "hidden_width", "hidden_layers", "activation"}
_TRAINING_KEYS = {
    "steps", "batch_size", "learning_rate", "lr_final", "weight_decay", "beta1",
    "beta2", "epsilon", "seed", "t_epsilon", "optimizer", "antithetic",
    "zero_output_init", "log_every",
}
_SAMPLING_KEYS = {"n", "t_steps", "mode", "seed"}
_OUTPUT_KEYS = {"directory"}
_TOP_KEYS = {"format_version", "dataset", "model", "training", "sampling", "output"}


@dataclass(frozen=True)
class SamplingConfig:
    n: int = 4096
    t_steps: int = 4
    mode: str = "sampled"
    seed: int = 0

    def __post_init__(self):
        if self.n < 0:
            raise ConfigError("sampling.n must be >= 0", field="sampling.n")
        if self.t_steps < 1:
            raise ConfigError("sampling.t_steps must be >= 1", field="sampling.t_steps")
        if self.mode not in ("sampled", "greedy"):
            raise ConfigError(
                f"sampling.mode must be 'sampled' or 'greedy', got {self.mode!r}",
                field="sampling.mode",
            )


@dataclass
class RunConfig:
    dataset: MixtureSpec
    family: str                        # "vfm" or "moefm"
    training: TrainConfig              # MoeTrainConfig when family == "moefm"
    sampling: SamplingConfig
    out_dir: str = "moeflow-run"


def _reject_unknown(section: dict, allowed: set, where: str) -> None:
    for key in section:
        if key not in allowed:
            raise ConfigError(
                f"unknown key {where}.{key}; allowed: {', '.join(sorted(allowed))}",
                field=f"{where}.{key}",
            )


def _typed(section: dict, key: str, kind, default, where: str):
    if key not in section:
        return default
    value = section[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise ConfigError(
            f"{where}.{key} must be {kind.__name__}, got {type(value).__name__}",
            field=f"{where}.{key}",
        )
    return value


def _dataset_spec(section: dict) -> MixtureSpec:
    kind = _typed(section, "kind", str, "grid", "dataset")
    if kind not in _DATASET_KEYS:
        raise ConfigError(
            f"dataset.kind must be one of {sorted(_DATASET_KEYS)}, got {kind!r}",
            field="dataset.kind",
        )
    _reject_unknown(section, _DATASET_KEYS[kind], "dataset")
    seed = _typed(section, "seed", int, 0, "dataset")
    if kind == "grid":
        return grid_spec(
            side=_typed(section, "side", int, 5, "dataset"),
            extent=_typed(section, "extent", float, 2.0, "dataset"),
            std=_typed(section, "std", float, 0.05, "dataset"),
            seed=seed,
        )
    if kind == "halfmoon":
        return halfmoon_spec(
            radius=_typed(section, "radius", float, 1.0, "dataset"),
            noise_std=_typed(section, "noise_std", float, 0.08, "dataset"),
            vertical_offset=_typed(section, "vertical_offset", float, 0.5, "dataset"),
            horizontal_offset=_typed(section, "horizontal_offset", float, 1.0, "dataset"),
            seed=seed,
        )
    raw = section.get("components")
    if not isinstance(raw, list) or not raw:
        raise ConfigError(
            "dataset.components must be a nonempty list of [weight, mean, std]",
            field="dataset.components",
        )
    triples = []
    for i, item in enumerate(raw):
        if not isinstance(item, list) or len(item) != 3:
            raise ConfigError(
                f"dataset.components[{i}] must be [weight, mean, std]",
                field="dataset.components",
            )
        triples.append(tuple(item))
    dim = section.get("dim")
    return explicit_spec(triples, dim=dim, seed=seed)


def _train_config(model: dict, training: dict) -> tuple:
    _reject_unknown(model, _MODEL_KEYS, "model")
    _reject_unknown(training, _TRAINING_KEYS, "training")
    family = _typed(model, "family", str, "moefm", "model")
    if family not in ("vfm", "moefm"):
        raise ConfigError(
            f"model.family must be 'vfm' or 'moefm', got {family!r}", field="model.family"
        )
    if family == "vfm":
        for key in ("k", "sigma"):
            if key in model:
                raise ConfigError(
                    f"model.{key} only applies to family 'moefm'", field=f"model.{key}"
                )
    shared = dict(
        steps=_typed(training, "steps", int, 4000, "training"),
        batch_size=_typed(training, "batch_size", int, 256, "training"),
        learning_rate=_typed(training, "learning_rate", float, 1e-3, "training"),
        lr_final=_typed(training, "lr_final", float, None, "training"),
        weight_decay=_typed(training, "weight_decay", float, 0.01, "training"),
        beta1=_typed(training, "beta1", float, 0.9, "training"),
        beta2=_typed(training, "beta2", float, 0.999, "training"),
        epsilon=_typed(training, "epsilon", float, 1e-8, "training"),
        seed=_typed(training, "seed", int, 0, "training"),
        t_epsilon=_typed(training, "t_epsilon", float, 1e-3, "training"),
        optimizer=_typed(training, "optimizer", str, "adamw", "training"),
        antithetic=_typed(training, "antithetic", bool, False, "training"),
        zero_output_init=_typed(training, "zero_output_init", bool, False, "training"),
        log_every=_typed(training, "log_every", int, 500, "training"),
        hidden_width=_typed(model, "hidden_width", int, 128, "model"),
        hidden_layers=_typed(model, "hidden_layers", int, 3, "model"),
        activation=_typed(model, "activation", str, "tanh", "model"),
    )
    if family == "vfm":
        return family, TrainConfig(**shared)
    return family, MoeTrainConfig(
        k=_typed(model, "k", int, 8, "model"),
        sigma=_typed(model, "sigma", float, 0.1, "model"),
        **shared,
    )


def config_from_dict(data: dict) -> RunConfig:
    _reject_unknown(data, _TOP_KEYS, "config")
    version = _typed(data, "format_version", int, FORMAT_VERSION, "config")
    if version != FORMAT_VERSION:
        raise ConfigError(
            f"config format_version {version} unsupported (expected {FORMAT_VERSION})",
            field="format_version",
        )
    for name in ("dataset", "model", "training", "sampling", "output"):
        section = data.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"{name} must be a table", field=name)
    spec = _dataset_spec(data.get("dataset", {}))
    family, training = _train_config(data.get("model", {}), data.get("training", {}))
    sampling_raw = data.get("sampling", {})
    _reject_unknown(sampling_raw, _SAMPLING_KEYS, "sampling")
    sampling = SamplingConfig(
        n=_typed(sampling_raw, "n", int, 4096, "sampling"),
        t_steps=_typed(sampling_raw, "t_steps", int, 4, "sampling"),
        mode=_typed(sampling_raw, "mode", str, "sampled", "sampling"),
        seed=_typed(sampling_raw, "seed", int, 0, "sampling"),
    )
    output_raw = data.get("output", {})
    _reject_unknown(output_raw, _OUTPUT_KEYS, "output")
    out_dir = _typed(output_raw, "directory", str, "moeflow-run", "output")
    return RunConfig(spec, family, training, sampling, out_dir)


def load_config(path) -> RunConfig:
    """Parse a TOML run configuration; all errors carry the offending key."""
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: TOML parse error: {exc}") from exc
    try:
        return config_from_dict(data)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}", field=exc.field) from exc
    except ValidationError as exc:
        # dataclass invariants (steps >= 1, k >= 1, ...) surface here
        raise ConfigError(f"{path}: {exc}") from exc


def apply_overrides(cfg: RunConfig, *, out_dir=None, seed=None, steps=None,
                    k=None, sigma=None, t_steps=None, mode=None, n=None) -> RunConfig:
    """Fold CLI flags into a parsed config; validation re-runs on the result."""
    training = cfg.training
    updates = {}
    if seed is not None:
        updates["seed"] = seed
    if steps is not None:
        updates["steps"] = steps
    if k is not None or sigma is not None:
        if cfg.family != "moefm":
            raise ConfigError("--k/--sigma only apply to family 'moefm'")
        if k is not None:
            updates["k"] = k
        if sigma is not None:
            updates["sigma"] = sigma
    if updates:
        training = replace(training, **updates)
    s_updates = {}
    if t_steps is not None:
        s_updates["t_steps"] = t_steps
    if mode is not None:
        s_updates["mode"] = mode
    if seed is not None:
        s_updates["seed"] = seed
    if n is not None:
        s_updates["n"] = n
    sampling = replace(cfg.sampling, **s_updates) if s_updates else cfg.sampling
    return RunConfig(
        cfg.dataset, cfg.family, training, sampling,
        out_dir if out_dir is not None else cfg.out_dir,
    )
