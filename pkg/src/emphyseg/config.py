"""Plain-text key=value configuration files.

Format: optional top-level keys, then bracketed blocks. Repeated block
names are allowed (one [scanner] block per profile). '#' starts a
comment; blank lines separate nothing in particular.

    [dataset]
    scans_per_scanner = 30
    ood = SYN-D

    [scanner]
    tag = SYN-A
    noise_sigma = 15

Unknown keys are rejected so typos fail loudly instead of silently
falling back to defaults.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .errors import ConfigError
from .network import NetworkConfig
from .phantom import (
    DEFAULT_OOD_TAG,
    DEFAULT_PROFILES,
    DatasetSpec,
    PhantomConfig,
    ScannerProfile,
    SplitPlan,
)
from .trainer import TrainConfig


def parse_config(text: str) -> list[tuple[str, dict[str, str]]]:
    """Split config text into (block_name, mapping) pairs in file order.

    Keys before any block header land in a block named "".
    """
    blocks: list[tuple[str, dict[str, str]]] = [("", {})]
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            blocks.append((line[1:-1].strip(), {}))
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        block = blocks[-1][1]
        if key in block:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        block[key] = value.strip()
    return [(name, mapping) for name, mapping in blocks if mapping or name]


def load_config(path: str | Path) -> list[tuple[str, dict[str, str]]]:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def _pick(blocks, name: str) -> dict[str, str]:
    found = [mapping for block, mapping in blocks if block == name]
    if len(found) > 1:
        raise ConfigError(f"multiple [{name}] blocks")
    return dict(found[0]) if found else {}


def _build(cls, raw: dict[str, str], converters: dict, label: str, **overrides):
    """Instantiate a config dataclass from string values plus overrides."""
    unknown = set(raw) - set(converters)
    if unknown:
        raise ConfigError(f"unknown [{label}] keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        try:
            kwargs[key] = converters[key](value)
        except ValueError as exc:
            raise ConfigError(f"[{label}] {key} = {value!r}: {exc}") from exc
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**kwargs)


def _int_tuple(value: str) -> tuple[int, ...]:
    return tuple(int(part.strip()) for part in value.split(","))


_PHANTOM_KEYS = {
    "slices": int, "height": int, "width": int,
    "emph_target_fraction": float,
    "parenchyma_mean_hu": float, "parenchyma_sigma": float,
    "emph_mean_hu": float, "emph_sigma": float,
    "body_hu": float, "blob_scale": float, "seed": int,
}

_DATASET_KEYS = {
    "scans_per_scanner": int, "ood": str, "never_smoker_fraction": float,
    "max_target_fraction": float, "target_exponent": float,
    "min_target_fraction": float, "seed": int, "split": _int_tuple,
}

_SCANNER_KEYS = {"tag": str, "hu_bias": float, "smoothing_sigma": float,
                 "noise_sigma": float}

_NETWORK_KEYS = {
    "input_size": int, "base_channels": int, "n_down_stages": int,
    "dattn_hidden": int, "variant": str, "n_cdf_bins": int,
    "gn_groups": int, "seed": int,
}

_TRAIN_KEYS = {
    "lr_max": float, "lr_min": float, "constant_epochs": int,
    "restart_periods": _int_tuple, "max_epochs": int, "batch_size": int,
    "early_stop_patience": int, "weight_decay": float,
    "beta1": float, "beta2": float, "eps": float,
    "slices_per_train_scan": int, "slices_per_val_scan": int,
    "noise_amplitude": float, "seed": int,
}


def dataset_spec_from_config(blocks, seed: int | None = None) -> DatasetSpec:
    profiles = tuple(
        _build(ScannerProfile, mapping, _SCANNER_KEYS, "scanner")
        for name, mapping in blocks if name == "scanner"
    ) or DEFAULT_PROFILES
    phantom = _build(PhantomConfig, _pick(blocks, "phantom"), _PHANTOM_KEYS, "phantom")
    raw = _pick(blocks, "dataset")
    split = raw.pop("split", None)
    ood = raw.pop("ood", None)
    spec_kwargs = {}
    for key, value in raw.items():
        if key not in _DATASET_KEYS:
            raise ConfigError(f"unknown [dataset] keys: ['{key}']")
        try:
            spec_kwargs[key] = _DATASET_KEYS[key](value)
        except ValueError as exc:
            raise ConfigError(f"[dataset] {key} = {value!r}: {exc}") from exc
    if seed is not None:
        spec_kwargs["seed"] = seed
    plan_kwargs = {}
    if split is not None:
        try:
            counts = _int_tuple(split)
        except ValueError as exc:
            raise ConfigError(f"[dataset] split = {split!r}: {exc}") from exc
        if len(counts) != 3:
            raise ConfigError("[dataset] split needs three counts: train,val,test_id")
        plan_kwargs["split_plan"] = SplitPlan(*counts)
    return DatasetSpec(
        profiles=profiles,
        ood_tag=ood if ood is not None else DEFAULT_OOD_TAG,
        phantom=phantom,
        **plan_kwargs,
        **spec_kwargs,
    )


def net_config_from_config(blocks, variant: str | None = None,
                           seed: int | None = None) -> NetworkConfig:
    return _build(NetworkConfig, _pick(blocks, "network"), _NETWORK_KEYS,
                  "network", variant=variant, seed=seed)


def train_config_from_config(blocks, seed: int | None = None) -> TrainConfig:
    return _build(TrainConfig, _pick(blocks, "train"), _TRAIN_KEYS,
                  "train", seed=seed)


def describe(cfg) -> str:
    """One-per-line key = value rendering of a config dataclass."""
    pairs = dataclasses.asdict(cfg)
    return "\n".join(f"{k} = {v}" for k, v in pairs.items())
