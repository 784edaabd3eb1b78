"""Run configuration: one YAML file holding every tunable, resolved per profile.

Layout::

    profile: tiny
    seed: 0
    network: {...}        NetworkConfig fields
    train: {...}          TrainConfig fields
    augmentation: {...}   AugmentationConfig fields
    synth: {...}          SynthConfig fields
    split: {fraction: 0.85}

Missing sections fall back to the profile defaults. ``--seed`` on the command
line overrides every seed in the file.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

import yaml

from .augment import AugmentationConfig
from .network import NetworkConfig
from .synth import SynthConfig
from .trainer import TrainConfig

SNAPSHOT_FILE = "resolved_config.yaml"
SECTIONS = ("network", "train", "augmentation", "synth", "split")


class ConfigFileError(ValueError):
    pass


def default_config(profile: str = "tiny") -> dict:
    if profile == "paper":
        net, train = NetworkConfig.paper(), TrainConfig.paper()
    elif profile == "tiny":
        net, train = NetworkConfig.tiny(), TrainConfig.tiny()
    else:
        raise ConfigFileError(f"unknown profile {profile!r}")
    return {
        "profile": profile,
        "seed": 0,
        "network": net.to_dict(),
        "train": train.to_dict(),
        "augmentation": AugmentationConfig().to_dict(),
        "synth": SynthConfig().to_dict(),
        "split": {"fraction": 0.85},
    }


def load_yaml(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file {path} not found")
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigFileError(f"{path}: top level must be a mapping")
    bad = set(data) - {"profile", "seed", *SECTIONS}
    if bad:
        raise ConfigFileError(f"{path}: unknown sections {sorted(bad)}")
    return data


def resolve(config_path: str | Path | None = None, profile: str | None = None, seed: int | None = None) -> dict:
    """Profile defaults, then the file, then command-line profile/seed."""
    user = load_yaml(config_path) if config_path else {}
    prof = profile or user.get("profile") or "tiny"
    if profile and user.get("profile") and user["profile"] != profile:
        raise ConfigFileError(f"config profile {user['profile']!r} conflicts with --profile {profile!r}")
    cfg = default_config(prof)
    for section in SECTIONS:
        cfg[section].update(user.get(section) or {})
    cfg["seed"] = int(seed if seed is not None else user.get("seed", 0))
    cfg["train"]["seed"] = cfg["seed"]
    cfg["synth"]["seed"] = cfg["seed"]
    cfg["train"]["profile"] = cfg["network"]["profile"] = prof
    build(cfg)  # validates every section
    return cfg


@dataclass(frozen=True)
class Built:
    network: NetworkConfig
    train: TrainConfig
    augmentation: AugmentationConfig
    synth: SynthConfig
    split_fraction: float


def build(cfg: dict) -> Built:
    return Built(
        NetworkConfig.from_dict(copy.deepcopy(cfg["network"])),
        TrainConfig.from_dict(copy.deepcopy(cfg["train"])),
        AugmentationConfig.from_dict(copy.deepcopy(cfg["augmentation"])),
        SynthConfig.from_dict(copy.deepcopy(cfg["synth"])),
        float(cfg["split"].get("fraction", 0.85)),
    )


def write_snapshot(out_dir: str | Path, cfg: dict, extra: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = dict(cfg)
    if extra:
        payload["run"] = extra
    path = out / SNAPSHOT_FILE
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(payload, fh, sort_keys=True)
    return path


def read_snapshot(run_dir: str | Path) -> dict:
    path = Path(run_dir) / SNAPSHOT_FILE
    if not path.is_file():
        raise FileNotFoundError(f"{run_dir} has no {SNAPSHOT_FILE}")
    with open(path, encoding="utf-8") as fh:
        return yaml.safe_load(fh)
