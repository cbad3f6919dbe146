"""Run configuration files and built-in presets.

A run configuration is a YAML mapping with up to five sections::

    gen:    array and scene for dataset generation
    net:    network widths and Mamba settings
    train:  optimizer and step budget
    sweep:  SNR points, methods and noise seed for evaluation
    data:   train/val/test fractions and shuffle seed

Every key is optional; missing keys take their defaults and the loader
reports which ones it filled in. Unknown sections or keys are errors.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import yaml

from .channel import CarrierConfig, SceneConfig
from .dataset import GenConfig
from .geometry import ArrayKind
from .net import NetConfig
from .pipeline import TrainConfig


class ConfigFileError(ValueError):
    pass


GEN_DEFAULTS = {
    "kind": "NA",
    "params": [4, 124],
    "eta": 1.0,
    "f_c": 28e9,
    "bandwidth": 500e6,
    "subcarriers": 64,
    "Q": -0.00045,
    "clusters_min": 1,
    "clusters_max": 3,
    "paths_per_cluster": 4,
    "scatter_r_min": 0.1,
    "scatter_r_max": 10.0,
    "nlos_scale": 1.0,
    "P": 16,
    "N_RF": 4,
    "r_min": 0.1,
    "r_max": 10.0,
    "theta_min_deg": -90.0,
    "theta_max_deg": 0.0,
    "snr_min": 0.0,
    "snr_max": 20.0,
    "n_samples": 20000,
    "seed": 0,
}
# shape fields of the network are fixed by the data and the stage
NET_KEYS = ("stages", "c0", "d_state", "d_tr", "k_conv", "raster", "seed")
TRAIN_KEYS = tuple(f.name for f in dataclasses.fields(TrainConfig))
SWEEP_DEFAULTS = {"snr": [-10.0, 0.0, 10.0, 20.0], "methods": ["ls", "grid", "cpmamba"], "seed": 0}
# train/val/test partition of a dataset file, shared by training and evaluation
DATA_DEFAULTS = {"split": [0.8, 0.1, 0.1], "split_seed": 0}
SECTIONS = ("gen", "net", "train", "sweep", "data")


@dataclass
class RunConfig:
    gen: GenConfig
    net: NetConfig
    train: TrainConfig
    sweep: dict
    data: dict
    notices: list = field(default_factory=list)


def gen_config(values: dict) -> GenConfig:
    v = {**GEN_DEFAULTS, **values}
    theta_min, theta_max = math.radians(v["theta_min_deg"]), math.radians(v["theta_max_deg"])
    return GenConfig(
        kind=ArrayKind(str(v["kind"]).upper(), tuple(int(p) for p in v["params"]), float(v["eta"])),
        carrier=CarrierConfig(float(v["f_c"]), float(v["bandwidth"]), int(v["subcarriers"]), float(v["Q"])),
        scene=SceneConfig(
            L_min=int(v["clusters_min"]),
            L_max=int(v["clusters_max"]),
            G=int(v["paths_per_cluster"]),
            R_min=float(v["scatter_r_min"]),
            R_max=float(v["scatter_r_max"]),
            phi_min=theta_min,
            phi_max=theta_max,
            nlos_scale=float(v["nlos_scale"]),
        ),
        P=int(v["P"]),
        N_RF=int(v["N_RF"]),
        r_min=float(v["r_min"]),
        r_max=float(v["r_max"]),
        theta_min=theta_min,
        theta_max=theta_max,
        snr_min=float(v["snr_min"]),
        snr_max=float(v["snr_max"]),
        n_samples=int(v["n_samples"]),
        seed=int(v["seed"]),
    )


_DESK = {"n_samples": 1024, "nlos_scale": 0.01}



def _trend(kind: str, params: list) -> dict:
    return {
        "gen": {**_DESK, "kind": kind, "params": params, "n_samples": 2560, "subcarriers": 16, "seed": 11,
                "nlos_scale": 0.001},
        "net": {"c0": 16, "stages": 3, "d_state": 8},
        "train": {"batch_size": 16, "steps": 3000, "lr": 1e-3, "lr_schedule": "cosine", "report_every": 100},
        "sweep": {"snr": [-10.0, 0.0, 10.0, 20.0, 30.0], "methods": ["ls", "grid", "cpmamba"]},
        "data": {"split": [0.8, 0.0, 0.2]},
    }


PRESETS = {
    "ca-desk": {"gen": {**_DESK, "kind": "CA", "params": [128]}},
    "usa-desk": {"gen": {**_DESK, "kind": "USA", "params": [128], "eta": 2.0}},
    "moa-desk": {"gen": {**_DESK, "kind": "MOA", "params": [16, 8, 9]}},
    "na-desk": {"gen": {**_DESK, "kind": "NA", "params": [4, 124]}},
    # eight samples on 16 subcarriers and a small network, sized so each
    # training stage finishes within ten minutes on one core
    "na-overfit": {
        "gen": {**_DESK, "n_samples": 8, "subcarriers": 16},
        "net": {"c0": 16, "stages": 3, "d_state": 8},
        "train": {
            "batch_size": 8,
            "steps": 1200,
            "lr": 3e-3,
            "lr_schedule": "cosine",
            "report_every": 50,
            "target_loss": 1e-3,
        },
        "data": {"split": [1.0, 0.0, 0.0]},
    },
    # trend runs: 2048 training and 512 test samples on 16 subcarriers
    "na-trend": _trend("NA", [4, 124]),
    "ca-trend": _trend("CA", [128]),
    "na-pure-los": {"gen": {**_DESK, "clusters_min": 0, "clusters_max": 0}},
}


def _check_keys(section: str, values, allowed) -> dict:
    if values is None:
        return {}
    if not isinstance(values, dict):
        raise ConfigFileError(f"section {section!r} must be a mapping")
    unknown = sorted(set(values) - set(allowed))
    if unknown:
        raise ConfigFileError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")
    return dict(values)


def build_run_config(doc: dict) -> RunConfig:
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigFileError("configuration must be a mapping of sections")
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigFileError(f"unknown section(s): {', '.join(unknown)}")
    gen = _check_keys("gen", doc.get("gen"), GEN_DEFAULTS)
    net = _check_keys("net", doc.get("net"), NET_KEYS)
    train = _check_keys("train", doc.get("train"), TRAIN_KEYS)
    sweep = _check_keys("sweep", doc.get("sweep"), SWEEP_DEFAULTS)
    data = _check_keys("data", doc.get("data"), DATA_DEFAULTS)
    notices = []
    for section, given, allowed in (
        ("gen", gen, GEN_DEFAULTS),
        ("net", net, NET_KEYS),
        ("train", train, TRAIN_KEYS),
        ("sweep", sweep, SWEEP_DEFAULTS),
        ("data", data, DATA_DEFAULTS),
    ):
        missing = [k for k in allowed if k not in given]
        if missing:
            notices.append(f"{section}: using defaults for {', '.join(missing)}")
    try:
        return RunConfig(
            gen=gen_config(gen),
            net=NetConfig(**net),
            train=TrainConfig(**train),
            sweep={**SWEEP_DEFAULTS, **sweep},
            data={**DATA_DEFAULTS, **data},
            notices=notices,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigFileError(str(exc)) from exc


def load_run_config(path=None, preset: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Merge a preset, a YAML file and explicit overrides (later wins)."""
    doc: dict = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigFileError(f"unknown preset {preset!r}; choose from {', '.join(sorted(PRESETS))}")
        _merge(doc, PRESETS[preset])
    if path is not None:
        with open(path) as fh:
            try:
                loaded = yaml.safe_load(fh)
            except yaml.YAMLError as exc:
                raise ConfigFileError(f"{path}: {exc}") from exc
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigFileError(f"{path}: top level must be a mapping")
        _merge(doc, loaded or {})
    _merge(doc, overrides or {})
    return build_run_config(doc)


def _merge(dst: dict, src: dict) -> None:
    for section, values in src.items():
        if isinstance(values, dict):
            dst.setdefault(section, {})
            if not isinstance(dst[section], dict):
                raise ConfigFileError(f"section {section!r} must be a mapping")
            dst[section].update(values)
        else:
            dst[section] = values
