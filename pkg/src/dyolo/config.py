"""Plain-text (YAML) configuration tree with a fixed schema.

Every key below can be set in a config file or overridden on the command
line with ``--override section.key=value``.
"""
from __future__ import annotations

import copy
from pathlib import Path

import yaml

from .detector import ABLATIONS, DetectorConfig


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "data": {
        "root": None,  # dataset directory holding manifest.tsv
        "train": 200,
        "test": 50,
        "seed": 0,
        "canvas": 64,
        "A": 0.5,
        "beta_min": 0.07,
        "beta_max": 0.12,
        "rain": False,
    },
    "model": {
        "ablation": None,  # V0..V6 presets the five toggles below
        "dual_branch": True,
        "use_cfe": True,
        "use_fa": True,
        "use_af": True,
        "conv_kind": "od",
        "channels": [32, 64, 128],
        "stem_channels": 16,
        "n_kernels": 4,
    },
    "adaption": {
        "kind": "cwd",
        "tau": 1.0,
        "scale_weights": [0.7, 0.2, 0.1],
    },
    "fusion": {
        "r": 4,
    },
    "train": {
        "epochs": 40,
        "batch": 8,
        "lr0": 0.01,
        "lrf": 0.01,  # final LR as a fraction of lr0
        "momentum": 0.9,
        "weight_decay": 5e-4,
        "joint_phase_epochs": None,  # default: 30% of epochs
        "lambda_det": 1.0,
        "lambda_adapt": "dynamic",  # a number, or "dynamic"
        "lambda2_init": 2.0,
        "mosaic": False,
        "seed": 0,
        "cfe_epochs": 40,
        "eval_every": 1,
        "conf_thr": 0.001,
        "nms_iou": 0.5,
        "eval_iou": 0.5,
        "threads": 1,
    },
}

HELP = {
    "data.root": "dataset directory containing manifest.tsv",
    "data.train": "number of training scenes to synthesize",
    "data.test": "number of test scenes to synthesize",
    "data.seed": "dataset RNG seed",
    "data.canvas": "toy image side length in pixels (multiple of 32)",
    "data.A": "atmospheric light",
    "data.beta_min": "lower end of the per-image scattering coefficient range",
    "data.beta_max": "upper end of the per-image scattering coefficient range",
    "data.rain": "add additive rain streaks to hazy images",
    "model.ablation": f"preset toggles: one of {', '.join(ABLATIONS)}",
    "model.dual_branch": "keep both hazy and adapted branches",
    "model.use_cfe": "train with the clear feature extraction branch",
    "model.use_fa": "use the feature adaption stack",
    "model.use_af": "fuse the branches with attention fusion",
    "model.conv_kind": "convolution inside the adaption stack: od | plain | se",
    "model.channels": "channels at strides 8/16/32",
    "model.stem_channels": "channels of the stride-2 stem",
    "model.n_kernels": "candidate kernels per dynamic convolution",
    "adaption.kind": "distillation loss: cwd | mimic_l1 | mimic_l2",
    "adaption.tau": "distillation temperature",
    "adaption.scale_weights": "per-level weights, highest resolution first",
    "fusion.r": "average pooling window of the fusion attention",
    "train.epochs": "total epochs",
    "train.batch": "batch size",
    "train.lr0": "initial SGD learning rate",
    "train.lrf": "cosine floor as a fraction of lr0",
    "train.momentum": "SGD momentum",
    "train.weight_decay": "SGD weight decay",
    "train.joint_phase_epochs": "epochs of joint detection+adaption training before the adapter freezes",
    "train.lambda_det": "detection loss weight",
    "train.lambda_adapt": "adaption loss weight, or 'dynamic'",
    "train.lambda2_init": "start value of the dynamic adaption weight",
    "train.mosaic": "mosaic augmentation (must stay off)",
    "train.seed": "training RNG seed",
    "train.cfe_epochs": "epochs of clean-image pretraining for the clear branch",
    "train.eval_every": "validate every N epochs (the last epoch is always validated)",
    "train.conf_thr": "score threshold used for mAP evaluation",
    "train.nms_iou": "NMS IoU threshold",
    "train.eval_iou": "IoU threshold for a true positive",
    "train.threads": "torch intra-op threads",
}


def flat_keys(tree=DEFAULTS):
    return [f"{s}.{k}" for s, sec in tree.items() for k in sec]


def _check_value(key, default, value):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, (int, float)):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        if isinstance(default, float):
            return float(value)
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, list):
        if not isinstance(value, (list, tuple)) or len(value) != len(default):
            raise ConfigError(f"{key}: expected a list of {len(default)} values, got {value!r}")
        return [_check_value(key, d, v) for d, v in zip(default, value)]
    if isinstance(default, str) and not isinstance(value, str) and key != "train.lambda_adapt":
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


def merge(tree, updates, where="config"):
    out = copy.deepcopy(tree)
    for section, values in (updates or {}).items():
        if section not in DEFAULTS:
            raise ConfigError(f"{where}: unknown section {section!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"{where}: section {section!r} must be a mapping")
        for key, value in values.items():
            if key not in DEFAULTS[section]:
                raise ConfigError(f"{where}: unknown key {section}.{key}")
            out[section][key] = _check_value(f"{section}.{key}", DEFAULTS[section][key], value)
    return out


def parse_override(text):
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    key, raw = text.split("=", 1)
    if "." not in key:
        raise ConfigError(f"override key {key!r} must look like section.key")
    section, name = key.split(".", 1)
    return {section: {name: yaml.safe_load(raw)}}


def load_config(path=None, overrides=()):
    tree = copy.deepcopy(DEFAULTS)
    if path:
        data = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        tree = merge(tree, data, str(path))
    for text in overrides:
        tree = merge(tree, parse_override(text), "--override")
    validate(tree)
    return tree


def validate(tree):
    t = tree["train"]
    if t["mosaic"]:
        raise ConfigError("train.mosaic is not supported; mosaic augmentation stays disabled")
    if not t["lr0"] > 0:
        raise ConfigError("train.lr0 must be > 0")
    if t["batch"] < 1 or t["epochs"] < 1:
        raise ConfigError("train.batch and train.epochs must be >= 1")
    la = t["lambda_adapt"]
    if not (la == "dynamic" or (isinstance(la, (int, float)) and not isinstance(la, bool) and la >= 0)):
        raise ConfigError("train.lambda_adapt must be a non-negative number or 'dynamic'")
    if t["lambda_det"] < 0:
        raise ConfigError("train.lambda_det must be >= 0")
    if la == "dynamic" and t["lambda2_init"] < 1:
        raise ConfigError("train.lambda2_init must be >= 1")
    jp = t["joint_phase_epochs"]
    if jp is not None and not 0 <= jp <= t["epochs"]:
        raise ConfigError("train.joint_phase_epochs must lie in [0, epochs]")
    if tree["data"]["canvas"] % 32:
        raise ConfigError("data.canvas must be a multiple of 32")
    try:
        detector_config(tree)
        from .adaption import AdaptionLossConfig

        AdaptionLossConfig(**adaption_kwargs(tree))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def detector_config(tree) -> DetectorConfig:
    m = tree["model"]
    kw = dict(channels=tuple(m["channels"]), stem_channels=m["stem_channels"], n_kernels=m["n_kernels"],
              fusion_r=tree["fusion"]["r"])
    if m["ablation"]:
        return DetectorConfig.ablation(m["ablation"], **kw)
    return DetectorConfig(dual_branch=m["dual_branch"], use_cfe=m["use_cfe"], use_fa=m["use_fa"],
                          use_af=m["use_af"], conv_kind=m["conv_kind"], **kw)


def adaption_kwargs(tree):
    a = tree["adaption"]
    return {"kind": a["kind"], "tau": a["tau"], "scale_weights": tuple(a["scale_weights"])}


def dump_config(tree) -> str:
    return yaml.safe_dump(tree, sort_keys=True)
