"""Module-combination sweep over fixed seeds."""
from __future__ import annotations

import copy
import csv
import json
import logging
import time
from pathlib import Path

import numpy as np

from .detector import ABLATIONS
from .hazegen import read_manifest
from .train import load_data, pretrain_cfe, train_loop
from .config import detector_config
from .detector import DYOLO

log = logging.getLogger(__name__)


def run_ablation(cfg_tree, out_dir, variants=tuple(ABLATIONS), seeds=(0, 1, 2)):
    """Train every variant for every seed; returns {variant: {seed: mAP}}.

    Within one seed all variants share a single pretrained clear branch.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    root = cfg_tree["data"]["root"]
    train_data = load_data(root, "train")
    val_data = load_data(root, "test") if read_manifest(root).split("test") else None
    results = {v: {} for v in variants}
    for seed in seeds:
        cfe_state = None
        for v in variants:
            cfg = copy.deepcopy(cfg_tree)
            cfg["model"]["ablation"] = v
            cfg["train"]["seed"] = int(seed)
            if detector_config(cfg).use_cfe and cfe_state is None:
                holder = DYOLO(detector_config(cfg))
                teacher = pretrain_cfe(holder, train_data, int(cfg["train"]["cfe_epochs"]), cfg["train"], int(seed))
                cfe_state = teacher.backbone.state_dict()
            t0 = time.time()
            res = train_loop(cfg, train_data, val_data, out / f"{v}_seed{seed}", cfe_state=cfe_state)
            results[v][int(seed)] = float(res.final_map)
            log.info("%s seed=%d mAP=%.4f (%.0fs)", v, seed, res.final_map, time.time() - t0)
    write_table(out, results, seeds)
    return results


def medians(results):
    return {v: float(np.median(list(r.values()))) for v, r in results.items()}


def table_rows(results, seeds):
    med = medians(results)
    ranked = sorted(results, key=lambda v: (-med[v], v))
    return [[v, *(f"{results[v][int(s)]:.4f}" for s in seeds), f"{med[v]:.4f}"] for v in ranked]


def write_table(out_dir, results, seeds):
    out = Path(out_dir)
    header = ["variant", *(f"seed{s}" for s in seeds), "median"]
    with open(out / "ablation.tsv", "w", newline="") as fh:
        wr = csv.writer(fh, delimiter="\t", lineterminator="\n")
        wr.writerow(header)
        wr.writerows(table_rows(results, seeds))
    payload = {v: {str(s): results[v][int(s)] for s in seeds} for v in results}
    (out / "ablation.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
