"""Two-phase training: joint detection + feature adaption, then adapter frozen."""
from __future__ import annotations

import copy
import csv
import hashlib
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .adaption import AdaptionLossConfig, multiscale_adaption_loss
from .config import adaption_kwargs, detector_config
from .detector import DYOLO, DetectorConfig, decode_and_nms, detection_loss
from .evaluation import mean_ap
from .hazegen import load_split, read_manifest

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "dyolo-checkpoint/1"
METRIC_FIELDS = ("kind", "epoch", "step", "lr", "L_d", "L_r", "lambda1", "lambda2", "total", "val_mAP")
# keys that may differ between a checkpoint and the config used to resume it
RESUME_FREE_KEYS = {("train", "eval_every"), ("train", "threads"), ("data", "root")}


class StateError(RuntimeError):
    pass


def total_loss(l_det, l_adapt, lambda_det=1.0, lambda_adapt=1.0):
    if lambda_det < 0 or lambda_adapt < 0:
        raise ValueError("loss weights must be non-negative")
    return lambda_det * l_det + lambda_adapt * l_adapt


def dynamic_weight(step, steps_per_epoch, lambda2_init=2.0):
    """Adaption weight decaying linearly from ``lambda2_init`` toward 1 within each epoch."""
    if steps_per_epoch < 1:
        raise ValueError("steps_per_epoch must be >= 1")
    if lambda2_init < 1:
        raise ValueError("lambda2_init must be >= 1")
    frac = (step % steps_per_epoch) / steps_per_epoch
    return 1.0 + (lambda2_init - 1.0) * (1.0 - frac)


def cosine_lr(epoch, epochs, lr0=0.01, lrf=0.01):
    """lr0 at epoch 0, lr0 * lrf at the last epoch."""
    if epochs <= 1:
        return lr0
    floor = lr0 * lrf
    return floor + (lr0 - floor) * 0.5 * (1 + math.cos(math.pi * epoch / (epochs - 1)))


def joint_phase_epochs(train_cfg):
    jp = train_cfg["joint_phase_epochs"]
    return int(round(0.3 * train_cfg["epochs"])) if jp is None else int(jp)


# ---------------------------------------------------------------------------
# data


@dataclass
class PairedData:
    hazy: torch.Tensor  # N×3×H×W float32
    clean: torch.Tensor
    boxes: list  # per image: list of (x0, y0, x1, y1)
    classes: list  # per image: list of class ids
    names: list = field(default_factory=list)
    gts: list = field(default_factory=list)  # per image: list of GroundTruthBox

    def __len__(self):
        return self.hazy.shape[0]

    def subset(self, idx):
        idx = list(idx)
        return PairedData(self.hazy[idx], self.clean[idx], [self.boxes[i] for i in idx],
                          [self.classes[i] for i in idx], [self.names[i] for i in idx],
                          [self.gts[i] for i in idx])


def _to_tensor(images):
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2))).float()


def load_data(root, split) -> PairedData:
    manifest = read_manifest(root)
    hazy, gts, rows = load_split(manifest, split, "hazy")
    if not rows:
        raise ValueError(f"{root}: split {split!r} is empty")
    clean, _, _ = load_split(manifest, split, "clean")
    if clean.shape != hazy.shape:
        raise ValueError(f"{root}: clean and hazy images of split {split!r} differ in shape")
    return PairedData(_to_tensor(hazy), _to_tensor(clean), [[g.box for g in b] for b in gts],
                      [[g.class_id for g in b] for b in gts], [r.hazy_path for r in rows], gts)


def batches(n, batch, seed, epoch):
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i:i + batch] for i in range(0, n, batch)]


# ---------------------------------------------------------------------------
# evaluation helpers


def predict(model, images, conf_thr=0.001, nms_iou=0.5, batch=32):
    was_training = model.training
    model.eval()
    dets = []
    try:
        with torch.no_grad():
            for i in range(0, images.shape[0], batch):
                x = images[i:i + batch]
                out = model(x)
                dets += decode_and_nms(out.head, conf_thr, nms_iou, model.cfg.num_classes,
                                       image_size=tuple(x.shape[-2:]))
    finally:
        model.train(was_training)
    return dets


def evaluate_model(model, data: PairedData, images=None, conf_thr=0.001, nms_iou=0.5, iou_thr=0.5):
    images = data.hazy if images is None else images
    dets = predict(model, images, conf_thr, nms_iou)
    per_dets = {i: d for i, d in enumerate(dets)}
    per_gts = {i: g for i, g in enumerate(data.gts)}
    return mean_ap(per_dets, per_gts, iou_thr=iou_thr)


# ---------------------------------------------------------------------------
# checkpoints


def state_digest(state_dict) -> str:
    h = hashlib.sha256()
    for k in sorted(state_dict):
        v = state_dict[k]
        h.update(k.encode())
        if torch.is_tensor(v):
            h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path, model, config_tree, epoch, optimizer=None, phase="joint", metadata=None,
                    inference=False):
    state = model.inference_state_dict() if inference else model.state_dict()
    ckpt = {
        "format": CHECKPOINT_FORMAT,
        "config": copy.deepcopy(config_tree),
        "detector": model.cfg.to_dict(),
        "inference": inference,
        "model": state,
        "epoch": epoch,
        "phase": phase,
        "cfe_frozen": bool(model.cfe is not None and model.cfe.frozen) and not inference,
        "metadata": metadata or {},
    }
    if not inference:
        ckpt["optimizer"] = optimizer.state_dict() if optimizer is not None else None
        ckpt["rng"] = {"torch": torch.get_rng_state(), "numpy": np.random.get_state(),
                       "python": random.getstate()}
    torch.save(ckpt, path)
    return ckpt


def load_checkpoint(path):
    try:
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError):
        raise
    except Exception as exc:
        raise StateError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(ckpt, dict) or ckpt.get("format") != CHECKPOINT_FORMAT:
        raise StateError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    return ckpt


def model_from_checkpoint(ckpt) -> DYOLO:
    d = dict(ckpt["detector"])
    cfg = DetectorConfig(**d)
    if ckpt["inference"]:
        model = DYOLO(cfg, build_cfe=False)
        model.load_inference_state_dict(ckpt["model"])
    else:
        model = DYOLO(cfg)
        model.load_state_dict(ckpt["model"])
        if ckpt.get("cfe_frozen") and model.cfe is not None:
            model.cfe.freeze()
    return model


def export_inference(model, path, config_tree, epoch=-1):
    return save_checkpoint(path, model, config_tree, epoch, inference=True)


# ---------------------------------------------------------------------------
# clear branch pretraining


def _fit_detector(model, data, images, epochs, tcfg, seed, log_every=None):
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.SGD(params, lr=tcfg["lr0"], momentum=tcfg["momentum"],
                          weight_decay=tcfg["weight_decay"], nesterov=True)
    model.train()
    for epoch in range(epochs):
        for g in opt.param_groups:
            g["lr"] = cosine_lr(epoch, epochs, tcfg["lr0"], tcfg["lrf"])
        for idx in batches(len(data), tcfg["batch"], seed, epoch):
            out = model(images[idx])
            loss = detection_loss(out.head, [data.boxes[i] for i in idx], [data.classes[i] for i in idx],
                                  model.cfg.num_classes, model.cfg.size_bounds)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    return model


def pretrain_cfe(model: DYOLO, clean_data: PairedData, epochs, train_cfg, seed=0):
    """Train a plain detector on clean images and install its backbone as the frozen clear branch."""
    if len(clean_data) == 0:
        raise ValueError("clear-branch pretraining needs a non-empty clean dataset")
    if model.cfe is None:
        raise ValueError("model has no clear feature branch")
    torch.manual_seed(seed + 7919)
    cfg = model.cfg
    teacher = DYOLO(DetectorConfig(False, False, False, False, cfg.conv_kind, cfg.channels,
                                   cfg.stem_channels, cfg.num_classes, cfg.n_kernels, cfg.fusion_r,
                                   cfg.size_bounds))
    _fit_detector(teacher, clean_data, clean_data.clean, epochs, train_cfg, seed + 7919)
    model.cfe.backbone.load_state_dict(teacher.backbone.state_dict())
    model.cfe.freeze()
    return teacher


# ---------------------------------------------------------------------------
# main loop


@dataclass
class TrainResult:
    model: DYOLO
    checkpoints: list
    metrics_path: Path
    final_map: float
    history: list


def _check_resume(ckpt_cfg, cfg_tree):
    for section, values in cfg_tree.items():
        for key, value in values.items():
            if (section, key) in RESUME_FREE_KEYS:
                continue
            if ckpt_cfg.get(section, {}).get(key) != value:
                raise StateError(f"cannot resume: config key {section}.{key} differs from the checkpoint "
                                 f"({ckpt_cfg.get(section, {}).get(key)!r} vs {value!r})")


def _set_requires_grad(module, flag):
    if module is None:
        return
    for p in module.parameters():
        p.requires_grad_(flag)
        if not flag:
            p.grad = None


def train_loop(cfg_tree, train_data: PairedData, val_data: PairedData | None, out_dir, resume=None,
               cfe_state=None, stop_after=None):
    """Run (or resume) training and write per-epoch checkpoints and a metrics log.

    ``cfe_state``: state dict of a pretrained clear backbone; when the model
    uses the clear branch and none is given, one is pretrained here.
    ``stop_after``: stop after this many epochs in this call (interruption).
    """
    tcfg = cfg_tree["train"]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(int(tcfg["threads"]))
    seed = int(tcfg["seed"])
    det_cfg = detector_config(cfg_tree)
    acfg = AdaptionLossConfig(**adaption_kwargs(cfg_tree))
    epochs = int(tcfg["epochs"])
    joint = joint_phase_epochs(tcfg)

    for imgs in (train_data.hazy, train_data.clean):
        if len(imgs) != len(train_data.boxes) or len(train_data.boxes) != len(train_data.classes):
            raise ValueError("training images and annotations differ in count")

    torch.manual_seed(seed)
    random.seed(seed)
    np.random.seed(seed)
    model = DYOLO(det_cfg)
    start_epoch = 0
    metadata = {}
    opt_state = None
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt["inference"]:
            raise StateError("cannot resume from an inference checkpoint")
        _check_resume(ckpt["config"], cfg_tree)
        model.load_state_dict(ckpt["model"])
        if ckpt["cfe_frozen"]:
            model.cfe.freeze()
        opt_state = ckpt["optimizer"]
        start_epoch = ckpt["epoch"] + 1
        metadata = ckpt["metadata"]
        torch.set_rng_state(ckpt["rng"]["torch"])
        np.random.set_state(ckpt["rng"]["numpy"])
        random.setstate(ckpt["rng"]["python"])
    elif model.cfe is not None:
        if cfe_state is None:
            log.info("pretraining clear branch for %d epochs", tcfg["cfe_epochs"])
            teacher = pretrain_cfe(model, train_data, int(tcfg["cfe_epochs"]), tcfg, seed)
            cfe_state = teacher.backbone.state_dict()
        model.cfe.backbone.load_state_dict(cfe_state)
        model.cfe.freeze()
        metadata["cfe"] = {"frozen": True, "pretrain_epochs": int(tcfg["cfe_epochs"]),
                           "digest": state_digest(model.cfe.state_dict())}

    params = [p for n, p in model.named_parameters() if not n.startswith("cfe.")]
    opt = torch.optim.SGD(params, lr=tcfg["lr0"], momentum=tcfg["momentum"],
                          weight_decay=tcfg["weight_decay"], nesterov=True)
    if opt_state is not None:
        opt.load_state_dict(opt_state)

    metrics_path = out / "metrics.tsv"
    history = _read_metrics(metrics_path, start_epoch) if resume is not None else []
    _write_metrics(metrics_path, history)

    use_adapt = det_cfg.use_cfe
    steps_per_epoch = math.ceil(len(train_data) / tcfg["batch"])
    checkpoints, final_map = [], float("nan")
    end_epoch = epochs if stop_after is None else min(epochs, start_epoch + stop_after)
    for epoch in range(start_epoch, end_epoch):
        phase = "joint" if epoch < joint else "frozen"
        if phase == "frozen":
            _set_requires_grad(model.fa, False)
        lr = cosine_lr(epoch, epochs, tcfg["lr0"], tcfg["lrf"])
        for g in opt.param_groups:
            g["lr"] = lr
        model.train()
        if phase == "frozen" and model.fa is not None:
            model.fa.eval()  # keep BN statistics fixed too
        ep_rows = []
        for k, idx in enumerate(batches(len(train_data), tcfg["batch"], seed, epoch)):
            out_ = model(train_data.hazy[idx], train_data.clean[idx] if use_adapt else None)
            l_det = detection_loss(out_.head, [train_data.boxes[i] for i in idx],
                                   [train_data.classes[i] for i in idx], det_cfg.num_classes, det_cfg.size_bounds)
            lam1 = float(tcfg["lambda_det"])
            if use_adapt:
                l_adapt = multiscale_adaption_loss(out_.f_c, out_.student, acfg)
                if phase == "joint":
                    if tcfg["lambda_adapt"] == "dynamic":
                        lam2 = dynamic_weight(k, steps_per_epoch, float(tcfg["lambda2_init"]))
                    else:
                        lam2 = float(tcfg["lambda_adapt"])
                else:
                    l_adapt, lam2 = l_adapt.detach(), 0.0
            else:
                l_adapt, lam2 = torch.zeros(()), 0.0
            # combine in float64 so the logged total is exactly the weighted sum of the logged terms
            loss = total_loss(l_det.double(), l_adapt.double(), lam1, lam2)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            row = {"kind": "step", "epoch": epoch, "step": epoch * steps_per_epoch + k, "lr": lr,
                   "L_d": l_det.item(), "L_r": l_adapt.item(), "lambda1": lam1, "lambda2": lam2,
                   "total": loss.item(), "val_mAP": ""}
            ep_rows.append(row)
        val_map = ""
        last = epoch == epochs - 1
        if val_data is not None and (last or (epoch + 1) % int(tcfg["eval_every"]) == 0):
            val_map = evaluate_model(model, val_data, conf_thr=tcfg["conf_thr"], nms_iou=tcfg["nms_iou"],
                                     iou_thr=tcfg["eval_iou"]).mAP
            final_map = val_map
        summary = {"kind": "epoch", "epoch": epoch, "step": (epoch + 1) * steps_per_epoch - 1, "lr": lr,
                   "L_d": float(np.mean([r["L_d"] for r in ep_rows])),
                   "L_r": float(np.mean([r["L_r"] for r in ep_rows])),
                   "lambda1": float(tcfg["lambda_det"]), "lambda2": "",
                   "total": float(np.mean([r["total"] for r in ep_rows])), "val_mAP": val_map}
        history += ep_rows + [summary]
        _append_metrics(metrics_path, ep_rows + [summary])
        log.info("epoch %d/%d phase=%s lr=%.5f L_d=%.4f L_r=%.4f val_mAP=%s", epoch + 1, epochs, phase, lr,
                 summary["L_d"], summary["L_r"], val_map)
        ckpt_path = out / f"epoch_{epoch:03d}.pt"
        save_checkpoint(ckpt_path, model, cfg_tree, epoch, opt, phase, metadata)
        checkpoints.append(ckpt_path)
    return TrainResult(model, checkpoints, metrics_path, final_map, history)


def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)


def _write_metrics(path, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, delimiter="\t", lineterminator="\n")
        wr.writerow(METRIC_FIELDS)
        for r in rows:
            wr.writerow([_fmt(r[k]) for k in METRIC_FIELDS])


def _append_metrics(path, rows):
    with open(path, "a", newline="") as fh:
        wr = csv.writer(fh, delimiter="\t", lineterminator="\n")
        for r in rows:
            wr.writerow([_fmt(r[k]) for k in METRIC_FIELDS])


def read_metrics(path):
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh, delimiter="\t"):
            row = dict(rec)
            for k in ("epoch", "step"):
                row[k] = int(row[k])
            for k in ("lr", "L_d", "L_r", "lambda1", "lambda2", "total", "val_mAP"):
                row[k] = float(row[k]) if row[k] != "" else ""
            rows.append(row)
    return rows


def _read_metrics(path, before_epoch):
    if not Path(path).exists():
        return []
    return [r for r in read_metrics(path) if r["epoch"] < before_epoch]


def train_from_config(cfg_tree, out_dir, resume=None, stop_after=None, cfe_state=None):
    root = cfg_tree["data"]["root"]
    if not root:
        raise ValueError("data.root must point at a dataset directory")
    train_data = load_data(root, "train")
    manifest = read_manifest(root)
    val_data = load_data(root, "test") if manifest.split("test") else None
    return train_loop(cfg_tree, train_data, val_data, out_dir, resume=resume, stop_after=stop_after,
                      cfe_state=cfe_state)
