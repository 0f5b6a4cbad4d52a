"""Dual-branch detector assembly, decoding and the detection loss."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .adaption import FeatureAdapter
from .fusion import PyramidFusion
from .voc import CLASSES

STRIDES = (8, 16, 32)
CONV_KINDS = ("od", "plain", "se")

# Ablation presets: (dual_branch, use_cfe, use_fa, use_af, conv_kind)
ABLATIONS = {
    "V0": (False, False, False, False, "od"),
    "V1": (False, True, False, False, "od"),
    "V2": (False, False, True, False, "od"),
    "V3": (False, True, True, False, "od"),
    "V4": (True, True, True, False, "od"),
    "V5": (True, True, True, True, "od"),
    "V6": (True, True, True, True, "plain"),
}


@dataclass
class DetectorConfig:
    dual_branch: bool = True
    use_cfe: bool = True
    use_fa: bool = True
    use_af: bool = True
    conv_kind: str = "od"
    channels: tuple[int, int, int] = (32, 64, 128)
    stem_channels: int = 16
    num_classes: int = len(CLASSES)
    n_kernels: int = 4
    fusion_r: int = 4
    # objects whose longer side is below size_bounds[i] go to level i (last level takes the rest)
    size_bounds: tuple[int, int] = (24, 48)

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.size_bounds = tuple(int(v) for v in self.size_bounds)
        if self.conv_kind not in CONV_KINDS:
            raise ValueError(f"model.conv_kind must be one of {CONV_KINDS}, got {self.conv_kind!r}")
        if self.use_af and not self.dual_branch:
            raise ValueError("attention fusion requires the dual-branch topology")
        if self.dual_branch and not self.use_fa:
            raise ValueError("the dual-branch topology needs the feature adaption branch")
        if len(self.channels) != 3:
            raise ValueError("channels must list three pyramid levels")

    @classmethod
    def ablation(cls, name: str, **kw) -> "DetectorConfig":
        try:
            dual, cfe, fa, af, kind = ABLATIONS[name]
        except KeyError:
            raise ValueError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}") from None
        return cls(dual_branch=dual, use_cfe=cfe, use_fa=fa, use_af=af, conv_kind=kind, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["size_bounds"] = list(self.size_bounds)
        return d


@dataclass
class Detection:
    class_id: int
    box: tuple[float, float, float, float]
    confidence: float


def conv_bn_act(c_in, c_out, k=3, s=1):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, k, s, k // 2, bias=False),
        nn.BatchNorm2d(c_out),
        nn.SiLU(),
    )


class Backbone(nn.Module):
    """Stride-2 stem then four stride-2 stages; taps at strides 8, 16, 32."""

    def __init__(self, channels=(32, 64, 128), stem_channels=16):
        super().__init__()
        c1, c2, c3 = channels
        mid = (stem_channels + c1) // 2
        self.stem = conv_bn_act(3, stem_channels, 3, 2)
        self.stage1 = nn.Sequential(conv_bn_act(stem_channels, mid, 3, 2), conv_bn_act(mid, mid))
        self.stage2 = nn.Sequential(conv_bn_act(mid, c1, 3, 2), conv_bn_act(c1, c1))
        self.stage3 = nn.Sequential(conv_bn_act(c1, c2, 3, 2), conv_bn_act(c2, c2))
        self.stage4 = nn.Sequential(conv_bn_act(c2, c3, 3, 2), conv_bn_act(c3, c3))

    def forward(self, x):
        if x.dim() != 4 or x.shape[-1] % 32 or x.shape[-2] % 32:
            raise ValueError(f"input must be N×3×H×W with H, W divisible by 32, got {tuple(x.shape)}")
        x = self.stage1(self.stem(x))
        p3 = self.stage2(x)
        p4 = self.stage3(p3)
        p5 = self.stage4(p4)
        return [p3, p4, p5]


class ClearFeatureExtractor(nn.Module):
    """Clear-image backbone plus per-level 1×1 channel matchers.

    Matchers start as identity maps. ``calls`` counts forward evaluations.
    """

    def __init__(self, channels=(32, 64, 128), stem_channels=16, out_channels=None):
        super().__init__()
        out_channels = out_channels or channels
        self.backbone = Backbone(channels, stem_channels)
        self.matchers = nn.ModuleList(nn.Conv2d(c, o, 1) for c, o in zip(channels, out_channels))
        for m, c, o in zip(self.matchers, channels, out_channels):
            if c == o:
                nn.init.dirac_(m.weight)
                nn.init.zeros_(m.bias)
        self.frozen = False
        self.calls = 0

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        self.eval()
        return self

    def forward(self, x):
        self.calls += 1
        return [m(f) for m, f in zip(self.matchers, self.backbone(x))]


class Head(nn.Module):
    """Per-level 1×1 predictors: [class logits | objectness | ltrb distances]."""

    def __init__(self, channels=(32, 64, 128), num_classes=5):
        super().__init__()
        self.num_classes = num_classes
        self.preds = nn.ModuleList(nn.Conv2d(c, num_classes + 5, 1) for c in channels)
        prior = -4.6  # sigmoid ~ 0.01
        for p in self.preds:
            nn.init.normal_(p.weight, std=0.01)
            nn.init.zeros_(p.bias)
            p.bias.data[: num_classes + 1] = prior

    def forward(self, pyramid):
        return [p(f) for p, f in zip(self.preds, pyramid)]


@dataclass
class DetectorOutput:
    head: list
    f_h: list
    f_d: list | None = None
    f_c: list | None = None
    fused: list = field(default_factory=list)

    @property
    def student(self):
        """Features the adaption loss pulls toward the clear targets."""
        return self.f_d if self.f_d is not None else self.f_h


class DYOLO(nn.Module):
    def __init__(self, cfg: DetectorConfig | None = None, build_cfe: bool | None = None):
        super().__init__()
        self.cfg = cfg = cfg or DetectorConfig()
        self.backbone = Backbone(cfg.channels, cfg.stem_channels)
        self.fa = FeatureAdapter(cfg.channels, cfg.conv_kind, cfg.n_kernels) if cfg.use_fa else None
        self.af = PyramidFusion(cfg.channels, cfg.fusion_r) if cfg.use_af else None
        self.head = Head(cfg.channels, cfg.num_classes)
        build_cfe = cfg.use_cfe if build_cfe is None else build_cfe
        self.cfe = ClearFeatureExtractor(cfg.channels, cfg.stem_channels) if build_cfe else None

    def train(self, mode: bool = True):
        super().train(mode)
        if self.cfe is not None and self.cfe.frozen:
            self.cfe.eval()
        return self

    def cfe_forward(self, clean):
        if not self.training:
            raise RuntimeError("the clear feature branch is only available in training mode")
        if self.cfe is None:
            raise RuntimeError("this model has no clear feature branch")
        if self.cfe.frozen:
            with torch.no_grad():
                return self.cfe(clean)
        return [f.detach() for f in self.cfe(clean)]

    def forward(self, hazy, clean=None) -> DetectorOutput:
        cfg = self.cfg
        f_h = self.backbone(hazy)
        f_d = self.fa(f_h) if self.fa is not None else None
        if self.af is not None:
            fused = self.af(f_d, f_h)
        elif cfg.dual_branch:
            fused = [d + h for d, h in zip(f_d, f_h)]
        elif f_d is not None:
            fused = f_d
        else:
            fused = f_h
        f_c = None
        if self.training and cfg.use_cfe and self.cfe is not None:
            if clean is None:
                raise ValueError("training with the clear feature branch needs the clean image")
            f_c = self.cfe_forward(clean)
        return DetectorOutput(self.head(fused), f_h, f_d, f_c, fused)

    def inference_state_dict(self):
        return {k: v for k, v in self.state_dict().items() if not k.startswith("cfe.")}

    def load_inference_state_dict(self, state):
        missing, unexpected = self.load_state_dict(state, strict=False)
        missing = [k for k in missing if not k.startswith("cfe.")]
        if missing or unexpected:
            raise ValueError(f"checkpoint mismatch: missing={missing} unexpected={list(unexpected)}")


def count_parameters(state_dict) -> int:
    return sum(v.numel() for k, v in state_dict.items() if torch.is_floating_point(v) and "running" not in k)


# ---------------------------------------------------------------------------
# decoding


def _grid(h, w, stride, device, dtype):
    ys, xs = torch.meshgrid(torch.arange(h, device=device, dtype=dtype),
                            torch.arange(w, device=device, dtype=dtype), indexing="ij")
    return (xs + 0.5) * stride, (ys + 0.5) * stride


def decode_level(pred, stride, num_classes):
    """Head map N×(K+5)×H×W -> (boxes N×HW×4, obj logits N×HW, cls logits N×HW×K)."""
    n, _, h, w = pred.shape
    pred = pred.permute(0, 2, 3, 1).reshape(n, h * w, -1)
    cls_logit = pred[..., :num_classes]
    obj_logit = pred[..., num_classes]
    dist = F.softplus(pred[..., num_classes + 1:]) * stride
    cx, cy = _grid(h, w, stride, pred.device, pred.dtype)
    cx, cy = cx.reshape(1, -1), cy.reshape(1, -1)
    boxes = torch.stack([cx - dist[..., 0], cy - dist[..., 1], cx + dist[..., 2], cy + dist[..., 3]], dim=-1)
    return boxes, obj_logit, cls_logit


def box_iou_np(a, b):
    """Pairwise IoU between M×4 and K×4 arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    iy = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = ix * iy
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def nms(boxes, scores, classes, iou_thr):
    """Greedy class-aware NMS. Returns kept indices, highest score first.

    Ties in score are broken by box coordinates so the result does not depend
    on input order.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    classes = np.asarray(classes)
    order = np.lexsort((boxes[:, 3], boxes[:, 2], boxes[:, 1], boxes[:, 0], -scores))
    keep = []
    suppressed = np.zeros(len(order), dtype=bool)
    ious = box_iou_np(boxes, boxes)
    for pos, i in enumerate(order):
        if suppressed[pos]:
            continue
        keep.append(int(i))
        later = order[pos + 1:]
        hit = (classes[later] == classes[i]) & (ious[i, later] > iou_thr)
        suppressed[pos + 1:] |= hit
    return keep


def decode_and_nms(head_outputs, conf_thr=0.25, iou_thr=0.5, num_classes=len(CLASSES),
                   max_det=100, pre_nms=300, image_size=None):
    """Turn raw head maps into per-image Detection lists sorted by confidence.

    A candidate survives only if its score is strictly above ``conf_thr``.
    """
    if not (0 <= conf_thr <= 1 and 0 <= iou_thr <= 1):
        raise ValueError("thresholds must lie in [0, 1]")
    all_boxes, all_scores, all_cls = [], [], []
    with torch.no_grad():
        for pred, stride in zip(head_outputs, STRIDES):
            boxes, obj, cls = decode_level(pred, stride, num_classes)
            prob = torch.sigmoid(obj)[..., None] * torch.sigmoid(cls)
            score, label = prob.max(dim=-1)
            all_boxes.append(boxes)
            all_scores.append(score)
            all_cls.append(label)
    boxes = torch.cat(all_boxes, 1).double().cpu().numpy()
    scores = torch.cat(all_scores, 1).double().cpu().numpy()
    labels = torch.cat(all_cls, 1).cpu().numpy()
    results = []
    for b, s, c in zip(boxes, scores, labels):
        if image_size is not None:
            h, w = image_size
            b = np.stack([b[:, 0].clip(0, w), b[:, 1].clip(0, h), b[:, 2].clip(0, w), b[:, 3].clip(0, h)], 1)
        ok = (s > conf_thr) & (b[:, 2] > b[:, 0]) & (b[:, 3] > b[:, 1])
        idx = np.nonzero(ok)[0]
        idx = idx[np.argsort(-s[idx], kind="stable")][:pre_nms]
        keep = nms(b[idx], s[idx], c[idx], iou_thr)[:max_det]
        results.append([Detection(int(c[idx[k]]), tuple(float(v) for v in b[idx[k]]), float(s[idx[k]]))
                        for k in keep])
    return results


# ---------------------------------------------------------------------------
# detection loss


def assign_targets(gt_boxes, gt_classes, shapes, size_bounds=(24, 48)):
    """Per-level (N×HW) positive masks, class ids and target boxes.

    Each object goes to one level by its longer side; positives are the cell
    holding the box center plus every cell whose center lies inside the box.
    Cells claimed twice keep the smaller object.
    """
    out = []
    for (h, w), stride in zip(shapes, STRIDES):
        n = len(gt_boxes)
        out.append((np.zeros((n, h * w), bool), np.zeros((n, h * w), np.int64), np.zeros((n, h * w, 4)),
                    np.full((n, h * w), np.inf)))
    for i, (boxes, classes) in enumerate(zip(gt_boxes, gt_classes)):
        for box, c in zip(boxes, classes):
            x0, y0, x1, y1 = box
            side = max(x1 - x0, y1 - y0)
            level = sum(side >= b for b in size_bounds)
            pos, cls_t, box_t, area_t = out[level]
            (h, w), stride = shapes[level], STRIDES[level]
            cx_cells = (np.arange(w) + 0.5) * stride
            cy_cells = (np.arange(h) + 0.5) * stride
            inside = (cy_cells[:, None] > y0) & (cy_cells[:, None] < y1) & (cx_cells[None] > x0) & (cx_cells[None] < x1)
            ci = min(int((x0 + x1) / 2 // stride), w - 1)
            cj = min(int((y0 + y1) / 2 // stride), h - 1)
            inside[cj, ci] = True
            area = (x1 - x0) * (y1 - y0)
            cells = np.nonzero(inside.reshape(-1))[0]
            cells = cells[area < area_t[i, cells]]
            pos[i, cells] = True
            cls_t[i, cells] = c
            box_t[i, cells] = box
            area_t[i, cells] = area
    return [(p, c, b) for p, c, b, _ in out]


def box_iou_aligned(a, b, eps=1e-9):
    ix = (torch.minimum(a[:, 2], b[:, 2]) - torch.maximum(a[:, 0], b[:, 0])).clamp(min=0)
    iy = (torch.minimum(a[:, 3], b[:, 3]) - torch.maximum(a[:, 1], b[:, 1])).clamp(min=0)
    inter = ix * iy
    union = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1]) + (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1]) - inter
    return inter / (union + eps)


def detection_loss(head_outputs, gt_boxes, gt_classes, num_classes=len(CLASSES), size_bounds=(24, 48)):
    """BCE(class) + BCE(objectness) + (1 - IoU) over positives, each normalized by positive count.

    ``gt_boxes`` / ``gt_classes``: per-image sequences of (x0, y0, x1, y1) and class ids.
    """
    shapes = [tuple(p.shape[-2:]) for p in head_outputs]
    targets = assign_targets(gt_boxes, gt_classes, shapes, size_bounds)
    dev, dt = head_outputs[0].device, head_outputs[0].dtype
    cls_sum = obj_sum = box_sum = head_outputs[0].new_zeros(())
    n_pos = 0
    for pred, stride, (pos, cls_t, box_t) in zip(head_outputs, STRIDES, targets):
        boxes, obj, cls = decode_level(pred, stride, num_classes)
        pos_t = torch.as_tensor(pos, device=dev)
        obj_sum = obj_sum + F.binary_cross_entropy_with_logits(obj, pos_t.to(dt), reduction="sum")
        onehot = torch.zeros_like(cls)
        if pos.any():
            onehot[pos_t] = F.one_hot(torch.as_tensor(cls_t[pos], device=dev), num_classes).to(dt)
            iou = box_iou_aligned(boxes[pos_t], torch.as_tensor(box_t[pos], device=dev, dtype=dt))
            box_sum = box_sum + (1 - iou).sum()
            n_pos += int(pos.sum())
        cls_sum = cls_sum + F.binary_cross_entropy_with_logits(cls, onehot, reduction="sum")
    norm = max(n_pos, 1)
    return (cls_sum + obj_sum + box_sum) / norm
