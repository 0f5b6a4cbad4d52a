"""Synthetic haze rendering and paired clean/hazy dataset construction.

Images are float arrays of shape (H, W, 3) with intensities in [0, 1].
Boxes are continuous pixel coordinates ``(xmin, ymin, xmax, ymax)`` with the
box covering pixels ``xmin <= x < xmax``.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .voc import CLASSES, GroundTruthBox, normalize_class, read_voc_xml, write_voc_xml

log = logging.getLogger(__name__)

DEFAULT_A = 0.5
DEFAULT_BETA_RANGE = (0.07, 0.12)
MANIFEST_NAME = "manifest.tsv"
MANIFEST_FIELDS = ("split", "clean_path", "hazy_path", "annotation_path", "beta")


@dataclass
class HazeParams:
    A: float = DEFAULT_A
    beta: float | None = None
    beta_range: tuple[float, float] = DEFAULT_BETA_RANGE

    def __post_init__(self):
        lo, hi = self.beta_range
        if not 0.0 <= self.A <= 1.0:
            raise ValueError(f"atmospheric light A must be in [0, 1], got {self.A}")
        if lo < 0 or lo > hi:
            raise ValueError(f"invalid beta_range {self.beta_range}")
        if self.beta is not None and self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")

    def sample_beta(self, rng: np.random.Generator) -> float:
        if self.beta is not None:
            return float(self.beta)
        lo, hi = self.beta_range
        return float(rng.uniform(lo, hi))


def depth_map(w: int, h: int) -> np.ndarray:
    """Radial pseudo-depth ``max(0, -0.04 * rho + sqrt(max(w, h)))``, shape (h, w).

    ``rho`` is the distance to the geometric center ((w-1)/2, (h-1)/2).
    """
    if w < 1 or h < 1:
        raise ValueError(f"image dimensions must be positive, got w={w}, h={h}")
    ys = np.arange(h, dtype=np.float64) - (h - 1) / 2.0
    xs = np.arange(w, dtype=np.float64) - (w - 1) / 2.0
    rho = np.sqrt(ys[:, None] ** 2 + xs[None, :] ** 2)
    return np.maximum(0.0, -0.04 * rho + math.sqrt(max(w, h)))


def transmission(depth: np.ndarray, beta: float) -> np.ndarray:
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    return np.exp(-beta * np.asarray(depth, dtype=np.float64))


def apply_haze(J: np.ndarray, t: np.ndarray, A: float = DEFAULT_A) -> np.ndarray:
    """Atmospheric scattering model ``I = J * t + A * (1 - t)``."""
    J = np.asarray(J, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if t.shape != J.shape[:2]:
        raise ValueError(f"transmission shape {t.shape} does not match image {J.shape[:2]}")
    t = t[..., None] if J.ndim == 3 else t
    # the blend is a convex combination; clamp away one-ulp rounding excursions
    return np.clip(J * t + A * (1.0 - t), np.minimum(J, A), np.maximum(J, A))


def haze_image(J: np.ndarray, beta: float, A: float = DEFAULT_A) -> np.ndarray:
    h, w = J.shape[:2]
    return apply_haze(J, transmission(depth_map(w, h), beta), A)


def add_rain(img: np.ndarray, rng: np.random.Generator, count: int = 40, length: int = 8,
             intensity: float = 0.25) -> np.ndarray:
    """Additive slanted streaks, clipped to [0, 1]."""
    h, w = img.shape[:2]
    streaks = np.zeros((h, w), dtype=np.float64)
    slope = rng.uniform(-0.3, 0.3)
    for _ in range(count):
        x0, y0 = rng.uniform(0, w), rng.uniform(-length, h)
        for k in range(length):
            x, y = int(round(x0 + slope * k)), int(round(y0 + k))
            if 0 <= x < w and 0 <= y < h:
                streaks[y, x] = intensity
    return np.clip(img + streaks[..., None], 0.0, 1.0)


# ---------------------------------------------------------------------------
# toy "shapes" scenes


@dataclass
class ScenePair:
    clean: np.ndarray
    hazy: np.ndarray
    boxes: list[GroundTruthBox]
    haze: HazeParams
    seed: int


def _class_mask(cls: int, hh: int, ww: int) -> np.ndarray:
    yy, xx = np.mgrid[0:hh, 0:ww].astype(np.float64)
    cy, cx = (hh - 1) / 2, (ww - 1) / 2
    ry, rx = hh / 2, ww / 2
    r2 = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
    name = CLASSES[cls]
    if name == "person":  # filled ellipse
        return r2 <= 1.0
    if name == "bicycle":  # ring
        return (r2 <= 1.0) & (r2 >= 0.35)
    if name == "motor":  # upward triangle
        return np.abs(xx - cx) <= (yy + 1) * (ww / 2) / hh
    # car and bus are rectangles, told apart by texture
    return np.ones((hh, ww), dtype=bool)


def _class_texture(cls: int, hh: int, ww: int, base: np.ndarray, rng) -> np.ndarray:
    yy, xx = np.mgrid[0:hh, 0:ww]
    alt = 1.0 - base if rng.random() < 0.5 else base * 0.3
    name = CLASSES[cls]
    if name == "car":  # horizontal stripes
        sel = (yy // 2) % 2 == 0
    elif name == "bus":  # checkerboard
        sel = ((yy // 3) + (xx // 3)) % 2 == 0
    else:
        sel = np.ones((hh, ww), dtype=bool)
    return np.where(sel[..., None], base, alt)


def _background(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    c0, c1 = rng.uniform(0.15, 0.85, size=3), rng.uniform(0.15, 0.85, size=3)
    angle = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    g = (np.cos(angle) * xx + np.sin(angle) * yy) / max(h, w)
    g = (g - g.min()) / max(g.max() - g.min(), 1e-9)
    bg = c0 * (1 - g[..., None]) + c1 * g[..., None]
    bg += rng.normal(0, 0.03, size=(h, w, 1))
    return np.clip(bg, 0, 1)


def _overlap(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    return inter / min((a[2] - a[0]) * (a[3] - a[1]), (b[2] - b[0]) * (b[3] - b[1]))


def generate_clean_scene(rng: np.random.Generator, canvas=(64, 64), class_count: int = 5,
                         max_objects: int = 6):
    h, w = canvas
    img = _background(h, w, rng)
    boxes: list[GroundTruthBox] = []
    n_obj = int(rng.integers(1, max_objects + 1))
    lo, hi = max(6, min(h, w) // 8), max(8, int(min(h, w) * 0.45))
    for _ in range(n_obj):
        for _attempt in range(20):
            cls = int(rng.integers(0, class_count))
            bh, bw = int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1))
            if CLASSES[cls] == "person":
                bh = min(hi, max(bh, int(bw * 1.4)))
            y0, x0 = int(rng.integers(0, h - bh + 1)), int(rng.integers(0, w - bw + 1))
            cand = (x0, y0, x0 + bw, y0 + bh)
            if all(_overlap(cand, b.box) < 0.25 for b in boxes):
                break
        else:
            continue
        mask = _class_mask(cls, bh, bw)
        ys, xs = np.nonzero(mask)
        color = rng.uniform(0, 1, size=3)
        tex = _class_texture(cls, bh, bw, color, rng)
        patch = img[y0:y0 + bh, x0:x0 + bw]
        patch[mask] = tex[mask]
        box = (float(x0 + xs.min()), float(y0 + ys.min()), float(x0 + xs.max() + 1), float(y0 + ys.max() + 1))
        boxes.append(GroundTruthBox(cls, box))
    if not boxes:  # retry budget exhausted on the very first object is practically impossible
        return generate_clean_scene(rng, canvas, class_count, max_objects)
    return img, boxes


def generate_toy_scene(rng_seed: int, canvas=(64, 64), class_count: int = 5,
                       haze: HazeParams | None = None, rain: bool = False) -> ScenePair:
    if canvas[0] < 32 or canvas[1] < 32:
        raise ValueError(f"canvas must be at least 32x32, got {canvas}")
    if not 1 <= class_count <= len(CLASSES):
        raise ValueError(f"class_count must be in [1, {len(CLASSES)}], got {class_count}")
    haze = haze or HazeParams()
    rng = np.random.default_rng(rng_seed)
    clean, boxes = generate_clean_scene(rng, canvas, class_count)
    beta = haze.sample_beta(rng)
    hazy = haze_image(clean, beta, haze.A)
    if rain:
        hazy = add_rain(hazy, rng)
    return ScenePair(clean, hazy, boxes, HazeParams(haze.A, beta, haze.beta_range), rng_seed)


# ---------------------------------------------------------------------------
# image files


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def save_png(path, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG", optimize=False)


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


# ---------------------------------------------------------------------------
# datasets


@dataclass
class DatasetSpec:
    out: str
    train: int = 200
    test: int = 50
    seed: int = 0
    A: float = DEFAULT_A
    beta_min: float = DEFAULT_BETA_RANGE[0]
    beta_max: float = DEFAULT_BETA_RANGE[1]
    canvas: tuple[int, int] = (64, 64)
    classes: tuple[str, ...] = CLASSES
    rain: bool = False
    source: str = "toy"  # "toy" or "voc"
    voc_root: str | None = None  # directory with JPEGImages/ (or images/) and Annotations/


@dataclass
class ManifestRow:
    split: str
    clean_path: str
    hazy_path: str
    annotation_path: str
    beta: float


@dataclass
class DatasetManifest:
    root: Path
    rows: list[ManifestRow]
    dropped_objects: int = 0
    dropped_names: dict = field(default_factory=dict)

    def split(self, name: str) -> list[ManifestRow]:
        return [r for r in self.rows if r.split == name]

    def path(self, rel: str) -> Path:
        return self.root / rel


def _validate_classes(classes) -> tuple[str, ...]:
    out = []
    for name in classes:
        canon = normalize_class(name)
        if canon is None:
            raise ValueError(f"unknown class name {name!r}; allowed: {', '.join(CLASSES)}")
        out.append(canon)
    return tuple(out)


def write_manifest(path: Path, rows: list[ManifestRow]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, delimiter="\t", lineterminator="\n")
        wr.writerow(MANIFEST_FIELDS)
        for r in rows:
            wr.writerow([r.split, r.clean_path, r.hazy_path, r.annotation_path, repr(r.beta)])


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    rows = []
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh, delimiter="\t")
        missing = set(MANIFEST_FIELDS) - set(rd.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: manifest missing columns {sorted(missing)}")
        for rec in rd:
            rows.append(ManifestRow(rec["split"], rec["clean_path"], rec["hazy_path"],
                                    rec["annotation_path"], float(rec["beta"])))
    return DatasetManifest(path.parent, rows)


def _write_sample(root: Path, split: str, idx: int, clean, hazy, boxes, beta, class_names) -> ManifestRow:
    stem = f"{split}_{idx:05d}"
    rel_clean, rel_hazy, rel_ann = f"clean/{stem}.png", f"hazy/{stem}.png", f"annotations/{stem}.xml"
    save_png(root / rel_clean, clean)
    save_png(root / rel_hazy, hazy)
    h, w = clean.shape[:2]
    write_voc_xml(root / rel_ann, f"{stem}.png", (w, h), boxes, class_names)
    return ManifestRow(split, rel_clean, rel_hazy, rel_ann, beta)


def build_dataset(spec: DatasetSpec) -> DatasetManifest:
    """Render a paired clean/hazy corpus under ``spec.out`` and write its manifest.

    Each sample draws its own RNG stream from ``(seed, split, index)`` so the
    output does not depend on processing order.
    """
    classes = _validate_classes(spec.classes)
    haze = HazeParams(spec.A, None, (spec.beta_min, spec.beta_max))
    root = Path(spec.out)
    try:
        for sub in ("clean", "hazy", "annotations"):
            (root / sub).mkdir(parents=True, exist_ok=True)
        probe = root / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {root} is not writable: {exc}") from exc

    rows: list[ManifestRow] = []
    dropped: dict[str, int] = {}
    if spec.source == "toy":
        for split, count, split_id in (("train", spec.train, 0), ("test", spec.test, 1)):
            for i in range(count):
                seed = np.random.SeedSequence([spec.seed, split_id, i]).generate_state(1)[0]
                scene = generate_toy_scene(int(seed), spec.canvas, len(classes), haze, spec.rain)
                rows.append(_write_sample(root, split, i, scene.clean, scene.hazy, scene.boxes,
                                          scene.haze.beta, CLASSES))
    elif spec.source == "voc":
        rows, dropped = _import_voc(spec, root, haze, classes)
    else:
        raise ValueError(f"unknown dataset source {spec.source!r}")

    write_manifest(root / MANIFEST_NAME, rows)
    meta = {k: v for k, v in vars(spec).items() if k != "out"}
    meta["dropped_objects"] = dropped
    (root / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=list) + "\n")
    return DatasetManifest(root, rows, sum(dropped.values()), dropped)


def _import_voc(spec: DatasetSpec, root: Path, haze: HazeParams, classes):
    if not spec.voc_root:
        raise ValueError("source 'voc' requires voc_root")
    src = Path(spec.voc_root)
    ann_dir = src / "Annotations"
    img_dir = src / "JPEGImages" if (src / "JPEGImages").is_dir() else src / "images"
    keep = set(classes)
    dropped: dict[str, int] = {}
    samples = []
    for ann_path in sorted(ann_dir.glob("*.xml")):
        ann = read_voc_xml(ann_path, keep=keep)
        for name, n in ann.dropped.items():
            dropped[name] = dropped.get(name, 0) + n
        if ann.boxes:
            samples.append((ann_path, ann))
    n_drop = sum(dropped.values())
    if n_drop:
        warnings.warn(f"dropped {n_drop} objects outside the class list: {dropped}")
    rng = np.random.default_rng(spec.seed)
    order = rng.permutation(len(samples))
    n_train = min(spec.train, len(samples))
    n_test = min(spec.test, len(samples) - n_train)
    rows = []
    for k, split in ((0, "train"), (1, "test")):
        start, count = (0, n_train) if k == 0 else (n_train, n_test)
        for i in range(count):
            ann_path, ann = samples[order[start + i]]
            clean = load_png(img_dir / ann.filename)
            seed = np.random.SeedSequence([spec.seed, k, i]).generate_state(1)[0]
            beta = haze.sample_beta(np.random.default_rng(int(seed)))
            hazy = haze_image(clean, beta, haze.A)
            rows.append(_write_sample(root, split, i, clean, hazy, ann.boxes, beta, CLASSES))
    return rows, dropped


def load_split(manifest: DatasetManifest, split: str, kind: str = "hazy"):
    """Load one split into memory: (images N×H×W×3 float64, boxes per image, rows)."""
    from .voc import read_voc_xml as _read

    rows = manifest.split(split)
    if not rows:
        return np.zeros((0, 0, 0, 3)), [], rows
    images, boxes = [], []
    for r in rows:
        img_path = manifest.path(r.hazy_path if kind == "hazy" else r.clean_path)
        ann_path = manifest.path(r.annotation_path)
        if not img_path.exists() or not ann_path.exists():
            raise ValueError(f"manifest row references missing file: {img_path if not img_path.exists() else ann_path}")
        images.append(load_png(img_path))
        boxes.append(_read(ann_path).boxes)
    return np.stack(images), boxes, rows


def file_digest(root) -> str:
    """SHA-256 over every file under ``root`` (relative path + bytes), order independent."""
    import hashlib

    h = hashlib.sha256()
    root = Path(root)
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(os.fsencode(p.relative_to(root).as_posix()))
            h.update(p.read_bytes())
    return h.hexdigest()
