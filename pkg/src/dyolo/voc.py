"""VOC-style XML annotations restricted to the five fog-benchmark classes."""
from __future__ import annotations

import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

CLASSES = ("person", "bicycle", "car", "motor", "bus")

_ALIASES = {
    "person": "person",
    "bicycle": "bicycle",
    "bike": "bicycle",
    "car": "car",
    "motor": "motor",
    "motorcycle": "motor",
    "motorbike": "motor",
    "bus": "bus",
}


def normalize_class(name: str) -> str | None:
    """Canonical class name, or None for anything outside the class list."""
    return _ALIASES.get(name.strip().lower())


def class_index(name: str) -> int:
    canon = normalize_class(name)
    if canon is None:
        raise ValueError(f"unknown class {name!r}")
    return CLASSES.index(canon)


@dataclass
class GroundTruthBox:
    class_id: int
    box: tuple[float, float, float, float]
    difficult: bool = False

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (x1 > x0 and y1 > y0):
            raise ValueError(f"degenerate box {self.box}")
        if not 0 <= self.class_id < len(CLASSES):
            raise ValueError(f"class id {self.class_id} outside the {len(CLASSES)}-class set")


@dataclass
class Annotation:
    filename: str
    size: tuple[int, int]  # (width, height)
    boxes: list[GroundTruthBox]
    dropped: dict[str, int] = field(default_factory=dict)


def write_voc_xml(path, filename: str, size, boxes, class_names=CLASSES) -> None:
    """Write boxes in VOC convention: 1-based, inclusive pixel coordinates."""
    w, h = size
    root = ET.Element("annotation")
    ET.SubElement(root, "filename").text = filename
    sz = ET.SubElement(root, "size")
    ET.SubElement(sz, "width").text = str(w)
    ET.SubElement(sz, "height").text = str(h)
    ET.SubElement(sz, "depth").text = "3"
    for b in boxes:
        obj = ET.SubElement(root, "object")
        ET.SubElement(obj, "name").text = class_names[b.class_id]
        ET.SubElement(obj, "difficult").text = "1" if b.difficult else "0"
        bb = ET.SubElement(obj, "bndbox")
        x0, y0, x1, y1 = b.box
        for tag, v in (("xmin", x0 + 1), ("ymin", y0 + 1), ("xmax", x1), ("ymax", y1)):
            ET.SubElement(bb, tag).text = _fmt(v)
    ET.indent(root)
    Path(path).write_bytes(ET.tostring(root, encoding="utf-8") + b"\n")


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def read_voc_xml(path, keep=None) -> Annotation:
    """Parse a VOC annotation; objects whose class is not kept are counted in ``dropped``."""
    keep = set(CLASSES) if keep is None else set(keep)
    tree = ET.parse(path)
    root = tree.getroot()
    filename = root.findtext("filename", default=Path(path).with_suffix(".png").name)
    w = int(float(root.findtext("size/width", default="0")))
    h = int(float(root.findtext("size/height", default="0")))
    boxes, dropped = [], {}
    for obj in root.iter("object"):
        raw = obj.findtext("name", default="").strip()
        canon = normalize_class(raw)
        if canon is None or canon not in keep:
            dropped[raw] = dropped.get(raw, 0) + 1
            continue
        bb = obj.find("bndbox")
        x0 = float(bb.findtext("xmin")) - 1
        y0 = float(bb.findtext("ymin")) - 1
        x1 = float(bb.findtext("xmax"))
        y1 = float(bb.findtext("ymax"))
        difficult = obj.findtext("difficult", default="0").strip() == "1"
        boxes.append(GroundTruthBox(CLASSES.index(canon), (x0, y0, x1, y1), difficult))
    return Annotation(filename, (w, h), boxes, dropped)
