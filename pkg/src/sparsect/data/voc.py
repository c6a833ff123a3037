"""PASCAL VOC annotation XML ingestion (evaluation ground truth only)."""
from __future__ import annotations

import enum
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple, Union


class VocErrorCode(enum.Enum):
    MALFORMED_XML = "malformed_xml"
    MISSING_FIELD = "missing_field"
    BAD_VALUE = "bad_value"
    OUT_OF_BOUNDS = "out_of_bounds"


class VocParseError(ValueError):
    def __init__(self, code: VocErrorCode, message: str):
        super().__init__(f"{code.value}: {message}")
        self.code = code


@dataclass(frozen=True)
class VocObject:
    name: str
    xmin: int
    ymin: int
    xmax: int
    ymax: int
    difficult: bool = False

    def normalized(self, width: int, height: int) -> Tuple[float, float, float, float]:
        """Unit-square box; VOC pixel indices are 1-based and inclusive."""
        return ((self.xmin - 1) / width if self.xmin > 0 else 0.0,
                (self.ymin - 1) / height if self.ymin > 0 else 0.0,
                self.xmax / width, self.ymax / height)


@dataclass(frozen=True)
class VocAnnotation:
    filename: str
    width: int
    height: int
    depth: int
    objects: Tuple[VocObject, ...]

    @property
    def image_id(self) -> str:
        return Path(self.filename).stem


def _text(node, path: str, where: str) -> str:
    child = node.find(path)
    if child is None or child.text is None or not child.text.strip():
        raise VocParseError(VocErrorCode.MISSING_FIELD, f"<{path}> missing in {where}")
    return child.text.strip()


def _int(node, path: str, where: str) -> int:
    raw = _text(node, path, where)
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        val = float(raw)
    except ValueError:
        raise VocParseError(VocErrorCode.BAD_VALUE, f"<{path}>={raw!r} in {where} is not a number") from None
    if not val.is_integer():
        raise VocParseError(VocErrorCode.BAD_VALUE, f"<{path}>={raw!r} in {where} is not an integer")
    return int(val)


def parse_voc_xml(data: Union[bytes, str]) -> VocAnnotation:
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        raise VocParseError(VocErrorCode.MALFORMED_XML, str(exc)) from None
    if root.tag != "annotation":
        raise VocParseError(VocErrorCode.MALFORMED_XML, f"root element is <{root.tag}>, expected <annotation>")
    filename = _text(root, "filename", "annotation")
    size = root.find("size")
    if size is None:
        raise VocParseError(VocErrorCode.MISSING_FIELD, "<size> missing")
    width, height = _int(size, "width", "size"), _int(size, "height", "size")
    depth = _int(size, "depth", "size") if size.find("depth") is not None else 3
    if width <= 0 or height <= 0:
        raise VocParseError(VocErrorCode.BAD_VALUE, f"image size {width}x{height} is not positive")
    objects: List[VocObject] = []
    for i, obj in enumerate(root.findall("object")):
        where = f"object {i}"
        name = _text(obj, "name", where)
        box = obj.find("bndbox")
        if box is None:
            raise VocParseError(VocErrorCode.MISSING_FIELD, f"<bndbox> missing in {where}")
        xmin, ymin = _int(box, "xmin", where), _int(box, "ymin", where)
        xmax, ymax = _int(box, "xmax", where), _int(box, "ymax", where)
        difficult = False
        if obj.find("difficult") is not None and obj.find("difficult").text is not None:
            flag = _int(obj, "difficult", where)
            if flag not in (0, 1):
                raise VocParseError(VocErrorCode.BAD_VALUE, f"<difficult>={flag} in {where}")
            difficult = bool(flag)
        if not (0 <= xmin < xmax <= width and 0 <= ymin < ymax <= height):
            raise VocParseError(VocErrorCode.OUT_OF_BOUNDS,
                                f"box ({xmin},{ymin},{xmax},{ymax}) outside {width}x{height} in {where}")
        objects.append(VocObject(name, xmin, ymin, xmax, ymax, difficult))
    return VocAnnotation(filename, width, height, depth, tuple(objects))


def load_voc_dir(path) -> List[VocAnnotation]:
    """Parse every ``*.xml`` in a directory, sorted by file name."""
    return [parse_voc_xml(p.read_bytes()) for p in sorted(Path(path).glob("*.xml"))]
