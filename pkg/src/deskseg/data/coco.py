"""COCO-style annotation documents: data model, parsing, validation, writing.

Category ids follow the carcass convention: 0 is ``defect``, 1 is ``normal``.
``iscrowd`` is a multiplicity flag here (1 when the image holds more than one
instance), not the standard COCO "ignore this region" flag.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .rle import CodecError, RleMask

DEFECT, NORMAL = 0, 1
DEFAULT_CATEGORIES = ((DEFECT, "defect"), (NORMAL, "normal"))


class ParseError(ValueError):
    """The document is not a well-formed annotation file."""


class ValidationError(ValueError):
    """The document parsed but breaks a referential or geometric invariant."""


@dataclass(frozen=True)
class Category:
    id: int
    name: str


@dataclass(frozen=True)
class ImageRecord:
    id: int
    file_name: str
    width: int
    height: int
    date_captured: str = ""


@dataclass(frozen=True)
class AnnotationRecord:
    id: int
    image_id: int
    category_id: int
    iscrowd: int
    area: int
    bbox: tuple[float, float, float, float]  # xmin, ymin, width, height
    segmentation: RleMask


@dataclass
class CocoDataset:
    images: list[ImageRecord] = field(default_factory=list)
    annotations: list[AnnotationRecord] = field(default_factory=list)
    categories: list[Category] = field(
        default_factory=lambda: [Category(i, n) for i, n in DEFAULT_CATEGORIES]
    )

    def annotations_by_image(self) -> dict[int, list[AnnotationRecord]]:
        out: dict[int, list[AnnotationRecord]] = {im.id: [] for im in self.images}
        for ann in self.annotations:
            out[ann.image_id].append(ann)
        return out

    def subset(self, image_ids) -> "CocoDataset":
        keep = set(image_ids)
        return CocoDataset(
            images=[im for im in self.images if im.id in keep],
            annotations=[a for a in self.annotations if a.image_id in keep],
            categories=list(self.categories),
        )

    def validate(self) -> None:
        validate(self)


def _number(v):
    return int(v) if float(v).is_integer() else float(v)


def to_document(ds: CocoDataset) -> dict:
    return {
        "categories": [{"id": c.id, "name": c.name} for c in ds.categories],
        "images": [
            {
                "id": im.id,
                "file_name": im.file_name,
                "width": im.width,
                "height": im.height,
                "date_captured": im.date_captured,
            }
            for im in ds.images
        ],
        "annotations": [
            {
                "id": a.id,
                "image_id": a.image_id,
                "category_id": a.category_id,
                "iscrowd": a.iscrowd,
                "area": a.area,
                "bbox": [_number(v) for v in a.bbox],
                "segmentation": a.segmentation.to_json(),
            }
            for a in ds.annotations
        ],
    }


def dumps(ds: CocoDataset) -> str:
    return json.dumps(to_document(ds), separators=(",", ":"))


def save(ds: CocoDataset, path: str | Path) -> None:
    Path(path).write_text(dumps(ds))


def _get(obj, key: str, where: str):
    if not isinstance(obj, dict):
        raise ParseError(f"{where}: expected an object")
    if key not in obj:
        raise ParseError(f"{where}: missing key {key!r}")
    return obj[key]


def _int(obj, key: str, where: str) -> int:
    v = _get(obj, key, where)
    if isinstance(v, bool) or not isinstance(v, (int, float)) or float(v) != int(v):
        raise ParseError(f"{where}.{key}: expected an integer, got {v!r}")
    return int(v)


def _list(doc, key: str) -> list:
    v = doc.get(key, [])
    if not isinstance(v, list):
        raise ParseError(f"{key}: expected a list")
    return v


def from_document(doc) -> CocoDataset:
    if not isinstance(doc, dict):
        raise ParseError("document root: expected an object")
    categories = []
    for i, c in enumerate(_list(doc, "categories")):
        where = f"categories[{i}]"
        categories.append(Category(_int(c, "id", where), str(_get(c, "name", where))))
    images = []
    for i, im in enumerate(_list(doc, "images")):
        where = f"images[{i}]"
        images.append(
            ImageRecord(
                id=_int(im, "id", where),
                file_name=str(_get(im, "file_name", where)),
                width=_int(im, "width", where),
                height=_int(im, "height", where),
                date_captured=str(im.get("date_captured", "")),
            )
        )
    annotations = []
    for i, a in enumerate(_list(doc, "annotations")):
        where = f"annotations[{i}]"
        bbox = _get(a, "bbox", where)
        if not isinstance(bbox, list) or len(bbox) != 4:
            raise ParseError(f"{where}.bbox: expected [xmin, ymin, width, height]")
        seg = _get(a, "segmentation", where)
        try:
            rle = RleMask.from_json(seg)
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{where}.segmentation: expected {{size, counts}} RLE ({exc})") from None
        annotations.append(
            AnnotationRecord(
                id=_int(a, "id", where),
                image_id=_int(a, "image_id", where),
                category_id=_int(a, "category_id", where),
                iscrowd=_int(a, "iscrowd", where),
                area=_int(a, "area", where),
                bbox=tuple(float(v) for v in bbox),
                segmentation=rle,
            )
        )
    ds = CocoDataset(images, annotations, categories if "categories" in doc else [])
    validate(ds)
    return ds


def loads(text: str) -> CocoDataset:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return from_document(doc)


def load(path: str | Path) -> CocoDataset:
    try:
        return loads(Path(path).read_text())
    except ParseError as exc:
        raise ParseError(f"{path}: {exc}") from None


def validate(ds: CocoDataset) -> None:
    """Referential and geometric checks; any violation raises."""
    images: dict[int, ImageRecord] = {}
    for im in ds.images:
        if im.id in images:
            raise ValidationError(f"duplicate image id {im.id}")
        if im.width <= 0 or im.height <= 0:
            raise ValidationError(f"image {im.id} has non-positive size {im.width}x{im.height}")
        images[im.id] = im
    cat_ids = {c.id for c in ds.categories}
    seen: set[int] = set()
    for a in ds.annotations:
        if a.id in seen:
            raise ValidationError(f"duplicate annotation id {a.id}")
        seen.add(a.id)
        im = images.get(a.image_id)
        if im is None:
            raise ValidationError(f"annotation {a.id} references missing image_id {a.image_id}")
        if a.category_id not in cat_ids:
            raise ValidationError(f"annotation {a.id} references missing category_id {a.category_id}")
        if a.iscrowd not in (0, 1):
            raise ValidationError(f"annotation {a.id} has iscrowd={a.iscrowd}")
        x, y, w, h = a.bbox
        if w < 0 or h < 0 or x < 0 or y < 0 or x + w > im.width or y + h > im.height:
            raise ValidationError(f"annotation {a.id} bbox {list(a.bbox)} leaves image {im.id}")
        rle = a.segmentation
        if tuple(rle.size) != (im.height, im.width):
            raise ValidationError(
                f"annotation {a.id} mask size {list(rle.size)} != image {im.id} size {[im.height, im.width]}"
            )
        if any(c < 0 for c in rle.counts) or sum(rle.counts) != im.height * im.width:
            raise ValidationError(f"annotation {a.id}: {CodecError.__name__}: run lengths do not cover the image")
        if a.area != rle.area:
            raise ValidationError(f"annotation {a.id} area {a.area} != mask pixel count {rle.area}")
