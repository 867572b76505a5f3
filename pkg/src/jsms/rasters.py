"""PNG rasters, label maps and the class palette manifest."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import FormatError

IGNORE_INDEX = 255


@dataclass(frozen=True)
class ClassInfo:
    index: int
    name: str
    color: tuple[int, int, int]
    moving: bool = False
    semantic: int = -1  # stationary counterpart for moving classes


_BASE = [
    ClassInfo(0, "sky", (70, 130, 180)),
    ClassInfo(1, "road", (128, 64, 128)),
    ClassInfo(2, "wall", (102, 102, 156)),
    ClassInfo(3, "box", (0, 0, 142)),
    ClassInfo(4, "blob", (220, 20, 60)),
]
_MOVING = [
    ClassInfo(5, "moving-box", (255, 215, 0), moving=True, semantic=3),
    ClassInfo(6, "moving-blob", (0, 255, 127), moving=True, semantic=4),
]


@dataclass(frozen=True)
class ClassCatalog:
    classes: tuple[ClassInfo, ...]

    @classmethod
    def toy(cls, num_classes: int = 6) -> "ClassCatalog":
        if num_classes not in (6, 7):
            raise ValueError(f"toy taxonomy has 6 or 7 classes, got {num_classes}")
        return cls(tuple(_BASE + _MOVING[: num_classes - 5]))

    def __len__(self):
        return len(self.classes)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.classes]

    @property
    def num_semantic(self) -> int:
        return sum(not c.moving for c in self.classes)

    @property
    def num_motion(self) -> int:
        return sum(c.moving for c in self.classes)

    @property
    def moving_indices(self) -> list[int]:
        return [c.index for c in self.classes if c.moving]

    def index(self, name) -> int:
        return self.names.index(name)

    def semantic_lut(self) -> np.ndarray:
        """256-entry lookup that folds moving classes onto their stationary counterpart."""
        lut = np.arange(256, dtype=np.uint8)
        for c in self.classes:
            if c.moving:
                lut[c.index] = c.semantic
        return lut

    def colors(self) -> np.ndarray:
        lut = np.zeros((256, 3), np.uint8)
        for c in self.classes:
            lut[c.index] = c.color
        return lut

    def to_json(self) -> list[dict]:
        return [
            {"index": c.index, "name": c.name, "color": list(c.color), "moving": c.moving, "semantic": c.semantic}
            for c in self.classes
        ]

    @classmethod
    def from_json(cls, entries) -> "ClassCatalog":
        return cls(tuple(
            ClassInfo(e["index"], e["name"], tuple(e["color"]), e.get("moving", False), e.get("semantic", -1))
            for e in entries
        ))


def write_palette(path, catalog: ClassCatalog):
    with open(path, "w") as fh:
        json.dump({"ignore_index": IGNORE_INDEX, "classes": catalog.to_json()}, fh, indent=1)
        fh.write("\n")


def read_palette(path) -> ClassCatalog:
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: malformed palette JSON: {e.msg}", e.pos) from None
    return ClassCatalog.from_json(d["classes"])


def _open_png(path, mode):
    try:
        img = Image.open(path)
        img.load()
    except (OSError, SyntaxError) as e:
        with open(path, "rb") as fh:
            head = fh.read(8)
        offset = 0 if head != b"\x89PNG\r\n\x1a\n" else 8
        raise FormatError(f"{path}: unreadable PNG ({e})", offset) from None
    if img.format != "PNG":
        raise FormatError(f"{path}: not a PNG file (format {img.format})", 0)
    if img.mode != mode:
        raise FormatError(f"{path}: expected PNG mode {mode}, got {img.mode}", 25)
    return np.asarray(img).copy()


def write_png_rgb(path, image):
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected uint8 [H, W, 3], got {image.dtype} {image.shape}")
    Image.fromarray(image, "RGB").save(path, format="PNG")


def read_png_rgb(path) -> np.ndarray:
    return _open_png(path, "RGB")


def write_label_map(path, labels):
    labels = np.asarray(labels)
    if labels.dtype != np.uint8 or labels.ndim != 2:
        raise ValueError(f"expected uint8 [H, W], got {labels.dtype} {labels.shape}")
    Image.fromarray(labels, "L").save(path, format="PNG")


def read_label_map(path) -> np.ndarray:
    return _open_png(path, "L")


def colorize(labels, catalog: ClassCatalog) -> np.ndarray:
    """RGB rendering of a label map; ignored pixels come out black."""
    return catalog.colors()[np.asarray(labels, dtype=np.uint8)]
