"""Deterministic synthetic street scenes with exact flow and joint labels.

A scene is three horizontal background bands (sky, wall, road) seen by a
translating camera, plus rectangular "boxes" and elliptical "blobs" that
may move in the world. Displacements are whole pixels, so ground-truth flow
is exact: background pixels move by minus the camera translation, object
pixels by their world velocity minus the camera translation. An object is
labelled moving iff its world velocity is nonzero.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import GenerationError
from .flow import read_flo, write_flo
from .rasters import (
    ClassCatalog,
    read_label_map,
    read_palette,
    read_png_rgb,
    write_label_map,
    write_palette,
    write_png_rgb,
)

SKY, ROAD, WALL, BOX, BLOB, MOVING_BOX, MOVING_BLOB = range(7)
MOVING_THRESHOLD = 0.5


@dataclass
class SceneObject:
    kind: str  # "box" or "blob"
    x: int
    y: int
    w: int
    h: int
    velocity: tuple[int, int]  # world (dx, dy) per frame
    color: tuple[int, int, int]
    texture_seed: int

    @property
    def moving(self) -> bool:
        return float(np.hypot(*self.velocity)) > MOVING_THRESHOLD

    def mask(self) -> np.ndarray:
        if self.kind == "box":
            return np.ones((self.h, self.w), bool)
        yy, xx = np.mgrid[0:self.h, 0:self.w]
        cy, cx = (self.h - 1) / 2, (self.w - 1) / 2
        return ((yy - cy) / (self.h / 2)) ** 2 + ((xx - cx) / (self.w / 2)) ** 2 <= 1.0


@dataclass
class SceneSpec:
    height: int
    width: int
    sky_end: int
    wall_end: int
    camera: tuple[int, int]
    objects: list[SceneObject] = field(default_factory=list)
    seed: int = 0


@dataclass
class SampleRecord:
    id: str
    image_t: np.ndarray
    image_t1: np.ndarray
    flow: np.ndarray
    labels: np.ndarray
    split: str = "train"
    scene: SceneSpec | None = None


@dataclass(frozen=True)
class SceneDistribution:
    """Sampling ranges for random scenes, all in pixels at the given image size."""

    height: int = 64
    width: int = 64
    num_classes: int = 6
    boxes: tuple[int, int] = (2, 4)
    blobs: tuple[int, int] = (1, 2)
    box_size: tuple[float, float] = (0.2, 0.34)  # fraction of the short side
    blob_size: tuple[float, float] = (0.18, 0.3)
    max_camera: int = 1
    max_speed: int = 4
    # screen-flow magnitude of a moving object exceeds the background's by at least this much
    motion_margin: float = 2.0
    moving_fraction: tuple[float, float] = (0.01, 0.40)
    max_retries: int = 200


def sample_seed(seed: int, i: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, i])


# -- appearance ------------------------------------------------------------

def _value_noise(rng, h, w, cell):
    gh, gw = h // cell + 2, w // cell + 2
    grid = rng.random((gh, gw))
    ys = np.arange(h) / cell
    xs = np.arange(w) / cell
    y0, x0 = ys.astype(int), xs.astype(int)
    ty, tx = (ys - y0)[:, None], (xs - x0)[None, :]
    a = grid[y0][:, x0]
    b = grid[y0][:, x0 + 1]
    c = grid[y0 + 1][:, x0]
    d = grid[y0 + 1][:, x0 + 1]
    return (a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty


def _shade(base, noise, amount):
    img = np.asarray(base, np.float64)[None, None, :] * (1 - amount / 2 + amount * noise[..., None])
    return np.clip(img, 0, 255)


def _render_background(rng, h, w, sky_end, wall_end):
    img = np.empty((h, w, 3))
    sky = _shade(rng.integers(110, 200, 3) * (0.6, 0.8, 1.0), _value_noise(rng, h, w, 16), 0.25)
    wall_noise = 0.6 * _value_noise(rng, h, w, 6) + 0.4 * ((np.arange(h) // 3) % 2)[:, None]
    wall = _shade(rng.integers(100, 190, 3) * (1.0, 0.75, 0.6), wall_noise, 0.5)
    road = _shade(np.full(3, rng.integers(70, 130)), _value_noise(rng, h, w, 2), 0.6)
    rows = np.arange(h)[:, None, None]
    img[:] = np.where(rows < sky_end, sky, np.where(rows < wall_end, wall, road))
    labels = np.where(np.arange(h) < sky_end, SKY, np.where(np.arange(h) < wall_end, WALL, ROAD))
    return img, np.repeat(labels[:, None], w, axis=1).astype(np.uint8)


def _render_object(obj: SceneObject):
    rng = np.random.default_rng(obj.texture_seed)
    if obj.kind == "box":
        noise = 0.7 * _value_noise(rng, obj.h, obj.w, 4) + 0.3
        noise[[0, -1], :] = 0.0
        noise[:, [0, -1]] = 0.0
        # a darker "window" strip across the upper third
        top = max(1, obj.h // 5)
        noise[top:top + max(1, obj.h // 4), 2:-2] *= 0.45
        return _shade(obj.color, noise, 0.8)
    noise = _value_noise(rng, obj.h, obj.w, 3)
    return _shade(obj.color, noise, 0.5)


_BOX_COLORS = np.array([(200, 40, 40), (230, 200, 60), (220, 220, 220), (40, 80, 200), (60, 160, 80)])
_BLOB_COLORS = np.array([(60, 160, 80), (150, 70, 170), (230, 140, 40), (220, 220, 220), (90, 60, 40)])


# -- scene sampling and rendering -------------------------------------------

def _screen_flow(obj: SceneObject, camera):
    return obj.velocity[0] - camera[0], obj.velocity[1] - camera[1]


def _bbox(obj, dx=0, dy=0):
    return obj.x + dx, obj.y + dy, obj.x + dx + obj.w, obj.y + dy + obj.h


def _overlap(a, b, gap=1):
    return not (a[2] + gap <= b[0] or b[2] + gap <= a[0] or a[3] + gap <= b[1] or b[3] + gap <= a[1])


def _sample_velocity(rng, dist: SceneDistribution, camera):
    bg = float(np.hypot(*camera))
    for _ in range(100):
        v = tuple(int(c) for c in rng.integers(-dist.max_speed, dist.max_speed + 1, 2))
        if np.hypot(*v) > MOVING_THRESHOLD and np.hypot(v[0] - camera[0], v[1] - camera[1]) >= bg + dist.motion_margin:
            return v
    raise GenerationError("could not sample a velocity that separates from ego-motion")


def random_scene(rng: np.random.Generator, dist: SceneDistribution) -> SceneSpec:
    """Sample a scene satisfying the placement and moving-fraction constraints."""
    h, w = dist.height, dist.width
    short = min(h, w)
    for _ in range(dist.max_retries):
        sky_end = int(rng.integers(int(0.15 * h), int(0.35 * h) + 1))
        wall_end = int(rng.integers(int(0.5 * h), int(0.65 * h) + 1))
        camera = (0, 0)
        if rng.random() < 0.6:
            camera = tuple(int(c) for c in rng.integers(-dist.max_camera, dist.max_camera + 1, 2))
        n_box = int(rng.integers(dist.boxes[0], dist.boxes[1] + 1))
        n_blob = int(rng.integers(dist.blobs[0], dist.blobs[1] + 1))
        kinds = ["box"] * n_box + ["blob"] * n_blob
        # at least one moving box; blobs only move when they have a moving class
        movers = [True] + [bool(rng.random() < 0.25) for _ in range(n_box - 1)]
        movers += [dist.num_classes == 7 and bool(rng.random() < 0.5) for _ in range(n_blob)]
        objects: list[SceneObject] = []
        ok = True
        for kind, moving in zip(kinds, movers):
            lo, hi = dist.box_size if kind == "box" else dist.blob_size
            palette = _BOX_COLORS if kind == "box" else _BLOB_COLORS
            velocity = _sample_velocity(rng, dist, camera) if moving else (0, 0)
            placed = None
            for _ in range(50):
                ow = int(rng.integers(int(lo * short), int(hi * short) + 1))
                oh = int(rng.integers(int(lo * short), int(hi * short) + 1))
                fx, fy = velocity[0] - camera[0], velocity[1] - camera[1]
                x_lo, x_hi = max(0, -fx), w - ow - max(0, fx)
                y_lo, y_hi = max(0, -fy, sky_end - oh // 2), h - oh - max(0, fy)
                if x_hi < x_lo or y_hi < y_lo:
                    continue
                cand = SceneObject(
                    kind, int(rng.integers(x_lo, x_hi + 1)), int(rng.integers(y_lo, y_hi + 1)), ow, oh,
                    velocity, tuple(int(c) for c in palette[rng.integers(len(palette))] + rng.integers(-25, 26, 3)),
                    int(rng.integers(2**31)),
                )
                f = _screen_flow(cand, camera)
                if any(_overlap(_bbox(cand), _bbox(o)) or _overlap(_bbox(cand, *f), _bbox(o, *_screen_flow(o, camera)))
                       for o in objects):
                    continue
                placed = cand
                break
            if placed is None:
                ok = False
                break
            objects.append(placed)
        if not ok:
            continue
        moving_px = sum(int(o.mask().sum()) for o in objects if o.moving)
        frac = moving_px / (h * w)
        if dist.moving_fraction[0] <= frac <= dist.moving_fraction[1]:
            return SceneSpec(h, w, sky_end, wall_end, camera, objects)
    raise GenerationError(f"object placement failed after {dist.max_retries} attempts")


def render_scene(scene: SceneSpec, rng: np.random.Generator, num_classes: int = 6):
    """Render both frames, the exact flow field and the joint labels of frame t."""
    h, w = scene.height, scene.width
    cx, cy = scene.camera
    m = max(abs(cx), abs(cy))
    # the world canvas covers both camera views
    world, world_labels = _render_background(rng, h + 2 * m, w + 2 * m, scene.sky_end + m, scene.wall_end + m)
    views = []
    for ox, oy in ((m, m), (m + cx, m + cy)):
        views.append(world[oy:oy + h, ox:ox + w].copy())
    labels = world_labels[m:m + h, m:m + w].copy()
    flow = np.zeros((h, w, 2), np.float32)
    flow[..., 0], flow[..., 1] = -cx, -cy
    for obj in scene.objects:
        tex, mask = _render_object(obj), obj.mask()
        fx, fy = _screen_flow(obj, scene.camera)
        for frame, (dx, dy) in zip(views, ((0, 0), (fx, fy))):
            region = frame[obj.y + dy:obj.y + dy + obj.h, obj.x + dx:obj.x + dx + obj.w]
            region[mask] = tex[mask]
        cls = BOX if obj.kind == "box" else BLOB
        if obj.moving:
            if obj.kind == "box":
                cls = MOVING_BOX
            elif num_classes == 7:
                cls = MOVING_BLOB
        lab = labels[obj.y:obj.y + obj.h, obj.x:obj.x + obj.w]
        lab[mask] = cls
        fl = flow[obj.y:obj.y + obj.h, obj.x:obj.x + obj.w]
        fl[mask] = (fx, fy)
    img_t, img_t1 = (np.round(v).astype(np.uint8) for v in views)
    return img_t, img_t1, flow, labels


def generate_sample(seed: int, i: int, dist: SceneDistribution, split: str = "train") -> SampleRecord:
    rng = np.random.default_rng(sample_seed(seed, i))
    scene = random_scene(rng, dist)
    scene.seed = seed
    img_t, img_t1, flow, labels = render_scene(scene, rng, dist.num_classes)
    return SampleRecord(f"{i:05d}", img_t, img_t1, flow, labels, split, scene)


def generate_dataset(n_samples: int, seed: int = 0, dist: SceneDistribution | None = None,
                     val_fraction: float = 0.2) -> list[SampleRecord]:
    """``n_samples`` scenes; the last ``round(n * val_fraction)`` form the val split."""
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    dist = dist or SceneDistribution()
    n_val = int(round(n_samples * val_fraction))
    return [
        generate_sample(seed, i, dist, "val" if i >= n_samples - n_val else "train")
        for i in range(n_samples)
    ]


# -- dataset directories ---------------------------------------------------

def save_dataset(root, samples: list[SampleRecord], catalog: ClassCatalog, manifest: dict | None = None):
    """Write ``images/``, ``flow/``, ``labels/``, ``palette.json`` and ``split.txt`` under ``root``."""
    for sub in ("images", "flow", "labels"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    for s in samples:
        write_png_rgb(os.path.join(root, "images", f"{s.id}_t.png"), s.image_t)
        write_png_rgb(os.path.join(root, "images", f"{s.id}_t1.png"), s.image_t1)
        write_flo(os.path.join(root, "flow", f"{s.id}.flo"), s.flow)
        write_label_map(os.path.join(root, "labels", f"{s.id}.png"), s.labels)
    write_palette(os.path.join(root, "palette.json"), catalog)
    with open(os.path.join(root, "split.txt"), "w") as fh:
        fh.writelines(f"{s.id}\t{s.split}\n" for s in samples)
    if manifest is not None:
        with open(os.path.join(root, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
            fh.write("\n")


def read_split(root) -> list[tuple[str, str]]:
    with open(os.path.join(root, "split.txt")) as fh:
        return [tuple(line.rstrip("\n").split("\t")) for line in fh if line.strip()]


def load_dataset(root, split: str | None = None) -> tuple[list[SampleRecord], ClassCatalog]:
    catalog = read_palette(os.path.join(root, "palette.json"))
    samples = []
    for sid, tag in read_split(root):
        if split is not None and tag != split:
            continue
        samples.append(SampleRecord(
            sid,
            read_png_rgb(os.path.join(root, "images", f"{sid}_t.png")),
            read_png_rgb(os.path.join(root, "images", f"{sid}_t1.png")),
            read_flo(os.path.join(root, "flow", f"{sid}.flo")),
            read_label_map(os.path.join(root, "labels", f"{sid}.png")),
            tag,
        ))
    return samples, catalog


def scene_to_dict(scene: SceneSpec) -> dict:
    return asdict(scene)
