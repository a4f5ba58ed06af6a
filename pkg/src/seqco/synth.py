"""Synthetic multi-object scenes: flat-colored rectangles and ellipses on a
smooth, slightly noisy background, with exact ground-truth boxes."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .ppm import write_ppm
from .seeding import derive_seed

SIZE = 64
OBJECT_SIDE = (12, 30)
MIN_COLOR_GAP = 0.35
GAP_PX = 2


@dataclass
class SyntheticScene:
    image: np.ndarray                       # (3, H, W) in [0, 1]
    gt_boxes: list[tuple[float, float, float, float]]
    styles: list[dict]


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    c0, c1 = rng.uniform(0.15, 0.85, 3), rng.uniform(0.15, 0.85, 3)
    angle = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    t = (np.cos(angle) * xx + np.sin(angle) * yy)
    t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    img = c0[:, None, None] * (1 - t) + c1[:, None, None] * t
    blobs = ndimage.gaussian_filter(rng.normal(0, 1, (3, size, size)), sigma=(0, 8, 8))
    img = img + 0.6 * blobs
    return img


def _far_color(rng: np.random.Generator, avoid: list[np.ndarray]) -> np.ndarray:
    best, best_gap = None, -1.0
    for _ in range(50):
        c = rng.uniform(0, 1, 3)
        gap = min(float(np.linalg.norm(c - a)) for a in avoid) if avoid else np.inf
        if gap >= MIN_COLOR_GAP:
            return c
        if gap > best_gap:
            best, best_gap = c, gap
    return best


def _overlaps(a, b) -> bool:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    return not (ax + aw + GAP_PX <= bx or bx + bw + GAP_PX <= ax
                or ay + ah + GAP_PX <= by or by + bh + GAP_PX <= ay)


def make_scene(seed, n_objects: int | None = None, size: int = SIZE) -> SyntheticScene:
    """One scene. Objects never overlap, so pairwise GT IoU is 0."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 4)) if n_objects is None else n_objects
    if not 1 <= n <= 3:
        raise ValueError(f"scenes hold 1 to 3 objects, got {n}")
    img = _background(rng, size)
    bg_mean = img.reshape(3, -1).mean(axis=1)
    placed: list[tuple[int, int, int, int]] = []
    while len(placed) < n:
        w, h = (int(v) for v in rng.integers(OBJECT_SIDE[0], OBJECT_SIDE[1] + 1, 2))
        x, y = int(rng.integers(0, size - w + 1)), int(rng.integers(0, size - h + 1))
        if any(_overlaps((x, y, w, h), p) for p in placed):
            if rng.random() < 0.02:       # crowded: start the layout over
                placed.clear()
            continue
        placed.append((x, y, w, h))
    colors: list[np.ndarray] = []
    boxes, styles = [], []
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    for x, y, w, h in placed:
        color = _far_color(rng, [bg_mean] + colors)
        colors.append(color)
        shape = "rect" if rng.random() < 0.5 else "ellipse"
        if shape == "rect":
            mask = (xx >= x) & (xx < x + w) & (yy >= y) & (yy < y + h)
        else:
            mask = ((xx - x - w / 2) / (w / 2)) ** 2 + ((yy - y - h / 2) / (h / 2)) ** 2 <= 1.0
        img[:, mask] = color[:, None]
        rows, cols = np.flatnonzero(mask.any(axis=1)), np.flatnonzero(mask.any(axis=0))
        x0, x1, y0, y1 = cols[0], cols[-1] + 1, rows[0], rows[-1] + 1
        boxes.append(((x0 + x1) / 2 / size, (y0 + y1) / 2 / size, (x1 - x0) / size, (y1 - y0) / size))
        styles.append({"shape": shape, "color": [float(c) for c in color]})
    img = np.clip(img + rng.normal(0, 0.02, img.shape), 0.0, 1.0)
    return SyntheticScene(img, boxes, styles)


def scene_name(i: int) -> str:
    return f"scene_{i:05d}"


def gt_path(image_path) -> Path:
    p = Path(image_path)
    return p.with_name(p.stem + ".gt.json")


def generate_synthetic(count: int, seed: int, out_dir, n_objects: int | None = None) -> list[Path]:
    """Write ``count`` scenes as ``scene_NNNNN.ppm`` plus ``scene_NNNNN.gt.json``."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    paths = []
    for i in range(count):
        scene = make_scene(derive_seed(seed, "scene", i), n_objects)
        path = out / f"{scene_name(i)}.ppm"
        # the stored image is 8-bit; boxes are exact pixel bounds, unaffected by quantization
        write_ppm(path, scene.image)
        payload = {"boxes": [list(b) for b in scene.gt_boxes], "styles": scene.styles}
        gt_path(path).write_text(json.dumps(payload))
        paths.append(path)
    return paths


def read_gt(image_path) -> np.ndarray | None:
    p = gt_path(image_path)
    if not p.exists():
        return None
    data = json.loads(p.read_text())
    return np.asarray(data["boxes"], dtype=np.float64).reshape(-1, 4)
