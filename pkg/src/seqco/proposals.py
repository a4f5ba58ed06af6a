"""Unsupervised objectness proposals.

A single-strategy Selective Search: graph-based segmentation into initial
regions, greedy hierarchical grouping of the most similar adjacent pair (HSV
color, gradient texture, size, fill), and a randomized hierarchy-position
ranking. Ground-truth and random-box sources exist for ablations.
"""
from __future__ import annotations

import hashlib
import heapq
import json
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage import color


COLOR_BINS = 25
TEXTURE_ORIENTATIONS = 8
TEXTURE_BINS = 10
MODES = ("selective_search", "ground_truth", "random")


@dataclass(frozen=True)
class RegionProposal:
    box: tuple[float, float, float, float]  # normalized cx, cy, w, h
    rank: float                             # priority, higher is better


@dataclass
class Region:
    size: int
    bbox: tuple[int, int, int, int]  # x1, y1, x2, y2 in pixels, end-exclusive
    color_hist: np.ndarray = field(repr=False)
    texture_hist: np.ndarray = field(repr=False)
    runs: tuple[tuple[int, int], ...] = field(default=(), repr=False)  # (start, length) over raster order
    neighbors: set[int] = field(default_factory=set, repr=False)

    def box(self, h: int, w: int) -> tuple[float, float, float, float]:
        x1, y1, x2, y2 = self.bbox
        return ((x1 + x2) / (2 * w), (y1 + y2) / (2 * h), (x2 - x1) / w, (y2 - y1) / h)


# ---------------------------------------------------------------- segmentation

# (first, second) slices pairing each pixel with its right, lower, lower-right and lower-left neighbor
_S, _H, _T = slice(None), slice(None, -1), slice(1, None)
_NEIGHBOR_SLICES = (((_S, _H), (_S, _T)), ((_H, _S), (_T, _S)), ((_H, _H), (_T, _T)), ((_H, _T), (_T, _H)))


def _find(parent: list[int], x: int) -> int:
    root = x
    while parent[root] != root:
        root = parent[root]
    while parent[x] != root:
        parent[x], x = root, parent[x]
    return root


def felzenszwalb_segment(img: np.ndarray, k: float = 200.0, min_size: int = 50,
                         sigma: float = 0.8) -> np.ndarray:
    """Graph-based segmentation of a (3, H, W) image in [0, 1].

    Edge weights are RGB distances on the 0-255 scale over the 8-neighborhood.
    Returns an (H, W) int label map numbered in raster order of first pixel.
    """
    _, h, w = img.shape
    smooth = np.stack([ndimage.gaussian_filter(c * 255.0, sigma, mode="nearest") for c in img])
    idx = np.arange(h * w).reshape(h, w)
    pairs, weights = [], []
    for sa, sb in _NEIGHBOR_SLICES:
        diff = smooth[(slice(None),) + sa] - smooth[(slice(None),) + sb]
        pairs.append(np.stack([idx[sa].ravel(), idx[sb].ravel()], axis=1))
        weights.append(np.sqrt((diff ** 2).sum(axis=0)).ravel())
    pairs = np.concatenate(pairs)
    weights = np.concatenate(weights)
    order = np.argsort(weights, kind="stable")
    ea = pairs[order, 0].tolist()
    eb = pairs[order, 1].tolist()
    ew = weights[order].tolist()

    parent = list(range(h * w))
    size = [1] * (h * w)
    thresh = [float(k)] * (h * w)
    for a, b, wt in zip(ea, eb, ew):
        ra, rb = _find(parent, a), _find(parent, b)
        if ra != rb and wt <= thresh[ra] and wt <= thresh[rb]:
            if size[ra] < size[rb]:
                ra, rb = rb, ra
            parent[rb] = ra
            size[ra] += size[rb]
            thresh[ra] = wt + k / size[ra]
    for a, b in zip(ea, eb):
        ra, rb = _find(parent, a), _find(parent, b)
        if ra != rb and (size[ra] < min_size or size[rb] < min_size):
            if size[ra] < size[rb]:
                ra, rb = rb, ra
            parent[rb] = ra
            size[ra] += size[rb]
    roots = np.array([_find(parent, i) for i in range(h * w)])
    _, first, inverse = np.unique(roots, return_index=True, return_inverse=True)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(first))
    return rank[inverse].reshape(h, w)


# ---------------------------------------------------------------- region features

def _runs(flat_mask: np.ndarray) -> tuple[tuple[int, int], ...]:
    padded = np.concatenate([[0], flat_mask.astype(np.int8), [0]])
    d = np.diff(padded)
    starts = np.flatnonzero(d == 1)
    ends = np.flatnonzero(d == -1)
    return tuple((int(s), int(e - s)) for s, e in zip(starts, ends))


def extract_regions(img: np.ndarray, labels: np.ndarray) -> list[Region]:
    """Per-label size, tight box, L1-normalized HSV color and texture histograms, adjacency."""
    h, w = labels.shape
    n = int(labels.max()) + 1
    flat = labels.ravel()
    sizes = np.bincount(flat, minlength=n)

    hsv = color.rgb2hsv(np.clip(img, 0, 1).transpose(1, 2, 0)).reshape(-1, 3)
    cbins = np.minimum((hsv * COLOR_BINS).astype(np.int64), COLOR_BINS - 1)
    chist = np.stack([np.bincount(flat * COLOR_BINS + cbins[:, c], minlength=n * COLOR_BINS)
                      .reshape(n, COLOR_BINS) for c in range(3)], axis=1).reshape(n, -1).astype(np.float64)
    chist /= chist.sum(axis=1, keepdims=True)

    gray = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    gy = ndimage.gaussian_filter(gray, 1.0, order=(1, 0))
    gx = ndimage.gaussian_filter(gray, 1.0, order=(0, 1))
    thetas = 2 * np.pi * np.arange(TEXTURE_ORIENTATIONS) / TEXTURE_ORIENTATIONS
    resp = np.maximum(0.0, np.cos(thetas)[:, None, None] * gx + np.sin(thetas)[:, None, None] * gy)
    top = resp.max()
    tbins = np.zeros(resp.shape, dtype=np.int64) if top <= 0 else \
        np.minimum((resp / top * TEXTURE_BINS).astype(np.int64), TEXTURE_BINS - 1)
    thist = np.stack([np.bincount(flat * TEXTURE_BINS + tbins[o].ravel(), minlength=n * TEXTURE_BINS)
                      .reshape(n, TEXTURE_BINS) for o in range(TEXTURE_ORIENTATIONS)], axis=1)
    thist = thist.reshape(n, -1).astype(np.float64)
    thist /= thist.sum(axis=1, keepdims=True)

    ys, xs = np.divmod(np.arange(h * w), w)
    x1 = np.full(n, w); y1 = np.full(n, h); x2 = np.zeros(n, int); y2 = np.zeros(n, int)
    np.minimum.at(x1, flat, xs); np.minimum.at(y1, flat, ys)
    np.maximum.at(x2, flat, xs + 1); np.maximum.at(y2, flat, ys + 1)

    regions = [Region(int(sizes[r]), (int(x1[r]), int(y1[r]), int(x2[r]), int(y2[r])),
                      chist[r], thist[r], _runs(flat == r)) for r in range(n)]
    for a, b in _adjacent_pairs(labels):
        regions[a].neighbors.add(b)
        regions[b].neighbors.add(a)
    return regions


def _adjacent_pairs(labels: np.ndarray) -> list[tuple[int, int]]:
    found = []
    for sa, sb in _NEIGHBOR_SLICES:
        a, b = labels[sa], labels[sb]
        diff = a != b
        found.append(np.stack([np.minimum(a[diff], b[diff]), np.maximum(a[diff], b[diff])], axis=1))
    both = np.unique(np.concatenate(found), axis=0)
    return [(int(a), int(b)) for a, b in both]


def similarity(a: Region, b: Region, image_size: int) -> float:
    """Color + texture + size + fill, each in [0, 1] with weight 1."""
    s_color = np.minimum(a.color_hist, b.color_hist).sum()
    s_texture = np.minimum(a.texture_hist, b.texture_hist).sum()
    s_size = 1.0 - (a.size + b.size) / image_size
    bx = (min(a.bbox[0], b.bbox[0]), min(a.bbox[1], b.bbox[1]),
          max(a.bbox[2], b.bbox[2]), max(a.bbox[3], b.bbox[3]))
    bb_area = (bx[2] - bx[0]) * (bx[3] - bx[1])
    s_fill = 1.0 - (bb_area - a.size - b.size) / image_size
    return float(s_color + s_texture + s_size + s_fill)


def merge(a: Region, b: Region) -> Region:
    size = a.size + b.size
    runs = tuple(sorted(a.runs + b.runs))
    return Region(
        size,
        (min(a.bbox[0], b.bbox[0]), min(a.bbox[1], b.bbox[1]),
         max(a.bbox[2], b.bbox[2]), max(a.bbox[3], b.bbox[3])),
        (a.size * a.color_hist + b.size * b.color_hist) / size,
        (a.size * a.texture_hist + b.size * b.texture_hist) / size,
        runs,
    )


def build_hierarchy(regions: list[Region], image_size: int) -> list[Region]:
    """Greedily merge the most similar adjacent pair until no adjacent pairs remain.

    Returns the initial regions followed by every merged region in creation
    order. Ties in similarity go to the lowest (i, j) index pair.
    """
    if not regions:
        raise ValueError("hierarchical grouping needs at least one region")
    all_regions = list(regions)
    alive = set(range(len(regions)))
    neighbors = {i: set(r.neighbors) for i, r in enumerate(regions)}
    heap = [(-similarity(regions[i], regions[j], image_size), i, j)
            for i in neighbors for j in neighbors[i] if i < j]
    heapq.heapify(heap)
    while heap:
        _, i, j = heapq.heappop(heap)
        if i not in alive or j not in alive:
            continue
        t = len(all_regions)
        new = merge(all_regions[i], all_regions[j])
        all_regions.append(new)
        alive -= {i, j}
        nb = (neighbors.pop(i) | neighbors.pop(j)) - {i, j}
        neighbors[t] = nb
        for k in nb:
            neighbors[k] -= {i, j}
            neighbors[k].add(t)
            heapq.heappush(heap, (-similarity(new, all_regions[k], image_size), k, t))
        alive.add(t)
    return all_regions


def hierarchical_group(regions: list[Region], seed, image_hw: tuple[int, int]) -> list[RegionProposal]:
    """Every region of the hierarchy as a ranked proposal, duplicates removed.

    A region at hierarchy position p (1 = last merge) with a uniform draw
    u in (0, 1] gets priority 1 / (p * u), which orders proposals exactly as
    ascending p * u.
    """
    h, w = image_hw
    hierarchy = build_hierarchy(regions, h * w)
    rng = np.random.default_rng(seed)
    draws = 1.0 - rng.random(len(hierarchy))  # (0, 1]
    best: dict[tuple, RegionProposal] = {}
    order: list[tuple] = []
    for idx in reversed(range(len(hierarchy))):
        position = len(hierarchy) - idx
        box = hierarchy[idx].box(h, w)
        prop = RegionProposal(box, float(1.0 / (position * draws[idx])))
        if box not in best:
            order.append(box)
            best[box] = prop
        elif prop.rank > best[box].rank:
            best[box] = prop
    return [best[b] for b in order]


def top_k(proposals: list[RegionProposal], k: int = 30) -> list[RegionProposal]:
    """Highest-priority proposals first; equal priorities keep their input order."""
    return sorted(proposals, key=lambda p: -p.rank)[:k]


def selective_search(img: np.ndarray, seed=0, k: float = 200.0, min_size: int = 50,
                     sigma: float = 0.8, top: int = 30) -> list[RegionProposal]:
    labels = felzenszwalb_segment(img, k, min_size, sigma)
    regions = extract_regions(img, labels)
    return top_k(hierarchical_group(regions, seed, labels.shape), top)


def random_boxes(k: int, seed) -> list[RegionProposal]:
    """k in-bounds boxes covering 2% to 50% of the image each."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < k:
        area = rng.uniform(0.02, 0.5)
        ratio = np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
        bw, bh = np.sqrt(area * ratio), np.sqrt(area / ratio)
        if bw > 1 or bh > 1:
            continue
        cx = rng.uniform(bw / 2, 1 - bw / 2)
        cy = rng.uniform(bh / 2, 1 - bh / 2)
        out.append(RegionProposal((float(cx), float(cy), float(bw), float(bh)), 1.0))
    return out


def proposal_source(mode: str, image: np.ndarray | None = None, annotations=None,
                    k: int = 30, seed=0) -> list[RegionProposal]:
    if mode == "selective_search":
        if image is None:
            raise ValueError("selective_search needs an image")
        return selective_search(image, seed=seed, top=k)
    if mode == "ground_truth":
        if annotations is None:
            raise ValueError("ground_truth mode needs annotations")
        return [RegionProposal(tuple(float(v) for v in b), 1.0) for b in annotations]
    if mode == "random":
        return random_boxes(k, seed)
    raise ValueError(f"unknown proposal mode {mode!r}; expected one of {MODES}")


# ---------------------------------------------------------------- sidecar cache

_write_lock = threading.Lock()


def sidecar_path(image_path) -> Path:
    p = Path(image_path)
    return p.with_name(p.stem + ".props.json")


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_sidecar(path, digest: str, mode: str, proposals: list[RegionProposal], seed: int = 0) -> None:
    payload = {"image_sha256": digest, "mode": mode, "seed": seed,
               "proposals": [list(p.box) for p in proposals]}
    with _write_lock:
        tmp = f"{path}.tmp{os.getpid()}"
        with open(tmp, "w") as fh:
            json.dump(payload, fh)
        os.replace(tmp, path)


def read_sidecar(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def cached_proposals(image_path, mode: str, compute, top: int = 30, seed: int = 0) -> np.ndarray:
    """Proposal boxes for an image file, recomputed only when the sidecar is
    missing or was written for different image bytes, mode or seed."""
    side = sidecar_path(image_path)
    digest = file_sha256(image_path)
    if side.exists():
        data = read_sidecar(side)
        if data.get("image_sha256") == digest and data.get("mode") == mode and data.get("seed") == seed:
            return np.asarray(data["proposals"], dtype=np.float64).reshape(-1, 4)[:top]
    props = compute()
    write_sidecar(side, digest, mode, props, seed)
    return np.asarray([p.box for p in props], dtype=np.float64).reshape(-1, 4)[:top]
