"""Patch-grid image masks: random, independent per-branch and complementary pairs."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .seeding import derive_seed

STRATEGIES = ("none", "online", "independent", "complementary")


@dataclass(frozen=True)
class MaskGrid:
    patch: int
    grid: np.ndarray = field(repr=False)  # (Hp, Wp) bool, True = masked
    image_h: int
    image_w: int

    def __post_init__(self):
        expected = (math.ceil(self.image_h / self.patch), math.ceil(self.image_w / self.patch))
        if self.grid.shape != expected:
            raise ValueError(f"grid shape {self.grid.shape} does not fit a {self.image_h}x{self.image_w} "
                             f"image with patch {self.patch} (expected {expected})")

    @property
    def cells(self) -> int:
        return int(self.grid.size)

    @property
    def masked_cells(self) -> int:
        return int(self.grid.sum())

    def pixel_mask(self) -> np.ndarray:
        """(image_h, image_w) bool array; edge patches are cropped to the image."""
        full = np.repeat(np.repeat(self.grid, self.patch, axis=0), self.patch, axis=1)
        return full[: self.image_h, : self.image_w]

    def __eq__(self, other):
        if not isinstance(other, MaskGrid):
            return NotImplemented
        return (self.patch, self.image_h, self.image_w) == (other.patch, other.image_h, other.image_w) \
            and np.array_equal(self.grid, other.grid)

    __hash__ = None


def masked_count(proportion: float, cells: int) -> int:
    """round(proportion * cells) with halves rounded up."""
    return int(math.floor(proportion * cells + 0.5))


def random_mask(h: int, w: int, patch: int, proportion: float, seed) -> MaskGrid:
    if not 0.0 <= proportion <= 1.0:
        raise ValueError(f"proportion must lie in [0, 1], got {proportion}")
    if patch < 1 or patch > min(h, w):
        raise ValueError(f"patch size {patch} must be in [1, {min(h, w)}] for a {h}x{w} image")
    hp, wp = math.ceil(h / patch), math.ceil(w / patch)
    cells = hp * wp
    rng = np.random.default_rng(seed)
    flat = np.zeros(cells, dtype=bool)
    flat[rng.permutation(cells)[: masked_count(proportion, cells)]] = True
    return MaskGrid(patch, flat.reshape(hp, wp), h, w)


def empty_mask(h: int, w: int, patch: int = 16) -> MaskGrid:
    patch = min(patch, h, w)
    return MaskGrid(patch, np.zeros((math.ceil(h / patch), math.ceil(w / patch)), dtype=bool), h, w)


def complement(m: MaskGrid) -> MaskGrid:
    return MaskGrid(m.patch, ~m.grid, m.image_h, m.image_w)


def apply_mask(img: np.ndarray, m: MaskGrid, fill: float = 0.0) -> np.ndarray:
    """Replace masked pixels of a (C, H, W) image with ``fill``; returns a new array."""
    if img.shape[-2:] != (m.image_h, m.image_w):
        raise ValueError(f"image {img.shape[-2:]} does not match mask {(m.image_h, m.image_w)}")
    out = img.copy()
    out[..., m.pixel_mask()] = fill
    return out


def sample_proportion(value, seed) -> float:
    """A fixed proportion, or a uniform draw from a ``(lo, hi)`` range."""
    if isinstance(value, (int, float)):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"proportion must lie in [0, 1], got {value}")
        return float(value)
    lo, hi = value
    if not 0.0 <= lo <= hi <= 1.0:
        raise ValueError(f"proportion range must satisfy 0 <= lo <= hi <= 1, got ({lo}, {hi})")
    if lo == hi:
        return float(lo)
    return float(np.random.default_rng(seed).uniform(lo, hi))


def sample_patch(value, seed) -> int:
    """A fixed patch size, or a power of two drawn uniformly from a ``(lo, hi)`` range."""
    if isinstance(value, int):
        return value
    lo, hi = value
    choices = [2 ** k for k in range(0, 16) if lo <= 2 ** k <= hi]
    if not choices:
        raise ValueError(f"no power-of-two patch size in [{lo}, {hi}]")
    return int(np.random.default_rng(seed).choice(choices))


@dataclass
class MaskConfig:
    """Which branch gets which mask.

    ``none``: no masks. ``online``: only the online view is masked.
    ``independent``: both views get their own random masks.
    ``complementary``: the momentum mask is the exact negation of the online one.
    Proportions are a float or a ``[lo, hi]`` range; ``patch`` is an int or a
    ``[lo, hi]`` range of powers of two.
    """

    strategy: str = "complementary"
    online: float | tuple[float, float] = 0.7
    momentum: float | tuple[float, float] = 0.3
    patch: int | tuple[int, int] = 16
    fill: float = 0.0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown mask strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if isinstance(self.online, list):
            self.online = tuple(self.online)
        if isinstance(self.momentum, list):
            self.momentum = tuple(self.momentum)
        if isinstance(self.patch, list):
            self.patch = tuple(self.patch)


def make_mask_pair(h: int, w: int, cfg: MaskConfig, seed) -> tuple[MaskGrid, MaskGrid]:
    """Returns (momentum mask, online mask)."""
    patch = sample_patch(cfg.patch, derive_seed(seed, 0))
    if cfg.strategy == "none":
        return empty_mask(h, w, patch), empty_mask(h, w, patch)
    p_online = sample_proportion(cfg.online, derive_seed(seed, 1))
    online = random_mask(h, w, patch, p_online, derive_seed(seed, 2))
    if cfg.strategy == "online":
        return empty_mask(h, w, patch), online
    if cfg.strategy == "complementary":
        return complement(online), online
    p_mom = sample_proportion(cfg.momentum, derive_seed(seed, 3))
    return random_mask(h, w, patch, p_mom, derive_seed(seed, 4)), online
