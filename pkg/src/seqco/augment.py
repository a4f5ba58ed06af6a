"""Two views of one image that share every geometric parameter.

The base view is built once (flip, resize, resized crop). The momentum view is
the base plus its mask; the online view adds photometric noise to the base and
then its mask. Boxes mapped through the shared :class:`Geometry` therefore land
at the same normalized coordinates in both views.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from skimage import color

from .geometry import to_corners, to_cxcywh
from .masking import MaskConfig, MaskGrid, apply_mask, make_mask_pair
from .seeding import derive_seed

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class AugmentConfig:
    output_size: int | None = 64          # None keeps the source size
    flip_prob: float = 0.5
    resize_short: tuple[int, int] = (48, 96)
    crop_scale: tuple[float, float] = (0.35, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    photometric: bool = True
    jitter_prob: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    gray_prob: float = 0.2
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    min_visibility: float = 0.1
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        for name in ("resize_short", "crop_scale", "crop_ratio", "blur_sigma", "mean", "std"):
            setattr(self, name, tuple(getattr(self, name)))

    @classmethod
    def identity(cls, output_size: int | None = None) -> AugmentConfig:
        """No flip, no resize, full crop, no photometrics."""
        return cls(output_size=output_size, flip_prob=0.0, resize_short=(0, 0),
                   crop_scale=(1.0, 1.0), crop_ratio=(1.0, 1.0), photometric=False)


@dataclass(frozen=True)
class Geometry:
    """Flip, then resize by ``scale``, then crop ``(x0, y0, w, h)`` in resized
    pixels, then resample the crop to ``out_h`` x ``out_w``."""

    src_h: int
    src_w: int
    flip: bool
    scale: float
    crop: tuple[int, int, int, int]
    out_h: int
    out_w: int

    @property
    def resized(self) -> tuple[int, int]:
        return max(1, round(self.src_h * self.scale)), max(1, round(self.src_w * self.scale))

    @property
    def is_identity(self) -> bool:
        rh, rw = self.resized
        return (not self.flip and (rh, rw) == (self.src_h, self.src_w)
                and self.crop == (0, 0, rw, rh) and (self.out_h, self.out_w) == (self.src_h, self.src_w))

    @classmethod
    def identity(cls, h: int, w: int) -> Geometry:
        return cls(h, w, False, 1.0, (0, 0, w, h), h, w)


@dataclass
class ViewPair:
    view1: np.ndarray                     # momentum view: weak
    view2: np.ndarray                     # online view: strong
    geometry: Geometry
    mask_pair: tuple[MaskGrid, MaskGrid]  # (momentum, online)
    base: np.ndarray = field(repr=False)  # normalized, unmasked base view


def sample_geometry(h: int, w: int, seed, cfg: AugmentConfig) -> Geometry:
    rng = np.random.default_rng(derive_seed(seed, "geometry"))
    flip = bool(rng.random() < cfg.flip_prob)
    lo, hi = cfg.resize_short
    short = int(rng.integers(lo, hi + 1)) if hi > 0 else min(h, w)
    scale = short / min(h, w)
    geo = Geometry(h, w, flip, scale, (0, 0, 0, 0), 0, 0)
    rh, rw = geo.resized
    crop = (0, 0, rw, rh)
    for _ in range(10):
        area = rh * rw * rng.uniform(*cfg.crop_scale)
        ratio = math.exp(rng.uniform(math.log(cfg.crop_ratio[0]), math.log(cfg.crop_ratio[1])))
        cw = int(round(math.sqrt(area * ratio)))
        ch = int(round(math.sqrt(area / ratio)))
        if 0 < cw <= rw and 0 < ch <= rh:
            crop = (int(rng.integers(0, rw - cw + 1)), int(rng.integers(0, rh - ch + 1)), cw, ch)
            break
    out_h = out_w = cfg.output_size
    if cfg.output_size is None:
        out_h, out_w = h, w
    return Geometry(h, w, flip, scale, crop, out_h, out_w)


def warp(src: np.ndarray, geo: Geometry) -> np.ndarray:
    """Resample a (C, H, W) image into view coordinates with bilinear interpolation."""
    if geo.is_identity:
        return src.copy()
    rh, rw = geo.resized
    x0, y0, cw, ch = geo.crop
    u = (np.arange(geo.out_w) + 0.5) * cw / geo.out_w + x0
    v = (np.arange(geo.out_h) + 0.5) * ch / geo.out_h + y0
    xn = u / rw
    if geo.flip:
        xn = 1.0 - xn
    xs = xn * geo.src_w - 0.5
    ys = v / rh * geo.src_h - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([ndimage.map_coordinates(ch_img, [yy, xx], order=1, mode="nearest")
                     for ch_img in src])


def build_base_view(src: np.ndarray, seed, cfg: AugmentConfig | None = None) -> tuple[np.ndarray, Geometry]:
    cfg = cfg or AugmentConfig()
    geo = sample_geometry(src.shape[1], src.shape[2], seed, cfg)
    return warp(src, geo), geo


def map_boxes(boxes, geo: Geometry, min_visibility: float = 0.1) -> np.ndarray:
    """Source-normalized boxes -> view-normalized boxes, dropping ones mostly cropped away."""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if len(b) == 0:
        return b
    c = to_corners(b)
    if geo.flip:
        c = np.stack([1 - c[:, 2], c[:, 1], 1 - c[:, 0], c[:, 3]], axis=1)
    rh, rw = geo.resized
    x0, y0, cw, ch = geo.crop
    px = c * np.array([rw, rh, rw, rh]) - np.array([x0, y0, x0, y0])
    full = (px[:, 2] - px[:, 0]) * (px[:, 3] - px[:, 1])
    clipped = np.clip(px, 0, np.array([cw, ch, cw, ch]))
    vis = (clipped[:, 2] - clipped[:, 0]) * (clipped[:, 3] - clipped[:, 1])
    with np.errstate(invalid="ignore", divide="ignore"):
        keep = (full > 0) & (vis > 0) & (vis >= min_visibility * full)
    out = to_cxcywh(clipped[keep] / np.array([cw, ch, cw, ch]))
    return np.clip(out, 0.0, 1.0)


def _gray(img: np.ndarray) -> np.ndarray:
    return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]


def photometric(img: np.ndarray, seed, cfg: AugmentConfig) -> np.ndarray:
    """Color jitter (random order), random grayscale and random Gaussian blur on [0, 1] RGB."""
    rng = np.random.default_rng(derive_seed(seed, "photometric"))
    out = img.copy()
    if rng.random() < cfg.jitter_prob:
        for op in rng.permutation(4):
            if op == 0:
                out = out * rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)
            elif op == 1:
                m = _gray(out).mean()
                out = (out - m) * rng.uniform(1 - cfg.contrast, 1 + cfg.contrast) + m
            elif op == 2:
                g = _gray(out)[None]
                out = (out - g) * rng.uniform(1 - cfg.saturation, 1 + cfg.saturation) + g
            else:
                hsv = color.rgb2hsv(np.clip(out, 0, 1).transpose(1, 2, 0))
                hsv[..., 0] = (hsv[..., 0] + rng.uniform(-cfg.hue, cfg.hue)) % 1.0
                out = color.hsv2rgb(hsv).transpose(2, 0, 1)
            out = np.clip(out, 0.0, 1.0)
    if rng.random() < cfg.gray_prob:
        out = np.repeat(_gray(out)[None], 3, axis=0)
    if rng.random() < cfg.blur_prob:
        sigma = rng.uniform(*cfg.blur_sigma)
        out = np.stack([ndimage.gaussian_filter(c, sigma, mode="reflect") for c in out])
    return out


def normalize(img: np.ndarray, cfg: AugmentConfig) -> np.ndarray:
    mean = np.asarray(cfg.mean).reshape(3, 1, 1)
    std = np.asarray(cfg.std).reshape(3, 1, 1)
    return (img - mean) / std


def make_views(src: np.ndarray, seed, mask_cfg: MaskConfig | None = None,
               cfg: AugmentConfig | None = None) -> ViewPair:
    cfg = cfg or AugmentConfig()
    mask_cfg = mask_cfg or MaskConfig()
    base, geo = build_base_view(src, seed, cfg)
    strong = photometric(base, seed, cfg) if cfg.photometric else base
    base_n = normalize(base, cfg)
    m_mom, m_on = make_mask_pair(geo.out_h, geo.out_w, mask_cfg, derive_seed(seed, "mask"))
    view1 = apply_mask(base_n, m_mom, mask_cfg.fill)
    view2 = apply_mask(normalize(strong, cfg), m_on, mask_cfg.fill)
    return ViewPair(view1, view2, geo, (m_mom, m_on), base_n)
