"""A toy DETR-style detector: conv stem, sine positions, transformer
encoder-decoder with learned object queries, and three MLP heads.

Parameters live in a plain ``dict[str, Tensor]`` (a "param store") whose
insertion order is the canonical iteration order. Weight matrices are stored
(in, out) so layers compute ``x @ W + b``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc

ParamStore = dict  # str -> nc.Tensor


@dataclass
class ModelConfig:
    image_size: int = 64
    stem_stride: int = 8
    d_model: int = 32
    heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    queries: int = 16
    proj_dim: int = 32
    ffn_hidden: int = 64

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by heads {self.heads}")
        if self.d_model % 4:
            raise ValueError("d_model must be a multiple of 4 for the 2-D sine encoding")
        if self.stem_stride != 8:
            raise ValueError("the stem is two stride-2 convolutions and a 2x2 pool: stride 8 only")
        if self.image_size % self.stem_stride:
            raise ValueError(f"image_size {self.image_size} is not a multiple of {self.stem_stride}")

    @property
    def grid(self) -> int:
        return self.image_size // self.stem_stride

    @property
    def tokens(self) -> int:
        return self.grid ** 2


@dataclass
class SequencePrediction:
    """Per-query outputs; tensors carry an optional leading batch axis."""

    class_logits: nc.Tensor   # (..., N) single foreground logit
    boxes: nc.Tensor          # (..., N, 4) cx, cy, w, h in (0, 1)
    projections: nc.Tensor    # (..., N, proj_dim)

    def __len__(self) -> int:
        return self.class_logits.shape[0]

    def __getitem__(self, b: int) -> SequencePrediction:
        return SequencePrediction(self.class_logits[b], self.boxes[b], self.projections[b])

    def unbatch(self) -> list[SequencePrediction]:
        return [self[b] for b in range(len(self))]


# ---------------------------------------------------------------- parameters

def _param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    d, f, stem = cfg.d_model, cfg.ffn_hidden, cfg.d_model // 2
    shapes = [
        ("stem.conv1.weight", (stem, 3, 3, 3), "xavier"), ("stem.conv1.bias", (stem,), "zeros"),
        ("stem.conv2.weight", (d, stem, 3, 3), "xavier"), ("stem.conv2.bias", (d,), "zeros"),
    ]

    def attn(prefix):
        out = []
        for p in "qkvo":
            out += [(f"{prefix}.{p}.weight", (d, d), "xavier"), (f"{prefix}.{p}.bias", (d,), "zeros")]
        return out

    def norm(prefix):
        return [(f"{prefix}.weight", (d,), "ones"), (f"{prefix}.bias", (d,), "zeros")]

    def mlp(prefix, dims):
        out = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]), start=1):
            out += [(f"{prefix}.fc{i}.weight", (a, b), "xavier"), (f"{prefix}.fc{i}.bias", (b,), "zeros")]
        return out

    for l in range(cfg.enc_layers):
        shapes += attn(f"enc.{l}.self_attn") + norm(f"enc.{l}.norm1")
        shapes += mlp(f"enc.{l}.ffn", (d, f, d)) + norm(f"enc.{l}.norm2")
    shapes.append(("query_embed", (cfg.queries, d), "query"))
    for l in range(cfg.dec_layers):
        shapes += attn(f"dec.{l}.self_attn") + norm(f"dec.{l}.norm1")
        shapes += attn(f"dec.{l}.cross_attn") + norm(f"dec.{l}.norm2")
        shapes += mlp(f"dec.{l}.ffn", (d, f, d)) + norm(f"dec.{l}.norm3")
    shapes += mlp("head.cls", (d, f, f, 1))
    shapes += mlp("head.box", (d, f, f, 4))
    shapes += mlp("head.proj", (d, f, f, cfg.proj_dim))
    return shapes


def init_params(cfg: ModelConfig, seed: int) -> ParamStore:
    """Xavier-uniform weights, zero biases, unit norm gains, N(0, 0.02) queries."""
    rng = np.random.default_rng(seed)
    params: ParamStore = {}
    for name, shape, kind in _param_shapes(cfg):
        if kind == "xavier":
            if len(shape) == 4:
                o, c, k, _ = shape
                fan_in, fan_out = c * k * k, o * k * k
            else:
                fan_in, fan_out = shape
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-bound, bound, shape)
        elif kind == "query":
            data = rng.normal(0.0, 0.02, shape)
        elif kind == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = nc.Tensor(data, requires_grad=True, name=name)
    return params


def copy_params(params: ParamStore, requires_grad: bool | None = None) -> ParamStore:
    return {k: nc.Tensor(v.data.copy(), requires_grad=v.requires_grad if requires_grad is None else requires_grad,
                         dtype=v.dtype, name=k)
            for k, v in params.items()}


def check_same_layout(a: ParamStore, b: ParamStore) -> None:
    if list(a) != list(b):
        raise ValueError(f"parameter names differ: {sorted(set(a) ^ set(b))}")
    for k in a:
        if a[k].shape != b[k].shape:
            raise ValueError(f"shape mismatch for {k}: {a[k].shape} vs {b[k].shape}")


# ---------------------------------------------------------------- layers

def sine_position_encoding(h: int, w: int, d: int, temperature: float = 10000.0) -> np.ndarray:
    """(h*w, d) fixed encoding: first half encodes rows, second half columns."""
    half = d // 2
    scale = 2 * math.pi
    y = np.arange(1, h + 1, dtype=np.float64) / (h + 1e-6) * scale
    x = np.arange(1, w + 1, dtype=np.float64) / (w + 1e-6) * scale
    dim_t = temperature ** (2 * (np.arange(half) // 2) / half)
    py = y[:, None] / dim_t
    px = x[:, None] / dim_t
    py = np.where(np.arange(half) % 2 == 0, np.sin(py), np.cos(py))
    px = np.where(np.arange(half) % 2 == 0, np.sin(px), np.cos(px))
    grid = np.concatenate([np.repeat(py[:, None, :], w, axis=1), np.repeat(px[None, :, :], h, axis=0)], axis=-1)
    return grid.reshape(h * w, d)


def linear(p: ParamStore, prefix: str, x: nc.Tensor) -> nc.Tensor:
    return x @ p[f"{prefix}.weight"] + p[f"{prefix}.bias"]


def layer_norm(p: ParamStore, prefix: str, x: nc.Tensor) -> nc.Tensor:
    return nc.layernorm(x, p[f"{prefix}.weight"], p[f"{prefix}.bias"])


def attention(p: ParamStore, prefix: str, q_in: nc.Tensor, k_in: nc.Tensor, v_in: nc.Tensor,
              heads: int) -> nc.Tensor:
    b, tq, d = q_in.shape
    tk = k_in.shape[1]
    dh = d // heads
    q = linear(p, f"{prefix}.q", q_in).reshape(b, tq, heads, dh).transpose(0, 2, 1, 3)
    k = linear(p, f"{prefix}.k", k_in).reshape(b, tk, heads, dh).transpose(0, 2, 3, 1)
    v = linear(p, f"{prefix}.v", v_in).reshape(b, tk, heads, dh).transpose(0, 2, 1, 3)
    weights = nc.softmax((q @ k) * (1.0 / math.sqrt(dh)), axis=-1)
    out = (weights @ v).transpose(0, 2, 1, 3).reshape(b, tq, d)
    return linear(p, f"{prefix}.o", out)


def mlp(p: ParamStore, prefix: str, x: nc.Tensor, layers: int = 3) -> nc.Tensor:
    for i in range(1, layers):
        x = nc.relu(linear(p, f"{prefix}.fc{i}", x))
    return linear(p, f"{prefix}.fc{layers}", x)


def class_head(p: ParamStore, seq: nc.Tensor) -> nc.Tensor:
    out = mlp(p, "head.cls", seq)
    return out.reshape(out.shape[:-1])


def box_head(p: ParamStore, seq: nc.Tensor) -> nc.Tensor:
    return nc.sigmoid(mlp(p, "head.box", seq))


def project_head(p: ParamStore, seq: nc.Tensor) -> nc.Tensor:
    return mlp(p, "head.proj", seq)


# ---------------------------------------------------------------- network

def encode(p: ParamStore, images, cfg: ModelConfig) -> tuple[nc.Tensor, nc.Tensor]:
    """Stem + encoder. Returns (memory (B, T, D), positional encoding (T, D))."""
    dtype = p["query_embed"].dtype
    x = np.asarray(images)
    if x.ndim == 3:
        x = x[None]
    expected = (3, cfg.image_size, cfg.image_size)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ValueError(f"expected images of shape (B, {expected[0]}, {expected[1]}, {expected[2]}), got {x.shape}")
    x = nc.Tensor(x, dtype=dtype)
    h = nc.relu(nc.conv2d(x, p["stem.conv1.weight"], p["stem.conv1.bias"], stride=2, padding=1))
    h = nc.relu(nc.conv2d(h, p["stem.conv2.weight"], p["stem.conv2.bias"], stride=2, padding=1))
    b, d, s, _ = h.shape
    g = cfg.grid
    h = h.reshape(b, d, g, s // g, g, s // g).mean(axis=(3, 5))
    tokens = h.reshape(b, d, g * g).transpose(0, 2, 1)
    pos = nc.Tensor(sine_position_encoding(g, g, d), dtype=dtype)
    # post-norm layers; positions enter queries and keys only
    x = tokens
    for l in range(cfg.enc_layers):
        qk = x + pos
        x = layer_norm(p, f"enc.{l}.norm1", x + attention(p, f"enc.{l}.self_attn", qk, qk, x, cfg.heads))
        x = layer_norm(p, f"enc.{l}.norm2", x + mlp(p, f"enc.{l}.ffn", x, layers=2))
    return x, pos


def decode(p: ParamStore, memory: nc.Tensor, pos: nc.Tensor, cfg: ModelConfig) -> nc.Tensor:
    b = memory.shape[0]
    q = nc.Tensor(np.zeros((b, cfg.queries, cfg.d_model)), dtype=memory.dtype) + p["query_embed"]
    keys = memory + pos
    for l in range(cfg.dec_layers):
        q = layer_norm(p, f"dec.{l}.norm1", q + attention(p, f"dec.{l}.self_attn", q, q, q, cfg.heads))
        q = layer_norm(p, f"dec.{l}.norm2", q + attention(p, f"dec.{l}.cross_attn", q, keys, memory, cfg.heads))
        q = layer_norm(p, f"dec.{l}.norm3", q + mlp(p, f"dec.{l}.ffn", q, layers=2))
    return q


def forward(params: ParamStore, images, cfg: ModelConfig) -> SequencePrediction:
    """images: (B, 3, S, S) or (3, S, S) normalized arrays -> batched predictions."""
    memory, pos = encode(params, images, cfg)
    seq = decode(params, memory, pos, cfg)
    return SequencePrediction(class_head(params, seq), box_head(params, seq), project_head(params, seq))
