"""The pre-training loop: views, both forward passes, both matchings, loss,
clipped Adam step on the online branch, EMA step on the momentum branch.

Every random draw is keyed by (seed, step, image id), so a run is a pure
function of its config and a resumed run replays the uninterrupted one.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from . import numcore as nc
from .augment import AugmentConfig, Geometry, make_views, map_boxes, normalize
from .geometry import pairwise_iou
from .masking import MaskConfig
from .model import ModelConfig, ParamStore, copy_params, forward, init_params
from .objective import (MATCHERS, SIMILARITIES, EmaConfig, LossWeights, branch_assignment, ema_update,
                        rps_assignment, total_loss)
from .ppm import read_ppm
from .proposals import MODES, cached_proposals, proposal_source
from .seeding import derive_seed
from .synth import generate_synthetic, read_gt  # noqa: F401  (re-exported)

log = logging.getLogger("seqco")


# ---------------------------------------------------------------- config

@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 0.1

    def __post_init__(self):
        if self.lr <= 0 or self.eps <= 0 or self.clip_norm <= 0:
            raise ValueError("lr, eps and clip_norm must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")


@dataclass
class PretrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    ema: EmaConfig = field(default_factory=EmaConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    proposal_mode: str = "selective_search"
    proposal_top: int = 30
    matcher: str = "hungarian"
    similarity: str = "l2"
    steps: int = 300
    batch_size: int = 4
    seed: int = 0
    precision: str = "float32"
    workers: int = 0
    dataset: str = "data"
    checkpoint: str = "run/checkpoint.seqc"
    metrics: str = "run/metrics.ndjson"
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.proposal_mode not in MODES:
            raise ValueError(f"unknown proposal_mode {self.proposal_mode!r}; expected one of {MODES}")
        if self.matcher not in MATCHERS:
            raise ValueError(f"unknown matcher {self.matcher!r}; expected one of {MATCHERS}")
        if self.similarity not in SIMILARITIES:
            raise ValueError(f"unknown similarity {self.similarity!r}; expected one of {SIMILARITIES}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.augment.output_size != self.model.image_size:
            raise ValueError(f"augment.output_size {self.augment.output_size} must equal "
                             f"model.image_size {self.model.image_size}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> PretrainConfig:
        return _build(cls, data, "config")


_SECTIONS = {"model": ModelConfig, "weights": LossWeights, "ema": EmaConfig, "mask": MaskConfig,
             "augment": AugmentConfig, "optimizer": OptimizerConfig}


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ValueError(f"{where} must be a JSON object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ValueError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = {}
    for k, v in data.items():
        if cls is PretrainConfig and k in _SECTIONS:
            v = _build(_SECTIONS[k], v, f"{where}.{k}")
        kwargs[k] = v
    return cls(**kwargs)


def load_config(path) -> PretrainConfig:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON: {exc}") from None
    return PretrainConfig.from_dict(data)


# ---------------------------------------------------------------- data

@dataclass
class Scene:
    image_id: int
    path: Path
    image: np.ndarray            # (3, H, W) in [0, 1]
    gt_boxes: np.ndarray | None  # (K, 4) source-normalized
    proposals: np.ndarray        # (P, 4) source-normalized, best first


def load_dataset(path, mode: str = "ground_truth", top: int = 30, seed: int = 0,
                 use_cache: bool = True) -> list[Scene]:
    """Every ``*.ppm`` in ``path`` (sorted by name) with its proposals."""
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    files = sorted(root.glob("*.ppm"))
    if not files:
        raise ValueError(f"no .ppm images in {root}")
    scenes = []
    for i, f in enumerate(files):
        img = read_ppm(f)
        gt = read_gt(f)
        if mode == "ground_truth":
            if gt is None:
                raise FileNotFoundError(f"ground_truth mode needs {f.stem}.gt.json next to {f}")
            props = gt
        else:
            pseed = derive_seed(seed, "proposals", i)

            def compute(img=img, gt=gt, pseed=pseed):
                return proposal_source(mode, img, gt, k=top, seed=pseed)

            if use_cache:
                props = cached_proposals(f, mode, compute, top=top, seed=pseed)
            else:
                props = np.asarray([p.box for p in compute()], dtype=np.float64).reshape(-1, 4)
        scenes.append(Scene(i, f, img, gt, np.asarray(props, dtype=np.float64).reshape(-1, 4)))
    return scenes


def batch_indices(step: int, n: int, batch_size: int, seed: int) -> np.ndarray:
    """Scene indices for a 1-based step: a fresh seeded permutation per epoch, last partial batch dropped."""
    b = min(batch_size, n)
    per_epoch = n // b
    epoch, j = divmod(step - 1, per_epoch)
    perm = np.random.default_rng(derive_seed(seed, "epoch", epoch)).permutation(n)
    return perm[j * b:(j + 1) * b]


@dataclass
class Sample:
    view1: np.ndarray      # momentum input
    view2: np.ndarray      # online input
    proposals: np.ndarray  # view-normalized, at most N
    geometry: Geometry


def build_sample(scene: Scene, step: int, cfg: PretrainConfig) -> Sample:
    seed = derive_seed(cfg.seed, step, scene.image_id)
    pair = make_views(scene.image, seed, cfg.mask, cfg.augment)
    props = map_boxes(scene.proposals, pair.geometry, cfg.augment.min_visibility)[:cfg.model.queries]
    return Sample(pair.view1, pair.view2, props, pair.geometry)


# ---------------------------------------------------------------- state

@dataclass
class TrainState:
    online: ParamStore
    momentum: ParamStore
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    step: int = 0        # last step index processed (successful or skipped)
    updates: int = 0     # optimizer updates applied; drives Adam bias correction


def init_state(cfg: PretrainConfig) -> TrainState:
    with nc.precision(cfg.precision):
        online = init_params(cfg.model, derive_seed(cfg.seed, "init"))
    momentum = copy_params(online, requires_grad=False)
    zeros = {k: np.zeros_like(v.data) for k, v in online.items()}
    return TrainState(online, momentum, zeros, {k: z.copy() for k, z in zeros.items()})


def save_state(state: TrainState, path) -> None:
    tensors = {}
    for prefix, store in (("online", state.online), ("momentum", state.momentum)):
        tensors.update({f"{prefix}/{k}": v.data for k, v in store.items()})
    tensors.update({f"adam_m/{k}": v for k, v in state.adam_m.items()})
    tensors.update({f"adam_v/{k}": v for k, v in state.adam_v.items()})
    tensors["meta/step"] = np.array([state.step], dtype=np.float32)
    tensors["meta/updates"] = np.array([state.updates], dtype=np.float32)
    checkpoint.save(path, tensors)


def load_state(path, cfg: PretrainConfig) -> TrainState:
    """Restore a state saved by :func:`save_state` for the same model config."""
    raw = checkpoint.load(path)
    template = init_state(cfg)
    dtype = template.online[next(iter(template.online))].dtype
    stores = {}
    for prefix in ("online", "momentum", "adam_m", "adam_v"):
        part = {k[len(prefix) + 1:]: v for k, v in raw.items() if k.startswith(prefix + "/")}
        if list(part) != list(template.online):
            raise checkpoint.CheckpointError(f"{path}: {prefix} tensors do not match the model config")
        for k, v in part.items():
            if v.shape != template.online[k].shape:
                raise checkpoint.CheckpointError(f"{path}: shape mismatch for {prefix}/{k}")
        stores[prefix] = part
    if "meta/step" not in raw or "meta/updates" not in raw:
        raise checkpoint.CheckpointError(f"{path}: missing step counters")
    online = {k: nc.Tensor(v, requires_grad=True, dtype=dtype, name=k) for k, v in stores["online"].items()}
    momentum = {k: nc.Tensor(v, dtype=dtype, name=k) for k, v in stores["momentum"].items()}
    return TrainState(online, momentum,
                      {k: v.astype(dtype) for k, v in stores["adam_m"].items()},
                      {k: v.astype(dtype) for k, v in stores["adam_v"].items()},
                      int(raw["meta/step"][0]), int(raw["meta/updates"][0]))


# ---------------------------------------------------------------- one step

class NonFiniteLoss(FloatingPointError):
    pass


def _stack(arrays, dtype) -> np.ndarray:
    return np.stack(arrays).astype(dtype)


def compute_loss(state: TrainState, samples: list[Sample], cfg: PretrainConfig):
    """Both forward passes and the batch-mean loss. Returns (loss, per-image diagnostics, online preds)."""
    dtype = state.online["query_embed"].dtype
    with nc.no_grad():
        mom = forward(state.momentum, _stack([s.view1 for s in samples], dtype), cfg.model)
    onl = forward(state.online, _stack([s.view2 for s in samples], dtype), cfg.model)
    for name, out in (("momentum", mom), ("online", onl)):
        # matching cannot run on NaN costs, so catch them before it does
        if not all(np.all(np.isfinite(t.data)) for t in (out.class_logits, out.boxes, out.projections)):
            raise NonFiniteLoss(f"non-finite {name} predictions")
    losses, diags = [], []
    for b, s in enumerate(samples):
        loss, diag = total_loss(onl[b], mom[b], s.proposals, cfg.weights, cfg.matcher, cfg.similarity)
        losses.append(loss)
        diags.append(diag)
    total = losses[0]
    for loss in losses[1:]:
        total = total + loss
    return total * (1.0 / len(samples)), diags, onl


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; returns the norm before clipping."""
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for k in grads:
            grads[k] = (grads[k] * scale).astype(grads[k].dtype)
    return norm


def adam_update(state: TrainState, grads: dict[str, np.ndarray], opt: OptimizerConfig) -> None:
    state.updates += 1
    t = state.updates
    c1 = 1.0 - opt.beta1 ** t
    c2 = 1.0 - opt.beta2 ** t
    for k, p in state.online.items():
        g = grads[k]
        m = state.adam_m[k] = opt.beta1 * state.adam_m[k] + (1.0 - opt.beta1) * g
        v = state.adam_v[k] = opt.beta2 * state.adam_v[k] + (1.0 - opt.beta2) * g * g
        p.data = (p.data - opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)).astype(p.dtype)


def train_step(state: TrainState, samples: list[Sample], cfg: PretrainConfig, step: int) -> dict:
    """Apply one update in place and return its metrics record.

    On a non-finite loss or gradient nothing in ``state`` changes and
    :class:`NonFiniteLoss` is raised.
    """
    if not samples:
        raise ValueError("empty batch")
    loss, diags, onl = compute_loss(state, samples, cfg)
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteLoss(f"step {step}: loss is {value}")
    leaf_grads = nc.backward(loss)
    grads = {}
    for k, p in state.online.items():
        g = leaf_grads.get(p)
        grads[k] = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.dtype)
        p.grad = None
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise NonFiniteLoss(f"step {step}: non-finite gradient")
    grad_norm = clip_grads(grads, cfg.optimizer.clip_norm)
    adam_update(state, grads, cfg.optimizer)
    ema_update(state.momentum, state.online, cfg.ema.beta)
    state.step = step
    proj = onl.projections.data.astype(np.float64)
    return {
        "step": step,
        "loss_total": value,
        "loss_focal": float(np.mean([d.focal for d in diags])),
        "loss_box": float(np.mean([d.box for d in diags])),
        "loss_ssl": float(np.mean([d.loss_ssl for d in diags])),
        "loss_rps": float(np.mean([d.loss_rps for d in diags])),
        "n_matched": int(sum(d.n_matched for d in diags)),
        "branch_cost": float(np.mean([d.branch_cost for d in diags])),
        "proj_var": float(proj.reshape(-1, proj.shape[-1]).var(axis=0).mean()),
        "grad_norm": grad_norm,
    }


# ---------------------------------------------------------------- loop

def _prepare_paths(cfg: PretrainConfig) -> None:
    if not Path(cfg.dataset).is_dir():
        raise FileNotFoundError(f"dataset directory not found: {cfg.dataset}")
    for p in (cfg.checkpoint, cfg.metrics):
        Path(p).parent.mkdir(parents=True, exist_ok=True)


def run_pretrain(cfg: PretrainConfig, resume=None, scenes: list[Scene] | None = None,
                 stop_at: int | None = None) -> TrainState:
    """Train from scratch (or from ``resume``) up to ``stop_at`` (default ``cfg.steps``).

    Metrics go to ``cfg.metrics`` as NDJSON, one record per step; a fresh run
    truncates the file, a resumed run appends. The final state is saved to
    ``cfg.checkpoint``.
    """
    _prepare_paths(cfg)
    if scenes is None:
        scenes = load_dataset(cfg.dataset, cfg.proposal_mode, cfg.proposal_top, cfg.seed)
    last = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    with nc.precision(cfg.precision):
        state = load_state(resume, cfg) if resume else init_state(cfg)
    mode = "a" if resume else "w"
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 0 else None
    try:
        with open(cfg.metrics, mode) as out, nc.precision(cfg.precision):
            for step in range(state.step + 1, last + 1):
                batch = [scenes[i] for i in batch_indices(step, len(scenes), cfg.batch_size, cfg.seed)]
                if pool is None:
                    samples = [build_sample(s, step, cfg) for s in batch]
                else:
                    samples = list(pool.map(lambda s, step=step: build_sample(s, step, cfg), batch))
                try:
                    record = train_step(state, samples, cfg, step)
                except NonFiniteLoss as exc:
                    log.error("%s; update skipped", exc)
                    record = {"step": step, "error": str(exc)}
                    state.step = step
                out.write(json.dumps(record) + "\n")
                out.flush()
                if "error" not in record and (step % 10 == 0 or step == last):
                    log.info("step %d/%d loss %.4f rps %.4f ssl %.4f", step, cfg.steps,
                             record["loss_total"], record["loss_rps"], record["loss_ssl"])
                if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    save_state(state, cfg.checkpoint)
    finally:
        if pool is not None:
            pool.shutdown()
    save_state(state, cfg.checkpoint)
    return state


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------- evaluation

def evaluate_matching(state: TrainState, scenes: list[Scene], cfg: PretrainConfig,
                      seed: int = 0) -> dict:
    """How well the online branch finds objects and agrees with the momentum branch.

    Per scene: GT recall (fraction of GT boxes whose Hungarian-matched query
    overlaps it at IoU >= 0.5, on the unaugmented image), mean IoU of those
    matches, mean foreground probability of the matched queries, and the mean
    L2 distance between branch-matched projection pairs on a seeded view pair.
    """
    if not scenes:
        raise ValueError("empty dataset")
    ident = AugmentConfig.identity(cfg.model.image_size)
    dtype = state.online["query_embed"].dtype
    per_scene = []
    with nc.no_grad():
        for scene in scenes:
            if scene.image.shape[1:] != (cfg.model.image_size, cfg.model.image_size):
                raise ValueError(f"{scene.path}: image size {scene.image.shape[1:]} does not match the model")
            pred = forward(state.online, normalize(scene.image, ident)[None].astype(dtype), cfg.model)[0]
            row = {"image": scene.path.name}
            gt = scene.gt_boxes
            if gt is not None and len(gt):
                a = rps_assignment(pred, gt[:cfg.model.queries])
                boxes = pred.boxes.data.astype(np.float64)
                ious = np.array([pairwise_iou(boxes[q], gt[t])[0, 0] for t, q in a.pairs])
                probs = 1.0 / (1.0 + np.exp(-pred.class_logits.data.astype(np.float64)[list(a.queries)]))
                row.update(recall=float(np.mean(ious >= 0.5)), mean_iou=float(ious.mean()),
                           fg_prob=float(probs.mean()))
            sample = build_sample(scene, 0, dataclasses.replace(cfg, seed=seed))
            mom = forward(state.momentum, sample.view1[None].astype(dtype), cfg.model)[0]
            onl = forward(state.online, sample.view2[None].astype(dtype), cfg.model)[0]
            a, _ = branch_assignment(onl, mom, cfg.matcher)
            zo = onl.projections.data.astype(np.float64)[list(a.queries)]
            zm = mom.projections.data.astype(np.float64)
            row["pair_l2"] = float(np.linalg.norm(zo - zm, axis=1).mean())
            per_scene.append(row)

    def agg(key):
        vals = [r[key] for r in per_scene if key in r]
        return float(np.mean(vals)) if vals else None

    return {"scenes": len(per_scene), "recall": agg("recall"), "mean_iou": agg("mean_iou"),
            "fg_prob": agg("fg_prob"), "pair_l2": agg("pair_l2"), "per_scene": per_scene}
