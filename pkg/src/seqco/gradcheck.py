"""Finite-difference check of the full training loss through a tiny model.

Both matchings are computed once at the unperturbed parameters and then held
fixed, so every perturbed evaluation differentiates the same smooth function.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .model import ModelConfig, copy_params, forward, init_params
from .objective import LossWeights, branch_assignment, rps_assignment, total_loss

TINY = ModelConfig(image_size=32, d_model=16, heads=2, enc_layers=1, dec_layers=1, queries=4,
                   proj_dim=8, ffn_hidden=16)


@dataclass
class GradcheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: tuple[int, ...]
    checked: int

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error <= tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """|a - n| / max(1, |n|): relative for large gradients, absolute below 1."""
    return np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))


def build_problem(seed: int = 0, cfg: ModelConfig = TINY, n_proposals: int = 2):
    """Online/momentum params, two views and proposals for one image, in float64."""
    rng = np.random.default_rng(seed)
    with nc.precision(np.float64):
        online = init_params(cfg, seed)
        momentum = copy_params(online, requires_grad=False)
    for t in momentum.values():
        t.data = t.data + rng.normal(0.0, 0.01, t.shape)
    size = cfg.image_size
    view1 = rng.normal(0.0, 1.0, (3, size, size))
    view2 = rng.normal(0.0, 1.0, (3, size, size))
    centers = rng.uniform(0.3, 0.7, (n_proposals, 2))
    sides = rng.uniform(0.15, 0.4, (n_proposals, 2))
    proposals = np.concatenate([centers, sides], axis=1)
    return online, momentum, view1, view2, proposals


def gradcheck(seed: int = 0, cfg: ModelConfig = TINY, h: float = 1e-5, n_proposals: int = 2,
              weights: LossWeights | None = None, params: list[str] | None = None) -> GradcheckReport:
    """Compare backprop against central differences for every online parameter entry."""
    online, momentum, view1, view2, proposals = build_problem(seed, cfg, n_proposals)
    with nc.precision(np.float64):
        with nc.no_grad():
            mom = forward(momentum, view1[None], cfg)[0]
            probe = forward(online, view2[None], cfg)[0]
        fixed = (rps_assignment(probe, proposals), branch_assignment(probe, mom)[0])

        def loss_fn() -> nc.Tensor:
            pred = forward(online, view2[None], cfg)[0]
            return total_loss(pred, mom, proposals, weights, assignments=fixed)[0]

        grads = nc.backward(loss_fn())
        worst = (0.0, "", ())
        checked = 0
        for name in params or list(online):
            t = online[name]
            analytic = grads.get(t, np.zeros_like(t.data))
            numeric = nc.numerical_gradient(loss_fn, t, h)
            err = relative_error(analytic, numeric)
            checked += err.size
            i = np.unravel_index(int(np.argmax(err)), err.shape)
            if err[i] > worst[0] or not worst[1]:
                worst = (float(err[i]), name, tuple(int(v) for v in i))
    return GradcheckReport(worst[0], worst[1], worst[2], checked)
