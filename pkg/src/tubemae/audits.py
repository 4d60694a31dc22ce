"""Finite-difference gradient audits and the Chamfer loop oracle, shared by the CLI and tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .backbone import ModelConfig
from .dataio import default_classes, generate_video
from .diffcore import Tensor
from .geometry import TubeConfig, build_tubes, collate_tubes
from .model import Pretrainer, grid_for, plans_for
from .objectives import (LossConfig, NegativeQueue, ProjectionHeads, chamfer_loss,
                         chamfer_reference, global_loss, latent_loss, motion_loss)

GRAD_TOLERANCE = 1e-4


@dataclass(frozen=True)
class AuditRow:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tolerance)


def _unit_rows(rng, shape):
    x = rng.normal(size=shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _head_params(module) -> list[Tensor]:
    return [p for _, p in module.named_parameters()]


def _tiny_pretrainer(seed: int, enabled) -> tuple[Pretrainer, object, list, NegativeQueue]:
    tube = TubeConfig(r_s=0.8, r_t=3, n_neighbors=4, spatial_stride=8, temporal_stride=2)
    cfg = ModelConfig(width=16, depth=1, heads=2, decoder_depth=1, decoder_heads=2, mlp_ratio=2)
    frames, points = 4, 16
    model = Pretrainer(cfg, tube, grid_for(tube, frames, points),
                       LossConfig(queue_size=4, enabled=tuple(enabled)), seed=seed)
    kinds = default_classes()
    tubes = collate_tubes([build_tubes(generate_video(kinds[i], frames, points, seed + i), tube, seed + i)
                           for i in range(2)])
    plans = plans_for(tubes, "frame", 0.5, [seed, seed + 1])
    queue = NegativeQueue(4, cfg.width, dtype=np.float64)
    queue.push(_unit_rows(np.random.default_rng(seed), (3, cfg.width)))
    return model, tubes, plans, queue


def gradient_suite(seed: int = 0, width: int = 16) -> list[AuditRow]:
    """Backprop vs central differences for each objective and for their sum, in float64."""
    rng = np.random.default_rng(seed)
    rows = []
    with dc.precision(np.float64):
        p = Tensor(rng.normal(size=(2, 2, 3, 5, 3)), requires_grad=True)
        g = rng.normal(size=(2, 2, 3, 6, 3))
        rows.append(AuditRow("geo", dc.gradcheck(lambda: chamfer_loss(p, g), [p]), GRAD_TOLERANCE))

        heads = ProjectionHeads(width, rng)
        z_lat = Tensor(rng.normal(size=(2, 4, width)), requires_grad=True)
        z = rng.normal(size=(2, 4, width))
        rows.append(AuditRow("lat", dc.gradcheck(lambda: latent_loss(z_lat, z, heads.latent),
                                                 [z_lat, *_head_params(heads.latent)]),
                             GRAD_TOLERANCE))

        h_v = Tensor(rng.normal(size=(2, 4, width)), requires_grad=True)
        h = rng.normal(size=(2, 4, width))
        for mode in ("standard-inclusive", "literal-exclusive"):
            cfg = LossConfig(motion_denominator=mode)
            err = dc.gradcheck(lambda: motion_loss(h_v, h, heads, cfg),
                               [h_v, *_head_params(heads.motion_fwd), *_head_params(heads.motion_bwd)])
            rows.append(AuditRow(f"motion[{mode}]", err, GRAD_TOLERANCE))

        q_hat = Tensor(rng.normal(size=(2, width)), requires_grad=True)
        q = _unit_rows(rng, (2, width))
        negatives = _unit_rows(rng, (3, width))
        cfg = LossConfig()
        rows.append(AuditRow("global", dc.gradcheck(lambda: global_loss(q_hat, q, negatives, heads, cfg),
                                                    [q_hat, *_head_params(heads.global_)]),
                             GRAD_TOLERANCE))

        model, tubes, plans, queue = _tiny_pretrainer(seed, ("geo", "lat", "global", "motion"))
        params = model.trainable()
        picked = [params[n] for n in ("decoder.geo_token", "decoder.lat_tokens", "encoders.online.p4d.W_d",
                                      "point_head.bias", "heads.global_.w2", "heads.motion_fwd.b1")]
        err = dc.gradcheck(lambda: model.forward(tubes, plans, queue).report.total_tensor, picked)
        rows.append(AuditRow("total", err, GRAD_TOLERANCE))
    return rows


def chamfer_oracle_suite(seed: int = 0, pairs: int = 200, max_points: int = 32,
                         tolerance: float = 1e-6) -> list[AuditRow]:
    """Vectorized Chamfer vs the double-loop oracle on random set pairs, plus exact symmetry/identity."""
    rng = np.random.default_rng(seed)
    worst = sym = ident = 0.0
    with dc.precision(np.float64):
        for _ in range(pairs):
            a = rng.normal(size=(int(rng.integers(1, max_points + 1)), 3))
            b = rng.normal(size=(int(rng.integers(1, max_points + 1)), 3))
            ab = chamfer_loss(Tensor(a[None]), b[None]).item()
            ba = chamfer_loss(Tensor(b[None]), a[None]).item()
            worst = max(worst, abs(ab - chamfer_reference(a, b)))
            sym = max(sym, abs(ab - ba))
            ident = max(ident, abs(chamfer_loss(Tensor(a[None]), a[None]).item()))
    # symmetry and identity must hold exactly, so their tolerance is the smallest positive float
    exact = np.finfo(np.float64).tiny
    return [AuditRow("chamfer-vs-loop", worst, tolerance),
            AuditRow("chamfer-symmetry", sym, exact),
            AuditRow("chamfer-identity", ident, exact)]
