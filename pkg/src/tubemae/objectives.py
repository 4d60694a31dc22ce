"""Reconstruction and alignment objectives, the negative queue and the loss total."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ContractError
from .params import Module, trunc_normal, zeros

MOTION_MODES = ("standard-inclusive", "literal-exclusive")
LOSS_NAMES = ("geo", "lat", "motion", "global")

# objective subsets of the pretext-task ablation; A1 drops the latent objective only
PRESETS = {
    "B1": ("geo",),
    "B2": ("geo", "lat"),
    "B3": ("geo", "motion"),
    "B4": ("geo", "lat", "motion"),
    "B5": ("geo", "lat", "global"),
    "B6": ("lat", "global", "motion"),
    "B7": ("geo", "lat", "global", "motion"),
    "A1": ("geo", "global", "motion"),
    "segmentation": ("geo", "lat", "motion"),
}


class MLP(Module):
    def __init__(self, width: int, rng: np.random.Generator, hidden: int | None = None):
        hidden = hidden or width
        self.w1, self.b1 = trunc_normal(rng, (width, hidden)), zeros(hidden)
        self.w2, self.b2 = trunc_normal(rng, (hidden, width)), zeros(width)

    def __call__(self, x: Tensor) -> Tensor:
        return dc.linear(dc.gelu(dc.linear(x, self.w1, self.b1)), self.w2, self.b2)


class ProjectionHeads(Module):
    def __init__(self, width: int, rng: np.random.Generator):
        self.latent = MLP(width, rng)
        self.motion_fwd = MLP(width, rng)
        self.motion_bwd = MLP(width, rng)
        self.global_ = MLP(width, rng)


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.1
    queue_size: int = 16
    motion_denominator: str = "standard-inclusive"
    enabled: tuple[str, ...] = ("geo", "lat", "global", "motion")

    def __post_init__(self):
        if not self.tau > 0:
            raise ContractError("temperature must be positive")
        if self.motion_denominator not in MOTION_MODES:
            raise ContractError(f"unknown motion denominator {self.motion_denominator!r}")
        unknown = set(self.enabled) - set(LOSS_NAMES)
        if unknown:
            raise ContractError(f"unknown objectives {sorted(unknown)}")

    @classmethod
    def preset(cls, name: str, **kw) -> "LossConfig":
        return cls(enabled=PRESETS[name], **kw)


class NegativeQueue:
    """Fixed-capacity FIFO of unit-norm feature vectors."""

    def __init__(self, size: int, width: int, dtype=np.float32):
        self.size = size
        self.buffer = np.zeros((size, width), dtype=dtype)
        self.cursor = 0
        self.fill = 0

    def push(self, q: np.ndarray):
        q = np.asarray(q, dtype=self.buffer.dtype).reshape(-1, self.buffer.shape[1])
        norms = np.linalg.norm(q, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-4):
            raise ContractError("queue entries must be unit-normalized")
        if self.size == 0:
            return
        for row in q:
            self.buffer[self.cursor] = row
            self.cursor = (self.cursor + 1) % self.size
            self.fill = min(self.fill + 1, self.size)

    def entries(self) -> np.ndarray:
        """Current contents, oldest first."""
        if self.fill < self.size:
            return self.buffer[: self.fill].copy()
        return np.concatenate([self.buffer[self.cursor:], self.buffer[: self.cursor]])

    def __len__(self):
        return self.fill


def queue_push(queue: NegativeQueue, q: np.ndarray):
    queue.push(q)


def _as_tensor(x, like: Tensor) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=like.dtype)


def chamfer_loss(p_rec: Tensor, p_gt) -> Tensor:
    """Squared-distance Chamfer per frame set (..., r_t, n, 3), averaged over everything else."""
    p_gt = _as_tensor(p_gt, p_rec)
    if p_rec.shape[:-2] != p_gt.shape[:-2] or p_rec.shape[-1] != 3 or p_gt.shape[-1] != 3:
        raise ContractError(f"chamfer: incompatible sets {p_rec.shape} / {p_gt.shape}")
    n, m = p_rec.shape[-2], p_gt.shape[-2]
    if n == 0 or m == 0:
        raise ContractError("chamfer: empty point set")
    lead = p_rec.shape[:-2]
    x = dc.expand(dc.reshape(p_rec, lead + (n, 1, 3)), lead + (n, m, 3))
    y = dc.expand(dc.reshape(p_gt, lead + (1, m, 3)), lead + (n, m, 3))
    diff = x - y
    d2 = dc.sum(diff * diff, axis=-1)  # (..., n, m)
    fwd = dc.mean(dc.min(d2, axis=-1), axis=-1)
    bwd = dc.mean(dc.min(d2, axis=-2), axis=-1)
    return dc.mean(fwd + bwd)


def chamfer_reference(a: np.ndarray, b: np.ndarray) -> float:
    """Double loop over two point sets."""
    def directed(src, dst):
        total = 0.0
        for p in src:
            best = np.inf
            for q in dst:
                d = float(np.sum((np.asarray(p, float) - np.asarray(q, float)) ** 2))
                best = min(best, d)
            total += best
        return total / len(src)

    return directed(a, b) + directed(b, a)


def latent_loss(z_lat: Tensor, z, head: MLP) -> Tensor:
    z = dc.stop_gradient(_as_tensor(z, z_lat))
    if z_lat.shape != z.shape:
        raise ContractError(f"latent: {z_lat.shape} vs target {z.shape}")
    cos = dc.cosine_similarity(head(z_lat), z, axis=-1)
    return 1.0 - dc.mean(cos)


def pool_frames(z: Tensor, frame_ids: np.ndarray, num_frames: int) -> Tensor:
    """Per-frame max over tokens: (B, T, C) with frame ids (B, T) -> (B, L', C).

    A frame without any token pools to the zero vector.
    """
    B, T, C = z.shape
    frame_ids = np.asarray(frame_ids)
    groups = [[np.flatnonzero(frame_ids[b] == f) for f in range(num_frames)] for b in range(B)]
    width = np.max([[len(g) for g in row] for row in groups])
    width = int(np.maximum(width, 1))
    zero_row = B * T
    idx = np.full((B, num_frames, width), zero_row, dtype=np.int64)
    for b in range(B):
        for f, g in enumerate(groups[b]):
            if len(g):
                # repeating a member does not change a max
                idx[b, f] = b * T + np.resize(g, width)
    flat = dc.concat([dc.reshape(z, (B * T, C)), Tensor(np.zeros((1, C)), dtype=z.dtype)], axis=0)
    return dc.max(dc.take(flat, idx, axis=0), axis=2)


def pool_grid_frames(z: Tensor, grid: tuple[int, int]) -> Tensor:
    B, _, C = z.shape
    return dc.max(dc.reshape(z, (B, grid[0], grid[1], C)), axis=2)


def _infonce_rows(logits: Tensor, positive: np.ndarray, mode: str) -> Tensor:
    """Per-row loss for logits (B, P, K) with positive column indices (P,)."""
    B, P, K = logits.shape
    pos_idx = np.broadcast_to(positive[None, :, None], (B, P, 1))
    pos = dc.reshape(dc.take_along(logits, pos_idx, axis=-1), (B, P))
    if mode == "standard-inclusive":
        denom = dc.logsumexp(logits, axis=-1)
    else:
        mask = np.zeros((B, P, K), dtype=logits.dtype)
        mask[:, np.arange(P), positive] = -1e30
        denom = dc.logsumexp(logits + Tensor(mask, dtype=logits.dtype), axis=-1)
    return denom - pos


def motion_loss(h_v: Tensor, h, heads: ProjectionHeads, cfg: LossConfig) -> Tensor:
    """Bidirectional frame alignment: forward pairs (i, i-1), backward pairs (i, i+1)."""
    h = dc.stop_gradient(_as_tensor(h, h_v))
    B, Lp, C = h_v.shape
    if Lp < 2:
        raise ContractError("motion alignment needs at least two frames")
    if h.shape != h_v.shape:
        raise ContractError(f"motion: {h_v.shape} vs {h.shape}")
    targets = dc.transpose(dc.normalize(h), (0, 2, 1))  # (B, C, L')
    rows = np.arange(Lp - 1)
    terms = []
    for head, sl, positive in (
        (heads.motion_fwd, slice(1, Lp), rows),  # frame i+1 predicts frame i
        (heads.motion_bwd, slice(0, Lp - 1), rows + 1),  # frame i predicts frame i+1
    ):
        pred = dc.normalize(head(h_v[:, sl]))
        logits = dc.scale(dc.matmul(pred, targets), 1.0 / cfg.tau)
        terms.append(dc.mean(_infonce_rows(logits, positive, cfg.motion_denominator)))
    return 0.5 * (terms[0] + terms[1])


def motion_reference(h_v: np.ndarray, h: np.ndarray, fwd, bwd, tau: float,
                     mode: str = "standard-inclusive") -> float:
    """Per-pair softmax loop; ``fwd``/``bwd`` map a (C,) vector to its projection."""
    def unit(v):
        return v / (np.linalg.norm(v) + 1e-8)

    B, Lp, _ = h_v.shape
    out = []
    for direction, proj in ((-1, fwd), (1, bwd)):
        losses = []
        for b in range(B):
            for i in range(Lp):
                j = i + direction
                if not 0 <= j < Lp:
                    continue
                p = unit(proj(h_v[b, i]))
                logits = np.array([p @ unit(h[b, k]) / tau for k in range(Lp)])
                cands = [k for k in range(Lp) if mode == "standard-inclusive" or k != j]
                m = logits[cands].max()
                lse = m + np.log(np.sum(np.exp(logits[cands] - m)))
                losses.append(lse - logits[j])
        out.append(np.mean(losses))
    return 0.5 * (out[0] + out[1])


def pool_global(z: Tensor) -> Tensor:
    """Max over all token positions, then unit-normalized: (B, T, C) -> (B, C)."""
    return dc.normalize(dc.max(z, axis=1))


def global_loss(q_hat: Tensor, q, queue: np.ndarray, heads: ProjectionHeads,
                cfg: LossConfig) -> Tensor:
    """InfoNCE of each video's projection against its momentum feature plus queued negatives."""
    q = dc.stop_gradient(_as_tensor(q, q_hat))
    B, C = q_hat.shape
    g = dc.normalize(heads.global_(q_hat))
    pos = dc.reshape(dc.sum(g * q, axis=-1), (B, 1))
    queue = np.asarray(queue)
    if len(queue):
        negs = dc.linear(g, Tensor(np.ascontiguousarray(queue.T), dtype=q_hat.dtype))
        logits = dc.concat([pos, negs], axis=1)
    else:
        logits = pos
    logits = dc.scale(logits, 1.0 / cfg.tau)
    picked = dc.reshape(dc.log_softmax(logits, axis=-1)[:, 0:1], (B,))
    return -dc.mean(picked)


@dataclass
class LossReport:
    geo: float = 0.0
    lat: float = 0.0
    motion: float = 0.0
    global_: float = 0.0
    total: float = 0.0
    total_tensor: Tensor | None = field(default=None, repr=False, compare=False)

    def as_dict(self) -> dict[str, float]:
        return {"geo": self.geo, "lat": self.lat, "motion": self.motion,
                "global": self.global_, "total": self.total}


def total_loss(components: dict[str, Tensor], enabled=LOSS_NAMES) -> LossReport:
    """Unweighted sum of the enabled objectives."""
    report = LossReport()
    total = None
    for name in LOSS_NAMES:
        if name not in enabled or name not in components:
            continue
        t = components[name]
        setattr(report, "global_" if name == "global" else name, t.item())
        total = t if total is None else total + t
    if total is None:
        total = Tensor(0.0)
    report.total_tensor = total
    report.total = total.item()
    return report


def disentanglement_probe(z_geo, z_lat, masked_index: np.ndarray | None = None) -> float:
    """Mean |cos| between geometry-pass features and latent-pass features at the same positions."""
    zg = z_geo.data if isinstance(z_geo, Tensor) else np.asarray(z_geo)
    zl = z_lat.data if isinstance(z_lat, Tensor) else np.asarray(z_lat)
    if masked_index is not None:
        zl = np.take_along_axis(zl, np.asarray(masked_index)[..., None], axis=1)
    if zg.shape != zl.shape:
        raise ContractError(f"probe: {zg.shape} vs {zl.shape}")
    zg = zg.astype(np.float64)
    zl = zl.astype(np.float64)
    cos = np.sum(zg * zl, -1) / ((np.linalg.norm(zg, axis=-1) + 1e-8) * (np.linalg.norm(zl, axis=-1) + 1e-8))
    return float(np.mean(np.abs(cos)))
