"""Point cloud videos, farthest point sampling and spatio-temporal tubes."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError


@dataclass
class PointCloudVideo:
    frames: np.ndarray  # (L, N, 3)
    features: np.ndarray | None = None  # (L, N, C_in)
    label: int | None = None
    frame_labels: np.ndarray | None = None  # (L,)

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 3 or self.frames.shape[2] != 3:
            raise ContractError(f"frames must be (L, N, 3), got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ContractError("frames contain non-finite coordinates")
        if self.features is not None:
            self.features = np.asarray(self.features)
            if self.features.shape[:2] != self.frames.shape[:2]:
                raise ContractError("features must be (L, N, C_in) matching frames")
        if self.frame_labels is not None:
            self.frame_labels = np.asarray(self.frame_labels, dtype=np.int64)
            if self.frame_labels.shape != (self.num_frames,):
                raise ContractError(
                    f"frame_labels length {self.frame_labels.shape} != L={self.num_frames}"
                )

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_points(self) -> int:
        return self.frames.shape[1]

    @property
    def feature_dim(self) -> int:
        return 0 if self.features is None else self.features.shape[2]


@dataclass(frozen=True)
class TubeConfig:
    r_s: float = 0.5
    r_t: int = 3
    n_neighbors: int = 32
    spatial_stride: int = 32
    temporal_stride: int = 2

    def __post_init__(self):
        if not self.r_s > 0:
            raise ContractError("r_s must be positive")
        if self.r_t < 1 or self.r_t % 2 == 0:
            raise ContractError("r_t must be odd and >= 1")
        if self.n_neighbors < 1:
            raise ContractError("n_neighbors must be >= 1")
        if self.spatial_stride < 1 or self.temporal_stride < 1:
            raise ContractError("strides must be >= 1")

    @property
    def half_window(self) -> int:
        return (self.r_t - 1) // 2


@dataclass
class TubeBatch:
    """Tubes of one video, or of a batch when every array carries a leading axis.

    ``members[..., 0]`` is the source frame, ``members[..., 1]`` the point index.
    Displacements are raw (unnormalized) offsets ``(dx, dy, dz, dt)`` from the anchor.
    """

    anchors: np.ndarray  # (L', N', 4)
    anchor_index: np.ndarray  # (L', N') point index of each anchor in its frame
    members: np.ndarray  # (L', N', r_t, k, 2)
    displacements: np.ndarray  # (L', N', r_t, k, 4)
    ground_truth: np.ndarray  # (L', N', r_t, k, 3)
    cfg: TubeConfig
    num_frames: int
    member_features: np.ndarray | None = None  # (L', N', r_t, k, C_in)
    fps_first: np.ndarray | None = None  # (L',) seeded first FPS index per anchor frame
    counts: np.ndarray | None = field(default=None, repr=False)  # (L', N', r_t) true member counts

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.anchors.shape[-3], self.anchors.shape[-2]


def sample_frames(video: PointCloudVideo, count: int, stride: int, seed: int) -> PointCloudVideo:
    """Take ``count`` frames spaced by ``stride`` from a random start."""
    span = (count - 1) * stride + 1
    if count < 1 or stride < 1:
        raise ContractError("count and stride must be >= 1")
    if span > video.num_frames:
        raise ContractError(
            f"video too short: {video.num_frames} frames, need {span} for {count}x{stride}"
        )
    rng = np.random.default_rng(seed)
    start = int(rng.integers(0, video.num_frames - span + 1))
    idx = start + stride * np.arange(count)
    return PointCloudVideo(
        frames=video.frames[idx],
        features=None if video.features is None else video.features[idx],
        label=video.label,
        frame_labels=None if video.frame_labels is None else video.frame_labels[idx],
    )


def augment_scale(video: PointCloudVideo, lo: float, hi: float, seed: int) -> PointCloudVideo:
    if not 0 < lo <= hi:
        raise ContractError("need 0 < lo <= hi")
    s = np.random.default_rng(seed).uniform(lo, hi) if hi > lo else lo
    return replace(video, frames=video.frames * video.frames.dtype.type(s))


def farthest_point_sample(points: np.ndarray, count: int, seed: int) -> np.ndarray:
    """Greedy max-min sampling; ``seed`` picks the first index, ties go to the lower index."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if not 1 <= count <= n:
        raise ContractError(f"cannot sample {count} of {n} points")
    first = int(np.random.default_rng(seed).integers(n))
    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = first
    mind = np.sum((points - points[first]) ** 2, axis=1)
    for i in range(1, count):
        nxt = int(np.argmax(mind))
        chosen[i] = nxt
        mind = np.minimum(mind, np.sum((points - points[nxt]) ** 2, axis=1))
    return chosen


def _frame_seed(seed: int, frame: int) -> int:
    return int(np.random.SeedSequence([seed, frame]).generate_state(1)[0])


def build_tubes(video: PointCloudVideo, cfg: TubeConfig, seed: int) -> TubeBatch:
    L, N = video.num_frames, video.num_points
    if N % cfg.spatial_stride:
        raise ContractError(f"N={N} not divisible by spatial_stride={cfg.spatial_stride}")
    if L % cfg.temporal_stride:
        raise ContractError(f"L={L} not divisible by temporal_stride={cfg.temporal_stride}")
    n_anchor = N // cfg.spatial_stride
    anchor_frames = np.arange(0, L, cfg.temporal_stride)
    Lp, k, h = len(anchor_frames), cfg.n_neighbors, cfg.half_window
    r2 = cfg.r_s * cfg.r_s
    pts = video.frames.astype(np.float64)

    anchors = np.zeros((Lp, n_anchor, 4))
    anchor_index = np.zeros((Lp, n_anchor), dtype=np.int64)
    members = np.zeros((Lp, n_anchor, cfg.r_t, k, 2), dtype=np.int64)
    counts = np.zeros((Lp, n_anchor, cfg.r_t), dtype=np.int64)
    fps_first = np.zeros(Lp, dtype=np.int64)

    for a_i, a in enumerate(anchor_frames):
        idx = farthest_point_sample(pts[a], n_anchor, _frame_seed(seed, int(a)))
        fps_first[a_i] = idx[0]
        anchor_index[a_i] = idx
        centre = pts[a, idx]  # (N', 3)
        anchors[a_i, :, :3] = centre
        anchors[a_i, :, 3] = a
        for w, off in enumerate(range(-h, h + 1)):
            f = min(max(a + off, 0), L - 1)
            d2 = np.sum((pts[f][None, :, :] - centre[:, None, :]) ** 2, axis=2)  # (N', N)
            inside = d2 < r2
            key = np.where(inside, d2, np.inf)
            order = np.argsort(key, axis=1, kind="stable")[:, :k]
            cnt = np.minimum(inside.sum(axis=1), k)
            counts[a_i, :, w] = cnt
            slot = np.arange(k)[None, :]
            # pad by repeating the nearest member; empty windows fall back to the anchor
            chosen = np.where(slot < cnt[:, None], order, order[:, :1])
            frame_col = np.full_like(chosen, f)
            empty = cnt == 0
            chosen[empty] = idx[empty, None]
            frame_col[empty] = a
            members[a_i, :, w, :, 0] = frame_col
            members[a_i, :, w, :, 1] = chosen

    gt = pts[members[..., 0], members[..., 1]]  # (L', N', r_t, k, 3)
    disp = np.empty(gt.shape[:-1] + (4,))
    disp[..., :3] = gt - anchors[:, :, None, None, :3]
    disp[..., 3] = members[..., 0] - anchors[:, :, None, None, 3]
    feats = None
    if video.features is not None:
        feats = video.features[members[..., 0], members[..., 1]]
    return TubeBatch(
        anchors=anchors,
        anchor_index=anchor_index,
        members=members,
        displacements=disp,
        ground_truth=gt,
        cfg=cfg,
        num_frames=L,
        member_features=feats,
        fps_first=fps_first,
        counts=counts,
    )


def collate_tubes(tubes: list[TubeBatch]) -> TubeBatch:
    """Stack per-video tubes along a new leading batch axis."""
    first = tubes[0]
    for t in tubes[1:]:
        if t.cfg != first.cfg or t.anchors.shape != first.anchors.shape:
            raise ContractError("cannot collate tubes built with different shapes")

    def stack(name):
        vals = [getattr(t, name) for t in tubes]
        return None if vals[0] is None else np.stack(vals)

    return TubeBatch(
        anchors=stack("anchors"),
        anchor_index=stack("anchor_index"),
        members=stack("members"),
        displacements=stack("displacements"),
        ground_truth=stack("ground_truth"),
        cfg=first.cfg,
        num_frames=first.num_frames,
        member_features=stack("member_features"),
        fps_first=stack("fps_first"),
        counts=stack("counts"),
    )


def membership_violations(video: PointCloudVideo, tubes: TubeBatch) -> int:
    """Count gathered members breaking the radius / time-window rule (post-hoc audit)."""
    cfg = tubes.cfg
    src = video.frames.astype(np.float64)[tubes.members[..., 0], tubes.members[..., 1]]
    d2 = np.sum((src - tubes.anchors[:, :, None, None, :3]) ** 2, axis=-1)
    dt = np.abs(tubes.members[..., 0] - tubes.anchors[:, :, None, None, 3])
    bad = (d2 >= cfg.r_s**2) | (dt > cfg.r_t / 2)
    return int(bad.sum())
