"""Synthetic motion-class point cloud videos and their on-disk formats."""

from __future__ import annotations

import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError
from .geometry import PointCloudVideo

KINDS = ("translate-x", "translate-y", "rotate-z", "oscillate", "expand", "two-part-articulation")

# per-frame speed ranges of the two generator distributions used for transfer runs
DOMAIN_SPEEDS = {"A": (0.02, 0.04), "B": (0.045, 0.07)}


@dataclass(frozen=True)
class MotionClass:
    id: int
    kind: str
    speed_range: tuple[float, float] = DOMAIN_SPEEDS["A"]
    noise_sigma: float = 0.01

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown motion kind {self.kind!r}")


def default_classes(names=KINDS, domain: str = "A", noise_sigma: float = 0.01) -> list[MotionClass]:
    return [MotionClass(i, k, DOMAIN_SPEEDS[domain], noise_sigma) for i, k in enumerate(names)]


def _rot_z(points, centre, angle):
    c, s = np.cos(angle), np.sin(angle)
    p = points - centre
    out = p.copy()
    out[:, 0] = c * p[:, 0] - s * p[:, 1]
    out[:, 1] = s * p[:, 0] + c * p[:, 1]
    return out + centre


def _base_shape(kind: str, n: int, rng: np.random.Generator) -> np.ndarray:
    if kind == "two-part-articulation":
        half = n // 2
        a = rng.standard_normal((half, 3)) * [0.25, 0.15, 0.15] + [-0.5, 0, 0]
        b = rng.standard_normal((n - half, 3)) * [0.25, 0.15, 0.15] + [0.5, 0, 0]
        pts = np.concatenate([a, b])
    else:
        pts = rng.standard_normal((n, 3)) * [1.0, 0.45, 0.3]
    pts = _rot_z(pts, np.zeros(3), rng.uniform(0, np.pi))
    pts -= pts.mean(axis=0)
    return pts / np.max(np.linalg.norm(pts, axis=1))


class _Motion:
    """Closed-form motion of a pose; ``at(t)`` is the pose after t frames."""

    def __init__(self, kind: str, speed: float, pose: np.ndarray):
        self.kind, self.speed, self.pose = kind, speed, pose
        self.centre = pose.mean(axis=0)
        self.part = pose[:, 0] > self.centre[0]

    def at(self, t: float) -> np.ndarray:
        p, v = self.pose, self.speed
        if self.kind == "translate-x":
            return p + [v * t, 0.0, 0.0]
        if self.kind == "translate-y":
            return p + [0.0, v * t, 0.0]
        if self.kind == "rotate-z":
            return _rot_z(p, self.centre, 4.0 * v * t)
        if self.kind == "oscillate":
            return p + [0.0, 0.0, 0.3 * np.sin(8.0 * v * t)]
        if self.kind == "expand":
            return self.centre + (p - self.centre) * (1.0 + v * t)
        hinge = np.array([self.centre[0], self.centre[1], 0.0])
        out = p.copy()
        out[self.part] = _rot_z(p[self.part], hinge, 4.0 * v * t)
        return out


def generate_segmented_video(classes: list[MotionClass], segment_lengths: list[int], L: int,
                             N: int, seed: int) -> PointCloudVideo:
    """Chain motions; each segment starts from the pose where the previous one ended."""
    if len(classes) != len(segment_lengths) or sum(segment_lengths) != L:
        raise ContractError(f"segment lengths {segment_lengths} do not sum to L={L}")
    if L < 1 or N < 1:
        raise ContractError("L and N must be >= 1")
    rng = np.random.default_rng(seed)
    pose = _base_shape(classes[0].kind, N, rng)
    frames = np.empty((L, N, 3))
    labels = np.empty(L, dtype=np.int64)
    f = 0
    for s, (cls, n) in enumerate(zip(classes, segment_lengths)):
        motion = _Motion(cls.kind, rng.uniform(*cls.speed_range), pose)
        ts = np.arange(n) if s == 0 else np.arange(1, n + 1)
        for t in ts:
            current = motion.at(t)
            noise = rng.standard_normal((N, 3)) * cls.noise_sigma
            frames[f] = (current + noise)[rng.permutation(N)]
            labels[f] = cls.id
            f += 1
        pose = current
    return PointCloudVideo(frames=frames.astype(np.float32), label=int(classes[0].id),
                           frame_labels=labels)


def generate_video(cls: MotionClass, L: int, N: int, seed: int) -> PointCloudVideo:
    v = generate_segmented_video([cls], [L], L, N, seed)
    return PointCloudVideo(frames=v.frames, label=cls.id)


def trajectory_features(video: PointCloudVideo) -> np.ndarray:
    """Centroid path, spread ratio, principal-axis rotation and shape change per frame, relative to frame 0."""
    feats = []
    c0 = video.frames[0].mean(axis=0)
    spread0 = shape0 = None
    prev_angle = None
    unwrapped = 0.0
    for fr in video.frames.astype(np.float64):
        c = fr.mean(axis=0)
        p = fr - c
        cov = p[:, :2].T @ p[:, :2] / len(p)
        w, vecs = np.linalg.eigh(cov)
        angle = np.arctan2(vecs[1, -1], vecs[0, -1])
        if prev_angle is not None:
            d = (angle - prev_angle + np.pi / 2) % np.pi - np.pi / 2
            unwrapped += d
        prev_angle = angle
        spread = np.sqrt(np.mean(np.sum(p * p, axis=1)))
        spread0 = spread if spread0 is None else spread0
        # normalized covariance spectrum: fixed under rigid motion and uniform scaling
        eig = np.linalg.eigvalsh(p.T @ p / len(p))
        shape = eig / eig.sum()
        shape0 = shape if shape0 is None else shape0
        feats.append(np.concatenate([c - c0, [spread / spread0 - 1.0, unwrapped], shape - shape0]))
    return np.concatenate(feats)


def nearest_centroid_accuracy(train: list[PointCloudVideo], test: list[PointCloudVideo]) -> float:
    X = np.stack([trajectory_features(v) for v in train])
    y = np.array([v.label for v in train])
    classes = np.unique(y)
    # per-feature standardization so small shape terms count as much as large angles
    mu, sd = X.mean(axis=0), X.std(axis=0) + 1e-9
    X = (X - mu) / sd
    cents = np.stack([X[y == c].mean(axis=0) for c in classes])
    Xt = (np.stack([trajectory_features(v) for v in test]) - mu) / sd
    pred = classes[np.argmin(((Xt[:, None, :] - cents[None]) ** 2).sum(-1), axis=1)]
    return float(np.mean(pred == np.array([v.label for v in test])))


# ---------------------------------------------------------------- video files

MAGIC = b"PCV1"
_HEADER = struct.Struct("<4sIIIB")
FLAG_FEATURES, FLAG_LABEL, FLAG_FRAME_LABELS = 1, 2, 4


def encode_video(video: PointCloudVideo) -> bytes:
    L, N = video.frames.shape[:2]
    C = video.feature_dim
    flags = (FLAG_FEATURES if C else 0) | (FLAG_LABEL if video.label is not None else 0) | (
        FLAG_FRAME_LABELS if video.frame_labels is not None else 0)
    parts = [_HEADER.pack(MAGIC, L, N, C, flags), video.frames.astype("<f4").tobytes()]
    if C:
        parts.append(video.features.astype("<f4").tobytes())
    if video.label is not None:
        parts.append(struct.pack("<H", video.label))
    if video.frame_labels is not None:
        parts.append(video.frame_labels.astype("<u2").tobytes())
    return b"".join(parts)


def decode_video(buf: bytes) -> PointCloudVideo:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", len(buf))
    magic, L, N, C, flags = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if bool(flags & FLAG_FEATURES) != bool(C):
        raise FormatError("feature flag disagrees with channel count", 16)
    off = _HEADER.size
    expected = off + 4 * L * N * 3 + 4 * L * N * C + (2 if flags & FLAG_LABEL else 0) + (
        2 * L if flags & FLAG_FRAME_LABELS else 0)
    if len(buf) != expected:
        raise FormatError(f"expected {expected} bytes, found {len(buf)}", min(len(buf), expected))

    def take(dtype, count):
        nonlocal off
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr

    frames = take("<f4", L * N * 3).reshape(L, N, 3).astype(np.float32)
    feats = take("<f4", L * N * C).reshape(L, N, C).astype(np.float32) if C else None
    label = int(take("<u2", 1)[0]) if flags & FLAG_LABEL else None
    frame_labels = take("<u2", L).astype(np.int64) if flags & FLAG_FRAME_LABELS else None
    return PointCloudVideo(frames=frames, features=feats, label=label, frame_labels=frame_labels)


def write_video(path: str | Path, video: PointCloudVideo):
    Path(path).write_bytes(encode_video(video))


def read_video(path: str | Path) -> PointCloudVideo:
    return decode_video(Path(path).read_bytes())


# ---------------------------------------------------------------- datasets


@dataclass
class Sample:
    video: PointCloudVideo
    split: str
    path: str = ""

    @property
    def label(self) -> int:
        return self.video.label


def stratified_assign(labels: list[int], ratios: dict[str, float], rng: np.random.Generator) -> list[str]:
    """Per-class shuffled assignment of split names in the given proportions."""
    if abs(sum(ratios.values()) - 1.0) > 1e-9:
        raise ContractError(f"split ratios {ratios} do not sum to 1")
    labels = np.asarray(labels)
    out = [""] * len(labels)
    names = list(ratios)
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        counts = [int(np.floor(ratios[n] * len(idx) + 0.5)) for n in names[:-1]]
        counts.append(len(idx) - sum(counts))
        start = 0
        for n, k in zip(names, counts):
            for i in idx[start:start + k]:
                out[i] = n
            start += k
    return out


def synthetic_dataset(classes: list[MotionClass], videos_per_class: int, L: int, N: int,
                      seed: int, ratios: dict[str, float] | None = None,
                      workers: int = 1) -> list[Sample]:
    """Every video has its own seed, so the result does not depend on ``workers``."""
    ratios = ratios or {"train": 0.8, "test": 0.2}
    ss = np.random.SeedSequence([seed, 0xDA7A])
    seeds = ss.generate_state(len(classes) * videos_per_class)
    jobs = [(cls, L, N, int(seeds[ci * videos_per_class + j]))
            for ci, cls in enumerate(classes) for j in range(videos_per_class)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            videos = list(pool.map(generate_video, *zip(*jobs)))
    else:
        videos = [generate_video(*job) for job in jobs]
    splits = stratified_assign([v.label for v in videos], ratios, np.random.default_rng(seed))
    return [Sample(v, s) for v, s in zip(videos, splits)]


def synthetic_segmentation_dataset(classes: list[MotionClass], n_videos: int, L: int, N: int,
                                   seed: int, segments: int = 3,
                                   ratios: dict[str, float] | None = None) -> list[Sample]:
    """Videos made of ``segments`` chained motions with per-frame labels."""
    ratios = ratios or {"train": 0.8, "test": 0.2}
    if segments < 1 or L < 4 * segments:
        raise ContractError(f"{segments} segments of >= 4 frames do not fit in L={L}")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_videos):
        picks = rng.choice(len(classes), size=segments, replace=len(classes) < segments)
        cuts = np.sort(rng.choice(np.arange(4, L - 3), size=segments - 1, replace=False))
        while np.any(np.diff(np.concatenate([[0], cuts, [L]])) < 4):
            cuts = np.sort(rng.choice(np.arange(4, L - 3), size=segments - 1, replace=False))
        lengths = np.diff(np.concatenate([[0], cuts, [L]])).tolist()
        v = generate_segmented_video([classes[p] for p in picks], lengths, L, N,
                                     int(rng.integers(2**31)))
        out.append(v)
    n_train = int(np.floor(ratios["train"] * n_videos + 0.5))
    return [Sample(v, "train" if i < n_train else "test") for i, v in enumerate(out)]


def make_dataset(out_dir: str | Path, classes: list[MotionClass], videos_per_class: int,
                 L: int, N: int, seed: int, ratios: dict[str, float] | None = None,
                 workers: int = 1) -> Path:
    """Write one ``.pcv`` file per video and a tab-separated manifest (path, label, split)."""
    samples = synthetic_dataset(classes, videos_per_class, L, N, seed, ratios, workers)
    return write_dataset(out_dir, samples)


def write_dataset(out_dir: str | Path, samples: list[Sample]) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        s.path = f"video_{i:05d}.pcv"
        write_video(out_dir / s.path, s.video)
    manifest = out_dir / "manifest.tsv"
    write_manifest(manifest, samples)
    return manifest


def write_manifest(path: str | Path, samples: list[Sample]):
    Path(path).write_text("".join(f"{s.path}\t{-1 if s.label is None else s.label}\t{s.split}\n"
                                  for s in samples))


def read_manifest(path: str | Path, load: bool = True) -> list[Sample]:
    path = Path(path)
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected 3 tab-separated fields")
        rel, label, split = parts
        video = read_video(path.parent / rel) if load else PointCloudVideo(np.zeros((1, 1, 3)), label=int(label))
        if video.label is None and int(label) >= 0:
            video.label = int(label)
        out.append(Sample(video, split, rel))
    return out
