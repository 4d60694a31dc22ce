"""The twelve acceptance criteria, each at its stated tolerance.

Run alone with ``pytest tests/test_acceptance.py -v``; the terminal summary lists one
pass/fail line per criterion. The synthetic experiments (6 to 9) share cached runs
and take roughly a quarter of an hour on one CPU core.
"""

import functools
import itertools
import time
from pathlib import Path

import numpy as np
import pytest

from tubemae.audits import chamfer_oracle_suite, gradient_suite
from tubemae.cli import main
from tubemae.config import load_config
from tubemae.dataio import Sample, default_classes, synthetic_dataset
from tubemae.geometry import PointCloudVideo, TubeConfig, build_tubes
from tubemae.masking import make_mask
from tubemae.metrics import THRESHOLDS, f1_at, frame_accuracy, segmental_edit_score
from tubemae.model import plans_for
from tubemae.objectives import LossConfig
from tubemae.pipeline import (ClipConfig, MaskConfig, TrainConfig, build_pretrainer, clip_batch,
                              fewshot_split, linear_probe, pretrain, pretrain_step, substream)

from conftest import TINY_MODEL, TINY_TUBE, record_criterion
from test_metrics import edit_oracle, f1_exhaustive, random_labels, runs

pytestmark = pytest.mark.acceptance

FIXTURES = Path(__file__).parent / "fixtures"
SMOKE = load_config(FIXTURES / "smoke.ini")
SEEDS = (0, 1, 2)


# ---------------------------------------------------------------- 1, 2: numerical audits


def test_c01_gradient_suite():
    start = time.perf_counter()
    rows = gradient_suite(seed=0, width=16)
    elapsed = time.perf_counter() - start
    worst = max(rows, key=lambda r: r.max_rel_err)
    names = {r.name for r in rows}
    ok = (all(r.max_rel_err < 1e-4 for r in rows) and elapsed < 60
          and {"geo", "lat", "global", "total"} <= names and any(n.startswith("motion") for n in names))
    record_criterion(1, ok, f"worst rel-err {worst.max_rel_err:.2e} ({worst.name}), {elapsed:.1f} s")
    assert ok


def test_c02_chamfer_oracle():
    rows = {r.name: r.max_rel_err for r in chamfer_oracle_suite(seed=0, pairs=200, max_points=32)}
    ok = rows["chamfer-vs-loop"] <= 1e-6 and rows["chamfer-symmetry"] == 0 and rows["chamfer-identity"] == 0
    record_criterion(2, ok, f"max |vectorized - loop| {rows['chamfer-vs-loop']:.1e}, "
                            f"symmetry gap {rows['chamfer-symmetry']}, identity {rows['chamfer-identity']}")
    assert ok


# ---------------------------------------------------------------- 3: tube membership


def scan_violations(video, tubes, cfg):
    """Re-derive every member with scalar loops: window frame, strict radius, k-nearest choice."""
    bad = 0
    frames = video.frames.astype(np.float64)
    L, N = frames.shape[:2]
    n_frames, n_anchor = tubes.anchors.shape[:2]
    for a, n in itertools.product(range(n_frames), range(n_anchor)):
        anchor = tubes.anchors[a, n]
        centre, t0 = anchor[:3], int(anchor[3])
        for w, off in enumerate(range(-cfg.half_window, cfg.half_window + 1)):
            frame = min(max(t0 + off, 0), L - 1)
            inside = sorted((sum((frames[frame, j, c] - centre[c]) ** 2 for c in range(3)), j)
                            for j in range(N))
            inside = [j for d2, j in inside if d2 < cfg.r_s ** 2][:cfg.n_neighbors]
            for slot, (f, j) in enumerate(tubes.members[a, n, w]):
                if inside:
                    want = inside[slot] if slot < len(inside) else inside[0]
                    bad += int(f != frame or j != want)
                else:
                    # an empty slot is padded with the anchor point itself
                    bad += int(f != t0 or j != tubes.anchor_index[a, n])
    return bad


def test_c03_membership_audit():
    rng = np.random.default_rng(0)
    total = members = 0
    for case in range(50):
        L = int(rng.choice([4, 6, 8]))
        N = int(rng.choice([16, 24, 32]))
        cfg = TubeConfig(r_s=float(rng.uniform(0.2, 1.5)), r_t=int(rng.choice([1, 3, 5])),
                         n_neighbors=int(rng.integers(1, 9)), spatial_stride=8, temporal_stride=2)
        video = PointCloudVideo(rng.normal(size=(L, N, 3)).astype(np.float32))
        tubes = build_tubes(video, cfg, seed=case)
        total += scan_violations(video, tubes, cfg)
        members += tubes.members[..., 0].size
    ok = total == 0
    record_criterion(3, ok, f"{total} violations among {members} members in 50 videos")
    assert ok


# ---------------------------------------------------------------- 4: masking exactness


def test_c04_masking_exactness():
    # grid of 12 frames x 32 anchors; visible per frame = round((1 - ratio) * 32)
    expected = {0.65: 11, 0.75: 8, 0.85: 5}
    wrong = 0
    for ratio, count in expected.items():
        for seed in range(1000):
            plan = make_mask((12, 32), "frame", ratio, seed)
            wrong += int(np.any(plan.visible.sum(axis=1) != count))
    ok = wrong == 0
    record_criterion(4, ok, f"{wrong} of 3000 plans off the per-frame counts {expected}")
    assert ok


# ---------------------------------------------------------------- 5: EMA / stop-gradient


def graph_leaves(root):
    seen, stack, leaves = set(), [root], []
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._parents:
            stack.extend(t._parents)
        else:
            leaves.append(t)
    return leaves


def test_c05_ema_and_stop_gradient():
    clip = ClipConfig(frames=8, stride=1, scale_lo=0.9, scale_hi=1.1)
    train = TrainConfig(epochs=2, warmup_epochs=1, base_lr=1e-3, momentum=0.999)
    state = build_pretrainer(TINY_MODEL, TINY_TUBE, clip, 64, LossConfig(queue_size=8), train)
    samples = synthetic_dataset(default_classes()[:3], 4, 8, 64, seed=0)
    m = state.model.encoders.m
    momentum = state.model.momentum
    theta0 = {n: p.data.astype(np.float64) for n, p in momentum.named_parameters()}
    weighted = {n: np.zeros_like(v) for n, v in theta0.items()}
    stray = {"momentum_grads": 0, "queue_grads": 0, "foreign_leaves": 0}
    trainable = {id(p) for p in state.model.parameters()}

    def hook(event, state, report, **kw):
        if event != "after_optimizer":
            return
        # closed form: theta_T = m^T theta_0 + (1 - m) sum_t m^(T - t) theta_online_t
        for n, p in state.model.online.named_parameters():
            weighted[n] = m * weighted[n] + (1 - m) * p.data.astype(np.float64)
        stray["momentum_grads"] += sum(p.grad is not None and np.any(p.grad) for p in momentum.parameters())
        queued = state.queue.entries()
        for leaf in graph_leaves(report.total_tensor):
            if leaf.requires_grad and id(leaf) not in trainable:
                stray["foreign_leaves"] += 1
            if len(queued) and leaf.data.shape == queued.T.shape and np.array_equal(leaf.data, queued.T):
                stray["queue_grads"] += int(leaf.requires_grad or leaf.grad is not None)

    steps = 100
    for step in range(steps):
        idx = np.random.default_rng(step).choice(len(samples), size=4, replace=False)
        tubes, _ = clip_batch([samples[i] for i in idx], clip, TINY_TUBE, seed=step)
        pretrain_step(state, tubes, MaskConfig(), 1e-3, step, hook)

    gap = max(float(np.max(np.abs(p.data - (m ** steps * theta0[n] + weighted[n]))))
              for n, p in momentum.named_parameters())
    moved = max(float(np.max(np.abs(p.data - theta0[n]))) for n, p in momentum.named_parameters())
    ok = gap <= 1e-6 and moved > 0 and not any(stray.values())
    record_criterion(5, ok, f"max |momentum - closed-form EMA| {gap:.1e} after {steps} steps "
                            f"(momentum moved {moved:.1e}); stray gradients {stray}")
    assert ok


# ---------------------------------------------------------------- 6 to 9: synthetic experiments


@functools.lru_cache(maxsize=None)
def smoke_run(objectives: str, seed: int) -> dict:
    """One cached pre-training run on the frozen smoke configuration plus its evaluations."""
    cfg = SMOKE.with_overrides({"loss": {"objectives": (objectives,)}}).seeded(seed)
    d = cfg.data
    data = synthetic_dataset(default_classes(d.classes), d.videos_per_class, d.frames, d.points,
                             substream(seed, "data"), {"train": d.train_ratio, "test": 1 - d.train_ratio})
    train = [s for s in data if s.split == "train"]
    test = [s for s in data if s.split == "test"]
    clip, tube = d.clip(), cfg.model.tube()
    state = build_pretrainer(cfg.model.model(), tube, clip, d.points, cfg.loss.build(), cfg.train)
    random_init = state.model.online.clone()
    start = time.perf_counter()
    history = pretrain(state, train, clip, tube, cfg.mask, cfg.train)
    seconds = time.perf_counter() - start
    tubes, _ = clip_batch(test, clip, tube, substream(seed, "eval"), augment=False)
    plans = plans_for(tubes, "frame", cfg.mask.ratio, [substream(seed, "probe-mask", b) for b in range(len(test))])
    return {
        "history": history,
        "seconds": seconds,
        "probe": linear_probe(state.model.online, train, test, clip, tube, cfg.eval),
        "random_probe": linear_probe(random_init, train, test, clip, tube, cfg.eval),
        "disentanglement": state.model.probe_disentanglement(tubes, plans),
    }


def median_trend_decreasing(series, window=5):
    """Each 5-epoch window's median is above the next window's median."""
    s = np.asarray(series)
    return all(np.median(s[i:i + window]) > np.median(s[i + window:i + 2 * window])
               for i in range(len(s) - 2 * window + 1))


def test_c06_smoke_pretraining():
    run = smoke_run("B7", 0)
    total = [r["total"] for r in run["history"]]
    geo = [r["geo"] for r in run["history"]]
    ratio = total[-1] / total[0]
    trend = median_trend_decreasing(geo)
    ok = len(total) == 20 and ratio < 0.7 and trend and run["seconds"] < 15 * 60
    record_criterion(6, ok, f"total {total[0]:.3f} -> {total[-1]:.3f} (ratio {ratio:.3f}), "
                            f"geo median trend decreasing: {trend}, {run['seconds']:.0f} s")
    assert ok


def test_c07_linear_probe_signal():
    rows = [(smoke_run("B7", s)["probe"], smoke_run("B7", s)["random_probe"]) for s in SEEDS]
    ok = all(p >= 80 and r <= 55 and p - r >= 25 for p, r in rows)
    detail = "; ".join(f"seed {s}: pretrained {p:.1f}% random {r:.1f}%" for s, (p, r) in zip(SEEDS, rows))
    record_criterion(7, ok, detail)
    assert ok


def test_c08_disentanglement_direction():
    full = smoke_run("B7", 0)["disentanglement"]
    no_latent = smoke_run("A1", 0)["disentanglement"]
    ok = full < 0.9 and no_latent > full
    record_criterion(8, ok, f"probe with both objectives {full:.4f}, latent loss disabled {no_latent:.4f}")
    assert ok


def test_c09_ablation_coherence():
    rows = []
    for s in SEEDS:
        b1, b7 = smoke_run("B1", s), smoke_run("B7", s)
        stable = all(np.isfinite(r["total"]) for r in b1["history"] + b7["history"]) and all(
            run["history"][-1]["total"] <= run["history"][0]["total"] for run in (b1, b7))
        rows.append((s, stable, b1["probe"], b7["probe"]))
    ok = all(stable and p7 >= p1 for _, stable, p1, p7 in rows)
    detail = "; ".join(f"seed {s}: B1 {p1:.1f}% B7 {p7:.1f}% stable {stable}" for s, stable, p1, p7 in rows)
    record_criterion(9, ok, detail)
    assert ok


# ---------------------------------------------------------------- 10, 11: metrics and splits


def test_c10_segmentation_metric_oracles():
    rng = np.random.default_rng(10)
    mismatches = 0
    for _ in range(500):
        gt = random_labels(rng, max_segments=20)
        pred = random_labels(rng, max_segments=20)
        length = min(len(gt), len(pred))
        gt, pred = gt[:length], pred[:length]
        p, g = tuple(r[0] for r in runs(pred)), tuple(r[0] for r in runs(gt))
        want = 100 * (1 - edit_oracle(p, g) / max(len(p), len(g)))
        mismatches += int(abs(segmental_edit_score(pred, gt) - want) > 1e-9)
        mismatches += sum(abs(f1_at(pred, gt, t) - f1_exhaustive(pred, gt, t)) > 1e-9 for t in THRESHOLDS)
    perfect = []
    for _ in range(20):
        seq = random_labels(rng, max_segments=20)
        perfect.append([frame_accuracy(seq, seq), segmental_edit_score(seq, seq)]
                       + [f1_at(seq, seq, t) for t in THRESHOLDS])
    all_perfect = bool(np.all(np.array(perfect) == 100.0))
    ok = mismatches == 0 and all_perfect
    record_criterion(10, ok, f"{mismatches} oracle mismatches over 500 pairs; pred == gt scores 100 everywhere: "
                             f"{all_perfect}")
    assert ok


def test_c11_fewshot_splitter():
    blank = np.zeros((1, 1, 3), dtype=np.float32)
    data = [Sample(PointCloudVideo(blank, label=c), "train") for c in range(12) for _ in range(8)]
    failures = 0
    for (n_way, m_shot), target in (((5, 1), 5), ((10, 5), 50)):
        for seed in range(1000):
            train, held = fewshot_split(data, n_way, m_shot, seed)
            labels = [s.label for s in train]
            counts_ok = len(train) == target and all(labels.count(c) == m_shot for c in set(labels))
            disjoint = not {id(s) for s in train} & {id(s) for s in held}
            same_classes = set(labels) == {s.label for s in held} and len(set(labels)) == n_way
            failures += int(not (counts_ok and disjoint and same_classes))
    ok = failures == 0
    record_criterion(11, ok, f"{failures} bad splits over 2 x 1000 seeds")
    assert ok


# ---------------------------------------------------------------- 12: CLI determinism


def test_c12_cli_determinism(tmp_path):
    tiny = FIXTURES / "tiny.ini"
    commands = [["gen-data"], ["gen-data", "--segmentation"], ["pretrain", "--epochs", "2"],
                ["probe"], ["finetune", "--fraction", "0.5"], ["fewshot", "--n-way", "3", "--m-shot", "1"],
                ["eval-seg"], ["export-attn", "--layer", "0"], ["grad-check"], ["chamfer-oracle", "--pairs", "50"]]
    compared, differing, codes = 0, [], []
    for i, command in enumerate(commands):
        outputs = []
        for rep in ("a", "b"):
            run = tmp_path / f"{i}-{rep}"
            extra = []
            if command[0] in ("probe", "finetune"):
                extra = ["--checkpoint", str(tmp_path / f"2-{rep}" / "checkpoint.u4dc")]
            codes.append(main([*command, "--config", str(tiny), "--seed", "7", "--workers", "1",
                               "--run-dir", str(run), *extra]))
            outputs.append({p.name: p.read_bytes() for p in sorted(run.glob("*.csv"))})
        assert outputs[0], f"{command[0]} wrote no CSV"
        for name in outputs[0]:
            compared += 1
            if outputs[0][name] != outputs[1].get(name):
                differing.append(f"{command[0]}/{name}")
    ok = not differing and all(c == 0 for c in codes)
    record_criterion(12, ok, f"{compared} metrics CSVs from {len(commands)} commands compared, "
                             f"differing: {differing or 'none'}, exit codes {sorted(set(codes))}")
    assert ok
