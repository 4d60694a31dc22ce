import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tubemae.backbone import ModelConfig
from tubemae.dataio import default_classes, generate_video
from tubemae.geometry import TubeConfig, build_tubes, collate_tubes

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

TINY_TUBE = TubeConfig(r_s=0.6, r_t=3, n_neighbors=6, spatial_stride=8, temporal_stride=2)
TINY_MODEL = ModelConfig(width=16, depth=2, heads=2, decoder_depth=1, decoder_heads=2, mlp_ratio=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_videos(count=2, frames=6, points=32, seed=0):
    kinds = default_classes()
    return [generate_video(kinds[i % len(kinds)], frames, points, seed + i) for i in range(count)]


def tiny_tubes(count=2, frames=6, points=32, seed=0, cfg=TINY_TUBE):
    return collate_tubes([build_tubes(v, cfg, seed + i)
                          for i, v in enumerate(tiny_videos(count, frames, points, seed))])


# acceptance outcomes, printed as one line per criterion at the end of the session
CRITERIA: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> bool:
    CRITERIA[number] = (bool(passed), detail)
    print(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(CRITERIA):
        passed, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
