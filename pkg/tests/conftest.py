"""Shared fixtures. The pretrained backbone and the two accuracy studies
are expensive (minutes), so each is built once per session; their wall
times are collected for the runtime budget check. The acceptance tests
record one verdict line apiece, echoed after the run."""

import contextlib
import time

import pytest

from promptlab.experiments import (
    BACKBONE_CACHE_NAME,
    pretrain_backbone,
    run_sharing_ablation,
    run_trend_experiment,
)
from promptlab.model import Checkpoint


@pytest.fixture(scope="session")
def suite_timings() -> dict:
    return {}


@pytest.fixture(scope="session")
def backbone_cache_path(tmp_path_factory) -> str:
    return str(tmp_path_factory.getbasetemp() / BACKBONE_CACHE_NAME)


@pytest.fixture(scope="session")
def backbone_ckpt(backbone_cache_path, suite_timings) -> Checkpoint:
    t0 = time.time()
    ckpt = pretrain_backbone(cache_path=backbone_cache_path)
    suite_timings["backbone"] = time.time() - t0
    return ckpt


@pytest.fixture(scope="session")
def sharing_result(backbone_ckpt, suite_timings):
    t0 = time.time()
    result = run_sharing_ablation(backbone=backbone_ckpt)
    suite_timings["sharing"] = time.time() - t0
    return result


@pytest.fixture(scope="session")
def trend_result(backbone_ckpt, suite_timings):
    t0 = time.time()
    result = run_trend_experiment(backbone=backbone_ckpt)
    suite_timings["trend"] = time.time() - t0
    return result


@pytest.fixture
def criterion(request):
    """Context manager that records exactly one [criterion N] line,
    PASS on clean exit and FAIL if the block raises."""
    lines = request.config.__dict__.setdefault("_criterion_lines", [])

    @contextlib.contextmanager
    def mark(number: int, summary: str):
        note = {"detail": summary}
        try:
            yield note
        except BaseException as err:
            lines.append(f"[criterion {number}] FAIL: {note['detail']} ({type(err).__name__}: {err})")
            raise
        lines.append(f"[criterion {number}] PASS: {note['detail']}")

    return mark


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_criterion_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
