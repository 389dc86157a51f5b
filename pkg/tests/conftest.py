from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from qdtune import synthgen
from qdtune.diagram import ChargeRegion, LineLabel, StabilityDiagram


def make_blank(width=60, height=60, pixel=1e-3, lines=(), regions=(), value=0.0, id="blank"):
    grid = np.full((height, width), value, dtype=np.float32)
    return StabilityDiagram(grid, pixel, (0.0, 0.0), tuple(lines), tuple(regions), id)


def vertical_lines_diagram(xs_px, width=120, height=120, pixel=1e-3, id="vlines"):
    """Vertical labeled lines at the given pixel columns, with regions 0,1,2,... between them."""
    top = (height - 1) * pixel
    right = (width - 1) * pixel
    lines = [LineLabel(((x * pixel, 0.0), (x * pixel, top)), i + 1) for i, x in enumerate(xs_px)]
    edges = [0.0] + [x * pixel for x in xs_px] + [right]
    labels = ["0", "1", "2", "3", "4+"]
    regions = []
    for i in range(len(edges) - 1):
        a, b = edges[i], edges[i + 1]
        label = labels[min(i, 4)]
        regions.append(ChargeRegion(((a, 0.0), (b, 0.0), (b, top), (a, top)), label))
    grid = np.zeros((height, width), dtype=np.float32)
    for x in xs_px:
        grid[:, x] = 1.0
    return StabilityDiagram(grid, pixel, (0.0, 0.0), tuple(lines), tuple(regions), id)


@pytest.fixture(scope="session")
def clean_si_sg_cfg():
    return replace(synthgen.make_profile("si-sg"), noise_std=0.05)


@pytest.fixture(scope="session")
def si_sg_diagram(clean_si_sg_cfg):
    return synthgen.generate(replace(clean_si_sg_cfg, seed=3))


@pytest.fixture(scope="session")
def small_diagram():
    cfg = replace(synthgen.make_profile("si-sg"), width=100, height=100, spacing_v=0.02, seed=1)
    return synthgen.generate(cfg)


# ---------------------------------------------------------------- acceptance lines

ACCEPTANCE: dict[int, str] = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    """Remember and print a one-line verdict, then fail the calling test if it did not pass."""
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[n] = line
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
