from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from splitbg.architecture import SplitFlowConfig, build_split_flow  # noqa: E402
from splitbg.conditioner import GAUConfig  # noqa: E402

# filled by test_acceptance.py, printed once at the end of the session
ACCEPTANCE_LINES: dict[int, str] = {}

SMALL_GAU = GAUConfig(model_dim=16, query_dim=8, key_dim=8, value_dim=16, dropout=0.0)


def small_config(n_bb: int = 2, n_joint: int = 1, **kw) -> SplitFlowConfig:
    return SplitFlowConfig(n_backbone_blocks=n_bb, n_joint_blocks=n_joint, conditioner=SMALL_GAU, **kw)


def randomize(flow, seed: int, scale: float = 0.3, head_scale: float = 1.0) -> None:
    """Perturb every parameter so the flow is far from the identity."""
    rng = np.random.default_rng(seed)
    for name, p in flow.named_parameters():
        s = head_scale if "head" in name else scale
        p.value = p.value + s * rng.standard_normal(p.shape)


def random_states(layout, n: int, rng: np.random.Generator, margin: float = 0.3) -> np.ndarray:
    """Uniform states inside the physical domain of a layout."""
    x = np.empty((n, layout.dim))
    for j in range(layout.dim):
        if layout.kinds[j] == 1:
            x[:, j] = rng.uniform(-np.pi, np.pi, n)
        else:
            lo, hi = layout.lower[j], layout.upper[j]
            lo = lo + margin if np.isfinite(lo) else -3.0
            hi = hi - margin if np.isfinite(hi) else 3.0
            x[:, j] = rng.uniform(lo, hi, n)
    return x


def angle_error(a, b, kinds) -> np.ndarray:
    d = np.asarray(a) - np.asarray(b)
    circ = np.asarray(kinds) == 1
    d[..., circ] = (d[..., circ] + np.pi) % (2 * np.pi) - np.pi
    return np.abs(d)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def make_flow():
    def make(topology_or_layout, n_bb=2, n_joint=1, seed=0, perturb=True, **kw):
        flow = build_split_flow(topology_or_layout, small_config(n_bb, n_joint, **kw), seed)
        if perturb:
            randomize(flow, seed + 100)
        return flow
    return make


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
