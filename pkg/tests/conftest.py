import numpy as np
import pytest
from hypothesis import settings

from dbplab.diffusion import PurifyConfig, make_linear_schedule
from dbplab.nets import ClassifierNet, DenoiserNet
from dbplab.purify import DBPPipeline

settings.register_profile("dbplab", deadline=None, max_examples=40)
settings.load_profile("dbplab")

CRITERIA_LINES = []


def record_criterion(name, ok, detail=""):
    """Log one acceptance pass/fail line; all lines are repeated in the terminal summary."""
    line = f"{name}: {'PASS' if ok else 'FAIL'}" + (f"  ({detail})" if detail else "")
    CRITERIA_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in CRITERIA_LINES:
            terminalreporter.write_line(line)


def central_fd(f, x, coords, h=1e-6):
    """Central differences of scalar ``f`` at flat positions ``coords`` of ``x``."""
    out = []
    for c in coords:
        xp, xm = x.copy(), x.copy()
        xp.flat[c] += h
        xm.flat[c] -= h
        out.append((f(xp) - f(xm)) / (2 * h))
    return np.array(out)


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_schedule():
    return make_linear_schedule(20)


@pytest.fixture
def tiny_nets():
    """Untrained 16-pixel denoiser/classifier pair, T=20."""
    den = DenoiserNet(16, 20, hidden=12, depth=2, time_dim=8, seed=3)
    clf = ClassifierNet(16, 4, hidden=10, depth=2, seed=4)
    return den, clf


@pytest.fixture
def tiny_pipeline(tiny_schedule, tiny_nets):
    den, clf = tiny_nets
    den.requires_grad_(False)
    clf.requires_grad_(False)
    return DBPPipeline(tiny_schedule, PurifyConfig.make("ddpm", 4, 2), den, clf)
