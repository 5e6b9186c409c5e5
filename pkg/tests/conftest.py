import sys
import time
from pathlib import Path

from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")

SESSION_START = time.perf_counter()
ACCEPTANCE_LINES = []


def pytest_collection_modifyitems(items):
    # acceptance checks run last so the wall-clock criterion sees the whole suite
    items.sort(key=lambda it: it.nodeid.startswith("tests/test_acceptance.py"))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

import pytest  # noqa: E402

from ocrect.corr import build_correlation  # noqa: E402
from ocrect.data import generate_synthetic  # noqa: E402
from ocrect.ocr import OcrConfig  # noqa: E402
from ocrect.train import TrainConfig, train  # noqa: E402

# frozen acceptance config: seed 42, 64 train / 32 eval, C=8, F=16, 48x48, noise 0.3, 30 epochs
FIG6 = dict(seed=42, train=64, eval=32, classes=8, features=16, size=48, noise=0.3, epochs=30)


@pytest.fixture(scope="session")
def fig6_data():
    c = FIG6
    samples = generate_synthetic(c["seed"], c["train"] + c["eval"], c["classes"], c["features"],
                                 c["size"], c["size"], c["noise"])
    tr, ev = samples[:c["train"]], samples[c["train"]:]
    return tr, ev, build_correlation([s.tags for s in tr], c["classes"])


@pytest.fixture(scope="session")
def fig6_runs(fig6_data):
    """Final-epoch log record of each pixel-selection arm on the frozen config."""
    tr, ev, m = fig6_data
    out = {}
    for sel in ("none", "oc", "ic", "all"):
        cfg = TrainConfig(epochs=FIG6["epochs"], seed=FIG6["seed"], ocr=OcrConfig(pixel_select=sel))
        t = time.perf_counter()
        _, log = train(tr, m, cfg, ev)
        out[sel] = log
        out[sel + "_seconds"] = time.perf_counter() - t
    return out
