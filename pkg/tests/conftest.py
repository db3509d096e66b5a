import numpy as np
import pytest
from PIL import Image

from multinet_vit import tensor as T
from multinet_vit.data import BENIGN, MAGNIFICATIONS, CLASS_COUNTS, FULL_NAMES, SyntheticSpec, generate_synthetic


@pytest.fixture
def f64():
    with T.default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """8 classes x 8 images, 16x16, low noise."""
    root = tmp_path_factory.mktemp("synth")
    generate_synthetic(SyntheticSpec(images_per_class=8, resolution=16, noise=0.02, seed=3), root)
    return root


@pytest.fixture(scope="session")
def full_root(tmp_path_factory):
    """A breakhis-tree with exactly the published per-class/magnification counts.

    Every file is a hard link to one 8x8 PNG, so the tree is cheap to build.
    """
    root = tmp_path_factory.mktemp("breakhis")
    source = root / "source.png"
    Image.fromarray(np.full((8, 8, 3), 128, dtype=np.uint8), "RGB").save(source)
    for cls, counts in CLASS_COUNTS.items():
        group = "benign" if cls in BENIGN else "malignant"
        sub = FULL_NAMES[cls] if cls in ("A", "DC") else cls
        for mag, n in zip(MAGNIFICATIONS, counts):
            d = root / "tree" / group / sub / mag
            d.mkdir(parents=True)
            for i in range(n):
                (d / f"SOB_{cls}_{mag}_{i:04d}.png").hardlink_to(source)
    return root / "tree"



def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance PASS/FAIL lines at the end of the run."""
    import sys

    module = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance")), None)
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
