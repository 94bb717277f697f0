import numpy as np
import pytest

from vitta import data
from vitta.net import NetConfig, ToyVideoNet

TINY_DATA = data.MovingShapesConfig(size=16, frames=12, min_radius=2.0, max_radius=4.0,
                                    train_size=16, val_size=24, speed=(0.4, 0.8))
TINY_NET = NetConfig(frames=4, size=16, widths=(4, 4, 8, 8), groups=2)


@pytest.fixture(scope="session")
def tiny_clips():
    return data.ClipSet.from_config(TINY_DATA, "val")


@pytest.fixture(scope="session")
def tiny_train():
    return data.ClipSet.from_config(TINY_DATA, "train")


@pytest.fixture
def tiny_net():
    return ToyVideoNet(TINY_NET)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_run_files(tmp_path_factory):
    """A tiny dataset, checkpoint and statistics file on disk (untrained net)."""
    from vitta import net as N, stats as S

    root = tmp_path_factory.mktemp("tiny-artifacts")
    data.generate_dataset(TINY_DATA, root / "data")
    net = ToyVideoNet(TINY_NET)
    N.save_checkpoint(net, root / "net.vtt")
    train = data.load_split(root / "data", "train")
    S.save_stats(root / "stats.vtt", S.capture_train_stats(net, train, (1, 2, 3, 4)))
    alt = data.ClipSet.from_config(data.with_overrides(TINY_DATA, palette="alt"), "train")
    S.save_stats(root / "foreign.vtt", S.capture_train_stats(net, alt, (1, 2, 3, 4), provenance="foreign"))
    return {"root": root, "data": root / "data", "checkpoint": root / "net.vtt",
            "stats": root / "stats.vtt", "foreign": root / "foreign.vtt"}


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
