import dataclasses

import numpy as np
import pytest

from entroprune.nose import nose_select, ratio_to_count
from entroprune.pipeline import (BENCH_MODEL, PROBE_SIZE, benchmark_data, dilute_and_fuse,
                                 train_dense)
from entroprune.vit import ViTConfig, ViTModel

# acceptance lines collected by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, text = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d}: {text}")


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


TOY = ViTConfig(image_hw=(8, 8), patch_hw=(4, 4), in_chans=3, embed_dim=16, depth=6, heads=2,
                mlp_ratio=2.0, num_classes=5, seed=0)


@pytest.fixture
def toy_config() -> ViTConfig:
    return TOY


@pytest.fixture
def toy64() -> ViTModel:
    return ViTModel(TOY, np.float64)


@pytest.fixture
def images8() -> np.ndarray:
    return np.random.default_rng(1).random((64, 8, 8, 3))


@pytest.fixture(scope="session")
def bench_data():
    return benchmark_data()


@pytest.fixture(scope="session")
def trained6(bench_data):
    """Depth-6 benchmark model trained on the synthetic task."""
    model, _ = train_dense(bench_data[0])
    return model


@pytest.fixture(scope="session")
def trained8(bench_data):
    """Depth-8 variant of the benchmark model."""
    model, _ = train_dense(bench_data[0], dataclasses.replace(BENCH_MODEL, depth=8))
    return model


@pytest.fixture(scope="session")
def nose_pick(trained6, bench_data):
    """NOSE choice at a 40% removal ratio on the depth-6 benchmark model."""
    n = ratio_to_count(0.4, trained6.config.depth)
    return nose_select(trained6, n, bench_data[0].images[:PROBE_SIZE]).selected


@pytest.fixture(scope="session")
def ablation(trained6, bench_data, nose_pick):
    """(compensation, seed) -> (fused model, dilution log) for seeds 0-2."""
    runs = {}
    for comp in (True, False):
        for seed in (0, 1, 2):
            _, fused, log = dilute_and_fuse(trained6, nose_pick, bench_data[0],
                                            compensation=comp, seed=seed)
            runs[comp, seed] = (fused, log)
    return runs
