import pytest

from mitune.denoiser import MlpDenoiser, TrainConfig, train
from mitune.gaussian_world import GaussianWorld, ring_means
from mitune.schedule import build_schedule

# acceptance lines collected by tests/test_acceptance.py
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def short_schedule():
    return build_schedule(100, 1e-3, 0.1)


@pytest.fixture(scope="session")
def two_mode_world():
    return GaussianWorld.mixture(ring_means(2, 2, 2.0), data_sigma=0.3)


@pytest.fixture(scope="session")
def trained_two_mode(two_mode_world, short_schedule):
    """Small net trained on a clean two-mode mixture (shared, never mutated)."""
    net = MlpDenoiser(2, 2, hidden=(32, 32), seed=0)
    cfg = TrainConfig(iterations=2000, batch_size=256, lr=3e-3, seed=0)
    trained, trace = train(net, two_mode_world, short_schedule, cfg)
    return trained, trace


def finite_diff_check(f, params, grads, rng, n_probe=6, h=1e-5):
    """Max relative error between analytic ``grads`` and central differences of ``f``."""
    worst = 0.0
    for name, arr in params.items():
        flat = arr.reshape(-1)
        for idx in rng.choice(flat.size, size=min(n_probe, flat.size), replace=False):
            old = flat[idx]
            flat[idx] = old + h
            fp = f()
            flat[idx] = old - h
            fm = f()
            flat[idx] = old
            num = (fp - fm) / (2 * h)
            ana = grads[name].reshape(-1)[idx]
            denom = max(abs(num), abs(ana), 1e-6)
            worst = max(worst, abs(num - ana) / denom)
    return worst
