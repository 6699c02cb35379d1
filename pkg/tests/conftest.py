import numpy as np
import pytest

from adav import autodiff as ad
from adav import detector as det


def central_diff(f, x: np.ndarray, idx, eps: float = 1e-3) -> float:
    xp, xm = x.copy(), x.copy()
    xp[idx] += eps
    xm[idx] -= eps
    return (f(xp) - f(xm)) / (2 * eps)


def small_weights(seed: int = 0, dtype=np.float64) -> det.DetectorWeights:
    """Default architecture with a little bias noise so no unit sits exactly at a kink."""
    w = det.init_weights(seed)
    rng = np.random.default_rng(seed + 100)
    for layer in w.all_layers():
        layer.kernel = layer.kernel.astype(dtype)
        layer.bias = (layer.bias + rng.normal(0, 0.05, layer.bias.shape)).astype(dtype)
    return w


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def weights64():
    return small_weights(0)


def three_layer_net(rng, x):
    """conv-relu x3 then a 1x1 projection; used for exhaustive guided-rule checks."""
    layers = [
        (rng.normal(0, 0.5, (3, 3, 2, 4)), rng.normal(0, 0.1, 4)),
        (rng.normal(0, 0.5, (3, 3, 4, 4)), rng.normal(0, 0.1, 4)),
        (rng.normal(0, 0.5, (3, 3, 4, 3)), rng.normal(0, 0.1, 3)),
    ]
    h = x
    for k, b in layers:
        h = ad.relu(ad.conv2d(h, k, b, stride=1, pad=1))
    proj = rng.normal(0, 1.0, (1, 1, 3, 2))
    return ad.conv2d(h, proj, np.zeros(2))


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE: dict[str, str] = {}


def record(name: str, ok: bool, detail: str) -> bool:
    ACCEPTANCE[name] = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance")
        for name in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[name])
