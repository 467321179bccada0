import numpy as np
import pytest

from pare.config import Config, ModelConfig, TrainConfig, micro_preset
from pare.data import PhantomSpec, generate_dataset
from pare.data.phantom import VolumeSample


def nano_config(**train) -> Config:
    """Smallest full model: 8^3 input, two levels, 8 context tokens, D=8."""
    model = ModelConfig(input_shape=(8, 8, 8), level_channels=(2, 4), embed_dim=8, window=(4, 4, 4),
                        stride=(4, 4, 4), num_layers=1, num_heads=2, mlp_ratio=2, num_prototypes=2)
    return Config(model, TrainConfig(batch_size=2, total_iters=10, warmup_W=3, **train)).validate()


def nano_samples(n: int, seed: int = 0, masked=True) -> list[VolumeSample]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        mask = rng.integers(0, 5, (8, 8, 8)).astype(np.uint8) if masked else None
        out.append(VolumeSample(f"n{i}", rng.random((8, 8, 8)).astype(np.float32), mask, i % 2,
                                6.0, 1.0, {"vessel_contact": 0, "spiculation": 0.0}))
    return out


@pytest.fixture(scope="session")
def micro_cfg() -> Config:
    return micro_preset()


@pytest.fixture(scope="session")
def phantoms() -> list[VolumeSample]:
    """24 default-spec phantoms (16x24x24), shared read-only across tests."""
    return generate_dataset(PhantomSpec(), 24, seed=11)


@pytest.fixture(scope="session")
def benchmark() -> list[VolumeSample]:
    """The default synthetic benchmark: 2500 phantoms, seed 0; first 2000 train, last 500 test."""
    return generate_dataset(PhantomSpec(), 2500, seed=0)


_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line for an acceptance criterion; shown in the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, {})

    def record(number: int, ok: bool, detail: str) -> bool:
        lines[number] = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(lines[number])
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
