import numpy as np
import pytest

from wfl_pma import sysmodel as S
from wfl_pma.resopt import AllocationInput

# a small upload and a heavy per-sample workload put the compute/upload
# trade-off in the interesting range for a 10 MHz band
TEST_CFG = S.SystemConfig(model_bits=1e6, rounds=1000, t_max=2.0)


def random_profiles(rng, n, cycles=4e6, budget=1000.0):
    return [S.DeviceProfile(id=k, data_size=int(rng.integers(20, 61)), cycles_per_sample=cycles,
                            energy_budget=budget, distance=float(rng.uniform(20.0, 250.0)))
            for k in range(n)]


def random_instance(seed, n, cfg=TEST_CFG, zero_queue_prob=0.0):
    """Profiles, gains and queues for ``n`` devices, all individually feasible."""
    rng = np.random.default_rng(seed)
    profiles = random_profiles(rng, n)
    gains = S.ChannelRealization({p.id: S.channel_gain(p, cfg, float(rng.exponential()) + 0.05)
                                  for p in profiles}, round=0)
    q = rng.uniform(0.5, 10.0, size=n) * (rng.random(n) >= zero_queue_prob)
    queues = {p.id: float(v) for p, v in zip(profiles, q)}
    return AllocationInput(scheduled=[p.id for p in profiles], queues=queues, gains=gains,
                           profiles=profiles, cfg=cfg)


@pytest.fixture
def cfg():
    return TEST_CFG


def pytest_configure(config):
    config._acceptance_lines = []


@pytest.fixture(scope="session")
def acceptance_lines(request):
    return request.config._acceptance_lines


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


SMALL_OVERRIDES = {
    "devices.count": 5, "devices.energy_budget": 1.0,
    "learning.hidden": [16], "learning.split_depth": 1,
    "data.synthetic.dim": 16, "data.synthetic.latent": 4,
    "data.synthetic.train_per_class": 12, "data.synthetic.test_per_class": 10,
    "data.synthetic.nuisance_rank": 2,
    "run.rounds": 3,
}


def small_config(**extra):
    """A five-device synthetic run that finishes in well under a second."""
    from wfl_pma.config import ExperimentConfig
    return ExperimentConfig().replace(**{**SMALL_OVERRIDES, **extra})
