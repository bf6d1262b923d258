"""Physical system model: devices, channel, and the energy/latency formulas.

All quantities are linear-scale SI units. dB inputs are converted once, at
config load, with :func:`db_to_linear` / :func:`dbm_to_watts`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K


class DomainError(ValueError):
    """An argument lies outside the domain of a formula."""


def db_to_linear(db: float) -> float:
    return 10.0 ** (db / 10.0)


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


@dataclass(frozen=True)
class DeviceProfile:
    id: int
    data_size: int
    cycles_per_sample: float
    f_max: float = 1e9
    p_max: float = 1.0
    energy_budget: float = 0.1
    distance: float = 100.0
    kappa: float = 5e-27

    def __post_init__(self):
        for name in ("data_size", "cycles_per_sample", "f_max", "p_max",
                     "energy_budget", "distance", "kappa"):
            if not getattr(self, name) > 0:
                raise DomainError(f"device {self.id}: {name} must be > 0")
        if self.id < 0:
            raise DomainError(f"device id must be >= 0, got {self.id}")


@dataclass(frozen=True)
class SystemConfig:
    bandwidth: float = 10e6
    noise_psd: float = field(default_factory=lambda: dbm_to_watts(-174.0))
    t_max: float = 2.0
    local_iters: int = 5
    model_bits: float = 533504 * 16
    rounds: int = 40
    path_loss_const: float = field(default_factory=lambda: db_to_linear(-30.0))
    path_loss_exp: float = 2.0
    ref_distance: float = 1.0

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise DomainError("bandwidth must be > 0")
        if not self.noise_psd > 0:
            raise DomainError("noise_psd must be > 0")
        if not self.t_max > 0:
            raise DomainError("t_max must be > 0")
        if self.local_iters < 1:
            raise DomainError("local_iters must be >= 1")
        if not self.model_bits > 0:
            raise DomainError("model_bits must be > 0")
        if self.rounds < 0:
            raise DomainError("rounds must be >= 0")


@dataclass(frozen=True)
class ChannelRealization:
    gains: dict[int, float]
    round: int

    def __post_init__(self):
        for k, g in self.gains.items():
            if not g > 0:
                raise DomainError(f"gain of device {k} must be > 0, got {g}")

    def array(self, ids) -> np.ndarray:
        return np.array([self.gains[k] for k in ids], dtype=float)


def validate_population(profiles) -> None:
    ids = [p.id for p in profiles]
    if len(set(ids)) != len(ids):
        raise DomainError("device ids must be unique")


# --------------------------------------------------------------- RNG streams

STREAM_CHANNEL = 1
STREAM_TRAIN = 2
STREAM_POLICY = 3
STREAM_DATA = 4
STREAM_INIT = 5
STREAM_DEVICES = 6


def stream(seed: int, tag: int, device: int = 0, round: int = 0) -> np.random.Generator:
    """Counter-based stream for (seed, tag, device, round).

    Philox is keyed by the master seed; the identifiers occupy the high
    counter words so streams never overlap and do not depend on call order.
    """
    counter = np.array([0, round, device, tag], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=seed, counter=counter))


# ------------------------------------------------------------------ formulas


def channel_gain(profile: DeviceProfile, cfg: SystemConfig, fading: float) -> float:
    return cfg.path_loss_const * fading * (cfg.ref_distance / profile.distance) ** cfg.path_loss_exp


def sample_channel(profile: DeviceProfile, cfg: SystemConfig, rng: np.random.Generator) -> float:
    """Path loss times unit-mean exponential small-scale fading."""
    fading = rng.exponential(1.0)
    while fading <= 0.0:
        fading = rng.exponential(1.0)
    return channel_gain(profile, cfg, fading)


def sample_channels(profiles, cfg: SystemConfig, seed: int, round: int) -> ChannelRealization:
    """One fading draw per device from the round's channel stream, in ascending id order."""
    profiles = sorted(profiles, key=lambda p: p.id)
    fading = stream(seed, STREAM_CHANNEL, 0, round).exponential(1.0, size=len(profiles))
    # an exact zero has probability 2^-53 per draw; nudge it to the smallest normal
    fading = np.maximum(fading, np.finfo(float).tiny)
    gains = {p.id: channel_gain(p, cfg, float(f)) for p, f in zip(profiles, fading)}
    return ChannelRealization(gains=gains, round=round)


def workload(profile: DeviceProfile, tau: int) -> float:
    return tau * profile.data_size * profile.cycles_per_sample


def local_energy(profile: DeviceProfile, tau: int, t_comp: float) -> float:
    """kappa * (tau D_k C_k)^3 / t_comp^2 at the slowest clock that meets t_comp."""
    if not t_comp > 0:
        raise DomainError(f"t_comp must be > 0, got {t_comp}")
    return K.local_energy(profile.kappa, workload(profile, tau), t_comp)


def min_comp_time(profile: DeviceProfile, tau: int) -> float:
    return workload(profile, tau) / profile.f_max


def _check_theta(theta: float) -> None:
    if not 0.0 < theta <= 1.0:
        raise DomainError(f"bandwidth fraction must be in (0, 1], got {theta}")


def uplink_rate(theta: float, power: float, gain: float, cfg: SystemConfig) -> float:
    _check_theta(theta)
    if power < 0:
        raise DomainError(f"power must be >= 0, got {power}")
    wb = theta * cfg.bandwidth
    return wb * math.log1p(power * gain / (wb * cfg.noise_psd)) / K.LN2


def max_rate(theta: float, profile: DeviceProfile, gain: float, cfg: SystemConfig) -> float:
    return uplink_rate(theta, profile.p_max, gain, cfg)


def uplink_power(theta: float, t_comm: float, gain: float, cfg: SystemConfig,
                 exp2_cap: float = 700.0) -> float:
    """Transmit power that pushes exactly Q bits through in t_comm seconds."""
    _check_theta(theta)
    if not t_comm > 0:
        raise DomainError(f"t_comm must be > 0, got {t_comm}")
    return K.uplink_power(theta, t_comm, gain, cfg.model_bits, cfg.bandwidth,
                          cfg.noise_psd, exp2_cap)


def uplink_energy(theta: float, t_comm: float, gain: float, cfg: SystemConfig,
                  exp2_cap: float = 700.0) -> float:
    _check_theta(theta)
    if not t_comm > 0:
        raise DomainError(f"t_comm must be > 0, got {t_comm}")
    return K.uplink_energy(theta, t_comm, gain, cfg.model_bits, cfg.bandwidth,
                           cfg.noise_psd, exp2_cap)


def min_comm_time(theta: float, gain: float, profile: DeviceProfile, cfg: SystemConfig) -> float:
    return cfg.model_bits / max_rate(theta, profile, gain, cfg)


def generate_devices(count: int, seed: int, *, data_sizes, cycles_per_sample: float,
                     cell_size: float = 500.0, min_distance: float = 10.0,
                     f_max: float = 1e9, p_max: float = 1.0, energy_budget: float = 0.1,
                     kappa: float = 5e-27) -> list[DeviceProfile]:
    """Devices dropped uniformly in a square cell with the server at its centre."""
    rng = stream(seed, STREAM_DEVICES)
    half = cell_size / 2.0
    out = []
    for k in range(count):
        d = 0.0
        while d < min_distance:
            x, y = rng.uniform(-half, half, size=2)
            d = math.hypot(x, y)
        out.append(DeviceProfile(id=k, data_size=int(data_sizes[k]),
                                 cycles_per_sample=cycles_per_sample, f_max=f_max,
                                 p_max=p_max, energy_budget=energy_budget,
                                 distance=d, kappa=kappa))
    return out
