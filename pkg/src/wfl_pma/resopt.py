"""Per-round resource allocation for a fixed set of scheduled devices.

Three solvers, bottom-up:

* :func:`optimal_comp_time` - split of the round deadline between local
  computation and upload for one device at a fixed bandwidth share;
* :func:`bandwidth_allocation` - queue-weighted upload energy minimised over
  the bandwidth simplex, via the Lambert-W closed form of the KKT conditions
  and bisection on the multiplier;
* :func:`alternating_allocate` - the two above iterated until the weighted
  energy stops decreasing.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import _kernels as K
from .sysmodel import (ChannelRealization, DeviceProfile, DomainError, SystemConfig,
                       validate_population, workload)


class SolverError(RuntimeError):
    pass


class InfeasibleDeviceError(SolverError):
    """A device cannot meet the deadline at the given bandwidth share."""


class InfeasibleSetError(SolverError):
    """The scheduled set does not fit into the available bandwidth."""


class NumericalFailure(SolverError):
    pass


class ConvergenceFailure(SolverError):
    pass


_ERRORS = {
    K.INFEASIBLE: InfeasibleSetError,
    K.NUMERICAL: NumericalFailure,
    K.NO_CONVERGENCE: ConvergenceFailure,
}


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-8              # outer loop, absolute on sum q_k E_k
    max_outer: int = 100
    sum_tol: float = 1e-9          # |sum theta - 1| at the multiplier
    lambda_iter: int = 200
    time_iter: int = 60
    exp2_cap: float = 700.0        # largest admissible Q / (theta B T^U)
    extrapolate: bool = True       # safeguarded jumps in the outer loop
    zero_queue_weight: float = 0.0  # >0: least-energy tie-break for zero-queue devices (scheduler)


DEFAULT_OPTIONS = SolverOptions()


@dataclass
class AllocationInput:
    scheduled: Sequence[int]
    queues: Mapping[int, float]
    gains: ChannelRealization
    profiles: Sequence[DeviceProfile]
    cfg: SystemConfig

    def __post_init__(self):
        validate_population(self.profiles)
        known = {p.id for p in self.profiles}
        missing = set(self.scheduled) - known
        if missing:
            raise DomainError(f"scheduled ids not in population: {sorted(missing)}")
        for k in self.scheduled:
            if self.queues.get(k, 0.0) < 0:
                raise DomainError(f"queue of device {k} is negative")

    @property
    def ids(self) -> list[int]:
        return sorted(set(self.scheduled))

    def arrays(self) -> "DeviceArrays":
        by_id = {p.id: p for p in self.profiles}
        ids = self.ids
        return DeviceArrays.build([by_id[k] for k in ids], self.cfg.local_iters).with_round(
            self.gains.array(ids), np.array([self.queues.get(k, 0.0) for k in ids], dtype=float))


@dataclass
class Allocation:
    ids: list[int]
    theta: np.ndarray
    t_comp: np.ndarray
    t_comm: np.ndarray
    energy: np.ndarray
    weighted_energy: float
    objective: float
    iterations: int = 0
    history: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def as_dict(self, name: str) -> dict[int, float]:
        return dict(zip(self.ids, getattr(self, name).tolist()))


@dataclass
class DeviceArrays:
    """Column view of a device subset, aligned with ``ids``."""
    ids: np.ndarray
    data_size: np.ndarray
    kappa: np.ndarray
    workload: np.ndarray
    f_max: np.ndarray
    p_max: np.ndarray
    gains: np.ndarray | None = None
    queues: np.ndarray | None = None

    @classmethod
    def build(cls, profiles: Sequence[DeviceProfile], tau: int) -> "DeviceArrays":
        return cls(
            ids=np.array([p.id for p in profiles], dtype=np.int64),
            data_size=np.array([p.data_size for p in profiles], dtype=float),
            kappa=np.array([p.kappa for p in profiles], dtype=float),
            workload=np.array([workload(p, tau) for p in profiles], dtype=float),
            f_max=np.array([p.f_max for p in profiles], dtype=float),
            p_max=np.array([p.p_max for p in profiles], dtype=float),
        )

    def with_round(self, gains: np.ndarray, queues: np.ndarray) -> "DeviceArrays":
        return DeviceArrays(self.ids, self.data_size, self.kappa, self.workload,
                            self.f_max, self.p_max, np.asarray(gains, float),
                            np.asarray(queues, float))

    def take(self, idx) -> "DeviceArrays":
        idx = np.asarray(idx, dtype=np.int64)
        return DeviceArrays(self.ids[idx], self.data_size[idx], self.kappa[idx],
                            self.workload[idx], self.f_max[idx], self.p_max[idx],
                            None if self.gains is None else self.gains[idx],
                            None if self.queues is None else self.queues[idx])


# ----------------------------------------------------------------- Lambert W


def lambert_w0(x: float) -> float:
    """Principal branch of the Lambert W function for real x >= -1/e."""
    if not x >= -1.0 / K.EULER:
        raise DomainError(f"lambert_w0 needs x >= -1/e, got {x}")
    return K.lambertw0(float(x))


# ------------------------------------------------------------ time subproblem


def optimal_comp_time(profile: DeviceProfile, theta: float, queue: float, gain: float,
                      cfg: SystemConfig, options: SolverOptions = DEFAULT_OPTIONS) -> float:
    """Energy-optimal computation time T^L for one device at share ``theta``.

    The positive queue weight scales the per-device objective and so does not
    move its minimiser; it is accepted for interface symmetry.
    """
    if not 0.0 < theta <= 1.0:
        raise DomainError(f"bandwidth fraction must be in (0, 1], got {theta}")
    if queue < 0:
        raise DomainError("queue must be >= 0")
    t, status, _ = K.optimal_comp_time(
        profile.kappa, workload(profile, cfg.local_iters), profile.f_max, theta, gain,
        cfg.model_bits, cfg.bandwidth, cfg.noise_psd, profile.p_max, cfg.t_max,
        options.time_iter)
    if status != K.OK:
        raise InfeasibleDeviceError(
            f"device {profile.id}: empty computation-time window at theta={theta}")
    return t


def comp_time_window(profile: DeviceProfile, theta: float, gain: float,
                     cfg: SystemConfig) -> tuple[float, float]:
    lo = workload(profile, cfg.local_iters) / profile.f_max
    rm = K.max_rate(theta, cfg.bandwidth, cfg.noise_psd, profile.p_max, gain)
    return lo, cfg.t_max - cfg.model_bits / rm


# ------------------------------------------------------- bandwidth subproblem


def bandwidth_objective(theta, queues, gains, t_comm, cfg: SystemConfig,
                        exp2_cap: float = 700.0) -> float:
    """h(theta) = sum_k q_k E^U_k(theta_k, T_max - T^L_k)."""
    total = 0.0
    for th, q, h, t in zip(theta, queues, gains, t_comm):
        if q == 0:
            continue
        total += q * K.uplink_energy(th, t, h, cfg.model_bits, cfg.bandwidth,
                                     cfg.noise_psd, exp2_cap)
    return total


def bandwidth_allocation(inp: AllocationInput, t_comp: Mapping[int, float],
                         options: SolverOptions = DEFAULT_OPTIONS) -> dict[int, float]:
    """Optimal bandwidth shares for the scheduled set at fixed computation times."""
    arr = inp.arrays()
    if arr.ids.size == 0:
        return {}
    t_comm = np.array([inp.cfg.t_max - t_comp[k] for k in arr.ids.tolist()], dtype=float)
    if np.any(t_comm <= 0):
        raise InfeasibleSetError("computation time leaves no time for the upload")
    theta, _, _, status = K.allocate_bandwidth(
        arr.queues, arr.gains, t_comm, arr.p_max, inp.cfg.model_bits, inp.cfg.bandwidth,
        inp.cfg.noise_psd, options.exp2_cap, options.sum_tol, options.lambda_iter)
    if status != K.OK:
        raise _ERRORS[status](f"bandwidth allocation failed for set {arr.ids.tolist()}")
    return dict(zip(arr.ids.tolist(), theta.tolist()))


def kkt_share(lam: float, queue: float, gain: float, t_comm: float, cfg: SystemConfig) -> float:
    """Bandwidth share a device takes at multiplier ``lam`` (no lower bound applied)."""
    a = cfg.model_bits * K.LN2 / (cfg.bandwidth * t_comm)
    c = gain / (queue * cfg.noise_psd * cfg.bandwidth * t_comm)
    return K.share_of_multiplier(lam, a, c)


def min_share(t_comm: float, profile: DeviceProfile, gain: float, cfg: SystemConfig,
              exp2_cap: float = 700.0) -> float:
    """Least bandwidth share that uploads Q bits in t_comm at full power (inf if none)."""
    return K.min_bandwidth(t_comm, cfg.model_bits, cfg.bandwidth, cfg.noise_psd,
                           profile.p_max, gain, exp2_cap)


# --------------------------------------------------------- joint allocation


def solve_arrays(arr: DeviceArrays, cfg: SystemConfig, V: float = 0.0,
                 options: SolverOptions = DEFAULT_OPTIONS,
                 t_init: np.ndarray | None = None) -> Allocation:
    """Alternating allocation on a prepared column view (hot path of the scheduler).

    ``t_init`` optionally seeds the computation times (NaN = fastest clock).
    """
    if t_init is None:
        t_init = np.full(arr.ids.size, np.nan)
    theta, t_comp, energy, history, n_iter, status = K.alternate(
        arr.kappa, arr.workload, arr.f_max, arr.p_max, arr.gains, arr.queues,
        cfg.model_bits, cfg.bandwidth, cfg.noise_psd, cfg.t_max, options.exp2_cap,
        options.tol, options.max_outer, options.sum_tol, options.lambda_iter,
        options.time_iter, np.asarray(t_init, dtype=float), options.extrapolate)
    if status != K.OK:
        raise _ERRORS[status](f"allocation failed for set {arr.ids.tolist()}")
    weighted = float(np.dot(arr.queues, energy))
    return Allocation(
        ids=arr.ids.tolist(), theta=theta, t_comp=t_comp, t_comm=cfg.t_max - t_comp,
        energy=energy, weighted_energy=weighted,
        objective=-V * float(arr.data_size.sum()) + weighted,
        iterations=n_iter, history=history[:n_iter].copy())


def alternating_allocate(inp: AllocationInput, V: float = 0.0,
                         options: SolverOptions = DEFAULT_OPTIONS) -> Allocation:
    """Joint bandwidth / computation-time allocation for a fixed scheduled set.

    Starts from the fastest computation time, then alternates the bandwidth
    and time subproblems until the decrease of sum_k q_k E_k is at most
    ``options.tol``. ``objective`` is -V sum D_k + sum q_k E_k.
    """
    return solve_arrays(inp.arrays(), inp.cfg, V, options)
