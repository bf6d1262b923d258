"""Online device scheduling: energy virtual queues and set expansion.

Each round the scheduler minimises -V * (scheduled data) + sum_k q_k E_k over
candidate sets grown greedily in ascending order of q_k * E_k, where E_k is
the per-device energy under an equal bandwidth split. Queues then grow by the
energy actually spent and drain by the per-round share of the budget.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels as K
from .resopt import (DEFAULT_OPTIONS, Allocation, DeviceArrays, SolverError,
                     SolverOptions, solve_arrays)
from .sysmodel import ChannelRealization, DeviceProfile, SystemConfig, workload


@dataclass
class VirtualQueueState:
    ids: list[int]
    queues: np.ndarray
    cumulative_energy: np.ndarray
    per_round_budget: np.ndarray
    round: int = 0

    @classmethod
    def initial(cls, profiles: Sequence[DeviceProfile], rounds: int) -> "VirtualQueueState":
        profiles = sorted(profiles, key=lambda p: p.id)
        n = len(profiles)
        budget = np.array([p.energy_budget / rounds if rounds > 0 else np.inf
                           for p in profiles])
        return cls(ids=[p.id for p in profiles], queues=np.zeros(n),
                   cumulative_energy=np.zeros(n), per_round_budget=budget)

    def index(self, k: int) -> int:
        return self.ids.index(k)

    def queue(self, k: int) -> float:
        return float(self.queues[self.index(k)])

    def as_dict(self) -> dict[int, float]:
        return dict(zip(self.ids, self.queues.tolist()))

    def copy(self) -> "VirtualQueueState":
        return VirtualQueueState(list(self.ids), self.queues.copy(),
                                 self.cumulative_energy.copy(),
                                 self.per_round_budget.copy(), self.round)

    def step(self, energy_by_device: dict[int, float]) -> None:
        """Advance every queue by one round in place; absent devices were not scheduled."""
        spent = np.zeros(len(self.ids))
        for k, e in energy_by_device.items():
            spent[self.index(k)] = e
        self.queues = np.maximum(self.queues + spent - self.per_round_budget, 0.0)
        self.cumulative_energy = self.cumulative_energy + spent
        self.round += 1


def update_queue(state: VirtualQueueState, k: int, scheduled: bool,
                 energy_spent: float) -> VirtualQueueState:
    """q_k <- max(q_k + alpha E_k - E_k/T, 0) for one device; returns a new state."""
    if energy_spent < 0:
        raise ValueError("energy_spent must be >= 0")
    if not scheduled and energy_spent != 0:
        raise ValueError("an unscheduled device spends no energy")
    out = state.copy()
    i = out.index(k)
    spent = energy_spent if scheduled else 0.0
    out.queues[i] = max(out.queues[i] + spent - out.per_round_budget[i], 0.0)
    out.cumulative_energy[i] += spent
    return out


@dataclass
class RoundDecision:
    selected: list[int]
    allocation: Allocation

    def energy(self) -> dict[int, float]:
        return self.allocation.as_dict("energy")


@dataclass
class ScheduleOutcome:
    decision: RoundDecision
    objective: float
    candidates_evaluated: int
    exhausted: str                       # "stop-rule", "infeasible" or "exhausted"
    dropped: list[int] = field(default_factory=list)
    chain: list[list[int]] = field(default_factory=list)

    @property
    def flagged(self) -> bool:
        return bool(self.dropped)


class DeviceTable:
    """Static per-device columns for a population, built once per simulation."""

    def __init__(self, profiles: Sequence[DeviceProfile], cfg: SystemConfig):
        self.profiles = sorted(profiles, key=lambda p: p.id)
        self.cfg = cfg
        self.ids = [p.id for p in self.profiles]
        self.arrays = DeviceArrays.build(self.profiles, cfg.local_iters)
        self.t_min = self.arrays.workload / self.arrays.f_max

    def round_view(self, gains: ChannelRealization, queues: np.ndarray) -> DeviceArrays:
        return self.arrays.with_round(gains.array(self.ids), queues)


def _feasible_mask(view: DeviceArrays, t_min: np.ndarray, cfg: SystemConfig) -> np.ndarray:
    return K.feasible_mask(t_min, view.p_max, view.gains, cfg.model_bits, cfg.bandwidth,
                           cfg.noise_psd, cfg.t_max)


def feasibility_filter(profiles: Sequence[DeviceProfile], gains: ChannelRealization,
                       cfg: SystemConfig) -> set[int]:
    """Devices whose fastest compute plus full-band upload fits in T_max."""
    table = DeviceTable(profiles, cfg)
    view = table.round_view(gains, np.zeros(len(table.ids)))
    mask = _feasible_mask(view, table.t_min, cfg)
    return {k for k, ok in zip(table.ids, mask) if ok}


def _min_shares(view: DeviceArrays, t_min: np.ndarray, cfg: SystemConfig,
                options: SolverOptions) -> np.ndarray:
    return K.min_shares(t_min, view.p_max, view.gains, cfg.model_bits, cfg.bandwidth,
                        cfg.noise_psd, cfg.t_max, options.exp2_cap)


def estimate_equal_bandwidth_energy(profile: DeviceProfile, gain: float, cfg: SystemConfig,
                                    n_devices: int,
                                    options: SolverOptions = DEFAULT_OPTIONS) -> float:
    """Energy at share 1/n_devices with the optimal time split; inf when infeasible."""
    out = K.equal_share_energy(
        np.array([profile.kappa]), np.array([workload(profile, cfg.local_iters)]),
        np.array([profile.f_max]), np.array([profile.p_max]), np.array([gain]),
        1.0 / n_devices, cfg.model_bits, cfg.bandwidth, cfg.noise_psd, cfg.t_max,
        options.exp2_cap, options.time_iter)
    return float(out[0])


def _solve(view: DeviceArrays, idx, cfg, V, options, warm: Allocation | None = None) -> Allocation:
    sub = view.take(sorted(idx, key=lambda i: view.ids[i]))
    t_init = None
    if warm is not None:
        prev = warm.as_dict("t_comp")
        t_init = np.array([prev.get(k, np.nan) for k in sub.ids.tolist()])
    q = sub.queues
    zero = q == 0.0
    if options.zero_queue_weight <= 0.0 or not zero.any():
        return solve_arrays(sub, cfg, V, options, t_init)
    # Zero-queue devices do not enter the objective, so any allocation that
    # keeps them feasible is optimal; by default they sit at their minimum
    # share. A small weight instead makes the solver pick the least-energy
    # allocation for them. The reported objective uses the true queues.
    floor = options.zero_queue_weight * (q.max() if q.max() > 0 else 1.0)
    alloc = solve_arrays(sub.with_round(sub.gains, np.where(zero, floor, q)), cfg, V,
                         options, t_init)
    alloc.weighted_energy = float(np.dot(q, alloc.energy))
    alloc.objective = -V * float(sub.data_size.sum()) + alloc.weighted_energy
    return alloc


def _fit_zero_queue(zero_idx: list[int], shares: np.ndarray) -> tuple[list[int], list[int]]:
    """Drop zero-queue devices, largest bandwidth demand first, until the rest fit."""
    keep = list(zero_idx)
    dropped = []
    while keep and shares[keep].sum() > 1.0 + 1e-12:
        worst = max(keep, key=lambda i: (shares[i], -i))
        keep.remove(worst)
        dropped.append(worst)
    return keep, dropped


def schedule_round(state: VirtualQueueState, gains: ChannelRealization, V: float,
                   cfg: SystemConfig, profiles: Sequence[DeviceProfile] | None = None,
                   options: SolverOptions = DEFAULT_OPTIONS,
                   table: DeviceTable | None = None) -> ScheduleOutcome:
    """Set-expansion scheduling for one round."""
    if V < 0:
        raise ValueError("V must be >= 0")
    if table is None:
        table = DeviceTable(profiles, cfg)
    view = table.round_view(gains, state.queues)
    feasible = _feasible_mask(view, table.t_min, cfg)
    q = view.queues

    zero_idx = [i for i in range(len(table.ids)) if feasible[i] and q[i] == 0.0]
    pos_idx = [i for i in range(len(table.ids)) if feasible[i] and q[i] > 0.0]
    shares = _min_shares(view, table.t_min, cfg, options)
    s0, dropped = _fit_zero_queue(zero_idx, shares)

    e_bar = K.equal_share_energy(
        view.kappa, view.workload, view.f_max, view.p_max, view.gains,
        1.0 / len(table.ids), cfg.model_bits, cfg.bandwidth, cfg.noise_psd, cfg.t_max,
        options.exp2_cap, options.time_iter)
    ranked = sorted((i for i in pos_idx if np.isfinite(e_bar[i])),
                    key=lambda i: (q[i] * e_bar[i], table.ids[i]))

    current = list(s0)
    best = _solve(view, current, cfg, V, options)
    best_set = list(current)
    chain = [[table.ids[i] for i in sorted(current)]]
    last = best
    evaluated = 1
    reason = "exhausted"
    for i in ranked:
        cand = current + [i]
        try:
            alloc = _solve(view, cand, cfg, V, options, warm=last)
        except SolverError:
            reason = "infeasible"
            break
        evaluated += 1
        e_i = alloc.energy[alloc.ids.index(table.ids[i])]
        if -V * view.data_size[i] + q[i] * e_i > 0:
            reason = "stop-rule"
            break
        current = cand
        last = alloc
        chain.append([table.ids[j] for j in sorted(current)])
        if alloc.objective < best.objective:
            best, best_set = alloc, list(current)

    selected = sorted(table.ids[i] for i in best_set)
    return ScheduleOutcome(
        decision=RoundDecision(selected=selected, allocation=best),
        objective=best.objective, candidates_evaluated=evaluated, exhausted=reason,
        dropped=sorted(table.ids[i] for i in dropped), chain=chain)


def set_objective(selected: Sequence[int], state: VirtualQueueState, gains: ChannelRealization,
                  V: float, cfg: SystemConfig, table: DeviceTable,
                  options: SolverOptions = DEFAULT_OPTIONS) -> Allocation:
    """Allocation and drift-plus-penalty value of an arbitrary set (raises if infeasible)."""
    view = table.round_view(gains, state.queues)
    idx = [table.ids.index(k) for k in selected]
    return _solve(view, idx, cfg, V, options)


def exhaustive_schedule(state: VirtualQueueState, gains: ChannelRealization, V: float,
                        cfg: SystemConfig, table: DeviceTable,
                        options: SolverOptions = DEFAULT_OPTIONS) -> tuple[list[int], float]:
    """Brute-force minimum of the per-round objective over all feasible subsets."""
    view = table.round_view(gains, state.queues)
    feasible = np.flatnonzero(_feasible_mask(view, table.t_min, cfg)).tolist()
    best_set, best_val = [], 0.0
    for r in range(1, len(feasible) + 1):
        for combo in itertools.combinations(feasible, r):
            try:
                val = _solve(view, list(combo), cfg, V, options).objective
            except SolverError:
                continue
            if val < best_val:
                best_set, best_val = [table.ids[i] for i in combo], val
    return best_set, best_val


def random_expansion(state: VirtualQueueState, gains: ChannelRealization, V: float,
                     cfg: SystemConfig, table: DeviceTable, rng: np.random.Generator,
                     max_devices: int = 0,
                     options: SolverOptions = DEFAULT_OPTIONS) -> ScheduleOutcome:
    """Energy-blind baseline: add feasible devices in random order while the band fits."""
    view = table.round_view(gains, state.queues)
    feasible = np.flatnonzero(_feasible_mask(view, table.t_min, cfg))
    shares = _min_shares(view, table.t_min, cfg, options)
    order = rng.permutation(feasible).tolist()
    chosen: list[int] = []
    used = 0.0
    for i in order:
        if max_devices and len(chosen) >= max_devices:
            break
        if used + shares[i] > 1.0 + 1e-12:
            break
        chosen.append(i)
        used += shares[i]
    alloc = _solve(view, chosen, cfg, V, options)
    return ScheduleOutcome(
        decision=RoundDecision(selected=sorted(table.ids[i] for i in chosen), allocation=alloc),
        objective=alloc.objective, candidates_evaluated=len(chosen) + 1,
        exhausted="infeasible")


def all_feasible(state: VirtualQueueState, gains: ChannelRealization, V: float,
                 cfg: SystemConfig, table: DeviceTable,
                 options: SolverOptions = DEFAULT_OPTIONS) -> ScheduleOutcome:
    """Schedule every individually feasible device.

    When the set does not fit into the band the energy bill is computed at an
    equal split with the fastest clock and the outcome is marked
    "overcommitted".
    """
    view = table.round_view(gains, state.queues)
    idx = np.flatnonzero(_feasible_mask(view, table.t_min, cfg)).tolist()
    try:
        alloc = _solve(view, idx, cfg, V, options)
        reason = "exhausted"
    except SolverError:
        sub = view.take(idx)
        n = len(idx)
        theta = np.full(n, 1.0 / n)
        t_comp = table.t_min[idx]
        energy = np.array([
            K.local_energy(sub.kappa[j], sub.workload[j], t_comp[j])
            + K.uplink_energy(theta[j], cfg.t_max - t_comp[j], sub.gains[j], cfg.model_bits,
                              cfg.bandwidth, cfg.noise_psd, options.exp2_cap)
            for j in range(n)])
        # a device that cannot finish its upload at 1/n of the band is billed
        # for transmitting at full power for the whole upload window
        bad = ~np.isfinite(energy)
        energy[bad] = np.array([K.local_energy(sub.kappa[j], sub.workload[j], t_comp[j])
                                + sub.p_max[j] * (cfg.t_max - t_comp[j])
                                for j in np.flatnonzero(bad)])
        weighted = float(np.dot(sub.queues, energy))
        alloc = Allocation(ids=sub.ids.tolist(), theta=theta, t_comp=t_comp,
                           t_comm=cfg.t_max - t_comp, energy=energy,
                           weighted_energy=weighted,
                           objective=-V * float(sub.data_size.sum()) + weighted)
        reason = "overcommitted"
    return ScheduleOutcome(
        decision=RoundDecision(selected=sorted(table.ids[i] for i in idx), allocation=alloc),
        objective=alloc.objective, candidates_evaluated=1, exhausted=reason)
