"""Convergence bounds for partial aggregation under partial participation.

The per-round contraction factor is

    A_t = 1 + eta_u L_u ((4 / D^2) (D - s_t)^2 rho^2 - 1),

where s_t is the data held by the devices scheduled in round t and D the
total. After T rounds the optimality gap is bounded by

    gap * prod_t A_t + sum_t (2 eta_u delta^2 / D^2) (D - s_t)^2 prod_{j>t} A_j.
"""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class BoundsError(ValueError):
    pass


class DegenerateInputError(BoundsError):
    pass


@dataclass(frozen=True)
class BoundConstants:
    L_u: float
    L_v: float = 0.0
    chi: float = 0.0
    delta: float = 0.0
    rho: float = 0.0
    eta_u: float = 0.05

    def __post_init__(self):
        for name in ("L_u", "L_v", "chi", "delta", "rho", "eta_u"):
            val = getattr(self, name)
            if not (val >= 0 and math.isfinite(val)):
                raise BoundsError(f"{name} must be finite and >= 0, got {val}")

    @property
    def step_limit(self) -> float:
        """Largest eta_u the one-round descent argument allows."""
        return math.inf if self.L_u == 0 else 1.0 / ((self.chi + 1.0) * self.L_u)

    def step_ok(self) -> bool:
        return self.eta_u <= self.step_limit

    def check(self, strict: bool = True) -> bool:
        ok = self.step_ok()
        if not ok:
            msg = (f"eta_u={self.eta_u} exceeds 1/((chi+1) L_u)={self.step_limit:.6g}; "
                   "the bound is evaluated but carries no guarantee")
            if strict:
                raise BoundsError(msg)
            warnings.warn(msg, stacklevel=3)
        return ok


@dataclass
class ScheduleTrace:
    scheduled_data: np.ndarray     # s_t per round
    total: float                   # D

    def __post_init__(self):
        self.scheduled_data = np.asarray(self.scheduled_data, dtype=float)
        if not self.total > 0:
            raise BoundsError("total data must be > 0")
        s = self.scheduled_data
        if np.any(s < 0) or np.any(s > self.total):
            raise BoundsError("scheduled data must lie in [0, D]")

    def __len__(self) -> int:
        return int(self.scheduled_data.size)


def contraction_factor(s_t: float, D: float, c: BoundConstants) -> float:
    if not 0 <= s_t <= D:
        raise BoundsError(f"scheduled data {s_t} outside [0, {D}]")
    miss = D - s_t
    return 1.0 + c.eta_u * c.L_u * ((4.0 / (D * D)) * miss * miss * c.rho * c.rho - 1.0)


def _noise_term(s_t: float, D: float, c: BoundConstants) -> float:
    miss = D - s_t
    return (2.0 * c.eta_u * c.delta * c.delta / (D * D)) * miss * miss


def t_round_bound(initial_gap: float, trace: ScheduleTrace, c: BoundConstants,
                  strict: bool = True) -> np.ndarray:
    """Bound on the optimality gap after each of the rounds in ``trace``.

    Entry t is the bound after t + 1 rounds. The products of equal
    consecutive factors are taken as powers, so a constant factor A gives
    exactly ``initial_gap * A**T``.
    """
    if not initial_gap >= 0:
        raise BoundsError("initial gap must be >= 0")
    c.check(strict)
    T = len(trace)
    out = np.empty(T)
    prod_before_run = 1.0     # product of factors of all finished runs
    run_factor = math.nan
    run_len = 0
    tail = 0.0                # second term, carried forward with the same factors
    for t, s in enumerate(trace.scheduled_data):
        a = contraction_factor(float(s), trace.total, c)
        if a == run_factor:
            run_len += 1
        else:
            if run_len:
                prod_before_run *= run_factor ** run_len
            run_factor, run_len = a, 1
        tail = a * tail + _noise_term(float(s), trace.total, c)
        out[t] = initial_gap * (prod_before_run * run_factor ** run_len) + tail
    return out


def t_round_limit(s: float, D: float, c: BoundConstants) -> float:
    """Fixed point of the bound for a constant schedule with 0 < A < 1."""
    a = contraction_factor(s, D, c)
    if not 0 < a < 1:
        raise BoundsError(f"contraction factor {a} is not in (0, 1)")
    return _noise_term(s, D, c) / (1.0 - a)


def one_round_bound(s_t: float, D: float, c: BoundConstants, grad_norm_sq: float,
                    strict: bool = True) -> float:
    """Bound on the expected loss change over one round."""
    if not grad_norm_sq >= 0:
        raise BoundsError("grad_norm_sq must be >= 0")
    if not 0 <= s_t <= D:
        raise BoundsError(f"scheduled data {s_t} outside [0, {D}]")
    c.check(strict)
    miss = D - s_t
    return ((c.eta_u / 2.0) * ((4.0 / (D * D)) * miss * miss * c.rho * c.rho - 1.0) * grad_norm_sq
            + 2.0 * c.eta_u * miss * miss * c.delta * c.delta / (D * D))


# ---------------------------------------------------------------- estimation


@dataclass
class GradientSnapshot:
    """Flattened parameters and gradients at one model state.

    ``device_grads_u[k]`` is the extractor gradient of device k's local loss;
    ``grad_v`` is the gradient of the global loss with respect to all
    predictors stacked together (optional).
    """
    u: np.ndarray
    device_grads_u: dict[int, np.ndarray]
    weights: dict[int, float]
    v: np.ndarray | None = None
    grad_v: np.ndarray | None = None

    def global_grad_u(self) -> np.ndarray:
        total = float(sum(self.weights.values()))
        ids = sorted(self.device_grads_u)
        out = np.zeros_like(self.device_grads_u[ids[0]], dtype=float)
        for k in ids:
            out = out + (self.weights[k] / total) * self.device_grads_u[k]
        return out

    def position(self) -> np.ndarray:
        return self.u if self.v is None else np.concatenate([self.u, self.v])


@dataclass
class EstimateReport:
    n_snapshots: int
    n_pairs: int
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    slope: float = 0.0
    intercept: float = 0.0
    notes: list[str] = field(default_factory=list)


def _secant_max(positions, grads) -> tuple[float, int]:
    best, pairs = 0.0, 0
    for i, j in itertools.combinations(range(len(positions)), 2):
        dist = float(np.linalg.norm(positions[i] - positions[j]))
        if dist == 0.0:
            continue
        pairs += 1
        best = max(best, float(np.linalg.norm(grads[i] - grads[j])) / dist)
    return best, pairs


def _affine_certificate(snapshots, g_u, rel_tol: float = 1e-8):
    """(rho^2, delta^2) valid for all g when g_k = M_k g + c_k fits the probes exactly.

    Returns None when the probes cannot identify the maps (too few snapshots
    or a rank-deficient design) or the affine fit leaves a residual above
    ``rel_tol`` of the gradient scale.
    """
    n, p = len(snapshots), g_u[0].size
    if n < p + 2:
        return None
    design = np.column_stack([np.array(g_u), np.ones(n)])
    if np.linalg.matrix_rank(design) < p + 1:
        return None
    m_max = c_max = 0.0
    for k in sorted(snapshots[0].device_grads_u):
        target = np.array([s.device_grads_u[k] for s in snapshots])
        coef, *_ = np.linalg.lstsq(design, target, rcond=None)
        resid = float(np.max(np.linalg.norm(design @ coef - target, axis=1)))
        scale = float(np.max(np.linalg.norm(target, axis=1)))
        if resid > rel_tol * max(scale, 1e-300):
            return None
        m_max = max(m_max, float(np.linalg.norm(coef[:p].T, 2)))
        c_max = max(c_max, float(np.linalg.norm(coef[p])) + resid)
    if m_max == 0.0 or c_max == 0.0:
        return m_max ** 2, c_max ** 2
    # split the cross term where the probes sit on average; the rank check
    # above guarantees the global gradients are not all zero
    g_scale = math.sqrt(float(np.mean([g @ g for g in g_u])))
    eps = c_max / (m_max * g_scale)
    return (1.0 + eps) * m_max ** 2, (1.0 + 1.0 / eps) * c_max ** 2


def estimate_constants(snapshots: Sequence[GradientSnapshot], eta_u: float = 0.05
                       ) -> tuple[BoundConstants, EstimateReport]:
    """Empirical smoothness and gradient-diversity constants.

    * L_u, L_v: largest secant ratio of the global gradient over snapshot pairs.
      Secants can only under-estimate a Lipschitz constant.
    * rho^2, delta^2: least-squares line through the points
      (||grad_u F||^2, max_k ||grad_u F_k||^2), slope and intercept clipped at 0,
      with the intercept then raised until no point lies above the line.
      When rho > 1 the intercept is raised further to the Young-inequality
      certificate (1 + 1/(rho^2 - 1)) max ||grad_u F_k - grad_u F||^2, which
      keeps the inequality valid wherever device dissimilarity stays within
      the observed maximum.
    * When there are more snapshots than extractor parameters and every
      device gradient is, up to roundoff, an affine function M_k g + c_k of
      the global gradient g (quadratic losses), the pair is instead taken
      from the certificate ||M_k g + c_k||^2 <= (1 + e) ||M_k||^2 ||g||^2
      + (1 + 1/e) ||c_k||^2, which holds for every g and not only at the
      probes.
    * chi is not identifiable from these probes and is reported as 0.
    """
    if len(snapshots) < 2:
        raise DegenerateInputError("need at least two snapshots")
    positions = [s.position() for s in snapshots]
    g_u = [s.global_grad_u() for s in snapshots]
    L_u, pairs = _secant_max(positions, g_u)
    if pairs == 0:
        raise DegenerateInputError("all snapshots are at the same parameters")
    L_v = 0.0
    if all(s.grad_v is not None for s in snapshots):
        L_v, _ = _secant_max(positions, [s.grad_v for s in snapshots])

    xs = np.array([float(g @ g) for g in g_u])
    ys = np.array([max(float(d @ d) for d in s.device_grads_u.values()) for s in snapshots])
    if np.ptp(xs) > 0:
        slope, intercept = np.polyfit(xs, ys, 1)
    else:
        slope, intercept = 0.0, float(ys.max())
    slope = max(float(slope), 0.0)
    intercept = max(float(intercept), 0.0, float(np.max(ys - slope * xs)))
    notes = ["chi not identifiable from gradient probes; set to 0",
             "smoothness constants are secant lower bounds"]
    if slope > 1.0:
        dissim = max(float(np.sum((d - g) ** 2))
                     for s, g in zip(snapshots, g_u) for d in s.device_grads_u.values())
        intercept = max(intercept, (1.0 + 1.0 / (slope - 1.0)) * dissim)
    affine = _affine_certificate(snapshots, g_u)
    if affine is not None:
        slope, intercept = affine
        notes.append("device gradients are affine in the global gradient; "
                     "rho and delta come from the global certificate")
    consts = BoundConstants(L_u=L_u, L_v=L_v, chi=0.0, delta=math.sqrt(intercept),
                            rho=math.sqrt(slope), eta_u=eta_u)
    report = EstimateReport(n_snapshots=len(snapshots), n_pairs=pairs,
                            points=np.column_stack([xs, ys]), slope=slope,
                            intercept=intercept, notes=notes)
    return consts, report
