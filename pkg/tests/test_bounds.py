import math
import warnings
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from wfl_pma import bounds as B

C = B.BoundConstants(L_u=2.0, delta=0.5, rho=0.3, eta_u=0.05)


def exact_factor(s, D, c):
    """Rational re-evaluation of the contraction factor from the float inputs."""
    e, L, r = Fraction(c.eta_u), Fraction(c.L_u), Fraction(c.rho)
    miss = Fraction(D) - Fraction(s)
    return 1 + e * L * (Fraction(4) / Fraction(D) ** 2 * miss ** 2 * r ** 2 - 1)


def unrolled(gap, s, D, c):
    """gap * prod_t A_t + sum_t noise_t prod_{j>t} A_j written out term by term."""
    A = [float(exact_factor(x, D, c)) for x in s]
    noise = [2 * c.eta_u * c.delta ** 2 / D ** 2 * (D - x) ** 2 for x in s]
    out = []
    for T in range(1, len(s) + 1):
        first = gap * math.prod(A[:T])
        second = sum(noise[t] * math.prod(A[t + 1:T]) for t in range(T))
        out.append(first + second)
    return np.array(out)


# ---------------------------------------------------------- contraction


def test_full_participation_factor():
    assert B.contraction_factor(100.0, 100.0, C) == 1 - C.eta_u * C.L_u


def test_half_diversity_nobody_scheduled_is_neutral():
    c = B.BoundConstants(L_u=3.0, rho=0.5, eta_u=0.1)
    assert B.contraction_factor(0.0, 50.0, c) == 1.0


@given(s=st.floats(0, 1000), rho=st.floats(0, 2), L=st.floats(0, 10), eta=st.floats(0, 1))
def test_factor_matches_rational_evaluation(s, rho, L, eta):
    c = B.BoundConstants(L_u=L, rho=rho, eta_u=eta)
    assert B.contraction_factor(s, 1000.0, c) == pytest.approx(float(exact_factor(s, 1000.0, c)),
                                                               rel=1e-12, abs=1e-15)


def test_factor_rejects_out_of_range():
    with pytest.raises(B.BoundsError):
        B.contraction_factor(11.0, 10.0, C)


# ------------------------------------------------------------ T rounds


def test_full_participation_bound_is_geometric():
    T = 40
    out = B.t_round_bound(3.0, B.ScheduleTrace(np.full(T, 80.0), 80.0), C)
    assert out[-1] == 3.0 * (1 - C.eta_u * C.L_u) ** T
    assert list(out) == [3.0 * (1 - C.eta_u * C.L_u) ** t for t in range(1, T + 1)]


def test_one_round_unrolled():
    s0, D = 30.0, 80.0
    out = B.t_round_bound(2.0, B.ScheduleTrace([s0], D), C)
    a = B.contraction_factor(s0, D, C)
    assert out[0] == pytest.approx(2.0 * a + 2 * C.eta_u * C.delta ** 2 / D ** 2 * (D - s0) ** 2,
                                   rel=1e-15)


@pytest.mark.parametrize("seed", range(10))
def test_five_rounds_unrolled(seed):
    rng = np.random.default_rng(seed)
    D = 200.0
    s = rng.uniform(0, D, 5)
    c = B.BoundConstants(L_u=float(rng.uniform(0.5, 5)), delta=float(rng.uniform(0, 2)),
                         rho=float(rng.uniform(0, 1)), eta_u=0.05)
    assume_ok = c.step_ok()
    got = B.t_round_bound(1.7, B.ScheduleTrace(s, D), c, strict=assume_ok)
    assert np.allclose(got, unrolled(1.7, s, D, c), rtol=1e-12, atol=0)


def test_empty_trace():
    assert B.t_round_bound(1.0, B.ScheduleTrace([], 10.0), C).size == 0


@given(st.lists(st.floats(0, 100), min_size=1, max_size=25), st.integers(0, 24),
       st.floats(0, 100), st.floats(0.01, 0.49))
@settings(max_examples=80)
def test_more_scheduled_data_never_loosens_bound(s, idx, bump, rho):
    assume(idx < len(s))
    c = B.BoundConstants(L_u=2.0, delta=0.7, rho=rho, eta_u=0.05)
    base = B.t_round_bound(1.0, B.ScheduleTrace(s, 100.0), c)[-1]
    more = list(s)
    more[idx] = min(100.0, more[idx] + bump)
    after = B.t_round_bound(1.0, B.ScheduleTrace(more, 100.0), c)[-1]
    assert after <= base * (1 + 1e-12)


def test_constant_schedule_reaches_limit():
    c = B.BoundConstants(L_u=1.0, delta=0.8, rho=0.3, eta_u=0.05)
    D, s = 100.0, 50.0
    out = B.t_round_bound(5.0, B.ScheduleTrace(np.full(10_000, s), D), c)
    assert out[-1] == pytest.approx(B.t_round_limit(s, D, c), rel=1e-6)


def test_limit_needs_contraction():
    c = B.BoundConstants(L_u=1.0, rho=0.5, eta_u=0.05)
    with pytest.raises(B.BoundsError):
        B.t_round_limit(0.0, 10.0, c)


@given(L=st.floats(0, 1e3), rho=st.floats(0, 1e3), delta=st.floats(0, 1e3),
       eta=st.floats(0, 1), gap=st.floats(0, 1e6),
       s=st.lists(st.floats(0, 10), min_size=1, max_size=10))
@settings(max_examples=60)
def test_bounds_finite(L, rho, delta, eta, gap, s):
    c = B.BoundConstants(L_u=L, rho=rho, delta=delta, eta_u=eta)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        out = B.t_round_bound(gap, B.ScheduleTrace(s, 10.0), c, strict=False)
    # factors grow at most geometrically, so ten rounds stay in range
    assert not np.any(np.isnan(out))
    assert np.all(np.isfinite(out))


def test_step_condition():
    big = B.BoundConstants(L_u=100.0, eta_u=0.05)
    assert not big.step_ok()
    with pytest.raises(B.BoundsError):
        B.t_round_bound(1.0, B.ScheduleTrace([1.0], 2.0), big)
    with pytest.warns(UserWarning):
        B.t_round_bound(1.0, B.ScheduleTrace([1.0], 2.0), big, strict=False)
    assert B.BoundConstants(L_u=10.0, chi=1.0, eta_u=0.05).step_limit == 0.05


def test_invalid_inputs():
    with pytest.raises(B.BoundsError):
        B.BoundConstants(L_u=-1.0)
    with pytest.raises(B.BoundsError):
        B.BoundConstants(L_u=1.0, rho=math.nan)
    with pytest.raises(B.BoundsError):
        B.ScheduleTrace([5.0], 4.0)
    with pytest.raises(B.BoundsError):
        B.t_round_bound(-1.0, B.ScheduleTrace([1.0], 4.0), C)


# ------------------------------------------------------------- one round


def test_one_round_full_participation_is_descent():
    assert B.one_round_bound(10.0, 10.0, C, 4.0) == -C.eta_u / 2 * 4.0
    assert B.one_round_bound(10.0, 10.0, C, 0.0) == 0.0


@given(s=st.floats(0, 50), g=st.floats(0, 100))
def test_one_round_formula(s, g):
    D = 50.0
    miss = D - s
    expected = (C.eta_u / 2 * (4 / D ** 2 * miss ** 2 * C.rho ** 2 - 1) * g
                + 2 * C.eta_u * miss ** 2 * C.delta ** 2 / D ** 2)
    assert B.one_round_bound(s, D, C, g) == pytest.approx(expected, rel=1e-12, abs=1e-15)


# ------------------------------------------------------------ estimation


def quadratic_devices(seed, n_dev=2, dim=4):
    rng = np.random.default_rng(seed)
    hs, bs = [], []
    for _ in range(n_dev):
        m = rng.normal(size=(dim, dim))
        hs.append(m @ m.T / dim + 0.1 * np.eye(dim))
        bs.append(rng.normal(size=dim))
    return hs, bs


def snapshot(u, hs, bs, weights):
    grads = {k: h @ u - b for k, (h, b) in enumerate(zip(hs, bs))}
    return B.GradientSnapshot(u=u, device_grads_u=grads, weights=dict(enumerate(weights)))


def test_identical_devices_give_no_diversity():
    hs, bs = quadratic_devices(0, n_dev=1)
    hs, bs = hs * 3, bs * 3
    rng = np.random.default_rng(1)
    snaps = [snapshot(rng.normal(size=4), hs, bs, [1, 2, 3]) for _ in range(10)]
    c, rep = B.estimate_constants(snaps)
    assert c.delta == pytest.approx(0.0, abs=1e-6)
    assert c.rho == pytest.approx(1.0, abs=1e-9)


def test_unit_quadratic_smoothness():
    snaps = [B.GradientSnapshot(u=u, device_grads_u={0: u.copy()}, weights={0: 1.0})
             for u in (np.array([1.0, 2.0, -1.0]), np.array([0.5, -3.0, 2.0]))]
    c, rep = B.estimate_constants(snaps)
    assert c.L_u == pytest.approx(1.0, abs=1e-9)
    assert rep.n_pairs == 1


@pytest.mark.parametrize("seed", range(5))
def test_secant_estimate_is_lower_bound(seed):
    hs, bs = quadratic_devices(seed)
    w = [1.0, 3.0]
    rng = np.random.default_rng(seed)
    snaps = [snapshot(rng.normal(size=4), hs, bs, w) for _ in range(8)]
    c, _ = B.estimate_constants(snaps)
    h_bar = (w[0] * hs[0] + w[1] * hs[1]) / sum(w)
    assert c.L_u <= np.linalg.eigvalsh(h_bar).max() * (1 + 1e-12)
    assert c.chi == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_fitted_diversity_holds_on_held_out_probes(seed):
    hs, bs = quadratic_devices(seed)
    w = [2.0, 5.0]
    rng = np.random.default_rng(100 + seed)
    fit = [snapshot(rng.normal(size=4), hs, bs, w) for _ in range(40)]
    c, _ = B.estimate_constants(fit)
    held = [snapshot(rng.normal(size=4), hs, bs, w) for _ in range(100)]
    for s in held:
        g = s.global_grad_u()
        worst = max(float(d @ d) for d in s.device_grads_u.values())
        assert worst <= c.delta ** 2 + c.rho ** 2 * float(g @ g) + 1e-12


def test_degenerate_snapshots():
    s = B.GradientSnapshot(u=np.ones(2), device_grads_u={0: np.ones(2)}, weights={0: 1.0})
    with pytest.raises(B.DegenerateInputError):
        B.estimate_constants([s])
    with pytest.raises(B.DegenerateInputError):
        B.estimate_constants([s, s])


def test_affine_certificate_is_reported():
    hs, bs = quadratic_devices(2)
    rng = np.random.default_rng(0)
    snaps = [snapshot(rng.normal(size=4), hs, bs, [1.0, 1.0]) for _ in range(12)]
    _, rep = B.estimate_constants(snaps)
    assert any("affine" in n for n in rep.notes)


@pytest.mark.parametrize("seed", range(5))
def test_envelope_fallback_covers_its_probes(seed):
    # fewer snapshots than parameters: no certificate, the line must still cover the data
    hs, bs = quadratic_devices(seed, dim=12)
    rng = np.random.default_rng(seed)
    snaps = [snapshot(rng.normal(size=12), hs, bs, [1.0, 2.0]) for _ in range(8)]
    c, rep = B.estimate_constants(snaps)
    assert not any("affine" in n for n in rep.notes)
    for s in snaps:
        g = s.global_grad_u()
        worst = max(float(d @ d) for d in s.device_grads_u.values())
        assert worst <= c.delta ** 2 + c.rho ** 2 * float(g @ g) * (1 + 1e-12) + 1e-12
