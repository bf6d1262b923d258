"""Jitted scalar kernels behind the system model and the resource solvers.

Everything here works on plain floats and float64 arrays so numba can compile
it. Failures are reported as integer status codes; the public wrappers in
``sysmodel`` and ``resopt`` turn them into exceptions.
"""
import math

import numpy as np
from numba import njit

LN2 = math.log(2.0)
EULER = math.e

OK = 0
INFEASIBLE = 1
NUMERICAL = 2
NO_CONVERGENCE = 3


# ---------------------------------------------------------------- Lambert W


@njit(cache=True)
def lambertw0(x):
    """Principal branch W0(x) for x >= -1/e via Halley iteration."""
    if x == 0.0:
        return 0.0
    ex1 = EULER * x + 1.0
    if ex1 <= 0.0:
        return -1.0
    if x < -0.25:
        # branch-point series in p = sqrt(2(ex + 1))
        p = math.sqrt(2.0 * ex1)
        w = -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p * p * p
    elif x < 3.0:
        w = math.log1p(x)
    else:
        l1 = math.log(x)
        l2 = math.log(l1)
        w = l1 - l2 + l2 / l1
    for _ in range(64):
        ew = math.exp(w)
        f = w * ew - x
        wp1 = w + 1.0
        if wp1 <= 0.0:
            break
        denom = ew * wp1 - (w + 2.0) * f / (2.0 * wp1)
        if denom == 0.0:
            break
        dw = f / denom
        w_new = w - dw
        if w_new < -1.0:
            w_new = -1.0
        if abs(w_new - w) <= 1e-16 * (1.0 + abs(w_new)):
            w = w_new
            break
        w = w_new
    return w


@njit(cache=True)
def w0_plus_one(p):
    """1 + W0((p - 1)/e) for p >= 0, without cancellation near the branch point.

    y = 1 + W0((p - 1)/e) is the root of y*e^y - expm1(y) = p, which is convex
    and increasing in y >= 0, so Newton from an overestimate converges
    monotonically.
    """
    if p <= 0.0:
        return 0.0
    if p < 2.0:
        y = math.sqrt(2.0 * p)
    else:
        y = math.log(p) + 1.0
    for _ in range(200):
        ey = math.exp(y)
        f = y * ey - math.expm1(y) - p
        fp = y * ey
        if fp <= 0.0:
            break
        step = f / fp
        y_new = y - step
        if y_new <= 0.0:
            y_new = 0.5 * y
        if abs(y_new - y) <= 4e-16 * y_new:
            return y_new
        y = y_new
    return y


# ------------------------------------------------------- physical formulas


@njit(cache=True)
def max_rate(theta, bandwidth, noise_psd, p_max, gain):
    """Shannon rate at full transmit power on bandwidth share theta (bit/s)."""
    if theta <= 0.0:
        return 0.0
    wb = theta * bandwidth
    return wb * math.log1p(p_max * gain / (wb * noise_psd)) / LN2


@njit(cache=True)
def local_energy(kappa, workload, t_comp):
    # workload = tau * D_k * C_k cycles
    return kappa * workload * workload * workload / (t_comp * t_comp)


@njit(cache=True)
def uplink_energy(theta, t_comm, gain, bits, bandwidth, noise_psd, exp2_cap):
    x = theta * bandwidth * t_comm
    z = bits / x
    if z > exp2_cap:
        return math.inf
    return x * noise_psd / gain * math.expm1(z * LN2)


@njit(cache=True)
def uplink_power(theta, t_comm, gain, bits, bandwidth, noise_psd, exp2_cap):
    z = bits / (theta * bandwidth * t_comm)
    if z > exp2_cap:
        return math.inf
    return theta * bandwidth * noise_psd / gain * math.expm1(z * LN2)


@njit(cache=True)
def min_bandwidth(t_comm, bits, bandwidth, noise_psd, p_max, gain, exp2_cap):
    """Smallest theta in (0, 1] with max_rate(theta) >= bits / t_comm.

    Returns inf when even the whole band is not enough. The rate is concave
    and increasing in theta, so Newton started anywhere lands left of the root
    and then climbs monotonically; the result is nudged up until it is
    feasible, so callers may rely on it.
    """
    if t_comm <= 0.0:
        return math.inf
    need = bits / t_comm
    if max_rate(1.0, bandwidth, noise_psd, p_max, gain) < need:
        return math.inf
    s = p_max * gain / (bandwidth * noise_psd)
    r = need * LN2 / bandwidth
    theta = 1.0
    for _ in range(100):
        f = theta * math.log1p(s / theta) - r
        fp = math.log1p(s / theta) - s / (theta + s)
        if fp <= 0.0:
            break
        nxt = theta - f / fp
        if nxt <= 0.0:
            nxt = 0.5 * theta
        if nxt > 1.0:
            nxt = 1.0
        if abs(nxt - theta) <= 1e-15 * nxt:
            theta = nxt
            break
        theta = nxt
    for _ in range(64):
        if max_rate(theta, bandwidth, noise_psd, p_max, gain) >= need:
            break
        theta = theta * (1.0 + 4e-16) + 1e-300
    if theta > 1.0:
        theta = 1.0
    if bits / (theta * bandwidth * t_comm) > exp2_cap:
        return math.inf
    return theta


# -------------------------------------------------------- time subproblem


@njit(cache=True)
def comp_time_slope(t_comp, kappa, workload, theta, gain, bits, bandwidth,
                    noise_psd, t_max):
    """d/dT^L of E^L(T^L) + E^U(theta, T_max - T^L)."""
    dl = -2.0 * kappa * workload ** 3 / t_comp ** 3
    a = bits * LN2 / (theta * bandwidth * (t_max - t_comp))
    du = noise_psd * theta * bandwidth / gain * (a * math.exp(a) - math.expm1(a))
    return dl + du


@njit(cache=True)
def comp_time_curvature(t_comp, kappa, workload, theta, gain, bits, bandwidth,
                        noise_psd, t_max):
    t_comm = t_max - t_comp
    a = bits * LN2 / (theta * bandwidth * t_comm)
    return (6.0 * kappa * workload ** 3 / t_comp ** 4
            + noise_psd * theta * bandwidth / gain * a * a * math.exp(a) / t_comm)


@njit(cache=True)
def optimal_comp_time(kappa, workload, f_max, theta, gain, bits, bandwidth,
                      noise_psd, p_max, t_max, iters):
    """Clamped stationary point of the per-device energy in T^L.

    Returns (t_comp, status, interior).
    """
    lo = workload / f_max
    rm = max_rate(theta, bandwidth, noise_psd, p_max, gain)
    if rm <= 0.0:
        return math.nan, INFEASIBLE, False
    hi = t_max - bits / rm
    # a share pinned at its minimum makes the window a single point, which
    # roundoff can turn inside out by a few ulps
    if lo > hi + 1e-12 * t_max:
        return math.nan, INFEASIBLE, False
    if hi - lo <= 1e-12 * t_max:
        return lo, OK, False
    if comp_time_slope(lo, kappa, workload, theta, gain, bits, bandwidth,
                       noise_psd, t_max) >= 0.0:
        return lo, OK, False
    if comp_time_slope(hi, kappa, workload, theta, gain, bits, bandwidth,
                       noise_psd, t_max) <= 0.0:
        return hi, OK, False
    # sign bisection on the increasing slope, accelerated by Newton steps
    # that are only taken when they stay strictly inside the bracket
    a = lo
    b = hi
    x = 0.5 * (a + b)
    for _ in range(iters):
        g = comp_time_slope(x, kappa, workload, theta, gain, bits, bandwidth,
                            noise_psd, t_max)
        if g > 0.0:
            b = x
        elif g < 0.0:
            a = x
        else:
            return x, OK, True
        if b - a <= 4e-16 * b:
            break
        gp = comp_time_curvature(x, kappa, workload, theta, gain, bits,
                                 bandwidth, noise_psd, t_max)
        nxt = x - g / gp if gp > 0.0 else 0.5 * (a + b)
        if abs(nxt - x) <= 2e-16 * x:
            break
        if not (a < nxt < b):
            nxt = 0.5 * (a + b)
        x = nxt
    return x, OK, True


# --------------------------------------------------- bandwidth subproblem


@njit(cache=True)
def share_of_multiplier(lam, a, c):
    """Closed-form KKT share theta(lambda) = a / (W0((lambda c - 1)/e) + 1)."""
    y = w0_plus_one(lam * c)
    if y <= 0.0:
        return math.inf
    return a / y


@njit(cache=True)
def multiplier_of_share(theta, a, c):
    """Inverse of share_of_multiplier: lambda at which device takes theta."""
    y = a / theta
    return (y * math.exp(y) - math.expm1(y)) / c


@njit(cache=True)
def allocate_bandwidth(queues, gains, t_comm, p_max, bits, bandwidth,
                       noise_psd, exp2_cap, sum_tol, max_iter, lam_hint=math.nan):
    """Minimise sum_k q_k E^U_k(theta_k) subject to sum theta <= 1.

    Zero-queue devices get exactly their minimum feasible share. The others
    follow theta_k = max(m_k, theta_k(lambda)) with lambda found by bisection
    so the shares fill the remaining band. ``lam_hint`` only chooses the first
    trial point inside the bracket. Returns (theta, pinned, lam, status).
    """
    n = queues.shape[0]
    theta = np.zeros(n)
    pinned = np.zeros(n, dtype=np.bool_)
    m = np.empty(n)
    total_min = 0.0
    for k in range(n):
        m[k] = min_bandwidth(t_comm[k], bits, bandwidth, noise_psd, p_max[k],
                             gains[k], exp2_cap)
        if not np.isfinite(m[k]):
            return theta, pinned, math.nan, INFEASIBLE
        total_min += m[k]
    # shares from the previous pass may sum to 1 + sum_tol; a time step that
    # moves to the edge of its window turns them into minimum shares
    if total_min > 1.0 + max(sum_tol, 1e-12):
        return theta, pinned, math.nan, INFEASIBLE

    n_pos = 0
    zero_share = 0.0
    for k in range(n):
        if queues[k] > 0.0:
            n_pos += 1
        else:
            theta[k] = m[k]
            pinned[k] = True
            zero_share += m[k]
    if n_pos == 0:
        return theta, pinned, math.nan, OK

    budget = 1.0 - zero_share
    if n_pos == 1:
        for k in range(n):
            if queues[k] > 0.0:
                theta[k] = budget
        return theta, pinned, math.nan, OK

    free = 1.0 - total_min
    if free <= 1e-15:
        for k in range(n):
            theta[k] = m[k]
            pinned[k] = True
        return theta, pinned, math.nan, OK

    a = np.zeros(n)
    c = np.zeros(n)
    eps = free / n_pos
    lam_hi = 0.0
    lam_lo = math.inf
    for k in range(n):
        if queues[k] > 0.0:
            a[k] = bits * LN2 / (bandwidth * t_comm[k])
            c[k] = gains[k] / (queues[k] * noise_psd * bandwidth * t_comm[k])
            lam_k = multiplier_of_share(m[k] + eps, a[k], c[k])
            if lam_k > lam_hi:
                lam_hi = lam_k
            # below every device's lambda(1) each share exceeds the whole band
            lam_k = multiplier_of_share(1.0, a[k], c[k])
            if lam_k < lam_lo:
                lam_lo = lam_k
    if not np.isfinite(lam_hi) or not lam_hi > 0.0:
        return theta, pinned, math.nan, NUMERICAL
    if not lam_lo < lam_hi:
        lam_lo = 0.0

    # bisection on the bracket [lam_lo, lam_hi]; Newton steps in log(lambda)
    # are used whenever they land strictly inside it
    lam = 0.5 * (lam_lo + lam_hi)
    if lam_lo < lam_hint < lam_hi:
        lam = lam_hint
    converged = False
    for _ in range(max_iter):
        s = zero_share
        ds = 0.0
        for k in range(n):
            if queues[k] > 0.0:
                y = w0_plus_one(lam * c[k])
                tk = a[k] / y
                if tk > m[k]:
                    s += tk
                    # d theta / d log(lambda) = -a p / (y^3 e^y), p = lambda c
                    ds -= a[k] * lam * c[k] / (y * y * y * math.exp(y))
                else:
                    s += m[k]
        if abs(s - 1.0) <= sum_tol:
            converged = True
            break
        if s > 1.0:
            lam_lo = lam
        else:
            lam_hi = lam
        nxt = 0.5 * (lam_lo + lam_hi)
        if lam_lo > 0.0 and lam_hi > 4.0 * lam_lo:
            nxt = math.sqrt(lam_lo * lam_hi)
        if ds < 0.0:
            cand = lam * math.exp(-(s - 1.0) / ds)
            if lam_lo < cand < lam_hi:
                nxt = cand
        if nxt == lam:
            break
        lam = nxt
    if not converged:
        return theta, pinned, lam, NUMERICAL
    for k in range(n):
        if queues[k] > 0.0:
            tk = share_of_multiplier(lam, a[k], c[k])
            if tk > m[k]:
                theta[k] = tk
            else:
                theta[k] = m[k]
                pinned[k] = True
    return theta, pinned, lam, OK


# ------------------------------------------------ alternating minimisation


@njit(cache=True)
def _pass(kappa, workload, f_max, p_max, gains, queues, bits, bandwidth,
          noise_psd, t_max, exp2_cap, sum_tol, lambda_iter, time_iter,
          t_comp, lam, theta, energy):
    """One bandwidth step then one time step, in place on t_comp/theta/energy.

    Returns (objective, lam, status).
    """
    n = queues.shape[0]
    t_comm = np.empty(n)
    for k in range(n):
        t_comm[k] = t_max - t_comp[k]
    th, _, lam, status = allocate_bandwidth(
        queues, gains, t_comm, p_max, bits, bandwidth, noise_psd,
        exp2_cap, sum_tol, lambda_iter, lam)
    if status != OK:
        return math.inf, lam, status
    for k in range(n):
        theta[k] = th[k]
        if queues[k] > 0.0:
            tl, st, _ = optimal_comp_time(
                kappa[k], workload[k], f_max[k], theta[k], gains[k], bits,
                bandwidth, noise_psd, p_max[k], t_max, time_iter)
            if st != OK:
                return math.inf, lam, st
            t_comp[k] = tl
    obj = 0.0
    for k in range(n):
        el = local_energy(kappa[k], workload[k], t_comp[k])
        eu = uplink_energy(theta[k], t_max - t_comp[k], gains[k], bits,
                           bandwidth, noise_psd, exp2_cap)
        energy[k] = el + eu
        obj += queues[k] * energy[k]
    if not np.isfinite(obj):
        return obj, lam, INFEASIBLE
    return obj, lam, OK


@njit(cache=True)
def alternate(kappa, workload, f_max, p_max, gains, queues, bits, bandwidth,
              noise_psd, t_max, exp2_cap, tol, max_outer, sum_tol,
              lambda_iter, time_iter, t_init, extrapolate):
    """Block-coordinate descent between the bandwidth and time subproblems.

    ``t_init`` holds starting computation times; NaN entries start at the
    fastest clock. A warm start that leaves the set without room in the band
    is discarded and the descent restarts from the fastest clocks.

    The descent converges linearly. With ``extrapolate`` set, every third
    pass also tries a jump along the last step of the computation times,
    scaled by the observed contraction rate; the jump is kept only when the
    pass taken from it lowers the objective, so the history stays monotone.

    Returns (theta, t_comp, energy, history, n_iter, status); history holds
    the weighted-energy objective after each outer pass.
    """
    n = queues.shape[0]
    theta = np.zeros(n)
    t_comp = np.empty(n)
    energy = np.zeros(n)
    history = np.full(max_outer, math.nan)
    t_fast = np.empty(n)
    for k in range(n):
        t_fast[k] = workload[k] / f_max[k]
        t_comp[k] = t_fast[k]
        if t_comp[k] + bits / max_rate(1.0, bandwidth, noise_psd, p_max[k],
                                       gains[k]) > t_max:
            return theta, t_comp, energy, history, 0, INFEASIBLE
    if n == 0:
        return theta, t_comp, energy, history, 0, OK

    n_pos = 0
    for k in range(n):
        if queues[k] > 0.0:
            n_pos += 1

    warm = False
    for k in range(n):
        if queues[k] > 0.0 and t_init[k] > t_comp[k] and t_init[k] < t_max:
            t_comp[k] = t_init[k]
            warm = True

    lam = math.nan
    obj, lam, status = _pass(kappa, workload, f_max, p_max, gains, queues, bits,
                             bandwidth, noise_psd, t_max, exp2_cap, sum_tol,
                             lambda_iter, time_iter, t_comp, lam, theta, energy)
    if status == INFEASIBLE and warm:
        t_comp[:] = t_fast
        obj, lam, status = _pass(kappa, workload, f_max, p_max, gains, queues,
                                 bits, bandwidth, noise_psd, t_max, exp2_cap,
                                 sum_tol, lambda_iter, time_iter, t_comp, lam,
                                 theta, energy)
    if status != OK:
        return theta, t_comp, energy, history, 0, status
    history[0] = obj
    # with fewer than two weighted devices the shares do not depend on T^L
    if n_pos < 2:
        return theta, t_comp, energy, history, 1, OK

    t_prev = t_comp.copy()
    t_try = np.empty(n)
    th_try = np.empty(n)
    en_try = np.empty(n)
    since_jump = 0
    for it in range(1, max_outer):
        prev = history[it - 1]
        accepted = False
        if extrapolate and since_jump >= 2:
            d1 = history[it - 2] - history[it - 1]
            d0 = history[it - 3] - history[it - 2] if it >= 3 else math.inf
            rate = d1 / d0 if d0 > 0.0 else 0.0
            if 0.2 < rate < 0.98:
                scale = 2.0 * rate / (1.0 - rate)
                for k in range(n):
                    t_try[k] = t_comp[k] + scale * (t_comp[k] - t_prev[k])
                    if queues[k] == 0.0:
                        t_try[k] = t_comp[k]
                    elif t_try[k] < t_fast[k]:
                        t_try[k] = t_fast[k]
                    elif t_try[k] >= t_max:
                        t_try[k] = t_comp[k]
                o2, l2, st2 = _pass(kappa, workload, f_max, p_max, gains, queues,
                                    bits, bandwidth, noise_psd, t_max, exp2_cap,
                                    sum_tol, lambda_iter, time_iter, t_try, lam,
                                    th_try, en_try)
                since_jump = 0
                if st2 == OK and o2 < prev:
                    t_prev[:] = t_comp
                    t_comp[:] = t_try
                    theta[:] = th_try
                    energy[:] = en_try
                    obj, lam, accepted = o2, l2, True
        if not accepted:
            t_prev[:] = t_comp
            obj, lam, status = _pass(kappa, workload, f_max, p_max, gains,
                                     queues, bits, bandwidth, noise_psd, t_max,
                                     exp2_cap, sum_tol, lambda_iter, time_iter,
                                     t_comp, lam, theta, energy)
            if status != OK:
                return theta, t_comp, energy, history, it, status
            since_jump += 1
        history[it] = obj
        if not accepted and prev - obj <= tol:
            return theta, t_comp, energy, history, it + 1, OK
    return theta, t_comp, energy, history, max_outer, NO_CONVERGENCE


@njit(cache=True)
def equal_share_energy(kappa, workload, f_max, p_max, gains, share, bits,
                       bandwidth, noise_psd, t_max, exp2_cap, time_iter):
    """Per-device energy at a fixed share with the optimal time split (inf if infeasible)."""
    n = gains.shape[0]
    out = np.empty(n)
    for k in range(n):
        tl, st, _ = optimal_comp_time(kappa[k], workload[k], f_max[k], share,
                                      gains[k], bits, bandwidth, noise_psd,
                                      p_max[k], t_max, time_iter)
        if st != OK:
            out[k] = math.inf
            continue
        out[k] = local_energy(kappa[k], workload[k], tl) + uplink_energy(
            share, t_max - tl, gains[k], bits, bandwidth, noise_psd, exp2_cap)
    return out


@njit(cache=True)
def feasible_mask(t_min, p_max, gains, bits, bandwidth, noise_psd, t_max):
    """Fastest compute plus full-band upload fits into the deadline."""
    n = gains.shape[0]
    out = np.zeros(n, dtype=np.bool_)
    for k in range(n):
        rm = max_rate(1.0, bandwidth, noise_psd, p_max[k], gains[k])
        out[k] = rm > 0.0 and t_min[k] + bits / rm <= t_max
    return out


@njit(cache=True)
def min_shares(t_min, p_max, gains, bits, bandwidth, noise_psd, t_max, exp2_cap):
    """Least bandwidth share of each device when it computes at full clock."""
    n = gains.shape[0]
    out = np.empty(n)
    for k in range(n):
        out[k] = min_bandwidth(t_max - t_min[k], bits, bandwidth, noise_psd,
                               p_max[k], gains[k], exp2_cap)
    return out
