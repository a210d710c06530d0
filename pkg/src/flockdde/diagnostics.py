"""Flocking observables, the decay certificate, and run monitors.

Implements the spatial/velocity diameters, the comparison quantities X and V
maintained by exact one-step recurrences, the Lyapunov functional that the
certificate argument drives to be nonincreasing, the delayed-Gronwall rate
solver, and the sufficient-condition certificate with its predicted decay
rate.  All time integrals over emitted frames use the trapezoid rule at the
output cadence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad

__all__ = [
    "DiagnosticsFrame",
    "FlockingCertificate",
    "FlockingMonitor",
    "NotReadyError",
    "certify_flocking",
    "diameters",
    "fit_decay_rate",
    "gronwall_rate",
    "lyapunov",
    "prehistory_frames",
]


class NotReadyError(Exception):
    """Not enough recorded frames to evaluate the requested quantity."""


@dataclass
class DiagnosticsFrame:
    """Per-output-step record of the run observables.

    ``X_of_t`` and ``V_of_t`` are the integral comparison quantities (equal to
    d_X and d_V on the prehistory, where ``lyapunov`` is not defined and set
    to NaN).  ``worst_node`` is the node attaining ``min_detJ``.
    """

    t: float
    d_X: float
    d_V: float
    max_speed: float
    lyapunov: float
    X_of_t: float
    V_of_t: float
    min_detJ: float
    max_velgrad_norm: float
    worst_node: int = 0
    status: str = "ok"


def _pairwise_diameter(arr: np.ndarray) -> float:
    # exact max over all pairs; diameters feed certified inequalities, so no
    # bounding-box shortcut (non-finite slices appear in terminal blow-up
    # frames, hence the silenced FP state)
    with np.errstate(invalid="ignore", over="ignore"):
        diff = arr[:, None, :] - arr[None, :, :]
        return float(np.sqrt((diff**2).sum(axis=2)).max())


def diameters(ensemble) -> tuple[float, float]:
    """Spatial and velocity diameters (exact O(N^2) pairwise maxima)."""
    return (_pairwise_diameter(ensemble.positions),
            _pairwise_diameter(ensemble.velocities))


def prehistory_frames(buffer) -> list[DiagnosticsFrame]:
    """Diagnostics records for the prescribed slices at times <= 0."""
    out = []
    for s in buffer.prehistory():
        d_x, d_v = diameters(s)
        dets = s.det_jacobians()
        vg = np.sqrt((s.vel_gradients**2).sum(axis=(1, 2)))
        out.append(DiagnosticsFrame(
            t=s.time, d_X=d_x, d_V=d_v, max_speed=s.max_speed(),
            lyapunov=math.nan, X_of_t=d_x, V_of_t=d_v,
            min_detJ=float(dets.min()), max_velgrad_norm=float(vg.max()),
            worst_node=int(dets.argmin()),
        ))
    return out


def _window_trapezoid(times, values, a, b):
    """Trapezoid of the piecewise-linear series between arbitrary endpoints."""
    ts = np.asarray(times)
    vs = np.asarray(values)
    inner = ts[(ts > a) & (ts < b)]
    pts = np.concatenate([[a], inner, [b]])
    return float(np.trapezoid(np.interp(pts, ts, vs), pts))


class FlockingMonitor:
    """Streaming evaluation of X(t), V(t) and the Lyapunov functional.

    Seeded with the prehistory series on [-tau, 0], where X := d_X and
    V := d_V.  For t > 0, X accumulates the trapezoid of d_V, and V advances
    by the exact exponential-decay recurrence

        V(t+dt) = V(t) e^{-dt} + trapezoid of (1 - psi(X(s-tau) + R_V tau))
                                 d_V(s-tau) e^{s-(t+dt)} over [t, t+dt],

    so each frame costs O(1) plus one kernel-profile quadrature.
    """

    def __init__(self, kernel, tau, pre_times, pre_d_x, pre_d_v, r_v):
        pre_times = [float(t) for t in pre_times]
        if not pre_times or abs(pre_times[-1]) > 1e-9:
            raise ValueError("prehistory series must end at t = 0")
        if tau > 0 and abs(pre_times[0] + tau) > 1e-9:
            raise ValueError("prehistory series must start at t = -tau")
        self.kernel = kernel
        self.tau = float(tau)
        self.r_v = float(r_v)
        self._times = list(pre_times)
        self._d_v = [float(v) for v in pre_d_v]
        self._x = [float(v) for v in pre_d_x]
        self._v = [float(v) for v in pre_d_v]
        self._x_base = self._x[0] + self.r_v * self.tau  # X(-tau) + R_V tau

    def _x_at(self, s):
        return float(np.interp(s, self._times, self._x))

    def _d_v_at(self, s):
        return float(np.interp(s, self._times, self._d_v))

    def _g(self, s):
        arg = self._x_at(s - self.tau) + self.r_v * self.tau
        return (1.0 - self.kernel.eval(arg)) * self._d_v_at(s - self.tau)

    def _lyapunov(self, t):
        if self.tau == 0.0:
            return self._v[-1]
        in_window = sum(1 for s in self._times if t - self.tau - 1e-12 <= s <= t + 1e-12)
        if in_window < 2:
            raise NotReadyError(f"fewer than 2 recorded frames in [{t - self.tau}, {t}]")
        upper = self._x_at(t - self.tau) + self.r_v * self.tau
        middle, _ = quad(self.kernel.eval, self._x_base, upper,
                         epsabs=1e-13, epsrel=1e-11, limit=200)
        tail = _window_trapezoid(self._times, self._v, t - self.tau, t)
        return self._v[-1] + middle + tail

    def start(self):
        """(X, V, Lyapunov) at t = 0, before any dynamics frame."""
        return self._x[-1], self._v[-1], self._lyapunov(0.0)

    def observe(self, t, d_x, d_v):
        """Advance to the emitted frame at time ``t`` and return (X, V, L)."""
        t_prev = self._times[-1]
        dt = t - t_prev
        if dt <= 0:
            raise ValueError("frames must advance in time")
        g_prev = self._g(t_prev)
        x_new = self._x[-1] + 0.5 * dt * (self._d_v[-1] + d_v)
        self._times.append(float(t))
        self._d_v.append(float(d_v))
        self._x.append(float(x_new))
        decay = math.exp(-dt)
        v_new = self._v[-1] * decay + 0.5 * dt * (decay * g_prev + self._g(t))
        self._v.append(float(v_new))
        return x_new, v_new, self._lyapunov(t)


def lyapunov(times, d_x_series, d_v_series, kernel, r_v, tau) -> float:
    """Lyapunov functional at the last time of a recorded frame history.

    Entries at times <= 0 seed the prehistory (X := d_X, V := d_V there);
    later entries are replayed through the streaming recurrences.
    """
    times = np.asarray(times, dtype=float)
    pre = times <= 1e-12
    if not pre.any():
        raise ValueError("frame history must include the prehistory on [-tau, 0]")
    mon = FlockingMonitor(kernel, tau, times[pre], np.asarray(d_x_series)[pre],
                          np.asarray(d_v_series)[pre], r_v)
    value = mon.start()[2]
    for t, dx, dv in zip(times[~pre], np.asarray(d_x_series)[~pre],
                         np.asarray(d_v_series)[~pre]):
        value = mon.observe(t, dx, dv)[2]
    return value


def gronwall_rate(a: float, tau: float) -> float:
    """Decay exponent of the delayed Gronwall inequality.

    Returns the unique root C in (0, min(1, a)) of
    ``1 - C = (1 - a) exp(C tau)``; for tau = 0 that is exactly ``a``.
    Bisection, residual below 1e-12.
    """
    if not 0.0 < a < 1.0:
        raise ValueError(f"contraction amount a must lie in (0, 1), got {a}")
    if tau < 0:
        raise ValueError("delay tau must be nonnegative")
    if tau == 0.0:
        return a

    def g(c):
        return 1.0 - c - (1.0 - a) * math.exp(c * tau)

    lo, hi = 0.0, min(1.0, a)  # g(lo) = a > 0 >= g(hi), g strictly decreasing
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        val = g(mid)
        if abs(val) < 1e-13:
            return mid
        if val > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass
class FlockingCertificate:
    """Outcome of the sufficient-condition check on the prehistory.

    ``lhs`` is the initial velocity budget d_V(0) + integral of d_V over
    [-tau, 0]; ``rhs`` is the kernel tail integral from d_X(-tau) + R_V tau
    (may be infinite).  When satisfied, ``d_star`` absorbs the budget into the
    tail, ``psi_star`` is the kernel value there, and ``predicted_rate`` is
    the Gronwall exponent, a certified lower bound on the measured decay.
    """

    r_v: float
    lhs: float
    rhs: float
    satisfied: bool
    d_star: float | None = None
    psi_star: float | None = None
    predicted_rate: float | None = None

    def to_dict(self):
        def num(x):
            if x is None:
                return None
            return "inf" if math.isinf(x) else float(x)
        return {
            "R_V": float(self.r_v),
            "lhs": float(self.lhs),
            "rhs": num(self.rhs),
            "satisfied": bool(self.satisfied),
            "d_star": num(self.d_star),
            "psi_star": num(self.psi_star),
            "predicted_rate": num(self.predicted_rate),
        }


def _solve_tail_budget(kernel, a, budget):
    """Smallest d with integral of the profile over [a, d] equal to budget."""
    if budget <= 0.0:
        return a

    def accumulated(d):
        val, _ = quad(kernel.eval, a, d, epsabs=1e-13, epsrel=1e-12, limit=400)
        return val

    hi = a + max(budget, 1.0)
    for _ in range(200):
        if accumulated(hi) >= budget:
            break
        hi = a + 2.0 * (hi - a)
    else:
        raise RuntimeError("failed to bracket the tail budget")
    lo = a
    while hi - lo > 1e-13 * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if accumulated(mid) < budget:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def certify_flocking(frames, kernel) -> FlockingCertificate:
    """Evaluate the flocking sufficient condition on prehistory frames.

    ``frames`` must cover [-tau, 0] in increasing time order, carrying t,
    d_X, d_V, max_speed.  Raises UnsupportedKernelError (from the kernel) if
    the kernel has no tail model.
    """
    frames = sorted(frames, key=lambda f: f.t)
    if not frames or abs(frames[-1].t) > 1e-9:
        raise ValueError("prehistory frames must cover [-tau, 0] and end at 0")
    tau = -frames[0].t
    times = np.array([f.t for f in frames])
    d_v = np.array([f.d_V for f in frames])
    r_v = max(f.max_speed for f in frames)
    lhs = float(d_v[-1] + np.trapezoid(d_v, times))
    lower = frames[0].d_X + r_v * tau
    rhs = kernel.tail_integral(lower)
    satisfied = lhs < rhs
    if not satisfied:
        return FlockingCertificate(r_v=r_v, lhs=lhs, rhs=rhs, satisfied=False)
    d_star = _solve_tail_budget(kernel, lower, lhs)
    psi_star = float(kernel.eval(d_star))
    if psi_star >= 1.0:
        rate = 1.0  # flat-kernel / point-support limit of the Gronwall root
    else:
        rate = gronwall_rate(psi_star, tau)
    return FlockingCertificate(r_v=r_v, lhs=lhs, rhs=rhs, satisfied=True,
                               d_star=d_star, psi_star=psi_star, predicted_rate=rate)


def fit_decay_rate(frames, t_start: float, t_end: float) -> float:
    """Least-squares decay exponent of d_V over [t_start, t_end].

    Frames with d_V below 1e-14 are ignored (log underflow); if they leave
    fewer than 3 usable points the series has collapsed and the rate is
    reported as +infinity.
    """
    pts = [(f.t, f.d_V) for f in frames if t_start - 1e-12 <= f.t <= t_end + 1e-12]
    if len(pts) < 3:
        raise NotReadyError("need at least 3 frames in the fitting window")
    usable = [(t, dv) for t, dv in pts if dv >= 1e-14]
    if len(usable) < 3:
        return math.inf
    ts = np.array([t for t, _ in usable])
    logs = np.log([dv for _, dv in usable])
    slope = np.polyfit(ts, logs, 1)[0]
    return float(-slope)
