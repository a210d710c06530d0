"""Delayed alignment dynamics: force evaluation, RK4 stepping, run driver.

The velocity equation relaxes each node toward a kernel-weighted convex
combination of the delayed velocities; the normalization by the same weighted
mass makes the combination convex, which is what the maximum principle and
all diameter estimates lean on.  The tangent flow (position Jacobian and
velocity gradient with respect to labels) is integrated alongside, feeding
the Jacobian monitor and the one-dimensional slope dynamics.

Stepping is classical RK4 with a fixed step chosen to divide the delay, so
stage queries fall at worst half a step from stored slices and the dense
history interpolation keeps the overall order at four.  The delayed argument
always reads the interpolated history; with zero delay it reads the current
stage state, which turns the system into the undelayed one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diagnostics import DiagnosticsFrame, FlockingMonitor, diameters
from .state import HistoryBuffer, HistoryView, LagrangianEnsemble, discretize

__all__ = [
    "ForceEvaluation",
    "BlowupSignal",
    "BlowupEvent",
    "SingularNormalizerError",
    "SimulationResult",
    "alignment_rhs",
    "step",
    "integrate",
    "simulate",
]

DEFAULT_DETJ_TOLERANCE = 1e-6


class SingularNormalizerError(Exception):
    """The kernel mass normalizer underflowed (kernel decayed past range)."""


class BlowupSignal(Exception):
    """Raised when the integrator detects a non-finite state.

    Carries the last finite time so the driver can retain all frames up to it.
    """

    def __init__(self, time, node=None, reason="non-finite state"):
        super().__init__(f"{reason} detected after t={time}")
        self.time = time
        self.node = node


@dataclass
class BlowupEvent:
    time: float
    node: int | None


@dataclass
class ForceEvaluation:
    """Right-hand side pieces of the velocity and velocity-gradient equations.

    ``accelerations`` is the full dv/dt (convex combination minus current
    velocity); ``force_gradients`` is the label-space gradient of the
    combination term, i.e. its position-gradient composed with the tangent
    flow; ``normalizers`` are the kernel-weighted masses (strictly positive).
    """

    accelerations: np.ndarray   # (N, d)
    force_gradients: np.ndarray  # (N, d, d)
    normalizers: np.ndarray     # (N,)


def _force(kernel, masses, pos, vel, jac, d_pos, d_vel):
    """Core force kernel, O(N^2) pairwise, fixed reduction order.

    Returns (accelerations, label-space force gradient, normalizers,
    position-space force gradient).  Coincident pairs use profile value 1 and
    contribute nothing to the gradient (radial symmetry).
    """
    # transient non-finite values are caught by the stepper's isfinite check
    # and turned into a blow-up signal, so FP warnings here are only noise
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        diff = pos[:, None, :] - d_pos[None, :, :]
        r = np.sqrt((diff**2).sum(axis=2))
        psi = kernel.eval(r)
        w = psi * masses[None, :]
        s0 = w.sum(axis=1)
        # NaN compares False here on purpose: a poisoned state must flow on to
        # the stepper's isfinite check, not masquerade as an underflow
        if s0.min() < 1e-300:
            raise SingularNormalizerError(
                "kernel-weighted mass underflowed below 1e-300; nodes are "
                "separated beyond the representable range of the kernel"
            )
        s1 = w @ d_vel
        acc = s1 / s0[:, None] - vel
        dpsi = kernel.eval_deriv(r)
        n, d = pos.shape
        if np.any(dpsi):
            safe_r = np.where(r > 0, r, 1.0)
            unit = np.where(r[..., None] > 0, diff / safe_r[..., None], 0.0)
            wd = dpsi * masses[None, :]
            g0 = np.einsum("ij,ijb->ib", wd, unit)
            g1 = np.einsum("ij,ja,ijb->iab", wd, d_vel, unit)
            grad_pos = (g1 * s0[:, None, None] - s1[:, :, None] * g0[:, None, :]) \
                / (s0**2)[:, None, None]
        else:
            grad_pos = np.zeros((n, d, d))
    return acc, grad_pos @ jac, s0, grad_pos


def alignment_rhs(current: LagrangianEnsemble, delayed: HistoryView,
                  kernel) -> ForceEvaluation:
    """Evaluate the delayed alignment force on one ensemble.

    ``delayed`` supplies the positions and velocities at time t - tau for the
    same nodes (same N, d, masses).
    """
    if delayed.positions.shape != current.positions.shape:
        raise ValueError("delayed view must match the ensemble shape")
    acc, fg, s0, _ = _force(kernel, current.masses, current.positions,
                            current.velocities, current.jacobians,
                            delayed.positions, delayed.velocities)
    return ForceEvaluation(accelerations=acc, force_gradients=fg, normalizers=s0)


def step(buffer: HistoryBuffer, kernel, h: float) -> LagrangianEnsemble:
    """Advance the buffer by one RK4 step of size ``h``.

    Stage offsets are {0, 1/2, 1/2, 1}; each stage reads the delayed state
    from the history at its own time minus tau.  Requires h <= tau when
    tau > 0 so delayed queries never leave the stored window.  Appends the
    new slice, prunes slices older than t - tau - 2h, and returns the new
    slice.  Raises BlowupSignal if the new state is not finite.
    """
    if h <= 0:
        raise ValueError("step size must be positive")
    tau = buffer.tau
    if tau > 0 and h > tau * (1 + 1e-12):
        raise ValueError("step size must not exceed the delay")
    cur = buffer.latest
    t = cur.time
    masses = cur.masses

    def rhs(t_stage, pos, vel, jac, vgrad):
        if tau == 0.0:
            d_pos, d_vel = pos, vel
        else:
            view = buffer.query(t_stage - tau)
            d_pos, d_vel = view.positions, view.velocities
        acc, fg, _, _ = _force(kernel, masses, pos, vel, jac, d_pos, d_vel)
        return vel, acc, vgrad, fg - vgrad

    y0 = (cur.positions, cur.velocities, cur.jacobians, cur.vel_gradients)
    k1 = rhs(t, *y0)
    # the first stage is the exact state derivative at t; cache it as the
    # Hermite slope of this slice before any interpolation can need it
    if cur.accel_fwd is None:
        cur.accel_fwd = k1[1].copy()
    if cur.accel_bwd is None:
        cur.accel_bwd = cur.accel_fwd
    k2 = rhs(t + h / 2, *(y + (h / 2) * k for y, k in zip(y0, k1)))
    k3 = rhs(t + h / 2, *(y + (h / 2) * k for y, k in zip(y0, k2)))
    k4 = rhs(t + h, *(y + h * k for y, k in zip(y0, k3)))
    new = tuple(y + (h / 6) * (a + 2 * b + 2 * c + d)
                for y, a, b, c, d in zip(y0, k1, k2, k3, k4))
    if not all(np.all(np.isfinite(arr)) for arr in new):
        raise BlowupSignal(time=t)
    ens = LagrangianEnsemble(
        time=t + h, positions=new[0], velocities=new[1], jacobians=new[2],
        vel_gradients=new[3], masses=masses, labels=cur.labels,
        cell_volumes=cur.cell_volumes,
    )
    buffer.append(ens)
    buffer.prune(t + h - tau - 2 * h)
    return ens


def _fill_latest_accel(buffer: HistoryBuffer, kernel) -> None:
    """Cache the RHS slope on the newest slice so its interval is queryable."""
    cur = buffer.latest
    if cur.accel_fwd is not None:
        return
    if buffer.tau == 0.0:
        view = HistoryView(cur.time, cur.positions, cur.velocities)
    else:
        view = buffer.query(cur.time - buffer.tau)
    cur.accel_fwd = alignment_rhs(cur, view, kernel).accelerations
    if cur.accel_bwd is None:
        cur.accel_bwd = cur.accel_fwd


@dataclass
class SimulationResult:
    frames: list
    buffer: HistoryBuffer
    blowup: BlowupEvent | None
    r_v: float

    @property
    def blew_up(self) -> bool:
        return self.blowup is not None


def _frame(ens, monitor, at_start=False, status="ok"):
    d_x, d_v = diameters(ens)
    if at_start:
        x, v, lyap = monitor.start()
    else:
        x, v, lyap = monitor.observe(ens.time, d_x, d_v)
    dets = ens.det_jacobians()
    vg = np.sqrt((ens.vel_gradients**2).sum(axis=(1, 2)))
    return DiagnosticsFrame(
        t=ens.time, d_X=d_x, d_V=d_v, max_speed=ens.max_speed(), lyapunov=lyap,
        X_of_t=x, V_of_t=v, min_detJ=float(dets.min()),
        max_velgrad_norm=float(vg.max()), worst_node=int(dets.argmin()),
        status=status,
    )


def integrate(buffer: HistoryBuffer, kernel, h: float, t_end: float,
              output_every: float | None = None,
              detj_tolerance: float = DEFAULT_DETJ_TOLERANCE) -> SimulationResult:
    """Drive the stepper from t = 0 to t_end, emitting diagnostics frames.

    Emits one frame per output step (the initial diagnostics count as the
    first frame, so t_end = 0 produces exactly one).  Stops early with a
    blow-up event when the minimal Jacobian determinant reaches
    ``detj_tolerance`` or the state leaves the finite range; frames up to the
    last finite time are retained and the terminal frame carries status
    "blowup".  Deterministic given its inputs.
    """
    if t_end < 0:
        raise ValueError("t_end must be nonnegative")
    if output_every is None:
        output_every = h
    every = int(round(output_every / h))
    if every < 1 or abs(every * h - output_every) > 1e-9 * max(1.0, output_every):
        raise ValueError("output_every must be a positive multiple of the step")
    n_steps = int(round(t_end / h))
    if abs(n_steps * h - t_end) > 1e-9 * max(1.0, t_end):
        raise ValueError("t_end must be a multiple of the step")

    pre = buffer.prehistory()
    pre_t, pre_dx, pre_dv = [], [], []
    for s in pre:
        d_x, d_v = diameters(s)
        pre_t.append(s.time)
        pre_dx.append(d_x)
        pre_dv.append(d_v)
    r_v = max(s.max_speed() for s in pre)
    monitor = FlockingMonitor(kernel, buffer.tau, pre_t, pre_dx, pre_dv, r_v)

    frames = [_frame(buffer.latest, monitor, at_start=True)]
    if frames[0].min_detJ <= detj_tolerance:
        frames[0].status = "blowup"
        event = BlowupEvent(time=frames[0].t, node=frames[0].worst_node)
        return SimulationResult(frames, buffer, event, r_v)

    event = None
    for k in range(1, n_steps + 1):
        try:
            ens = step(buffer, kernel, h)
        except BlowupSignal as sig:
            last = buffer.latest  # step raises before appending
            if math.isclose(frames[-1].t, last.time, abs_tol=1e-12):
                frames[-1].status = "blowup"
            else:
                frames.append(_frame(last, monitor, status="blowup"))
            event = BlowupEvent(time=last.time, node=sig.node)
            break
        dets = ens.det_jacobians()
        crossed = (not np.all(np.isfinite(dets))) or dets.min() <= detj_tolerance
        if crossed or k % every == 0 or k == n_steps:
            frames.append(_frame(ens, monitor,
                                 status="blowup" if crossed else "ok"))
        if crossed:
            event = BlowupEvent(time=ens.time, node=int(np.nanargmin(dets)))
            break
    else:
        _fill_latest_accel(buffer, kernel)
    return SimulationResult(frames, buffer, event, r_v)


def simulate(config) -> SimulationResult:
    """Run a scenario end to end from a configuration object.

    ``config`` provides kernel, datum, tau, step, t_end, output_every,
    interpolation, and optionally n_history_slices and detj_tolerance (see
    ``flockdde.config.RunConfig``).
    """
    tau = config.tau
    h = config.step
    n_hist = getattr(config, "n_history_slices", None)
    if n_hist is None:
        n_hist = int(round(tau / h)) + 1 if tau > 0 else 1
    buffer = discretize(config.datum, tau, n_hist,
                        getattr(config, "interpolation", "cubic-hermite"))
    return integrate(
        buffer, config.kernel, h=h, t_end=config.t_end,
        output_every=getattr(config, "output_every", None),
        detj_tolerance=getattr(config, "detj_tolerance", DEFAULT_DETJ_TOLERANCE),
    )
