"""Integration of the extremal (PMP) dynamics with bang/singular control
selection, switch detection, and derivative-formula residual checks.

In global coordinates the extremal system is

    qdot = f_0(q) + sum_i u_i f_i(q)
    pdot = -(J_{f0}(q) + sum_i u_i J_{f_i}(q))^T p

with the control selected pointwise: ``u = h_I / ||h_I||`` while ``||h_I||``
exceeds the switch threshold theta (bang), ``u = H_II^{-1} h_0I`` on singular
arcs with invertible Goh matrix, and ``u = 0`` with a degenerate flag
otherwise.

Switch events are dips of ``||h_I||`` below theta, localized by bisecting
``||h_I||^2 - theta^2`` on the dense output to a time tolerance of 1e-10.  A
dip traversed without dwelling is recorded as a single ``crossing`` at its
midpoint; a dip that settles onto a singular arc is bracketed by ``entry``
and ``exit`` events.  A degenerate regime persisting beyond one step stops
the run with a diagnostic status instead of inventing dynamics the model
does not define.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import solve_ivp

from .hamsym import ExtremalState, goh_matrix, h0I
from .vecfield import (
    ControlAffineSystem,
    evaluate as vf_evaluate,
    jacobian as vf_jacobian,
    frame_independent,
)

__all__ = [
    "FlowConfig",
    "Sample",
    "SwitchEvent",
    "Trajectory",
    "FlowError",
    "extremal_rhs",
    "select_control",
    "default_switch_theta",
    "integrate",
    "hdot_residual",
    "hamiltonian_drift",
    "switch_times",
]

_EVENT_TIME_TOL = 1e-10
_PROBE_STEP = 1e-10
_BLOWUP_NORM = 1e12


class FlowError(RuntimeError):
    pass


@dataclass(frozen=True)
class FlowConfig:
    horizon: float = 10.0
    rtol: float = 1e-10
    atol: float = 1e-12
    switch_theta: float | None = None  # None: scale-aware default at t = 0
    rank_tol: float = 1e-9
    feas_tol: float = 1e-9
    max_step: float = 0.01
    chatter_limit: int = 10_000
    singular_exit_factor: float = 10.0

    def __post_init__(self):
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        for name in ("rtol", "atol", "rank_tol", "feas_tol", "max_step"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.switch_theta is not None and self.switch_theta <= 0:
            raise ValueError("switch_theta must be positive")

    def halved(self) -> "FlowConfig":
        """Same configuration with both integrator tolerances halved."""
        return replace(self, rtol=self.rtol / 2.0, atol=self.atol / 2.0)


@dataclass(frozen=True)
class Sample:
    t: float
    state: ExtremalState
    u: np.ndarray
    regime: str
    arc: int


@dataclass(frozen=True)
class SwitchEvent:
    t: float
    kind: str  # crossing | entry | exit
    goh_rank: int


@dataclass
class Trajectory:
    samples: list[Sample]
    events: list[SwitchEvent]
    status: str = "completed"  # completed | degenerate | chattering | blowup
    message: str = ""

    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.samples])


def _pack(lam: ExtremalState) -> np.ndarray:
    return np.concatenate([lam.q, lam.p])


def _hI(sys: ControlAffineSystem, y: np.ndarray) -> np.ndarray:
    n = sys.n
    q, p = y[:n], y[n:]
    return np.array([p @ vf_evaluate(f, q) for f in sys.controlled])


def extremal_rhs(
    sys: ControlAffineSystem, lam: ExtremalState, u: Sequence[float]
) -> tuple[np.ndarray, np.ndarray]:
    """Coordinate Hamiltonian system of the PMP for a frozen control value."""
    u = np.asarray(u, dtype=float)
    if np.linalg.norm(u) > 1.0 + 1e-6:
        raise ValueError("control must lie in the closed unit ball")
    q, p = lam.q, lam.p
    qdot = vf_evaluate(sys.drift, q)
    J = vf_jacobian(sys.drift, q)
    for ui, f in zip(u, sys.controlled):
        qdot = qdot + ui * vf_evaluate(f, q)
        J = J + ui * vf_jacobian(f, q)
    pdot = -J.T @ p
    return qdot, pdot


def default_switch_theta(sys: ControlAffineSystem, lam: ExtremalState) -> float:
    """Scale-aware threshold: h_I is homogeneous in p and linear in the
    frame, so the floor scales with ||p|| times the largest field value."""
    fmax = max(np.linalg.norm(vf_evaluate(f, lam.q)) for f in sys.fields)
    return 1e-9 * (1.0 + float(np.linalg.norm(lam.p)) * fmax)


def _goh_rank(sys: ControlAffineSystem, lam: ExtremalState, tol: float) -> int:
    H = goh_matrix(sys, lam).data
    if not np.any(H):
        return 0
    sigma = np.linalg.svd(H, compute_uv=False)
    return int(np.sum(sigma > tol * sigma[0]))


def select_control(
    sys: ControlAffineSystem,
    lam: ExtremalState,
    cfg: FlowConfig,
    theta: float | None = None,
) -> tuple[np.ndarray, str]:
    """(u, regime): bang above the switch threshold, singular when the Goh
    matrix is invertible with a feasible kernel control, degenerate else."""
    if theta is None:
        theta = cfg.switch_theta or default_switch_theta(sys, lam)
    hi = _hI(sys, _pack(lam))
    norm = float(np.linalg.norm(hi))
    if norm > theta:
        return hi / norm, "bang"
    H = goh_matrix(sys, lam).data
    sigma = np.linalg.svd(H, compute_uv=False)
    if sigma[0] > 0.0 and sigma[-1] > cfg.rank_tol * sigma[0]:
        u = np.linalg.solve(H, h0I(sys, lam))
        if np.linalg.norm(u) <= 1.0 + cfg.feas_tol:
            return u, "singular"
    return np.zeros(2 * sys.m), "degenerate"


def _control_fn(sys: ControlAffineSystem, regime: str) -> Callable:
    n = sys.n
    m2 = 2 * sys.m

    if regime == "bang":

        def u_of(y):
            hi = _hI(sys, y)
            norm = np.linalg.norm(hi)
            if norm == 0.0:
                return np.zeros(m2)
            return hi / norm

    elif regime == "singular":

        def u_of(y):
            lam = ExtremalState(y[:n], y[n:])
            return np.linalg.solve(goh_matrix(sys, lam).data, h0I(sys, lam))

    else:

        def u_of(y):
            return np.zeros(m2)

    return u_of


def _rhs_fn(sys: ControlAffineSystem, u_of: Callable) -> Callable:
    n = sys.n

    def rhs(t, y):
        lam = ExtremalState(y[:n], y[n:])
        qdot, pdot = extremal_rhs(sys, lam, u_of(y))
        return np.concatenate([qdot, pdot])

    return rhs


def _bisect_root(g: Callable[[float], float], lo: float, hi: float) -> float:
    """Bisect a sign change of g on [lo, hi] to absolute tolerance 1e-10."""
    glo, ghi = g(lo), g(hi)
    if glo == 0.0:
        return lo
    if ghi == 0.0:
        return hi
    if glo * ghi > 0:
        return hi
    while hi - lo > _EVENT_TIME_TOL:
        mid = 0.5 * (lo + hi)
        gm = g(mid)
        if gm == 0.0:
            return mid
        if glo * gm < 0:
            hi = mid
        else:
            lo, glo = mid, gm
    return 0.5 * (lo + hi)


class _Integrator:
    """One integration run; keeps the sampling, event and arc bookkeeping."""

    def __init__(self, sys: ControlAffineSystem, lam0: ExtremalState, cfg: FlowConfig):
        self.sys = sys
        self.cfg = cfg
        self.theta = cfg.switch_theta or default_switch_theta(sys, lam0)
        self.theta2 = self.theta**2
        self.samples: list[Sample] = []
        self.events: list[SwitchEvent] = []
        self.arc = 0
        self.t = 0.0
        self.y = _pack(lam0)
        self.status = "completed"
        self.message = ""
        # (t_in, goh_rank) of a dip entered from a bang arc, not yet resolved
        self.pending: tuple[float, int] | None = None

    # -- helpers -----------------------------------------------------------

    def state(self) -> ExtremalState:
        n = self.sys.n
        return ExtremalState(self.y[:n], self.y[n:])

    def gap(self, y: np.ndarray) -> float:
        hi = _hI(self.sys, y)
        return float(hi @ hi) - self.theta2

    def record_arc(self, dense, u_of, regime: str, t0: float, t1: float):
        if t1 <= t0:
            return
        grid = np.arange(t0, t1, self.cfg.max_step)
        if grid.size == 0 or grid[-1] < t1:
            grid = np.append(grid, t1)
        last_t = self.samples[-1].t if self.samples else None
        n = self.sys.n
        for ti in grid:
            if last_t is not None and ti <= last_t:
                continue
            yi = dense(ti)
            lam = ExtremalState(yi[:n], yi[n:])
            self.samples.append(Sample(float(ti), lam, u_of(yi), regime, self.arc))
        self.arc += 1

    def probe_past(
        self, t0: float, y0: np.ndarray, rhs, until: Callable | None = None
    ) -> tuple[float, np.ndarray]:
        """Advance past a localized root so regime selection does not see the
        boundary value again; with ``until``, keep doubling the probe step
        until the predicate holds (e.g. to clear a threshold dip)."""
        t, y = t0, y0
        step = _PROBE_STEP
        while True:
            t1 = min(t + step, t0 + self.cfg.max_step, self.cfg.horizon)
            if t1 <= t:
                return t, y
            sol = solve_ivp(
                rhs,
                (t, t1),
                y,
                method="RK45",
                rtol=self.cfg.rtol,
                atol=self.cfg.atol,
                first_step=(t1 - t) / 2,
            )
            if not sol.success:
                raise FlowError(f"probe step failed at t = {t}")
            t, y = float(sol.t[-1]), sol.y[:, -1]
            if until is None or until(y):
                return t, y
            if t >= t0 + self.cfg.max_step or t >= self.cfg.horizon:
                return t, y
            step *= 2.0

    def solve(self, rhs, t_end: float, events):
        return solve_ivp(
            rhs,
            (self.t, t_end),
            self.y,
            method="RK45",
            rtol=self.cfg.rtol,
            atol=self.cfg.atol,
            max_step=self.cfg.max_step,
            dense_output=True,
            events=events,
        )

    # -- regime steps --------------------------------------------------------

    def run_bang(self, T: float) -> None:
        u_of = _control_fn(self.sys, "bang")
        rhs = _rhs_fn(self.sys, u_of)
        n = self.sys.n

        def dip(ti, yi):
            return self.gap(yi)

        dip.terminal = True
        dip.direction = -1.0

        def norm_min(ti, yi):
            # d/dt ||h_I||^2 = 2 h_I . (h_0I - H_II u); zero-crossings upward
            # localize minima of ||h_I||, which sign sampling of the theta
            # shell cannot see when the dip is narrower than a step
            lam = ExtremalState(yi[:n], yi[n:])
            hi = _hI(self.sys, yi)
            hdot = h0I(self.sys, lam) - goh_matrix(self.sys, lam).data @ u_of(yi)
            return 2.0 * float(hi @ hdot)

        norm_min.terminal = False
        norm_min.direction = 1.0

        sol = self.solve(rhs, T, [dip, norm_min])
        if not sol.success:
            self.status, self.message = "blowup", sol.message
            return
        t_end = float(sol.t[-1])
        dip_hit = sol.t_events[0].size > 0

        # earliest norm minimum that actually dips to the threshold
        t_cross = None
        for tc in sol.t_events[1]:
            if tc <= self.t + _EVENT_TIME_TOL:
                continue
            if self.gap(sol.sol(tc)) <= 0.0:
                t_cross = float(tc)
                break

        if t_cross is not None and (not dip_hit or t_cross < t_end - _EVENT_TIME_TOL):
            lo = max(self.t, t_cross - self.cfg.max_step / 2)
            hi = min(t_end, t_cross + self.cfg.max_step / 2)
            deriv = lambda ti: norm_min(ti, sol.sol(ti))  # noqa: E731
            if deriv(lo) < 0.0 < deriv(hi):
                t_root = _bisect_root(deriv, lo, hi)
            else:
                t_root = t_cross
            y_root = sol.sol(t_root)
            rank = _goh_rank(
                self.sys, ExtremalState(y_root[:n], y_root[n:]), self.cfg.rank_tol
            )
            self.record_arc(sol.sol, u_of, "bang", self.t, t_root)
            self.events.append(SwitchEvent(t_root, "crossing", rank))
            self.t, self.y = self.probe_past(
                t_root, y_root, rhs, until=lambda yy: self.gap(yy) > 0.0
            )
            return

        if not dip_hit:
            self.record_arc(sol.sol, u_of, "bang", self.t, t_end)
            self.t, self.y = t_end, sol.y[:, -1]
            return

        lo = max(self.t, t_end - self.cfg.max_step)
        t_root = _bisect_root(lambda ti: self.gap(sol.sol(ti)), lo, t_end)
        self.record_arc(sol.sol, u_of, "bang", self.t, t_root)
        y_root = sol.sol(t_root)
        rank = _goh_rank(
            self.sys, ExtremalState(y_root[:n], y_root[n:]), self.cfg.rank_tol
        )
        t_probe, y_probe = self.probe_past(t_root, y_root, rhs)
        if self.gap(y_probe) < 0.0:
            self.pending = (t_root, rank)
        else:
            # passed straight through a dip narrower than the probe
            self.events.append(SwitchEvent(t_root, "crossing", rank))
            t_probe, y_probe = self.probe_past(
                t_probe, y_probe, rhs, until=lambda yy: self.gap(yy) > 0.0
            )
        self.t, self.y = t_probe, y_probe

    def run_singular(self, T: float) -> None:
        u_of = _control_fn(self.sys, "singular")
        rhs = _rhs_fn(self.sys, u_of)
        if self.pending is not None:
            self.events.append(SwitchEvent(self.pending[0], "entry", self.pending[1]))
            self.pending = None
        lam_now = self.state()
        det_floor = 0.5 * abs(np.linalg.det(goh_matrix(self.sys, lam_now).data))
        exit_norm2 = (self.cfg.singular_exit_factor * self.theta) ** 2

        def exit_hi(ti, yi):
            hi = _hI(self.sys, yi)
            return float(hi @ hi) - exit_norm2

        exit_hi.terminal = True
        exit_hi.direction = 1.0

        def exit_feas(ti, yi):
            lam = ExtremalState(yi[: self.sys.n], yi[self.sys.n :])
            try:
                u = np.linalg.solve(goh_matrix(self.sys, lam).data, h0I(self.sys, lam))
            except np.linalg.LinAlgError:
                return 1.0
            return float(u @ u) - (1.0 + self.cfg.feas_tol) ** 2

        exit_feas.terminal = True
        exit_feas.direction = 1.0

        def exit_det(ti, yi):
            lam = ExtremalState(yi[: self.sys.n], yi[self.sys.n :])
            return abs(np.linalg.det(goh_matrix(self.sys, lam).data)) - det_floor

        exit_det.terminal = True
        exit_det.direction = -1.0

        sol = self.solve(rhs, T, [exit_hi, exit_feas, exit_det])
        if not sol.success:
            self.status, self.message = "blowup", sol.message
            return
        t_end = float(sol.t[-1])
        self.record_arc(sol.sol, u_of, "singular", self.t, t_end)
        self.t, self.y = t_end, sol.y[:, -1]
        if any(te.size for te in sol.t_events):
            rank = _goh_rank(self.sys, self.state(), self.cfg.rank_tol)
            self.events.append(SwitchEvent(t_end, "exit", rank))
            if sol.t_events[0].size:  # left through the ||h_I|| shell
                self.t, self.y = self.probe_past(t_end, self.y, rhs)

    def run_degenerate(self, T: float) -> None:
        u_of = _control_fn(self.sys, "degenerate")
        rhs = _rhs_fn(self.sys, u_of)
        t_in, rank_in = self.pending if self.pending is not None else (
            self.t,
            _goh_rank(self.sys, self.state(), self.cfg.rank_tol),
        )

        def out(ti, yi):
            return self.gap(yi)

        out.terminal = True
        out.direction = 1.0
        t_stop = min(self.t + self.cfg.max_step, T)
        sol = self.solve(rhs, t_stop, [out])
        if not sol.success:
            self.status, self.message = "blowup", sol.message
            return
        t_end = float(sol.t[-1])
        if sol.t_events[0].size > 0:
            t_out = _bisect_root(lambda ti: self.gap(sol.sol(ti)), self.t, t_end)
            self.events.append(
                SwitchEvent(0.5 * (t_in + t_out), "crossing", rank_in)
            )
            self.pending = None
            self.record_arc(sol.sol, u_of, "degenerate", self.t, t_out)
            t_probe, y_probe = self.probe_past(
                t_out, sol.sol(t_out), rhs, until=lambda yy: self.gap(yy) > 0.0
            )
            self.t, self.y = t_probe, y_probe
            return
        if self.pending is not None:
            self.events.append(SwitchEvent(t_in, "entry", rank_in))
            self.pending = None
        self.record_arc(sol.sol, u_of, "degenerate", self.t, t_end)
        self.t = t_end
        self.status = "degenerate"
        self.message = (
            "degenerate regime (h_I below threshold, Goh matrix singular or "
            f"no feasible singular control) persisted beyond one step at "
            f"t = {t_end:.9g}"
        )


def integrate(
    sys: ControlAffineSystem, lam0: ExtremalState, cfg: FlowConfig
) -> Trajectory:
    """Integrate the extremal flow over [0, horizon] with event localization.

    Adaptive RK stepping with terminal events; regime switches only at
    localized events; sample spacing at most cfg.max_step.  Returns a
    Trajectory whose status reports completion, chattering, persistent
    degeneracy, or blow-up.
    """
    if not frame_independent(sys, lam0.q, cfg.rank_tol):
        raise FlowError("frame is not linearly independent at the initial point")
    run = _Integrator(sys, lam0, cfg)
    T = cfg.horizon
    while run.t < T - _EVENT_TIME_TOL and run.status == "completed":
        if len(run.events) >= cfg.chatter_limit:
            run.status = "chattering"
            run.message = f"stopped after {len(run.events)} switch events"
            break
        _, regime = select_control(sys, run.state(), cfg, run.theta)
        if regime == "bang":
            run.run_bang(T)
        elif regime == "singular":
            run.run_singular(T)
        else:
            run.run_degenerate(T)
        if np.max(np.abs(run.y)) > _BLOWUP_NORM:
            run.status = "blowup"
            run.message = "state norm overflow"
            break

    if not run.samples:
        u0, regime0 = select_control(sys, lam0, cfg, run.theta)
        run.samples.append(Sample(0.0, lam0, u0, regime0, 0))
    traj = Trajectory(
        samples=run.samples,
        events=run.events,
        status=run.status,
        message=run.message,
    )
    if min(float(np.linalg.norm(s.state.p)) for s in traj.samples) <= 0.0:
        raise FlowError("covector vanished along the trajectory")
    return traj


# -- diagnostics --------------------------------------------------------------


def _arc_groups(traj: Trajectory) -> list[list[Sample]]:
    groups: dict[int, list[Sample]] = {}
    for s in traj.samples:
        groups.setdefault(s.arc, []).append(s)
    return [groups[k] for k in sorted(groups)]


def hdot_residual(traj: Trajectory, sys: ControlAffineSystem) -> float:
    """Max over interior samples of smooth arcs of the difference between the
    centered finite difference of h_I and the model h_0I - H_II u."""
    worst = 0.0
    for group in _arc_groups(traj):
        if len(group) < 3:
            continue
        his = [_hI(sys, _pack(s.state)) for s in group]
        for i in range(1, len(group) - 1):
            dtm = group[i].t - group[i - 1].t
            dtp = group[i + 1].t - group[i].t
            # the centered difference is second order only on symmetric stencils
            if dtp <= 0 or dtm <= 0 or abs(dtp - dtm) > 1e-9 * (dtp + dtm):
                continue
            fd = (his[i + 1] - his[i - 1]) / (dtp + dtm)
            lam = group[i].state
            model = h0I(sys, lam) - goh_matrix(sys, lam).data @ group[i].u
            worst = max(worst, float(np.linalg.norm(fd - model)))
    return worst


def hamiltonian_drift(traj: Trajectory, sys: ControlAffineSystem) -> float:
    """Max drift of h_0 + ||h_I|| over bang arcs (the maximized Hamiltonian
    of the autonomous flow, exactly conserved there)."""
    ref = None
    worst = 0.0
    for s in traj.samples:
        if s.regime != "bang":
            continue
        y = _pack(s.state)
        h0 = float(s.state.p @ vf_evaluate(sys.drift, s.state.q))
        val = h0 + float(np.linalg.norm(_hI(sys, y)))
        if ref is None:
            ref = val
        worst = max(worst, abs(val - ref))
    return worst


def switch_times(traj: Trajectory) -> list[float]:
    """Sorted refined event times (the numeric shadow of Sigma)."""
    return sorted(e.t for e in traj.events)
