"""Steady-state programming: the constant input that maximizes one state.

At a lifted equilibrium ``p = psi_x(x_e)`` the model satisfies::

    p = K_x p + K_xu psi_xu(x_e, u) + K_u psi_u(u)

Three ways of eliminating the constraint are offered:

``no_mixed``
    drop ``K_xu``; ``(I - K_x) p = K_u psi_u(u)``.
``separated_in_u``
    ``psi_xu = M_u(u) p``; ``(I - K_x - K_xu M_u(u)) p = K_u psi_u(u)``.
``separated_in_x``
    ``psi_xu = M_x(x_e) psi_u(u)``; implicit in ``x_e``, resolved by damped
    fixed-point iteration on the state read-out ``p[:n]``.

The objective ``-p[i]`` is then minimized over a box of inputs by
multi-start projected gradient descent.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import qmc

from .deepdmd import KoopmanModel
from .numerics import FactoredSystem, NearSingularError, NumericsError
from .observables import Mu_from_lifted
from .systems import SystemSpec, simulate_constant_input

log = logging.getLogger(__name__)

FORMS = ("no_mixed", "separated_in_u", "separated_in_x")


class AssumptionViolation(NumericsError):
    """The equilibrium operator has an eigenvalue at (or numerically near) 1."""


class FixedPointError(NumericsError):
    pass


class UnsolvableError(RuntimeError):
    pass


@dataclass(frozen=True)
class FixedPointSettings:
    tol: float = 1e-10
    max_iter: int = 500
    damping: float = 0.5
    cond_max: float = 1e10
    unit_eig_tol: float = 1e-6


def _check_unit_eigs(M, tol, what):
    ev = np.linalg.eigvals(M)
    close = np.abs(ev - 1.0)
    if close.size and close.min() < tol:
        raise AssumptionViolation(f"{what} has an eigenvalue within {close.min():.2e} of 1")


def lifted_equilibrium(model: KoopmanModel, u, form="no_mixed", settings=None):
    """Return ``(p, cond)``: the lifted equilibrium and the condition estimate used."""
    if form not in FORMS:
        raise ValueError(f"unknown constraint form {form!r}; expected one of {FORMS}")
    st = settings or FixedPointSettings()
    u = np.asarray(u, dtype=float).reshape(-1)
    nL = model.n_lifted
    I = np.eye(nL)
    pu = model.psi_u(u)
    rhs = model.K_u @ pu
    has_mixed = model.K_xu is not None

    if form == "no_mixed" or not has_mixed:
        _check_unit_eigs(model.K_x, st.unit_eig_tol, "K_x")
        try:
            fs = FactoredSystem(I - model.K_x, st.cond_max, "I - K_x")
        except NearSingularError as exc:
            raise AssumptionViolation(str(exc)) from exc
        return fs.solve(rhs), fs.cond

    if form == "separated_in_u":
        if model.mixed != "dictionary":
            raise ValueError("separated_in_u needs product (dictionary) mixed terms")
        KM = model.K_xu @ Mu_from_lifted(pu, nL)
        _check_unit_eigs(model.K_x + KM, st.unit_eig_tol, "K_x + K_xu M_u(u)")
        try:
            fs = FactoredSystem(I - model.K_x - KM, st.cond_max, "I - K_x - K_xu M_u")
        except NearSingularError as exc:
            raise AssumptionViolation(str(exc)) from exc
        return fs.solve(rhs), fs.cond

    # separated_in_x: K_xu psi_xu(x_e, u) = K_xu M_x(x_e) psi_u(u)
    _check_unit_eigs(model.K_x, st.unit_eig_tol, "K_x")
    try:
        fs = FactoredSystem(I - model.K_x, st.cond_max, "I - K_x")
    except NearSingularError as exc:
        raise AssumptionViolation(str(exc)) from exc
    n = model.n
    x = fs.solve(rhs)[:n]
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(st.max_iter):
            p = fs.solve(rhs + model.K_xu @ model.psi_xu(x, u))
            step = p[:n] - x
            if np.max(np.abs(step)) <= st.tol * max(1.0, np.max(np.abs(x))):
                return fs.solve(rhs + model.K_xu @ model.psi_xu(p[:n], u)), fs.cond
            x = x + st.damping * step
            if not np.all(np.isfinite(x)):
                break
    raise FixedPointError(
        f"separated_in_x fixed point did not converge in {st.max_iter} iterations"
    )


def steady_state_map(model: KoopmanModel, u, form="no_mixed", settings=None) -> np.ndarray:
    """Lifted equilibrium ``psi_x(x_e)`` under constant input ``u``."""
    return lifted_equilibrium(model, u, form, settings)[0]


def objective(model: KoopmanModel, u, i: int, form="no_mixed", settings=None) -> float:
    """``-psi_x(x_e)[i]``; entry ``i < n`` is the physical state by inclusiveness."""
    return -float(steady_state_map(model, u, form, settings)[i])


def equilibrium_residual(model: KoopmanModel, p, u, form="no_mixed") -> float:
    """Relative fixed-point residual of the one-step lifted map at ``(p, u)``.

    The mixed term is represented the way ``form`` represents it.
    """
    u = np.asarray(u, dtype=float).reshape(-1)
    pu = model.psi_u(u)
    nxt = model.K_x @ p + model.K_u @ pu
    if model.K_xu is not None and form != "no_mixed":
        if form == "separated_in_u":
            nxt = nxt + model.K_xu @ (Mu_from_lifted(pu, model.n_lifted) @ p)
        else:
            nxt = nxt + model.K_xu @ model.psi_xu(p[: model.n], u)
    return float(np.max(np.abs(p - nxt)) / max(1.0, np.max(np.abs(p))))


# ---------------------------------------------------------------- optimizer


@dataclass
class SteadyStateProblem:
    model: KoopmanModel
    target_index: int
    input_box: np.ndarray
    constraint_form: str = "no_mixed"

    def __post_init__(self):
        self.input_box = np.asarray(self.input_box, dtype=float).reshape(-1, 2)
        if not 0 <= self.target_index < self.model.n:
            raise ValueError(f"target_index must be in [0, {self.model.n})")
        if self.input_box.shape[0] != self.model.m:
            raise ValueError(f"input box needs {self.model.m} rows")
        if np.any(self.input_box[:, 0] >= self.input_box[:, 1]):
            raise ValueError("input box needs lo < hi in every channel")
        if self.constraint_form not in FORMS:
            raise ValueError(f"unknown constraint form {self.constraint_form!r}")


@dataclass(frozen=True)
class OptimizerConfig:
    n_starts: int = 16
    seed: int = 0
    max_iter: int = 200
    step_tol: float = 1e-9
    fd_rel_step: float = 1e-6
    armijo: float = 1e-4
    fixed_point: FixedPointSettings = FixedPointSettings()


@dataclass
class StartRecord:
    u0: np.ndarray
    f0: float
    u: np.ndarray
    f: float
    iterations: int
    status: str

    def to_dict(self):
        return {
            "u0": self.u0.tolist(), "f0": self.f0, "u": self.u.tolist(),
            "f": self.f, "iterations": self.iterations, "status": self.status,
        }


@dataclass
class SteadyStateSolution:
    u_star: np.ndarray
    predicted_lifted_equilibrium: np.ndarray
    predicted_value: float
    target_index: int
    constraint_form: str
    conditioning: float
    equilibrium_residual: float
    flat: bool = False
    starts: list = field(default_factory=list)
    achieved_value: Optional[float] = None
    form_values: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "u_star": self.u_star.tolist(),
            "predicted_value": self.predicted_value,
            "predicted_lifted_equilibrium": self.predicted_lifted_equilibrium.tolist(),
            "target_index": self.target_index,
            "constraint_form": self.constraint_form,
            "conditioning": self.conditioning,
            "equilibrium_residual": self.equilibrium_residual,
            "flat": self.flat,
            "achieved_value": self.achieved_value,
            "form_values": self.form_values,
            "starts": [s.to_dict() for s in self.starts],
        }

    @classmethod
    def from_dict(cls, d) -> "SteadyStateSolution":
        starts = [
            StartRecord(np.array(s["u0"]), s["f0"], np.array(s["u"]), s["f"],
                        s["iterations"], s["status"])
            for s in d.get("starts", [])
        ]
        return cls(
            np.array(d["u_star"], dtype=float),
            np.array(d["predicted_lifted_equilibrium"], dtype=float),
            float(d["predicted_value"]),
            int(d["target_index"]),
            d["constraint_form"],
            float(d["conditioning"]),
            float(d["equilibrium_residual"]),
            bool(d.get("flat", False)),
            starts,
            d.get("achieved_value"),
            dict(d.get("form_values", {})),
        )


def latin_hypercube(box, n, seed) -> np.ndarray:
    box = np.asarray(box, dtype=float)
    sample = qmc.LatinHypercube(d=box.shape[0], seed=seed).random(n)
    return box[:, 0] + sample * (box[:, 1] - box[:, 0])


def _projected_descent(fun, u0, box, cfg: OptimizerConfig):
    lo, hi = box[:, 0], box[:, 1]
    h = cfg.fd_rel_step * (hi - lo)
    u = np.clip(u0, lo, hi)
    f = fun(u)
    alpha = None
    for it in range(1, cfg.max_iter + 1):
        g = np.empty_like(u)
        for j in range(u.size):
            e = np.zeros_like(u)
            e[j] = h[j]
            g[j] = (fun(u + e) - fun(u - e)) / (2.0 * h[j])
        gmax = np.max(np.abs(g))
        if gmax == 0.0:
            return u, f, it, "stationary"
        if alpha is None:
            alpha = np.max(hi - lo) / gmax
        while True:
            trial = np.clip(u - alpha * g, lo, hi)
            move = trial - u
            if np.max(np.abs(move)) < cfg.step_tol:
                return u, f, it, "converged"
            ft = fun(trial)
            if ft <= f + cfg.armijo * float(g @ move):
                break
            alpha *= 0.5
        u, f = trial, ft
        if np.max(np.abs(move)) < cfg.step_tol:
            return u, f, it, "converged"
        alpha *= 2.0
    return u, f, cfg.max_iter, "max_iter"


def cross_form_values(model: KoopmanModel, u, i: int, settings=None) -> dict:
    """Predicted ``x_e[i]`` at ``u`` under every form the model supports.

    Forms that fail at ``u`` map to their error message; the caller picks
    the form, so disagreement is reported here rather than resolved.
    """
    forms = FORMS if model.mixed == "dictionary" else ("no_mixed", "separated_in_x")
    if model.K_xu is None:
        forms = ("no_mixed",)
    out = {}
    for form in forms:
        try:
            out[form] = float(steady_state_map(model, u, form, settings)[i])
        except (NumericsError, ValueError) as exc:
            out[form] = str(exc)
    return out


def solve(problem: SteadyStateProblem, cfg: Optional[OptimizerConfig] = None) -> SteadyStateSolution:
    """Multi-start projected gradient on ``-psi_x(x_e)[i]`` over the input box.

    Starts are a seeded Latin hypercube; gradients are central differences
    with step ``fd_rel_step * box width``. The best converged point wins,
    ties going to the lexicographically smallest input.
    """
    cfg = cfg or OptimizerConfig()
    model, i, form, box = (problem.model, problem.target_index,
                           problem.constraint_form, problem.input_box)

    def fun(u):
        return objective(model, u, i, form, cfg.fixed_point)

    records = []
    for u0 in latin_hypercube(box, cfg.n_starts, cfg.seed):
        try:
            f0 = fun(u0)
            u, f, its, status = _projected_descent(fun, u0, box, cfg)
        except (NumericsError, ValueError) as exc:
            log.debug("start %s failed: %s", u0, exc)
            records.append(StartRecord(u0, np.nan, u0, np.nan, 0, f"failed: {exc}"))
            continue
        records.append(StartRecord(u0, f0, u, f, its, status))

    ok = [r for r in records if not r.status.startswith("failed")]
    if not ok:
        raise UnsolvableError("every start violated the equilibrium assumptions")
    best = min(ok, key=lambda r: (r.f, tuple(r.u)))
    fs = np.array([r.f for r in ok] + [r.f0 for r in ok])
    flat = bool(np.ptp(fs) <= 1e-12 * max(1.0, np.max(np.abs(fs))))
    p, cond = lifted_equilibrium(model, best.u, form, cfg.fixed_point)
    return SteadyStateSolution(
        u_star=best.u.copy(),
        predicted_lifted_equilibrium=p,
        predicted_value=float(p[i]),
        target_index=i,
        constraint_form=form,
        conditioning=cond,
        equilibrium_residual=equilibrium_residual(model, p, best.u, form),
        flat=flat,
        starts=records,
        form_values=cross_form_values(model, best.u, i, cfg.fixed_point),
    )


# ------------------------------------------------------- ground-truth checks


@dataclass
class OracleResult:
    u_star: np.ndarray
    value: float
    grid: np.ndarray
    values: np.ndarray


def input_grid(box, grid_per_dim) -> np.ndarray:
    """Grid points as rows, first channel varying slowest (lexicographic order)."""
    if grid_per_dim < 2:
        raise ValueError("grid_per_dim must be >= 2")
    box = np.asarray(box, dtype=float)
    axes = [np.linspace(lo, hi, grid_per_dim) for lo, hi in box]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.reshape(-1) for g in mesh], axis=1)


def steady_values(system: SystemSpec, U, x0, horizon, dt, tol=1e-6) -> np.ndarray:
    """Final states for each constant input row of ``U`` (columns of the result)."""
    X, _ = simulate_constant_input(system, x0, np.asarray(U).T, dt, horizon, tol)
    return X


def brute_force_oracle(system, box, grid_per_dim, x0, horizon, target, dt, tol=1e-6) -> OracleResult:
    """Exhaustive grid search of constant inputs on the true simulator.

    Each input is simulated until ``max|f| < tol`` or ``horizon`` steps.
    The first maximizer in lexicographic order is returned.
    """
    grid = input_grid(box, grid_per_dim)
    vals = steady_values(system, grid, x0, horizon, dt, tol)[target]
    k = int(np.argmax(vals))
    return OracleResult(grid[k].copy(), float(vals[k]), grid, vals)


@dataclass
class VerifyReport:
    u_star: np.ndarray
    predicted_value: float
    achieved_value: float
    random_inputs: np.ndarray
    random_values: np.ndarray
    beats_fraction: float
    beats_fraction_strict: float
    oracle_value: Optional[float]
    oracle_u: Optional[np.ndarray]
    oracle_gap: Optional[float]
    rel_tol: float
    target_index: int
    times: np.ndarray = field(repr=False, default=None)
    trajectories: dict = field(repr=False, default_factory=dict)

    def passed(self) -> bool:
        ok = self.beats_fraction == 1.0
        if self.oracle_gap is not None:
            ok = ok and self.oracle_gap <= self.rel_tol
        return ok

    def to_dict(self, starts=None) -> dict:
        d = {
            "target_index": self.target_index,
            "u_star": self.u_star.tolist(),
            "predicted_value": self.predicted_value,
            "achieved_value": self.achieved_value,
            "oracle_value": self.oracle_value,
            "oracle_u": None if self.oracle_u is None else self.oracle_u.tolist(),
            "oracle_gap": self.oracle_gap,
            "beats_fraction": self.beats_fraction,
            "beats_fraction_strict": self.beats_fraction_strict,
            "rel_tol": self.rel_tol,
            "random_inputs": self.random_inputs.tolist(),
            "random_values": self.random_values.tolist(),
            "passed": self.passed(),
        }
        if starts is not None:
            d["starts"] = [s.to_dict() for s in starts]
        return d


def verify(
    system: SystemSpec,
    solution: SteadyStateSolution,
    n_random: int,
    x0,
    horizon: int,
    seed: int,
    *,
    box,
    dt: float,
    oracle: Optional[OracleResult] = None,
    rel_tol: float = 0.05,
    tol: float = 1e-6,
) -> VerifyReport:
    """Apply ``u*`` and ``n_random`` random box inputs to the true system.

    All runs share ``x0``. A random input counts as beaten when the value
    under ``u*`` is at least ``v - rel_tol * |v|``.
    """
    box = np.asarray(box, dtype=float)
    i = solution.target_index
    rng = np.random.default_rng(seed)
    R = rng.uniform(box[:, 0], box[:, 1], size=(n_random, box.shape[0]))
    U = np.vstack([solution.u_star[None, :], R])
    finals = steady_values(system, U, x0, horizon, dt, tol)[i]
    achieved, rand_vals = float(finals[0]), finals[1:]
    if n_random:
        beats = float(np.mean(achieved >= rand_vals - rel_tol * np.abs(rand_vals)))
        strict = float(np.mean(achieved >= rand_vals))
    else:
        beats = strict = 1.0
    gap = None
    if oracle is not None:
        gap = float((oracle.value - achieved) / abs(oracle.value)) if oracle.value else float(oracle.value - achieved)

    # time series over the horizon for plotting
    X = np.repeat(np.asarray(x0, dtype=float).reshape(-1, 1), U.shape[0], axis=1)
    series = [X.copy()]
    for _ in range(horizon):
        X = system.step(X, U.T, dt)
        series.append(X.copy())
    S = np.stack(series)  # (horizon+1, n, runs)
    labels = ["optimal"] + [f"random_{k:02d}" for k in range(n_random)]
    trajectories = {lab: (U[k], S[:, :, k]) for k, lab in enumerate(labels)}
    return VerifyReport(
        u_star=solution.u_star.copy(),
        predicted_value=solution.predicted_value,
        achieved_value=achieved,
        random_inputs=R,
        random_values=rand_vals,
        beats_fraction=beats,
        beats_fraction_strict=strict,
        oracle_value=None if oracle is None else oracle.value,
        oracle_u=None if oracle is None else oracle.u_star,
        oracle_gap=gap,
        rel_tol=rel_tol,
        target_index=i,
        times=dt * np.arange(horizon + 1),
        trajectories=trajectories,
    )
