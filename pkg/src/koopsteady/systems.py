"""Benchmark vector fields and the trajectory/snapshot data pipeline.

Vector fields accept a single state ``(n,)`` or a batch ``(n, N)`` of
column states; inputs broadcast the same way. All arithmetic is
elementwise so a batched column is bit-identical to the same state
integrated on its own.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .numerics import IntegrationError, Trajectory, rk4_step

log = logging.getLogger(__name__)

__all__ = [
    "ConfigurationError",
    "SystemSpec",
    "InputSignal",
    "SnapshotSet",
    "Trajectory",
    "IFFL_DEFAULTS",
    "PROMOTER_DEFAULTS",
    "iffl_field",
    "comb_promoter_field",
    "linear_test_field",
    "make_iffl",
    "make_promoter",
    "make_linear",
    "make_system",
    "generate_dataset",
    "assemble_snapshots",
    "train_test_split",
    "split_indices",
    "simulate_constant_input",
    "write_trajectory_csv",
    "read_trajectory_csv",
    "write_dataset",
    "read_dataset",
]


class ConfigurationError(ValueError):
    """Invalid system parameters or dataset settings."""


IFFL_DEFAULTS = {
    **{f"k{i}": 1.0 for i in range(6)},
    **{f"Kd{i}": 1.0 for i in range(1, 5)},
    **{f"delta{i}": 0.5 for i in range(5)},
}

PROMOTER_DEFAULTS = {
    **{f"k{i}f": 1.0 for i in range(1, 9)},
    **{f"k{i}r": 0.5 for i in range(1, 8)},
    "delta": 0.1,
}


def _check_params(params, defaults, positive):
    missing = sorted(set(defaults) - set(params))
    if missing:
        raise ConfigurationError(f"missing parameters: {', '.join(missing)}")
    unknown = sorted(set(params) - set(defaults))
    if unknown:
        raise ConfigurationError(f"unknown parameters: {', '.join(unknown)}")
    for name, value in params.items():
        if not np.isfinite(value):
            raise ConfigurationError(f"parameter {name} is not finite")
        if name in positive and not value > 0:
            raise ConfigurationError(f"parameter {name} must be positive, got {value}")
        if value < 0:
            raise ConfigurationError(f"parameter {name} must be nonnegative, got {value}")


def _iffl_rhs(x, u, p):
    x0, x1, x2, x3 = x[0], x[1], x[2], x[3]
    x4 = x[4]
    u0, u1 = u[0], u[1]
    return np.stack([
        p["k0"] * u0 / (1.0 + u1 / p["Kd4"]) - p["delta0"] * x0,
        p["k1"] * u1 / (1.0 + x0 / p["Kd1"]) - p["delta1"] * x1,
        p["k2"] * x1 + p["k3"] * u0 - p["delta2"] * x2,
        p["k4"] * u1 / (1.0 + x2 / p["Kd2"]) - p["delta3"] * x3,
        p["k5"] * u0 / (1.0 + x3 / p["Kd3"]) - p["delta4"] * x4,
    ])


def iffl_field(x, u, params=None):
    """Incoherent feedforward loop: five proteins driven by two inducers.

    Hill-type activation and repression with linear degradation.
    """
    p = dict(IFFL_DEFAULTS if params is None else params)
    _check_params(p, IFFL_DEFAULTS, {k for k in p if k.startswith(("Kd", "delta"))})
    return _iffl_rhs(np.asarray(x, dtype=float), np.asarray(u, dtype=float), p)


def _promoter_rhs(x, u, p, decay_on_x10=False):
    u0, u1 = u[0], u[1]
    x0, x1, x2, x3, x4, x5, x6, x7, x8, x9, x10 = (x[i] for i in range(11))
    k1f, k2f, k3f, k4f = p["k1f"], p["k2f"], p["k3f"], p["k4f"]
    k5f, k6f, k7f, k8f = p["k5f"], p["k6f"], p["k7f"], p["k8f"]
    k1r, k2r, k3r, k4r = p["k1r"], p["k2r"], p["k3r"], p["k4r"]
    k5r, k6r, k7r = p["k5r"], p["k6r"], p["k7r"]
    # The final line decays x9 as written in the source model; the flag
    # switches to the x10 reading.
    decayed = x10 if decay_on_x10 else x9
    return np.stack([
        -k1f * x0 * u0 + k1r * x2,
        -k2f * x1 * u1 + k2r * x3 - k4f * x1 * x4 + k4r * x6 - k5f * x1 * x5
        + k5r * x7 + 0.2 * x10,
        k1f * x0 * u0 - k1r * x2 - k3f * x2 * x4 + k3r * x5 - k6f * x2 * x6
        + k6r * x7,
        k2f * x1 * u1 - k2r * x3 - 0.2 * x3,
        -k3f * x2 * x4 + k3r * x5 - k4f * x1 * x4 + k4r * x6,
        k3f * x2 * x4 - k3r * x5 - k5f * x1 * x5 + k5r * x7 - k7f * x5 * x8
        + k7r * x9 + k8f * x9,
        -k6f * x2 * x6 + k6r * x7 - k4r * x6 + k4f * x1 * x4,
        k5f * x1 * x5 - k5r * x7 + k6f * x2 * x6 - k6r * x7,
        -k7f * x5 * x8 + (k7r + k8f) * x9,
        k7f * x5 * x8 - (k7r + k8f) * x9,
        k8f * x9 - p["delta"] * decayed**2,
    ])


def comb_promoter_field(x, u, params=None, decay_on_x10=False):
    """Combinatorial promoter with an activator and a repressor input (11 states)."""
    p = dict(PROMOTER_DEFAULTS if params is None else params)
    _check_params(p, PROMOTER_DEFAULTS, set())
    return _promoter_rhs(
        np.asarray(x, dtype=float), np.asarray(u, dtype=float), p, decay_on_x10
    )


def linear_test_field(x, u, A, B):
    """``A x + B u``; works column-wise on batches."""
    return np.asarray(A) @ np.asarray(x, dtype=float) + np.asarray(B) @ np.asarray(u, dtype=float)


@dataclass(frozen=True)
class SystemSpec:
    """A named controlled vector field ``dx/dt = f(x, u)``.

    ``vector_field(x, u, params)`` must accept batched column states.
    """

    name: str
    state_dim: int
    input_dim: int
    params: dict
    vector_field: Callable = field(repr=False)
    options: dict = field(default_factory=dict)

    def rhs(self, x, u):
        return self.vector_field(x, u, self.params)

    def step(self, x, u, dt):
        return rk4_step(self.rhs, x, u, dt)

    def describe(self) -> dict:
        return {"name": self.name, "params": dict(self.params), "options": dict(self.options)}


def make_iffl(params=None) -> SystemSpec:
    p = {**IFFL_DEFAULTS, **(params or {})}
    _check_params(p, IFFL_DEFAULTS, {k for k in p if k.startswith(("Kd", "delta"))})
    return SystemSpec("iffl", 5, 2, p, _iffl_rhs)


def make_promoter(params=None, decay_on_x10=False) -> SystemSpec:
    p = {**PROMOTER_DEFAULTS, **(params or {})}
    _check_params(p, PROMOTER_DEFAULTS, set())
    decay_on_x10 = bool(decay_on_x10)

    def vf(x, u, prm):
        return _promoter_rhs(x, u, prm, decay_on_x10)

    return SystemSpec(
        "promoter", 11, 2, p, vf, {"promoter_decay_on_x10": decay_on_x10}
    )


def make_linear(A, B) -> SystemSpec:
    A = np.array(A, dtype=float, ndmin=2)
    B = np.array(B, dtype=float, ndmin=2)
    if A.shape[0] != A.shape[1] or B.shape[0] != A.shape[0]:
        raise ConfigurationError(f"incompatible A {A.shape} and B {B.shape}")
    params = {"A": A.tolist(), "B": B.tolist()}

    def vf(x, u, prm):
        return linear_test_field(x, u, A, B)

    return SystemSpec("linear", A.shape[0], B.shape[1], params, vf)


def make_system(name, params=None, **options) -> SystemSpec:
    if name == "iffl":
        return make_iffl(params)
    if name == "promoter":
        return make_promoter(params, options.get("promoter_decay_on_x10", False))
    if name == "linear":
        params = params or {}
        if "A" not in params or "B" not in params:
            raise ConfigurationError("linear system needs params A and B")
        return make_linear(params["A"], params["B"])
    raise ConfigurationError(f"unknown system {name!r}")


@dataclass(frozen=True)
class InputSignal:
    """Piecewise-held input: a step or a saturating ramp per channel.

    The ramp is ``level * (1 - exp(-t / tau))``: continuous, nondecreasing
    and bounded by ``level``.
    """

    kind: str
    level: np.ndarray
    tau: float = 1.0

    def __post_init__(self):
        if self.kind not in ("step", "ramp"):
            raise ConfigurationError(f"unknown input kind {self.kind!r}")
        object.__setattr__(self, "level", np.asarray(self.level, dtype=float).reshape(-1))
        if self.kind == "ramp" and not self.tau > 0:
            raise ConfigurationError("ramp time constant must be positive")

    def __call__(self, t: float) -> np.ndarray:
        if self.kind == "step":
            return self.level.copy()
        return self.level * (1.0 - np.exp(-t / self.tau))


@dataclass(frozen=True)
class SnapshotSet:
    """Column-paired snapshots: ``Xf[:, j]`` is the successor of ``Xp[:, j]``.

    ``provenance`` holds ``(trajectory_id, first_column, stop_column)``.
    """

    Xp: np.ndarray
    Xf: np.ndarray
    Up: np.ndarray
    provenance: tuple = ()

    def __post_init__(self):
        if not (self.Xp.shape[1] == self.Xf.shape[1] == self.Up.shape[1]):
            raise ValueError("snapshot matrices must share their column count")
        if self.Xp.shape[0] != self.Xf.shape[0]:
            raise ValueError("Xp and Xf must have the same number of rows")

    @property
    def n_columns(self) -> int:
        return self.Xp.shape[1]

    def columns(self, idx) -> "SnapshotSet":
        return SnapshotSet(self.Xp[:, idx], self.Xf[:, idx], self.Up[:, idx])


def _uniform_box(box):
    box = np.asarray(box, dtype=float)
    lo, hi = box[:, 0], box[:, 1]

    def sample(rng):
        return rng.uniform(lo, hi)

    return sample


def generate_dataset(
    spec: SystemSpec,
    n_traj: int,
    n_steps: int,
    dt: float,
    ic_sampler=None,
    input_sampler=None,
    seed: int = 0,
) -> list[Trajectory]:
    """Simulate ``n_traj`` trajectories, each with its own IC and input.

    ``ic_sampler(rng)`` returns an initial state and ``input_sampler(rng)``
    an :class:`InputSignal`. Trajectory ``i`` draws from a generator seeded
    by ``(seed, i)`` so results do not depend on batching.
    """
    if n_traj < 1 or n_steps < 1:
        raise ConfigurationError("n_traj and n_steps must be >= 1")
    if ic_sampler is None:
        ic_sampler = _uniform_box([[0.0, 2.0]] * spec.state_dim)
    if input_sampler is None:
        level = _uniform_box([[0.0, 1.0]] * spec.input_dim)

        def input_sampler(rng):
            return InputSignal("step", level(rng))

    x0s, signals = [], []
    for i in range(n_traj):
        rng = np.random.default_rng([seed, i])
        x0s.append(np.asarray(ic_sampler(rng), dtype=float).reshape(-1))
        signals.append(input_sampler(rng))

    X = np.array(x0s).T
    states = [X]
    inputs = []
    for k in range(n_steps):
        U = np.array([sig(k * dt) for sig in signals]).T
        try:
            X = spec.step(X, U, dt)
        except IntegrationError:
            X_bad = states[-1]
            bad = _first_failing_column(spec, X_bad, U, dt)
            raise IntegrationError(
                f"trajectory {bad}: integration failed at step {k}",
                state=X_bad[:, bad], step=k,
            ) from None
        states.append(X)
        inputs.append(U)
    S = np.stack(states)  # (n_steps+1, n, N)
    Uall = np.stack(inputs)  # (n_steps, m, N)
    return [Trajectory(dt, S[:, :, i], Uall[:, :, i]) for i in range(n_traj)]


def _first_failing_column(spec, X, U, dt):
    for j in range(X.shape[1]):
        try:
            spec.step(X[:, j], U[:, j], dt)
        except IntegrationError:
            return j
    return -1


def assemble_snapshots(trajs: Sequence[Trajectory]) -> SnapshotSet:
    """Stack the one-step pairs of every trajectory column-wise."""
    if not trajs:
        raise ValueError("no trajectories to assemble")
    dt = trajs[0].dt
    n, m = trajs[0].state_dim, trajs[0].input_dim
    xp, xf, up, prov = [], [], [], []
    col = 0
    for i, tr in enumerate(trajs):
        if tr.dt != dt or tr.state_dim != n or (tr.n_steps and tr.input_dim != m):
            raise ValueError(f"trajectory {i} does not match dt/dimensions of trajectory 0")
        k = tr.n_steps
        xp.append(tr.states[:-1].T)
        xf.append(tr.states[1:].T)
        up.append(tr.inputs.reshape(k, m).T)
        prov.append((i, col, col + k))
        col += k
    return SnapshotSet(np.hstack(xp), np.hstack(xf), np.hstack(up), tuple(prov))


def split_indices(n: int, fraction: float, seed: int):
    if not 0.0 < fraction < 1.0:
        raise ConfigurationError("split fraction must lie in (0, 1)")
    if n < 2:
        raise ConfigurationError("need at least two trajectories to split")
    n_train = min(max(int(round(fraction * n)), 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    return sorted(perm[:n_train].tolist()), sorted(perm[n_train:].tolist())


def train_test_split(trajs, fraction, seed):
    """Split whole trajectories into train/test lists (``fraction`` trains)."""
    tr, te = split_indices(len(trajs), fraction, seed)
    return [trajs[i] for i in tr], [trajs[i] for i in te]


def simulate_constant_input(spec: SystemSpec, x0, U, dt, horizon, tol=None):
    """Run every column of ``U`` as a constant input from the shared ``x0``.

    Columns whose residual ``max|f(x, u)|`` drops below ``tol`` are frozen.
    Returns ``(X_final, steps_used)``; ``X_final`` has one column per input.
    """
    U = np.atleast_2d(np.asarray(U, dtype=float))
    if U.shape[0] != spec.input_dim:
        U = U.T
    N = U.shape[1]
    X = np.repeat(np.asarray(x0, dtype=float).reshape(-1, 1), N, axis=1)
    steps = np.full(N, horizon)
    active = np.ones(N, dtype=bool)
    for k in range(horizon):
        if tol is not None:
            res = np.max(np.abs(spec.rhs(X[:, active], U[:, active])), axis=0)
            done = np.flatnonzero(active)[res < tol]
            steps[done] = k
            active[done] = False
            if not active.any():
                break
        X[:, active] = spec.step(X[:, active], U[:, active], dt)
    return X, steps


# ---------------------------------------------------------------- file formats


def _fmt(v: float) -> str:
    return repr(float(v))


def write_trajectory_csv(path, traj: Trajectory) -> None:
    """One row per sample; the input cells of the final row are empty."""
    n, m = traj.state_dim, traj.input_dim
    header = ["t"] + [f"x{i}" for i in range(n)] + [f"u{j}" for j in range(m)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for k, t in enumerate(traj.times):
            row = [_fmt(t)] + [_fmt(v) for v in traj.states[k]]
            if k < traj.n_steps:
                row += [_fmt(v) for v in traj.inputs[k]]
            else:
                row += [""] * m
            w.writerow(row)


def read_trajectory_csv(path) -> Trajectory:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    xi = [i for i, h in enumerate(header) if h.startswith("x")]
    ui = [i for i, h in enumerate(header) if h.startswith("u")]
    t = np.array([float(r[0]) for r in body])
    states = np.array([[float(r[i]) for i in xi] for r in body])
    inputs = np.array([[float(r[i]) for i in ui] for r in body[:-1]]).reshape(len(body) - 1, len(ui))
    dt = float(t[1] - t[0]) if len(t) > 1 else 0.0
    return Trajectory(dt, states, inputs)


def write_dataset(directory, spec: SystemSpec, trajs, dt, seed, extra=None) -> Path:
    """Write trajectory CSVs and ``manifest.json``; returns the manifest path."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = []
    width = max(3, len(str(len(trajs) - 1)))
    for i, tr in enumerate(trajs):
        name = f"traj_{i:0{width}d}.csv"
        write_trajectory_csv(d / name, tr)
        files.append(name)
    manifest = {
        "system": spec.name,
        "params": spec.params,
        "options": spec.options,
        "dt": dt,
        "seed": seed,
        "trajectory_seeds": "numpy default_rng([seed, index])",
        "files": files,
        **(extra or {}),
    }
    path = d / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_dataset(directory):
    """Load ``(manifest, trajectories)``; ``dt`` comes from the manifest."""
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    trajs = []
    for name in manifest["files"]:
        tr = read_trajectory_csv(d / name)
        trajs.append(Trajectory(manifest["dt"], tr.states, tr.inputs))
    return manifest, trajs
