"""Dense linear-algebra and fixed-step ODE kernels.

Matrices and vectors are plain ``numpy`` float arrays. Snapshot data uses
the column convention: one sample per column.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
from scipy import linalg as sla

DEFAULT_RANK_TOL = 1e-10
DEFAULT_COND_MAX = 1e10


class NumericsError(RuntimeError):
    """Base class for failures in the numerical kernels."""


class SVDConvergenceError(NumericsError):
    def __init__(self, shape, iterations=None):
        self.shape = shape
        self.iterations = iterations
        msg = f"SVD did not converge for matrix of shape {shape}"
        if iterations is not None:
            msg += f" after {iterations} iterations"
        super().__init__(msg)


class NearSingularError(NumericsError):
    """Raised when a linear system is singular or too ill-conditioned.

    Attributes
    ----------
    cond : float
        Estimated 2-norm condition number (``inf`` for exact singularity).
    """

    def __init__(self, cond: float, threshold: float, what: str = "matrix"):
        self.cond = cond
        self.threshold = threshold
        super().__init__(
            f"{what} is near-singular: condition estimate {cond:.3e} "
            f"exceeds threshold {threshold:.1e}"
        )


class IntegrationError(NumericsError):
    def __init__(self, message, state=None, step=None):
        self.state = None if state is None else np.array(state, copy=True)
        self.step = step
        super().__init__(message)


def as_matrix(m, name="matrix") -> np.ndarray:
    """Coerce to a finite 2-D float array."""
    a = np.asarray(m, dtype=float)
    if a.ndim == 1:
        a = a.reshape(1, -1) if a.size else a.reshape(0, 0)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def as_vector(v, name="vector") -> np.ndarray:
    a = np.asarray(v, dtype=float).reshape(-1)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def svd(m):
    """Thin SVD ``m = U @ diag(S) @ Vt`` with nonincreasing ``S``."""
    a = as_matrix(m)
    if a.size == 0:
        raise ValueError("svd of an empty matrix")
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:  # LAPACK gesdd reports no count
        raise SVDConvergenceError(a.shape) from exc
    return u, s, vt


def numerical_rank(s, rank_tol=DEFAULT_RANK_TOL) -> int:
    if s.size == 0 or s[0] == 0.0:
        return 0
    # subnormal singular values count as zero: their reciprocals overflow in products
    keep = (s > rank_tol * s[0]) & (s >= np.finfo(float).tiny)
    return int(np.count_nonzero(keep))


def pseudoinverse(m, rank_tol=DEFAULT_RANK_TOL) -> np.ndarray:
    """Moore-Penrose pseudoinverse via truncated SVD.

    Singular values below ``rank_tol * s_max`` or below the smallest normal
    float are treated as zero.
    """
    if rank_tol <= 0:
        raise ValueError("rank_tol must be positive")
    a = as_matrix(m)
    if a.size == 0:
        return np.zeros((a.shape[1], a.shape[0]))
    u, s, vt = svd(a)
    r = numerical_rank(s, rank_tol)
    return (vt[:r].T / s[:r]) @ u[:, :r].T


class LinearSolution(NamedTuple):
    x: np.ndarray
    cond: float


def solve_linear(a, b, cond_max=DEFAULT_COND_MAX, what="matrix") -> LinearSolution:
    """Solve ``a @ x = b`` for square ``a``.

    Returns the solution together with a 2-norm condition estimate. Raises
    :class:`NearSingularError` when the estimate exceeds ``cond_max``; that
    check is how callers detect an operator with a unit eigenvalue.
    """
    a = as_matrix(a, "a")
    b_arr = np.asarray(b, dtype=float)
    vector_rhs = b_arr.ndim == 1
    b2 = b_arr.reshape(-1, 1) if vector_rhs else as_matrix(b_arr, "b")
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"a must be square, got {a.shape}")
    if b2.shape[0] != a.shape[0]:
        raise ValueError(f"shape mismatch: a {a.shape}, b {b2.shape}")
    s = np.linalg.svd(a, compute_uv=False)
    cond = float(np.inf) if s[-1] == 0.0 else float(s[0] / s[-1])
    if not cond <= cond_max:
        raise NearSingularError(cond, cond_max, what)
    x = np.linalg.solve(a, b2)
    return LinearSolution(x.reshape(-1) if vector_rhs else x, cond)


class FactoredSystem:
    """LU factors of a square matrix that passed the conditioning check.

    Used when the same matrix is solved against many right-hand sides.
    """

    def __init__(self, a, cond_max=DEFAULT_COND_MAX, what="matrix"):
        a = as_matrix(a, "a")
        if a.shape[0] != a.shape[1]:
            raise ValueError(f"a must be square, got {a.shape}")
        s = np.linalg.svd(a, compute_uv=False)
        self.cond = float(np.inf) if s[-1] == 0.0 else float(s[0] / s[-1])
        if not self.cond <= cond_max:
            raise NearSingularError(self.cond, cond_max, what)
        self._lu = sla.lu_factor(a, check_finite=False)

    def solve(self, b) -> np.ndarray:
        return sla.lu_solve(self._lu, np.asarray(b, dtype=float), check_finite=False)


@dataclass(frozen=True)
class Trajectory:
    """States ``x_0..x_N`` (rows) and the inputs ``u_0..u_{N-1}`` applied."""

    dt: float
    states: np.ndarray
    inputs: np.ndarray

    def __post_init__(self):
        states = np.atleast_2d(np.asarray(self.states, dtype=float))
        inputs = np.asarray(self.inputs, dtype=float)
        if inputs.ndim == 1:
            inputs = inputs.reshape(len(inputs), -1) if inputs.size else np.zeros((0, 0))
        if states.shape[0] == 0:
            raise ValueError("trajectory needs at least one state")
        if inputs.shape[0] != states.shape[0] - 1:
            raise ValueError(
                f"expected {states.shape[0] - 1} inputs, got {inputs.shape[0]}"
            )
        if not (np.all(np.isfinite(states)) and np.all(np.isfinite(inputs))):
            raise ValueError("trajectory contains non-finite entries")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "inputs", inputs)

    @property
    def n_steps(self) -> int:
        return self.states.shape[0] - 1

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1] if self.inputs.ndim == 2 else 0

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.states.shape[0])


VectorField = Callable[[np.ndarray, np.ndarray], np.ndarray]


def rk4_step(f: VectorField, x, u, dt: float) -> np.ndarray:
    """One classical Runge-Kutta step with ``u`` held over the step.

    ``x`` may be a single state of shape ``(n,)`` or a batch ``(n, N)``
    whose columns are advanced independently.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    k1 = f(x, u)
    k2 = f(x + 0.5 * dt * k1, u)
    k3 = f(x + 0.5 * dt * k2, u)
    k4 = f(x + dt * k3, u)
    for k in (k1, k2, k3, k4):
        if not np.all(np.isfinite(k)):
            raise IntegrationError("non-finite vector field evaluation", state=x)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(f: VectorField, x0, input_signal, dt: float, n_steps: int):
    """Integrate from ``x0`` for ``n_steps`` fixed RK4 steps.

    ``input_signal`` maps a time to an input vector and is sampled at the
    start of each step and recorded alongside the states.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    x = as_vector(x0, "x0")
    states = [x]
    inputs = []
    for k in range(n_steps):
        u = np.asarray(input_signal(k * dt), dtype=float).reshape(-1)
        try:
            x = rk4_step(f, x, u, dt)
        except IntegrationError as exc:
            raise IntegrationError(f"step {k}: {exc}", state=exc.state, step=k) from exc
        states.append(x)
        inputs.append(u)
    return Trajectory(dt, np.array(states), np.array(inputs))
