"""Linear identification by dynamic mode decomposition with control."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .numerics import DEFAULT_RANK_TOL, Trajectory, numerical_rank, pseudoinverse, svd
from .systems import SnapshotSet

log = logging.getLogger(__name__)


class RankDeficiencyWarning(UserWarning):
    pass


@dataclass(frozen=True)
class LinearModel:
    """``x_{k+1} = A x_k + B u_k`` fitted from snapshots.

    ``residual`` is ``||Xf - A Xp - B Up||_F / ||Xf||_F`` on the fit data.
    """

    A: np.ndarray
    B: np.ndarray
    residual: float
    rank: int = -1
    rank_deficient: bool = False

    @property
    def state_dim(self):
        return self.A.shape[0]

    @property
    def input_dim(self):
        return self.B.shape[1]

    def to_json(self) -> str:
        return json.dumps({
            "kind": "dmdc",
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "residual": self.residual,
        })

    @classmethod
    def from_json(cls, text):
        d = json.loads(text) if isinstance(text, str) else text
        if d.get("kind") != "dmdc":
            raise ValueError(f"not a dmdc model: kind={d.get('kind')!r}")
        A = np.array(d["A"], dtype=float, ndmin=2)
        B = np.array(d["B"], dtype=float, ndmin=2).reshape(A.shape[0], -1)
        return cls(A, B, float(d["residual"]))


def _relative_residual(snap, A, B):
    R = snap.Xf - A @ snap.Xp - B @ snap.Up
    denom = np.linalg.norm(snap.Xf)
    return float(np.linalg.norm(R) / denom) if denom > 0 else float(np.linalg.norm(R))


def _pinv_with_rank(M, rank_tol, label):
    s = svd(M)[1]
    r = numerical_rank(s, rank_tol)
    deficient = r < min(M.shape)
    if deficient:
        warnings.warn(
            f"{label} has numerical rank {r} < {min(M.shape)}; "
            "returning the minimum-norm solution",
            RankDeficiencyWarning,
            stacklevel=3,
        )
    return pseudoinverse(M, rank_tol), r, deficient


def fit_dmdc(snap: SnapshotSet, rank_tol: float = DEFAULT_RANK_TOL) -> LinearModel:
    """``[A B] = Xf @ pinv([Xp; Up])``."""
    if snap.n_columns == 0:
        raise ValueError("empty snapshot set")
    n = snap.Xp.shape[0]
    Omega = np.vstack([snap.Xp, snap.Up])
    P, r, deficient = _pinv_with_rank(Omega, rank_tol, "[Xp; Up]")
    AB = snap.Xf @ P
    A, B = AB[:, :n], AB[:, n:]
    model = LinearModel(A, B, _relative_residual(snap, A, B), r, deficient)
    log.debug("dmdc fit: residual %.3e, rank %d", model.residual, r)
    return model


def fit_two_stage(
    unforced: SnapshotSet, forced: SnapshotSet, rank_tol: float = DEFAULT_RANK_TOL
) -> LinearModel:
    """Fit ``A`` on unforced data, then ``B`` on forced data with ``A`` held fixed."""
    if unforced.n_columns == 0 or forced.n_columns == 0:
        raise ValueError("empty snapshot set")
    if np.any(unforced.Up != 0):
        raise ValueError("unforced snapshots must have zero inputs")
    PA, rA, defA = _pinv_with_rank(unforced.Xp, rank_tol, "Xp (unforced)")
    A = unforced.Xf @ PA
    if np.all(forced.Up == 0):
        warnings.warn("forced snapshots carry no input; B is zero",
                      RankDeficiencyWarning, stacklevel=2)
        B = np.zeros((A.shape[0], forced.Up.shape[0]))
        rB, defB = 0, True
    else:
        PB, rB, defB = _pinv_with_rank(forced.Up, rank_tol, "Up (forced)")
        B = (forced.Xf - A @ forced.Xp) @ PB
    return LinearModel(A, B, _relative_residual(forced, A, B), min(rA, rB), defA or defB)


def predict_linear(model: LinearModel, x0, u_seq) -> Trajectory:
    """Iterate the linear map over ``u_seq`` (one row per step)."""
    x = np.asarray(x0, dtype=float).reshape(-1)
    U = np.asarray(u_seq, dtype=float).reshape(-1, model.input_dim)
    states = [x]
    for u in U:
        x = model.A @ x + model.B @ u
        states.append(x)
    return Trajectory(1.0, np.array(states), U)
