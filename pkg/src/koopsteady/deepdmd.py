"""Learned inclusive observables and Koopman operators for controlled systems.

The lifted model is::

    psi_x(x') = K_x psi_x(x) + K_xu psi_xu(x, u) + K_u psi_u(u)

with ``psi_x(x) = [x; phi_x(x)]`` and ``psi_u(u) = [u; phi_u(u)]``. The
learned parts ``phi`` are dense ReLU networks (or fixed monomial
dictionaries); the raw coordinates are concatenated, never learned, so
the first ``n`` lifted coordinates are always the physical state.

Operators and network parameters are fit jointly by minimizing::

    ||Psi_x(Xf) - K_x Psi_x(Xp) - K_xu Psi_xu - K_u Psi_u(Up)||_F
        + lam1 ||[K_x K_xu K_u]||_2 + lam2 ||theta||_1

Gradients are computed by a hand-written reverse pass.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Union

import numpy as np

from .numerics import pseudoinverse, svd
from .observables import MonomialDictionary, lift, mixed_from_lifted
from .systems import SnapshotSet

log = logging.getLogger(__name__)

MIXED_MODES = ("none", "dictionary", "learned")
UNIT_EIGENVALUE_TOL = 1e-6


class TrainingError(RuntimeError):
    """Non-finite or divergent loss during training."""


# ------------------------------------------------------------------ networks


@dataclass
class FeedforwardNet:
    """Dense network, ReLU on hidden layers and a linear output layer.

    Inputs are standardized with the fixed ``in_shift``/``in_scale`` before
    the first layer; those are data statistics, not trainable parameters.
    """

    weights: list
    biases: list
    in_shift: np.ndarray
    in_scale: np.ndarray

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=float) for w in self.weights]
        self.biases = [np.asarray(b, dtype=float).reshape(-1) for b in self.biases]
        self.in_shift = np.asarray(self.in_shift, dtype=float).reshape(-1)
        self.in_scale = np.asarray(self.in_scale, dtype=float).reshape(-1)
        prev = self.in_dim
        for W, b in zip(self.weights, self.biases):
            if W.shape[1] != prev or b.shape[0] != W.shape[0]:
                raise ValueError("layer dimensions do not chain")
            prev = W.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def widths(self) -> list:
        return [self.in_dim] + [W.shape[0] for W in self.weights]

    @classmethod
    def init(cls, widths, rng, in_shift=None, in_scale=None) -> "FeedforwardNet":
        """He-normal weights, zero biases."""
        weights, biases = [], []
        for a, b in zip(widths[:-1], widths[1:]):
            weights.append(rng.normal(0.0, np.sqrt(2.0 / a), size=(b, a)))
            biases.append(np.zeros(b))
        d = widths[0]
        return cls(
            weights,
            biases,
            np.zeros(d) if in_shift is None else in_shift,
            np.ones(d) if in_scale is None else in_scale,
        )

    def to_dict(self) -> dict:
        return {
            "widths": self.widths,
            "weights": [W.tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "in_shift": self.in_shift.tolist(),
            "in_scale": self.in_scale.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "FeedforwardNet":
        return cls(
            [np.array(W, dtype=float, ndmin=2) for W in d["weights"]],
            d["biases"],
            d["in_shift"],
            d["in_scale"],
        )


def forward(net: FeedforwardNet, v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape[0] != net.in_dim:
        raise ValueError(f"expected input of width {net.in_dim}, got {v.shape[0]}")
    return _forward_cached(net, v)[0]


def _forward_cached(net, v):
    vec = v.ndim == 1
    h = (v.reshape(-1, 1) if vec else v)
    h = (h - net.in_shift[:, None]) / net.in_scale[:, None]
    acts = [h]
    last = len(net.weights) - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        a = W @ h + b[:, None]
        h = a if i == last else np.maximum(a, 0.0)
        acts.append(h)
    out = h.reshape(-1) if vec else h
    return out, acts


def _backward(net, acts, d_out, grads, prefix):
    """Accumulate parameter gradients for output cotangent ``d_out``."""
    d = d_out
    for i in range(len(net.weights) - 1, -1, -1):
        if i < len(net.weights) - 1:
            d = d * (acts[i + 1] > 0.0)  # subgradient 0 at the kink
        grads[f"{prefix}.W{i}"] += d @ acts[i].T
        grads[f"{prefix}.b{i}"] += d.sum(axis=1)
        if i > 0:
            d = net.weights[i].T @ d


# ------------------------------------------------------------- Koopman model

Lifter = Union[FeedforwardNet, MonomialDictionary, None]


def _lift_inclusive(lifter: Lifter, v):
    if lifter is None:
        return np.array(v, dtype=float)
    if isinstance(lifter, MonomialDictionary):
        return lift(lifter, v)
    return np.concatenate([np.asarray(v, dtype=float), forward(lifter, v)], axis=0)


def _extra_dim(lifter: Lifter, base: int) -> int:
    if lifter is None:
        return 0
    if isinstance(lifter, MonomialDictionary):
        return lifter.lifted_dim - base
    return lifter.out_dim


@dataclass
class KoopmanModel:
    """Lifted linear model with inclusive observables.

    ``mixed`` selects how ``psi_xu`` is formed: absent (``"none"``), as all
    pairwise products of ``psi_x`` and ``psi_u`` (``"dictionary"``), or by a
    separate network over ``[x; u]`` (``"learned"``).
    """

    n: int
    m: int
    obs_x: Lifter
    obs_u: Lifter
    K_x: np.ndarray
    K_u: np.ndarray
    mixed: str = "none"
    K_xu: Optional[np.ndarray] = None
    obs_xu: Optional[FeedforwardNet] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mixed not in MIXED_MODES:
            raise ValueError(f"mixed must be one of {MIXED_MODES}, got {self.mixed!r}")
        self.K_x = np.asarray(self.K_x, dtype=float)
        self.K_u = np.asarray(self.K_u, dtype=float)
        if self.mixed == "none":
            if self.K_xu is not None and np.any(self.K_xu):
                raise ValueError("K_xu given but mixed terms are disabled")
            self.K_xu = None
        else:
            if self.K_xu is None:
                raise ValueError("mixed terms enabled but K_xu missing")
            self.K_xu = np.asarray(self.K_xu, dtype=float)
        if self.mixed == "learned" and self.obs_xu is None:
            raise ValueError("learned mixed terms need obs_xu")
        nL, mL = self.n_lifted, self.m_lifted
        if self.K_x.shape != (nL, nL) or self.K_u.shape != (nL, mL):
            raise ValueError(
                f"operator shapes {self.K_x.shape}, {self.K_u.shape} do not match "
                f"n_L={nL}, m_L={mL}"
            )
        if self.K_xu is not None and self.K_xu.shape != (nL, self.mixed_dim):
            raise ValueError(f"K_xu shape {self.K_xu.shape} != {(nL, self.mixed_dim)}")

    @property
    def n_lifted(self) -> int:
        return self.n + _extra_dim(self.obs_x, self.n)

    @property
    def m_lifted(self) -> int:
        return self.m + _extra_dim(self.obs_u, self.m)

    @property
    def mixed_dim(self) -> int:
        if self.mixed == "dictionary":
            return self.n_lifted * self.m_lifted
        if self.mixed == "learned":
            return self.obs_xu.out_dim
        return 0

    def psi_x(self, x) -> np.ndarray:
        return _lift_inclusive(self.obs_x, x)

    def psi_u(self, u) -> np.ndarray:
        return _lift_inclusive(self.obs_u, u)

    def psi_xu(self, x, u) -> np.ndarray:
        if self.mixed == "none":
            raise ValueError("model has no mixed observables")
        if self.mixed == "dictionary":
            return mixed_from_lifted(self.psi_x(x), self.psi_u(u))
        return forward(self.obs_xu, np.concatenate([np.asarray(x, float), np.asarray(u, float)]))

    def step_lifted(self, p, u) -> np.ndarray:
        """One step of the lifted map; the mixed term is rebuilt from ``p[:n]``."""
        out = self.K_x @ p + self.K_u @ self.psi_u(u)
        if self.K_xu is not None:
            out = out + self.K_xu @ self.psi_xu(p[: self.n], u)
        return out

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvals(self.K_x)

    def has_unit_eigenvalue(self, tol=UNIT_EIGENVALUE_TOL) -> bool:
        return bool(np.any(np.abs(self.eigenvalues() - 1.0) < tol))

    # -- parameters -------------------------------------------------------

    def params(self) -> dict:
        """Trainable arrays by name (copies)."""
        p = {"K_x": self.K_x.copy(), "K_u": self.K_u.copy()}
        if self.K_xu is not None:
            p["K_xu"] = self.K_xu.copy()
        for prefix, net in self._nets():
            for i, (W, b) in enumerate(zip(net.weights, net.biases)):
                p[f"{prefix}.W{i}"] = W.copy()
                p[f"{prefix}.b{i}"] = b.copy()
        return p

    def with_params(self, params) -> "KoopmanModel":
        new = copy.deepcopy(self)
        new.K_x = np.array(params["K_x"], dtype=float)
        new.K_u = np.array(params["K_u"], dtype=float)
        if new.K_xu is not None:
            new.K_xu = np.array(params["K_xu"], dtype=float)
        for prefix, net in new._nets():
            for i in range(len(net.weights)):
                net.weights[i] = np.array(params[f"{prefix}.W{i}"], dtype=float)
                net.biases[i] = np.array(params[f"{prefix}.b{i}"], dtype=float)
        return new

    def _bind(self, params):
        """Point the model's arrays at ``params`` without copying."""
        self.K_x = params["K_x"]
        self.K_u = params["K_u"]
        if self.K_xu is not None:
            self.K_xu = params["K_xu"]
        for prefix, net in self._nets():
            for i in range(len(net.weights)):
                net.weights[i] = params[f"{prefix}.W{i}"]
                net.biases[i] = params[f"{prefix}.b{i}"]

    def _nets(self):
        for prefix, lifter in (("x", self.obs_x), ("u", self.obs_u), ("xu", self.obs_xu)):
            if isinstance(lifter, FeedforwardNet):
                yield prefix, lifter

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        def enc(lifter):
            if lifter is None:
                return {"type": "identity"}
            if isinstance(lifter, MonomialDictionary):
                return {"type": "monomial", **lifter.to_dict()}
            return {"type": "network", **lifter.to_dict()}

        return {
            "kind": "deepdmd",
            "n": self.n,
            "m": self.m,
            "n_L": self.n_lifted,
            "m_L": self.m_lifted,
            "M_L": self.mixed_dim,
            "mixed_terms": self.mixed,
            "psi_x": enc(self.obs_x),
            "psi_u": enc(self.obs_u),
            "psi_xu": None if self.obs_xu is None else enc(self.obs_xu),
            "K_x": self.K_x.tolist(),
            "K_xu": None if self.K_xu is None else self.K_xu.tolist(),
            "K_u": self.K_u.tolist(),
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d) -> "KoopmanModel":
        if d.get("kind") == "dmdc":
            from .dmdc import LinearModel
            return cls.from_linear(LinearModel.from_json(d))
        if d.get("kind") != "deepdmd":
            raise ValueError(f"unknown model kind {d.get('kind')!r}")

        def dec(e):
            if e is None or e["type"] == "identity":
                return None
            if e["type"] == "monomial":
                return MonomialDictionary.from_dict(e)
            return FeedforwardNet.from_dict(e)

        n_L, m_L = d["n_L"], d["m_L"]
        return cls(
            n=d["n"],
            m=d["m"],
            obs_x=dec(d["psi_x"]),
            obs_u=dec(d["psi_u"]),
            K_x=np.array(d["K_x"], dtype=float).reshape(n_L, n_L),
            K_u=np.array(d["K_u"], dtype=float).reshape(n_L, m_L),
            mixed=d["mixed_terms"],
            K_xu=None if d["K_xu"] is None else np.array(d["K_xu"], dtype=float).reshape(n_L, -1),
            obs_xu=dec(d["psi_xu"]),
            metadata=d.get("metadata", {}),
        )

    @classmethod
    def from_json(cls, text) -> "KoopmanModel":
        return cls.from_dict(json.loads(text))

    @classmethod
    def from_linear(cls, linear) -> "KoopmanModel":
        """Identity observables: ``K_x = A``, ``K_u = B``, no mixed terms."""
        return cls(
            n=linear.A.shape[0], m=linear.B.shape[1], obs_x=None, obs_u=None,
            K_x=linear.A, K_u=linear.B, metadata={"estimator": "dmdc"},
        )


# ---------------------------------------------------------- loss and gradients


def _lift_cached(lifter, V):
    if isinstance(lifter, FeedforwardNet):
        out, acts = _forward_cached(lifter, V)
        return np.vstack([V, out]), acts
    return _lift_inclusive(lifter, V), None


def _regularizers(model, lam1, lam2):
    K = _stacked_operator(model)
    spec = float(svd(K)[1][0]) if lam1 and K.size else 0.0
    l1 = 0.0
    if lam2:
        for _, net in model._nets():
            l1 += sum(float(np.abs(W).sum()) for W in net.weights)
            l1 += sum(float(np.abs(b).sum()) for b in net.biases)
    return spec, l1


def _stacked_operator(model):
    blocks = [model.K_x] + ([model.K_xu] if model.K_xu is not None else []) + [model.K_u]
    return np.hstack(blocks)


def _lams(model, lam1, lam2):
    md = model.metadata
    return (md.get("lam1", 0.0) if lam1 is None else lam1,
            md.get("lam2", 0.0) if lam2 is None else lam2)


def loss_terms(model: KoopmanModel, snap: SnapshotSet, lam1=None, lam2=None) -> dict:
    """Residual norm, spectral-norm penalty and l1 penalty, unweighted."""
    lam1, lam2 = _lams(model, lam1, lam2)
    if snap.n_columns:
        R = _residual(model, snap)[0]
        res = float(np.linalg.norm(R))
    else:
        res = 0.0
    spec, l1 = _regularizers(model, 1.0, 1.0)
    return {"residual": res, "spectral": spec, "l1": l1,
            "total": res + lam1 * spec + lam2 * l1}


def loss(model: KoopmanModel, snap: SnapshotSet, lam1=None, lam2=None) -> float:
    """Regularized Frobenius prediction loss; ``lam*`` default to the model's metadata."""
    lam1, lam2 = _lams(model, lam1, lam2)
    res = float(np.linalg.norm(_residual(model, snap)[0])) if snap.n_columns else 0.0
    spec, l1 = _regularizers(model, lam1, lam2)
    total = res + lam1 * spec + lam2 * l1
    if not np.isfinite(total):
        raise TrainingError("non-finite loss")
    return total


def _residual(model, snap):
    Pxf, cxf = _lift_cached(model.obs_x, snap.Xf)
    Pxp, cxp = _lift_cached(model.obs_x, snap.Xp)
    Pu, cu = _lift_cached(model.obs_u, snap.Up)
    R = Pxf - model.K_x @ Pxp - model.K_u @ Pu
    Pxu = cxu = XU = None
    if model.mixed == "dictionary":
        Pxu = mixed_from_lifted(Pxp, Pu)
    elif model.mixed == "learned":
        XU = np.vstack([snap.Xp, snap.Up])
        Pxu, cxu = _forward_cached(model.obs_xu, XU)
    if Pxu is not None:
        R = R - model.K_xu @ Pxu
    cache = dict(Pxf=Pxf, Pxp=Pxp, Pu=Pu, Pxu=Pxu, cxf=cxf, cxp=cxp, cu=cu, cxu=cxu)
    return R, cache


def gradients(model: KoopmanModel, batch: SnapshotSet, lam1=None, lam2=None):
    """Loss value and its gradient with respect to every trainable array.

    Conventions at non-differentiable points: ReLU and ``|w|`` use the
    subgradient 0 at 0, a zero residual contributes a zero gradient, and
    the spectral norm uses the leading singular pair.
    """
    if batch.n_columns == 0:
        raise ValueError("empty batch")
    lam1, lam2 = _lams(model, lam1, lam2)
    n = model.n
    m = model.m
    R, c = _residual(model, batch)
    r = float(np.linalg.norm(R))
    # a residual at roundoff level counts as zero (the norm has no gradient there)
    zero = r <= 1e-13 * max(1.0, float(np.linalg.norm(c["Pxf"])))
    G = np.zeros_like(R) if zero else R / r

    grads = {k: np.zeros_like(v) for k, v in model.params().items()}
    grads["K_x"] -= G @ c["Pxp"].T
    grads["K_u"] -= G @ c["Pu"].T
    dPxf = G
    dPxp = -model.K_x.T @ G
    dPu = -model.K_u.T @ G
    if c["Pxu"] is not None:
        grads["K_xu"] -= G @ c["Pxu"].T
        dPxu = -model.K_xu.T @ G
        if model.mixed == "dictionary":
            nL, mL = c["Pxp"].shape[0], c["Pu"].shape[0]
            D = dPxu.reshape(nL, mL, -1)
            dPxp = dPxp + np.einsum("ijc,jc->ic", D, c["Pu"])
            dPu = dPu + np.einsum("ijc,ic->jc", D, c["Pxp"])
        else:
            _backward(model.obs_xu, c["cxu"], dPxu, grads, "xu")

    if isinstance(model.obs_x, FeedforwardNet):
        _backward(model.obs_x, c["cxf"], dPxf[n:], grads, "x")
        _backward(model.obs_x, c["cxp"], dPxp[n:], grads, "x")
    if isinstance(model.obs_u, FeedforwardNet):
        _backward(model.obs_u, c["cu"], dPu[m:], grads, "u")

    spec = l1 = 0.0
    if lam1:
        K = _stacked_operator(model)
        U, S, Vt = svd(K)
        spec = float(S[0])
        dK = lam1 * np.outer(U[:, 0], Vt[0])
        nL = model.n_lifted
        grads["K_x"] += dK[:, :nL]
        col = nL
        if model.K_xu is not None:
            grads["K_xu"] += dK[:, col: col + model.mixed_dim]
            col += model.mixed_dim
        grads["K_u"] += dK[:, col:]
    if lam2:
        for key in grads:
            if "." in key:
                w = model_param(model, key)
                l1 += float(np.abs(w).sum())
                grads[key] += lam2 * np.sign(w)
    value = r + lam1 * spec + lam2 * l1
    if not np.isfinite(value):
        raise TrainingError("non-finite loss")
    return value, grads


def model_param(model, key):
    prefix, name = key.split(".")
    net = {"x": model.obs_x, "u": model.obs_u, "xu": model.obs_xu}[prefix]
    idx = int(name[1:])
    return net.weights[idx] if name[0] == "W" else net.biases[idx]


# ------------------------------------------------------------------ training


@dataclass
class TrainConfig:
    """Architecture and optimizer settings.

    ``n_lifted``/``m_lifted`` default to ``n + 20`` and ``m + 5``; set them
    equal to ``n``/``m`` for identity observables.
    """

    hidden: tuple = (32, 32)
    n_lifted: Optional[int] = None
    m_lifted: Optional[int] = None
    lam1: float = 0.0
    lam2: float = 0.0
    lr: float = 1e-3
    lr_min: float = 1e-5
    epochs: int = 2000
    batch_size: int = 256
    seed: int = 0
    mixed_terms: str = "none"
    n_mixed: int = 10
    init_operators: str = "lstsq"
    divergence_limit: float = 1e6

    def validate(self, n, m):
        if self.lam1 < 0 or self.lam2 < 0:
            raise ValueError("regularization weights must be nonnegative")
        if self.mixed_terms not in MIXED_MODES:
            raise ValueError(f"mixed_terms must be one of {MIXED_MODES}")
        if self.init_operators not in ("lstsq", "zero"):
            raise ValueError("init_operators must be 'lstsq' or 'zero'")
        nL, mL = self.resolved_dims(n, m)
        if nL < n or mL < m:
            raise ValueError("lifted dimensions must include the raw coordinates")
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("invalid optimizer settings")

    def resolved_dims(self, n, m):
        return (n + 20 if self.n_lifted is None else self.n_lifted,
                m + 5 if self.m_lifted is None else self.m_lifted)

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def _standardization(V):
    mu = V.mean(axis=1)
    sd = V.std(axis=1)
    sd[sd < 1e-12] = 1.0
    return mu, sd


def init_model(cfg: TrainConfig, snap: SnapshotSet) -> KoopmanModel:
    """Random networks plus operators (least-squares or zero) for ``snap``."""
    n, m = snap.Xp.shape[0], snap.Up.shape[0]
    cfg.validate(n, m)
    rng = np.random.default_rng(cfg.seed)
    nL, mL = cfg.resolved_dims(n, m)
    hidden = list(cfg.hidden)

    X = np.hstack([snap.Xp, snap.Xf[:, -1:]])
    obs_x = obs_u = obs_xu = None
    if nL > n:
        obs_x = FeedforwardNet.init([n] + hidden + [nL - n], rng, *_standardization(X))
    if mL > m:
        obs_u = FeedforwardNet.init([m] + hidden + [mL - m], rng, *_standardization(snap.Up))
    if cfg.mixed_terms == "learned":
        XU = np.vstack([snap.Xp, snap.Up])
        obs_xu = FeedforwardNet.init([n + m] + hidden + [cfg.n_mixed], rng, *_standardization(XU))
    ML = {"none": 0, "dictionary": nL * mL, "learned": cfg.n_mixed}[cfg.mixed_terms]
    model = KoopmanModel(
        n, m, obs_x, obs_u,
        K_x=np.zeros((nL, nL)), K_u=np.zeros((nL, mL)),
        mixed=cfg.mixed_terms,
        K_xu=None if cfg.mixed_terms == "none" else np.zeros((nL, ML)),
        obs_xu=obs_xu,
        metadata={"lam1": cfg.lam1, "lam2": cfg.lam2},
    )
    if cfg.init_operators == "lstsq":
        model = fit_operators(model, snap)
    return model


def fit_operators(model: KoopmanModel, snap: SnapshotSet, rank_tol=1e-10) -> KoopmanModel:
    """Least-squares operators for fixed observables (EDMD with control)."""
    _, c = _residual(model, snap)
    blocks = [c["Pxp"]] + ([c["Pxu"]] if c["Pxu"] is not None else []) + [c["Pu"]]
    K = c["Pxf"] @ pseudoinverse(np.vstack(blocks), rank_tol)
    nL = model.n_lifted
    p = model.params()
    p["K_x"] = K[:, :nL]
    col = nL
    if c["Pxu"] is not None:
        p["K_xu"] = K[:, col: col + model.mixed_dim]
        col += model.mixed_dim
    p["K_u"] = K[:, col:]
    return model.with_params(p)


class _Adam:
    def __init__(self, params, b1=0.9, b2=0.999, eps=1e-8):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.b1, self.b2, self.eps = b1, b2, eps
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            params[k] -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def train(
    cfg: TrainConfig,
    train_snaps: SnapshotSet,
    val_snaps: Optional[SnapshotSet] = None,
    model: Optional[KoopmanModel] = None,
) -> KoopmanModel:
    """Minibatch Adam on the regularized loss with a cosine learning-rate decay.

    Returns the parameters with the lowest validation loss (training loss
    when no validation set is given). Deterministic for a fixed seed.
    """
    if model is None:
        model = init_model(cfg, train_snaps)
    val = val_snaps if val_snaps is not None and val_snaps.n_columns else train_snaps
    rng = np.random.default_rng([cfg.seed, 1])
    params = model.params()
    opt = _Adam(params)
    N = train_snaps.n_columns
    bs = min(cfg.batch_size, N)
    n_batches = -(-N // bs)
    total = max(cfg.epochs * n_batches, 1)

    best_val = loss(model, val, cfg.lam1, cfg.lam2)
    best = params
    curve = [(0, loss(model, train_snaps, cfg.lam1, cfg.lam2), best_val)]
    step = 0
    current = copy.deepcopy(model)
    current._bind(params)
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(N)
        batch_losses = []
        for b in range(n_batches):
            idx = perm[b * bs:(b + 1) * bs]
            try:
                value, grads = gradients(current, train_snaps.columns(idx), cfg.lam1, cfg.lam2)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from exc
            if value > cfg.divergence_limit:
                raise TrainingError(
                    f"epoch {epoch}, batch {b}: loss {value:.3e} exceeds "
                    f"{cfg.divergence_limit:.1e}"
                )
            batch_losses.append(value)
            lr = cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + np.cos(np.pi * step / total))
            opt.step(params, grads, lr)
            step += 1
        v = loss(current, val, cfg.lam1, cfg.lam2)
        curve.append((epoch, float(np.mean(batch_losses)), v))
        if v < best_val:
            best_val = v
            best = {k: a.copy() for k, a in params.items()}
        if epoch % max(cfg.epochs // 10, 1) == 0:
            log.info("epoch %d: train %.4e val %.4e", epoch, curve[-1][1], v)

    result = model.with_params(best)
    result.metadata = {
        "estimator": "deepdmd",
        "lam1": cfg.lam1,
        "lam2": cfg.lam2,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "best_val_loss": best_val,
        "loss_curve": curve,
        "unit_eigenvalue": result.has_unit_eigenvalue(),
    }
    return result


def write_loss_curve(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"])
        for epoch, tr, va in curve:
            w.writerow([int(epoch), repr(float(tr)), repr(float(va))])


# ---------------------------------------------------------------- prediction


def multi_step_predict(model: KoopmanModel, x0, u_seq, horizon: int) -> np.ndarray:
    """Lift ``x0`` once and iterate in lifted space; rows are predicted states."""
    U = np.asarray(u_seq, dtype=float).reshape(-1, model.m)
    if horizon > len(U):
        raise ValueError(f"horizon {horizon} exceeds input sequence length {len(U)}")
    p = model.psi_x(np.asarray(x0, dtype=float).reshape(-1))
    out = [p[: model.n].copy()]
    for k in range(horizon):
        p = model.step_lifted(p, U[k])
        out.append(p[: model.n].copy())
    return np.array(out)


def prediction_error(pred, truth) -> float:
    """``||pred - truth||_F / ||truth||_F`` over all steps and states."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    return float(np.linalg.norm(pred - truth) / np.linalg.norm(truth))


def trajectory_errors(model: KoopmanModel, trajs, horizon=None) -> list:
    errs = []
    for tr in trajs:
        h = tr.n_steps if horizon is None else min(horizon, tr.n_steps)
        pred = multi_step_predict(model, tr.states[0], tr.inputs, h)
        errs.append(prediction_error(pred, tr.states[: h + 1]))
    return errs
