"""Inclusive lifting maps and the separable structure of mixed observables.

A lifted state vector ``psi_x(x)`` always starts with ``x`` itself, and
likewise for inputs. Mixed observables are all pairwise products of the
two lifts, laid out state-major::

    psi_xu[i * m_L + j] = psi_x[i] * psi_u[j]

which factors either as ``M_x(x) @ psi_u(u)`` or ``M_u(u) @ psi_x(x)``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from math import comb

import numpy as np


@dataclass(frozen=True)
class MonomialDictionary:
    """Monomials of total degree 1..max_degree, degree-1 terms first.

    Within a degree, products of several variables come before pure
    powers, each group in descending lexicographic exponent order. For two
    variables and degree 2 this gives ``(v1, v2, v1 v2, v1^2, v2^2)``.
    """

    base_dim: int
    max_degree: int
    exponents: tuple

    @classmethod
    def build(cls, base_dim: int, max_degree: int) -> "MonomialDictionary":
        if base_dim < 1 or max_degree < 1:
            raise ValueError("base_dim and max_degree must be >= 1")
        table = []
        for degree in range(1, max_degree + 1):
            terms = [
                tuple(np.bincount(c, minlength=base_dim).tolist())
                for c in itertools.combinations_with_replacement(range(base_dim), degree)
            ]
            # mixed monomials (more than one variable) before pure powers
            terms.sort(key=lambda e: (max(e) == degree, _first_var(e)))
            table.extend(terms)
        return cls(base_dim, max_degree, tuple(table))

    @classmethod
    def from_table(cls, base_dim, max_degree, table):
        d = cls(base_dim, max_degree, tuple(tuple(int(v) for v in row) for row in table))
        d.validate()
        return d

    def validate(self):
        unit = [tuple(int(i == j) for j in range(self.base_dim)) for i in range(self.base_dim)]
        if list(self.exponents[: self.base_dim]) != unit:
            raise ValueError("dictionary must start with the degree-1 coordinates")
        if len(set(self.exponents)) != len(self.exponents):
            raise ValueError("duplicate exponents in dictionary")
        if any(sum(e) == 0 for e in self.exponents):
            raise ValueError("constant term not allowed")

    @property
    def lifted_dim(self) -> int:
        return len(self.exponents)

    @staticmethod
    def expected_dim(base_dim, max_degree) -> int:
        return comb(base_dim + max_degree, max_degree) - 1

    def to_dict(self) -> dict:
        return {
            "base_dim": self.base_dim,
            "max_degree": self.max_degree,
            "exponents": [list(e) for e in self.exponents],
        }

    @classmethod
    def from_dict(cls, d):
        return cls.from_table(d["base_dim"], d["max_degree"], d["exponents"])

    def __call__(self, v):
        return lift(self, v)

    def jacobian(self, v) -> np.ndarray:
        """Analytic Jacobian ``d lift / d v`` of shape (lifted_dim, base_dim)."""
        v = np.asarray(v, dtype=float).reshape(-1)
        E = np.array(self.exponents)
        J = np.zeros((len(E), self.base_dim))
        for k in range(self.base_dim):
            Ek = E.copy()
            coef = Ek[:, k].astype(float)
            Ek[:, k] = np.maximum(Ek[:, k] - 1, 0)
            J[:, k] = coef * np.prod(v[None, :] ** Ek, axis=1)
        return J


def _first_var(e):
    # lexicographically larger exponent vectors first
    return tuple(-x for x in e)


def lift(dictionary: MonomialDictionary, v) -> np.ndarray:
    """Evaluate the dictionary at ``v`` (shape ``(d,)`` or columns ``(d, N)``)."""
    v = np.asarray(v, dtype=float)
    if v.shape[0] != dictionary.base_dim:
        raise ValueError(f"expected {dictionary.base_dim} coordinates, got {v.shape[0]}")
    out = np.empty((dictionary.lifted_dim,) + v.shape[1:])
    out[: dictionary.base_dim] = v
    for row, e in enumerate(dictionary.exponents[dictionary.base_dim:], dictionary.base_dim):
        term = np.ones(v.shape[1:])
        for i, p in enumerate(e):
            for _ in range(p):
                term = term * v[i]
        out[row] = term
    return out


# ------------------------------------------------------------- mixed terms


def mixed_from_lifted(px, pu) -> np.ndarray:
    """All pairwise products, state-major; columns are independent samples."""
    px = np.asarray(px, dtype=float)
    pu = np.asarray(pu, dtype=float)
    if px.ndim == 1:
        return np.outer(px, pu).reshape(-1)
    return (px[:, None, :] * pu[None, :, :]).reshape(px.shape[0] * pu.shape[0], px.shape[1])


def Mx_from_lifted(px, m_lifted: int) -> np.ndarray:
    """Stack of diagonal blocks ``px[i] * I_{m_L}``, shape (n_L m_L, m_L)."""
    return np.kron(np.asarray(px, dtype=float).reshape(-1, 1), np.eye(m_lifted))


def Mu_from_lifted(pu, n_lifted: int) -> np.ndarray:
    """Matrix with ``Mu @ psi_x == mixed(psi_x, pu)``, shape (n_L m_L, n_L).

    Block ``i`` (rows ``i*m_L .. (i+1)*m_L``) is ``pu`` placed in column ``i``.
    """
    return np.kron(np.eye(n_lifted), np.asarray(pu, dtype=float).reshape(-1, 1))


def lift_mixed(dict_x, dict_u, x, u) -> np.ndarray:
    return mixed_from_lifted(lift(dict_x, x), lift(dict_u, u))


def build_Mx(dict_x, dict_u, x) -> np.ndarray:
    return Mx_from_lifted(lift(dict_x, x), dict_u.lifted_dim)


def build_Mu(dict_x, dict_u, u) -> np.ndarray:
    return Mu_from_lifted(lift(dict_u, u), dict_x.lifted_dim)


# ------------------------------------------------------ generator separability


@dataclass(frozen=True)
class SeparabilityReport:
    max_residual: float
    input_dependent: bool
    n_samples: int


def generator_separability_check(
    W, G, h, dict_x, *, field=None, x_samples, u_samples
) -> SeparabilityReport:
    """Check that the generator acting on ``psi_x`` factors through ``W G(u) h(x)``.

    For each sample the lifted time derivative ``J_psi(x) f(x, u)`` is
    compared with the factored product ``(J_psi(x) W) G(u) h(x)``. Without
    ``field`` the true field is taken to be the factored one, so only the
    internal consistency of the factors is exercised.
    ``input_dependent`` is False when ``G`` does not vary across the input
    samples, i.e. there are no mixed terms at all.
    """
    W = np.atleast_2d(np.asarray(W, dtype=float))
    worst = 0.0
    Gs = []
    for x, u in zip(x_samples, u_samples):
        x = np.asarray(x, dtype=float).reshape(-1)
        Gu = np.atleast_2d(np.asarray(G(u), dtype=float))
        Gs.append(Gu)
        hx = np.asarray(h(x), dtype=float).reshape(-1)
        J = dict_x.jacobian(x)
        factored = (J @ W) @ (Gu @ hx)
        f = W @ Gu @ hx if field is None else np.asarray(field(x, u), dtype=float).reshape(-1)
        worst = max(worst, float(np.max(np.abs(J @ f - factored))))
    input_dependent = any(not np.array_equal(Gs[0], g) for g in Gs[1:])
    return SeparabilityReport(worst, input_dependent, len(Gs))
