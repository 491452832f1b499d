"""Time-reversible nucleotide substitution models.

Builds normalized rate matrices for JC69 / K80 / GTR in (A, G, C, T) order,
decomposes them via pi-symmetrization, and evaluates transition matrices
P(b) = exp(Q b). Branch lengths are in expected substitutions per site:
Q is always rescaled so the average substitution rate at equilibrium is 1.

Closed-form JC69/K80 transition probabilities and a truncated-Taylor matrix
exponential are provided as independent oracles for the spectral path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

JC69 = "JC69"
K80 = "K80"
GTR = "GTR"
FAMILIES = (JC69, K80, GTR)

# Unordered rate pairs in (a,b,c,d,e,f) = (AG, AC, AT, GC, GT, CT) order,
# indexing (A,G,C,T) as (0,1,2,3).
RATE_PAIRS = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))

_SIMPLEX_TOL = 1e-9
UNIFORM_PI = np.full(4, 0.25)


class ModelError(ValueError):
    """Invalid substitution-model parameters."""


def _check_simplex(v: np.ndarray, k: int, what: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (k,):
        raise ModelError(f"{what} must be a {k}-vector")
    if np.any(v <= 0.0):
        raise ModelError(f"{what} entries must be positive")
    if abs(v.sum() - 1.0) > _SIMPLEX_TOL:
        raise ModelError(f"{what} must sum to 1 (got {v.sum()!r})")
    return v


@dataclass(frozen=True)
class SubstitutionParams:
    """Model family plus its free parameters.

    kappa applies to K80 only; rho (6 relative rates, simplex, pair order
    AG,AC,AT,GC,GT,CT) and pi (4 frequencies, simplex, A,G,C,T) apply to
    GTR only. JC69 and K80 fix pi uniform.
    """

    family: str
    kappa: float | None = None
    rho: np.ndarray | None = None
    pi: np.ndarray | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ModelError(f"unknown model family {self.family!r}")
        if self.family == K80:
            if self.kappa is None or not self.kappa > 0.0:
                raise ModelError("K80 requires kappa > 0")
        if self.family == GTR:
            if self.rho is None or self.pi is None:
                raise ModelError("GTR requires rho and pi")
            object.__setattr__(self, "rho", _check_simplex(self.rho, 6, "rho"))
            object.__setattr__(self, "pi", _check_simplex(self.pi, 4, "pi"))

    def stationary_pi(self) -> np.ndarray:
        return self.pi.copy() if self.family == GTR else UNIFORM_PI.copy()


@dataclass(frozen=True)
class RateMatrixDecomposition:
    """Normalized reversible Q with its real spectral decomposition."""

    q: np.ndarray
    eigenvalues: np.ndarray
    u: np.ndarray
    u_inv: np.ndarray
    pi: np.ndarray


@dataclass(frozen=True)
class TransitionMatrix:
    """P(b): row-stochastic transition probabilities over branch length b."""

    p: np.ndarray
    b: float


def relative_rates(params: SubstitutionParams) -> np.ndarray:
    """Symmetric 4x4 exchangeability factors (unit diagonal pattern zeroed)."""
    r = np.zeros((4, 4))
    if params.family == JC69:
        rates = np.ones(6)
    elif params.family == K80:
        # transitions A<->G (pair 0) and C<->T (pair 5) run kappa times
        # faster than each transversion
        rates = np.ones(6)
        rates[0] = params.kappa
        rates[5] = params.kappa
    else:
        rates = np.asarray(params.rho, dtype=np.float64)
    for rate, (i, j) in zip(rates, RATE_PAIRS):
        r[i, j] = rate
        r[j, i] = rate
    return r


def build_rate_matrix(params: SubstitutionParams) -> RateMatrixDecomposition:
    """Normalized rate matrix: q_ij = rate(i,j) * pi_j * scale for i != j,
    with the scale chosen so -sum_i pi_i q_ii = 1."""
    pi = params.stationary_pi()
    rates = relative_rates(params)
    q = rates * pi[np.newaxis, :]
    scale = 1.0 / float(pi @ q.sum(axis=1))
    q *= scale
    np.fill_diagonal(q, 0.0)
    np.fill_diagonal(q, -q.sum(axis=1))
    return spectral_decompose(q, pi)


def spectral_decompose(q: np.ndarray, pi: np.ndarray) -> RateMatrixDecomposition:
    """Real eigendecomposition of a reversible rate matrix.

    Symmetrizes S = Pi^(1/2) Q Pi^(-1/2), eigensolves the symmetric S, and
    maps back: U = Pi^(-1/2) V, U^-1 = V^T Pi^(1/2). Raises ModelError if
    detailed balance pi_i q_ij = pi_j q_ji fails beyond 1e-8.
    """
    q = np.asarray(q, dtype=np.float64)
    pi = np.asarray(pi, dtype=np.float64)
    flow = pi[:, np.newaxis] * q
    if np.max(np.abs(flow - flow.T)) > 1e-8:
        raise ModelError("rate matrix violates detailed balance (not reversible)")
    sqrt_pi = np.sqrt(pi)
    s = (sqrt_pi[:, np.newaxis] * q) / sqrt_pi[np.newaxis, :]
    s = 0.5 * (s + s.T)
    eigenvalues, v = np.linalg.eigh(s)
    u = v / sqrt_pi[:, np.newaxis]
    u_inv = v.T * sqrt_pi[np.newaxis, :]
    return RateMatrixDecomposition(q=q, eigenvalues=eigenvalues, u=u, u_inv=u_inv, pi=pi)


def transition_matrix(d: RateMatrixDecomposition, b: float) -> TransitionMatrix:
    """P(b) = U diag(exp(lambda_i b)) U^-1, clamped to [0,1] to absorb
    sub-1e-12 round-off."""
    if b < 0.0:
        raise ModelError("branch length must be non-negative")
    if b == 0.0:
        return TransitionMatrix(p=np.eye(4), b=0.0)
    p = (d.u * np.exp(d.eigenvalues * b)) @ d.u_inv
    return TransitionMatrix(p=np.clip(p, 0.0, 1.0), b=float(b))


def closed_form_transition(family: str, kappa: float, b: float) -> TransitionMatrix:
    """Analytic P(b) for JC69 and K80 under the same equilibrium-rate-1 time
    scaling as build_rate_matrix; the independent oracle for the spectral
    path. kappa is ignored for JC69."""
    if b < 0.0:
        raise ModelError("branch length must be non-negative")
    if family == JC69:
        same = 0.25 + 0.75 * math.exp(-4.0 * b / 3.0)
        diff = 0.25 - 0.25 * math.exp(-4.0 * b / 3.0)
        p = np.full((4, 4), diff)
        np.fill_diagonal(p, same)
        return TransitionMatrix(p=p, b=float(b))
    if family != K80:
        raise ModelError(f"no closed form for family {family!r}")
    if not kappa > 0.0:
        raise ModelError("K80 requires kappa > 0")
    # Normalized instantaneous rates: kappa/(kappa+2) per transition,
    # 1/(kappa+2) per transversion.
    e_v = math.exp(-4.0 * b / (kappa + 2.0))
    e_t = math.exp(-2.0 * (kappa + 1.0) * b / (kappa + 2.0))
    same = 0.25 + 0.25 * e_v + 0.5 * e_t
    transition = 0.25 + 0.25 * e_v - 0.5 * e_t
    transversion = 0.25 - 0.25 * e_v
    p = np.full((4, 4), transversion)
    np.fill_diagonal(p, same)
    for i, j in ((0, 1), (2, 3)):
        p[i, j] = transition
        p[j, i] = transition
    return TransitionMatrix(p=p, b=float(b))


def expm_taylor(a: np.ndarray, terms: int = 30) -> np.ndarray:
    """Matrix exponential by scaling-and-squaring with a truncated Taylor
    series; second oracle for P(b), covering GTR."""
    a = np.asarray(a, dtype=np.float64)
    norm = np.abs(a).sum(axis=-1).max()
    squarings = max(0, int(math.ceil(math.log2(norm / 0.5))) if norm > 0.5 else 0)
    x = a / (2.0**squarings)
    out = np.eye(a.shape[-1])
    term = np.eye(a.shape[-1])
    for k in range(1, terms):
        term = term @ x / k
        out = out + term
    for _ in range(squarings):
        out = out @ out
    return out
