"""Generating model and multi-sample ELBO estimator.

The likelihood is top-down: a sampled ancestor distribution is pushed
through each sequence's transition matrix and scored against the observed
character. The objective is

    sum_n (1/L) sum_l sum_m log p(x_n^m | a_n^l, b^{m,l}, psi^l)
    - alpha_kl * ( sum_n KL(q_a(.|x_n) || p(a))
                   + N * ( sum_m KL(q_b^m || p(b)) + KL(q_psi || p(psi)) ) )

with one branch/psi sample set shared across sites within a draw index l
and ancestors drawn per site.

Transition matrices inside the training graph are computed by
scaling-and-squaring truncated Taylor (plain engine matmuls), which stays
differentiable and well-conditioned for the degenerate spectra of JC69 and
K80; the spectral path in ``subst_models`` is the numeric reference and the
two are cross-checked in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape
from .distributions import (
    PROB_FLOOR,
    kl_categorical,
    kl_dirichlet,
    kl_gamma,
    sample_categorical_relaxed,
    sample_dirichlet_reparam,
    sample_gamma_reparam,
)
from .encoders import PosteriorSpecs, PriorConfig
from .seq_io import EncodedAlignment
from .subst_models import GTR, JC69, K80, RATE_PAIRS, TransitionMatrix, UNIFORM_PI

_TAYLOR_TERMS = 13
_TAYLOR_TARGET_NORM = 0.25

# 6 x 16 basis: row k is the flattened symmetric indicator of rate pair k.
_PAIR_BASIS = np.zeros((6, 16))
for _k, (_i, _j) in enumerate(RATE_PAIRS):
    _PAIR_BASIS[_k, 4 * _i + _j] = 1.0
    _PAIR_BASIS[_k, 4 * _j + _i] = 1.0

_TRANSITION_MASK = np.zeros((4, 4))
for _i, _j in ((0, 1), (2, 3)):
    _TRANSITION_MASK[_i, _j] = 1.0
    _TRANSITION_MASK[_j, _i] = 1.0
_TRANSVERSION_MASK = 1.0 - _TRANSITION_MASK - np.eye(4)

_JC69_Q = np.full((4, 4), 1.0 / 3.0)
np.fill_diagonal(_JC69_Q, -1.0)


class ElboError(ValueError):
    """Inconsistent latent batch or estimator inputs."""


@dataclass
class LatentSampleBatch:
    """One aligned set of L latent draws.

    ancestors: (L, N, 4) soft one-hot; branches: (L, M) positive;
    kappa: (L,) for K80; rho: (L, 6) and pi: (L, 4) for GTR. Index l pairs
    one ancestor draw with one branch vector and one substitution sample.
    """

    family: str
    ancestors: Node
    branches: Node
    kappa: Node | None = None
    rho: Node | None = None
    pi: Node | None = None

    def __post_init__(self):
        lead = self.ancestors.value.shape[0]
        if self.branches.value.shape[0] != lead:
            raise ElboError("ancestor and branch sample counts differ")
        for extra in (self.kappa, self.rho, self.pi):
            if extra is not None and extra.value.shape[0] != lead:
                raise ElboError("substitution sample count differs from L")
        if self.family == K80 and self.kappa is None:
            raise ElboError("K80 batch requires kappa samples")
        if self.family == GTR and (self.rho is None or self.pi is None):
            raise ElboError("GTR batch requires rho and pi samples")
        if np.any(self.branches.value <= 0.0):
            raise ElboError("branch samples must be positive")

    @property
    def sample_count(self) -> int:
        return self.ancestors.value.shape[0]


@dataclass
class ElboBreakdown:
    """ELBO and its parts as graph nodes; kl_branches and kl_subst carry
    the N-site multiplier, so elbo = loglik - alpha_kl * kl_total exactly."""

    elbo: Node
    loglik: Node
    kl_total: Node
    kl_ancestors: Node
    kl_branches: Node
    kl_subst: Node

    def values(self) -> dict[str, float]:
        return {
            "elbo": float(self.elbo.value),
            "loglik": float(self.loglik.value),
            "kl_total": float(self.kl_total.value),
            "kl_ancestors": float(self.kl_ancestors.value),
            "kl_branches": float(self.kl_branches.value),
            "kl_subst": float(self.kl_subst.value),
        }


def sample_latent_batch(
    specs: PosteriorSpecs, count: int, noise, temperature: float = 0.1
) -> LatentSampleBatch:
    """Draw L pathwise samples in the fixed order branches, substitution
    parameters, ancestors (one noise stream, reproducible by seed)."""
    per_branch = [sample_gamma_reparam(s, noise, count) for s in specs.branches]
    branches = ad.stack(per_branch, axis=1)
    kappa = rho = pi = None
    if specs.family == K80:
        kappa = sample_gamma_reparam(specs.kappa, noise, count)
    elif specs.family == GTR:
        rho = sample_dirichlet_reparam(specs.rho, noise, count)
        pi = sample_dirichlet_reparam(specs.pi, noise, count)
    ancestors = sample_categorical_relaxed(specs.ancestor, noise, temperature, count)
    if ancestors.value.ndim == 2:
        ancestors = ad.reshape(ancestors, (count, 1, 4))
    return LatentSampleBatch(
        family=specs.family, ancestors=ancestors, branches=branches,
        kappa=kappa, rho=rho, pi=pi,
    )


def rate_matrix_graph(batch: LatentSampleBatch) -> Node:
    """Differentiable normalized rate matrices, one per draw: (L, 4, 4).

    Mirrors subst_models.build_rate_matrix on the tape; JC69 contributes a
    constant, K80 and GTR flow gradients from their sampled parameters.
    """
    tape = batch.branches.tape
    count = batch.sample_count
    if batch.family == JC69:
        return tape.constant(np.broadcast_to(_JC69_Q, (count, 4, 4)).copy())
    if batch.family == K80:
        kappa = ad.reshape(batch.kappa, (count, 1, 1))
        rates = kappa * tape.constant(_TRANSITION_MASK) + tape.constant(_TRANSVERSION_MASK)
        pi_row = tape.constant(UNIFORM_PI.reshape(1, 1, 4))
        pi_col = tape.constant(UNIFORM_PI.reshape(1, 4, 1))
    else:
        rates = ad.reshape(batch.rho @ tape.constant(_PAIR_BASIS), (count, 4, 4))
        pi_row = ad.reshape(batch.pi, (count, 1, 4))
        pi_col = ad.reshape(batch.pi, (count, 4, 1))
    off = rates * pi_row
    mean_rate = ad.total(pi_col * off, axis=(-1, -2))
    off = off / ad.reshape(mean_rate, (count, 1, 1))
    row_sums = ad.total(off, axis=-1)
    diag = tape.constant(np.eye(4)) * ad.reshape(row_sums, (count, 4, 1))
    return off - diag


def transition_graph(q: Node, branches: Node) -> Node:
    """Differentiable P(b) = exp(Q b) for every (draw, sequence) pair.

    q: (L, 4, 4) or constant (4, 4); branches: (L, M). Returns (L, M, 4, 4)
    via scaling-and-squaring with a truncated Taylor series.
    """
    count, m = branches.value.shape
    q4 = ad.reshape(q, (1, 1, 4, 4)) if q.value.ndim == 2 else ad.reshape(q, (count, 1, 4, 4))
    scaled_b = ad.reshape(branches, (count, m, 1, 1))
    a = q4 * scaled_b
    norm = float(np.abs(a.value).sum(axis=-1).max())
    squarings = 0
    if norm > _TAYLOR_TARGET_NORM:
        squarings = int(math.ceil(math.log2(norm / _TAYLOR_TARGET_NORM)))
    x = a * (0.5**squarings)
    eye = a.tape.constant(np.eye(4))
    acc = eye + x
    term = x
    for k in range(2, _TAYLOR_TERMS + 1):
        term = ad.matmul(term, x) / float(k)
        acc = acc + term
    for _ in range(squarings):
        acc = ad.matmul(acc, acc)
    return acc


def site_log_likelihood(ancestor, transitions, site: np.ndarray) -> Node:
    """log p(site | ancestor, branches) for one site column.

    ancestor: simplex 4-vector (array or node); transitions: M transition
    matrices (TransitionMatrix objects, arrays, or an (M, 4, 4) node);
    site: M x 4 one-hot observations. The evolved distribution is
    ancestor^T P^m; its probability of the observed character is clamped at
    PROB_FLOOR before the log.
    """
    if isinstance(transitions, Node):
        p = transitions
        tape = p.tape
        anc = tape.constant(ancestor)
    else:
        mats = [t.p if isinstance(t, TransitionMatrix) else np.asarray(t) for t in transitions]
        tape = ad._tape_of(ancestor)
        anc = tape.constant(ancestor)
        p = tape.constant(np.stack(mats, axis=0))
    evolved = ad.reshape(ad.matmul(ad.reshape(anc, (1, 1, 4)), p), (p.value.shape[0], 4))
    obs = tape.constant(np.asarray(site, dtype=np.float64))
    probs = ad.total(evolved * obs, axis=-1)
    return ad.total(ad.log(ad.clamp_min(probs, PROB_FLOOR)))


def elbo_estimate(
    x: EncodedAlignment,
    batch: LatentSampleBatch,
    specs: PosteriorSpecs,
    priors: PriorConfig,
    alpha_kl: float,
) -> ElboBreakdown:
    """Multi-sample ELBO over the whole alignment (see module docstring)."""
    n, m = x.n_sites, x.n_sequences
    count = batch.sample_count
    if batch.ancestors.value.shape[1] != n:
        raise ElboError("ancestor samples do not cover every site")
    if batch.branches.value.shape[1] != m:
        raise ElboError("branch samples do not cover every sequence")
    tape = batch.branches.tape

    p = transition_graph(rate_matrix_graph(batch), batch.branches)
    anc = ad.reshape(batch.ancestors, (count, n, 1, 1, 4))
    evolved = ad.reshape(ad.matmul(anc, ad.reshape(p, (count, 1, m, 4, 4))), (count, n, m, 4))
    obs = tape.constant(x.sites)
    site_probs = ad.total(evolved * obs, axis=-1)
    per_draw = ad.total(ad.log(ad.clamp_min(site_probs, PROB_FLOOR)), axis=(1, 2))
    loglik = ad.mean(per_draw)

    kl_anc = ad.total(kl_categorical(specs.ancestor, priors.ancestor))
    kl_b = kl_gamma(specs.branches[0], priors.branch)
    for spec in specs.branches[1:]:
        kl_b = kl_b + kl_gamma(spec, priors.branch)
    if specs.family == K80:
        kl_psi = kl_gamma(specs.kappa, priors.kappa)
    elif specs.family == GTR:
        kl_psi = kl_dirichlet(specs.rho, priors.rho) + kl_dirichlet(specs.pi, priors.pi)
    else:
        kl_psi = tape.constant(0.0)
    kl_branches = float(n) * kl_b
    kl_subst = float(n) * kl_psi
    kl_total = kl_anc + kl_branches + kl_subst
    return ElboBreakdown(
        elbo=loglik - alpha_kl * kl_total,
        loglik=loglik,
        kl_total=kl_total,
        kl_ancestors=kl_anc,
        kl_branches=kl_branches,
        kl_subst=kl_subst,
    )
