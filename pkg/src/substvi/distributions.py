"""Reparameterized sampling and KL divergences for the three posterior
families: Categorical (ancestral states), Gamma (branch lengths, kappa),
Dirichlet (relative rates, frequencies).

None of these is location-scale, so the pathwise gradients are:

* Gamma - inverse-CDF sampling s1 = F^-1(u; shape) with the implicit
  gradient ds1/dshape = -(dF/dshape)/pdf(s1); the rate enters by the scale
  property s = s1/rate.
* Dirichlet - normalized independent Gamma(conc_k, 1) draws; gradients pass
  through the gamma path and the normalization.
* Categorical - Gumbel-softmax relaxation (soft one-hot samples).

Samplers consume an explicit noise source (anything with numpy's
``Generator.random(size)`` signature), so a fixed seed or a replayed noise
record reproduces samples exactly.

Spec parameters may be plain numbers/arrays or autodiff nodes; plain values
are lifted onto a tape so every result is differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from . import autodiff as ad
from .autodiff import Node

PROB_FLOOR = 1e-10
_UNIFORM_EPS = 1e-12


class DistributionError(ValueError):
    """Invalid distribution specification."""


def _value(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


@dataclass
class GammaSpec:
    """Shape/rate parameterization; mean = shape/rate."""

    shape: object
    rate: object

    def validate(self) -> "GammaSpec":
        if np.any(_value(self.shape) <= 0.0) or np.any(_value(self.rate) <= 0.0):
            raise DistributionError("gamma shape and rate must be positive")
        return self

    def mean(self) -> np.ndarray:
        return _value(self.shape) / _value(self.rate)


@dataclass
class DirichletSpec:
    concentration: object

    def validate(self) -> "DirichletSpec":
        if np.any(_value(self.concentration) <= 0.0):
            raise DistributionError("dirichlet concentrations must be positive")
        return self

    def mean(self) -> np.ndarray:
        c = _value(self.concentration)
        return c / c.sum()


@dataclass
class CategoricalSpec:
    probs: object

    def validate(self) -> "CategoricalSpec":
        p = _value(self.probs)
        if np.any(p < 0.0):
            raise DistributionError("categorical probabilities must be non-negative")
        if np.max(np.abs(p.sum(axis=-1) - 1.0)) > 1e-9:
            raise DistributionError("categorical probabilities must sum to 1")
        return self


class FixedNoise:
    """Replays pre-drawn uniforms in order; the common-random-numbers hook
    for gradient checks."""

    def __init__(self, arrays):
        self._arrays = list(arrays)
        self._cursor = 0

    def random(self, size=None) -> np.ndarray:
        if self._cursor >= len(self._arrays):
            raise RuntimeError("fixed noise exhausted")
        out = np.asarray(self._arrays[self._cursor], dtype=np.float64)
        self._cursor += 1
        want = (size,) if isinstance(size, int) else tuple(size or ())
        if out.shape != want:
            raise RuntimeError(f"fixed noise shape {out.shape} != requested {want}")
        return out.copy()


class RecordingNoise:
    """Wraps a generator and keeps every draw for later replay."""

    def __init__(self, rng):
        self._rng = rng
        self.drawn: list[np.ndarray] = []

    def random(self, size=None) -> np.ndarray:
        out = self._rng.random(size)
        self.drawn.append(np.array(out, copy=True))
        return out

    def replay(self) -> FixedNoise:
        return FixedNoise(self.drawn)


def _uniform(noise, size) -> np.ndarray:
    u = noise.random(size)
    return np.clip(u, _UNIFORM_EPS, 1.0 - _UNIFORM_EPS)


def _gamma_icdf(shape_node: Node, u: np.ndarray) -> Node:
    """Standard-gamma inverse CDF as a differentiable primitive.

    Forward: s = F^-1(u; alpha) via the regularized incomplete gamma.
    Backward (implicit): ds/dalpha = -(dF/dalpha)/pdf(s; alpha), with
    dF/dalpha by central differences on the CDF in alpha.
    """
    alpha = shape_node.value
    s = special.gammaincinv(alpha, u)
    h = 1e-6 * np.maximum(alpha, 1e-2)
    df_dalpha = (special.gammainc(alpha + h, s) - special.gammainc(alpha - h, s)) / (2.0 * h)
    log_pdf = (alpha - 1.0) * np.log(s) - s - special.gammaln(alpha)
    partial = -df_dalpha / np.maximum(np.exp(log_pdf), 1e-300)

    def vjp(g):
        return (ad._unbroadcast(g * partial, shape_node.value.shape),)

    return Node(shape_node.tape, s, (shape_node,), vjp)


def sample_gamma_reparam(spec: GammaSpec, noise, count: int) -> Node:
    """``count`` gamma draws, differentiable w.r.t. shape and rate."""
    spec.validate()
    if count < 1:
        raise DistributionError("need at least one sample")
    tape = ad._tape_of(spec.shape, spec.rate)
    shape_node = tape.constant(spec.shape)
    rate_node = tape.constant(spec.rate)
    u = _uniform(noise, (count,) + shape_node.value.shape)
    return _gamma_icdf(shape_node, u) / rate_node


def sample_dirichlet_reparam(spec: DirichletSpec, noise, count: int) -> Node:
    """``count`` simplex draws of dimension K, differentiable w.r.t. the
    concentrations; each is a normalized vector of Gamma(conc_k, 1) draws."""
    spec.validate()
    if count < 1:
        raise DistributionError("need at least one sample")
    tape = ad._tape_of(spec.concentration)
    conc = tape.constant(spec.concentration)
    u = _uniform(noise, (count,) + conc.value.shape)
    gammas = _gamma_icdf(conc, u)
    return gammas / ad.total(gammas, axis=-1, keepdims=True)


def sample_categorical_relaxed(
    spec: CategoricalSpec, noise, temperature: float, count: int
) -> Node:
    """``count`` Gumbel-softmax draws: softmax((log p + g)/temperature).

    Probabilities are clamped at PROB_FLOOR before the log so degenerate
    categories keep a finite (zero-gradient) path. Leading spec dimensions
    batch: probs of shape (..., K) give samples of shape (count, ..., K).
    """
    spec.validate()
    if not temperature > 0.0:
        raise DistributionError("temperature must be positive")
    if count < 1:
        raise DistributionError("need at least one sample")
    tape = ad._tape_of(spec.probs)
    probs = tape.constant(spec.probs)
    u = _uniform(noise, (count,) + probs.value.shape)
    gumbel = -np.log(-np.log(u))
    logits = (ad.log(ad.clamp_min(probs, PROB_FLOOR)) + tape.constant(gumbel)) / temperature
    return ad.softmax(logits, axis=-1)


def kl_gamma(q: GammaSpec, p: GammaSpec) -> Node:
    """KL(Gamma(a1,b1) || Gamma(a2,b2)) in closed form."""
    q.validate()
    p.validate()
    tape = ad._tape_of(q.shape, q.rate, p.shape, p.rate)
    a1, b1 = tape.constant(q.shape), tape.constant(q.rate)
    a2, b2 = tape.constant(p.shape), tape.constant(p.rate)
    return (
        (a1 - a2) * ad.digamma(a1)
        - ad.log_gamma(a1)
        + ad.log_gamma(a2)
        + a2 * (ad.log(b1) - ad.log(b2))
        + a1 * (b2 - b1) / b1
    )


def kl_dirichlet(q: DirichletSpec, p: DirichletSpec) -> Node:
    """KL(Dir(alpha) || Dir(beta)) in closed form."""
    q.validate()
    p.validate()
    tape = ad._tape_of(q.concentration, p.concentration)
    alpha = tape.constant(q.concentration)
    beta = tape.constant(p.concentration)
    alpha0 = ad.total(alpha, axis=-1)
    beta0 = ad.total(beta, axis=-1)
    # grouped so identical specs cancel exactly in floating point
    return (
        (ad.log_gamma(alpha0) - ad.log_gamma(beta0))
        + (ad.total(ad.log_gamma(beta), axis=-1) - ad.total(ad.log_gamma(alpha), axis=-1))
        + ad.total((alpha - beta) * (ad.digamma(alpha) - ad.digamma(alpha0)), axis=-1)
    )


def kl_categorical(q: CategoricalSpec, p: CategoricalSpec) -> Node:
    """KL(q || p) = sum_i q_i ln(q_i / p_i) with 0 ln 0 = 0.

    Batched over leading dimensions of q.probs; p must have full support
    wherever q is positive.
    """
    q.validate()
    p.validate()
    qv, pv = _value(q.probs), _value(p.probs)
    if np.any((qv > 0.0) & (np.broadcast_to(pv, qv.shape) == 0.0)):
        raise DistributionError("q places mass where p has none")
    tape = ad._tape_of(q.probs, p.probs)
    qn = tape.constant(q.probs)
    pn = tape.constant(p.probs)
    log_ratio = ad.log(ad.clamp_min(qn, PROB_FLOOR)) - ad.log(ad.clamp_min(pn, PROB_FLOOR))
    return ad.total(qn * log_ratio, axis=-1)
