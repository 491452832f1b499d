"""Variational encoders.

One amortized per-site network maps a flattened M x 4 site column to the
four ancestor probabilities. Branch lengths, kappa, and the GTR simplex
parameters get data-free encoders: a trainable input vector of ones pushed
through one hidden layer, so the free variational parameters are expressed
through the same layer machinery as the amortized net.

All positive outputs go through softplus and a 1e-3 floor, which also keeps
the gamma implicit-gradient CDF inversion stable.

Weight fields are plain float64 arrays owned by the caller; forward passes
wrap them as tape leaves (one leaf per array per tape), so gradients land
on the arrays' nodes after ``tape.backward``. Fields may also be
pre-built nodes, which lets gradient checks slice all weights out of one
flat leaf vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape
from .distributions import CategoricalSpec, DirichletSpec, GammaSpec
from .subst_models import GTR, JC69, K80, FAMILIES, ModelError

DEFAULT_HIDDEN = 32
POSITIVE_FLOOR = 1e-3
GLOBAL_INPUT_SIZE = 4


@dataclass
class MlpWeights:
    """One-hidden-layer dense net: in -> hidden (relu) -> out."""

    w1: object
    b1: object
    w2: object
    b2: object

    def named(self, prefix: str) -> dict[str, np.ndarray]:
        return {
            f"{prefix}.w1": self.w1,
            f"{prefix}.b1": self.b1,
            f"{prefix}.w2": self.w2,
            f"{prefix}.b2": self.b2,
        }


@dataclass
class GlobalEncoderWeights:
    """Data-free encoder: trainable input vector plus an MlpWeights net."""

    inp: object
    net: MlpWeights

    def named(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.inp": self.inp}
        out.update(self.net.named(prefix))
        return out


@dataclass
class PriorConfig:
    """Priors of the generating model; defaults: uniform ancestors, branch
    lengths Gamma with mean 0.1, uniform (all-ones) Dirichlets, Gamma(1,1)
    on kappa."""

    ancestor: CategoricalSpec = field(
        default_factory=lambda: CategoricalSpec(np.full(4, 0.25))
    )
    branch: GammaSpec = field(default_factory=lambda: GammaSpec(0.1, 1.0))
    kappa: GammaSpec = field(default_factory=lambda: GammaSpec(1.0, 1.0))
    rho: DirichletSpec = field(default_factory=lambda: DirichletSpec(np.ones(6)))
    pi: DirichletSpec = field(default_factory=lambda: DirichletSpec(np.ones(4)))

    def validate(self) -> "PriorConfig":
        self.ancestor.validate()
        self.branch.validate()
        self.kappa.validate()
        self.rho.validate()
        self.pi.validate()
        return self


@dataclass
class VariationalParameters:
    """All encoder weights for one model instance."""

    family: str
    n_sequences: int
    hidden: int
    phi_a: MlpWeights
    phi_b: GlobalEncoderWeights
    phi_kappa: GlobalEncoderWeights | None = None
    phi_rho: GlobalEncoderWeights | None = None
    phi_pi: GlobalEncoderWeights | None = None

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = self.phi_a.named("ancestor")
        out.update(self.phi_b.named("branches"))
        if self.phi_kappa is not None:
            out.update(self.phi_kappa.named("kappa"))
        if self.phi_rho is not None:
            out.update(self.phi_rho.named("rho"))
        if self.phi_pi is not None:
            out.update(self.phi_pi.named("pi"))
        return out


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def _init_mlp(rng: np.random.Generator, n_in: int, hidden: int, n_out: int) -> MlpWeights:
    return MlpWeights(
        w1=_glorot(rng, n_in, hidden),
        b1=np.zeros(hidden),
        w2=_glorot(rng, hidden, n_out),
        b2=np.zeros(n_out),
    )


def _init_global(rng: np.random.Generator, hidden: int, n_out: int) -> GlobalEncoderWeights:
    return GlobalEncoderWeights(
        inp=np.ones(GLOBAL_INPUT_SIZE),
        net=_init_mlp(rng, GLOBAL_INPUT_SIZE, hidden, n_out),
    )


def init_variational_parameters(
    family: str,
    n_sequences: int,
    hidden: int = DEFAULT_HIDDEN,
    rng: np.random.Generator | None = None,
) -> VariationalParameters:
    if family not in FAMILIES:
        raise ModelError(f"unknown model family {family!r}")
    if n_sequences < 2:
        raise ModelError("need at least two sequences to estimate branches")
    rng = rng if rng is not None else np.random.default_rng()
    vp = VariationalParameters(
        family=family,
        n_sequences=n_sequences,
        hidden=hidden,
        phi_a=_init_mlp(rng, 4 * n_sequences, hidden, 4),
        phi_b=_init_global(rng, hidden, 2 * n_sequences),
    )
    if family == K80:
        vp.phi_kappa = _init_global(rng, hidden, 2)
    elif family == GTR:
        vp.phi_rho = _init_global(rng, hidden, 6)
        vp.phi_pi = _init_global(rng, hidden, 4)
    return vp


def _as_node(tape: Tape, w) -> Node:
    return w if isinstance(w, Node) else tape.leaf(w)


def _mlp_forward(tape: Tape, weights: MlpWeights, x: Node) -> Node:
    h = ad.relu(x @ _as_node(tape, weights.w1) + _as_node(tape, weights.b1))
    return h @ _as_node(tape, weights.w2) + _as_node(tape, weights.b2)


def _positive(x: Node) -> Node:
    return ad.clamp_min(ad.softplus(x), POSITIVE_FLOOR)


def _global_forward(tape: Tape, weights: GlobalEncoderWeights) -> Node:
    inp = ad.reshape(_as_node(tape, weights.inp), (1, GLOBAL_INPUT_SIZE))
    out = _mlp_forward(tape, weights.net, inp)
    return _positive(ad.reshape(out, (out.value.shape[-1],)))


def encode_ancestor(phi_a: MlpWeights, sites: np.ndarray, tape: Tape | None = None) -> CategoricalSpec:
    """Ancestor posterior per site: softmax over the net's four logits.

    ``sites`` is one M x 4 one-hot site column or a batch (N, M, 4); the
    returned spec's probs have shape (4,) or (N, 4) accordingly.
    """
    tape = tape if tape is not None else Tape()
    sites = np.asarray(sites, dtype=np.float64)
    single = sites.ndim == 2
    if single:
        sites = sites[np.newaxis]
    n = sites.shape[0]
    flat = sites.reshape(n, -1)
    n_in = np.asarray(phi_a.w1.value if isinstance(phi_a.w1, Node) else phi_a.w1).shape[0]
    if flat.shape[1] != n_in:
        raise ModelError(
            f"site column width {flat.shape[1]} does not match encoder input {n_in}"
        )
    logits = _mlp_forward(tape, phi_a, tape.constant(flat))
    probs = ad.softmax(logits, axis=-1)
    if single:
        probs = ad.reshape(probs, (4,))
    return CategoricalSpec(probs)


def encode_branches(
    phi_b: GlobalEncoderWeights, n_sequences: int, tape: Tape | None = None
) -> list[GammaSpec]:
    """M independent branch-length posteriors as (shape, rate) pairs."""
    tape = tape if tape is not None else Tape()
    out = _global_forward(tape, phi_b)
    if out.value.shape[0] != 2 * n_sequences:
        raise ModelError("branch encoder output width does not match M")
    specs = []
    for m in range(n_sequences):
        pair = ad.narrow(out, 2 * m, 2 * m + 2)
        specs.append(
            GammaSpec(
                shape=ad.reshape(ad.narrow(pair, 0, 1), ()),
                rate=ad.reshape(ad.narrow(pair, 1, 2), ()),
            )
        )
    return specs


def encode_kappa(phi_kappa: GlobalEncoderWeights, tape: Tape | None = None) -> GammaSpec:
    tape = tape if tape is not None else Tape()
    out = _global_forward(tape, phi_kappa)
    return GammaSpec(
        shape=ad.reshape(ad.narrow(out, 0, 1), ()),
        rate=ad.reshape(ad.narrow(out, 1, 2), ()),
    )


def encode_gtr(
    phi_rho: GlobalEncoderWeights,
    phi_pi: GlobalEncoderWeights,
    tape: Tape | None = None,
) -> tuple[DirichletSpec, DirichletSpec]:
    tape = tape if tape is not None else Tape()
    return (
        DirichletSpec(_global_forward(tape, phi_rho)),
        DirichletSpec(_global_forward(tape, phi_pi)),
    )


@dataclass
class PosteriorSpecs:
    """Everything the sampler and the KL terms need for one iteration."""

    family: str
    ancestor: CategoricalSpec
    branches: list[GammaSpec]
    kappa: GammaSpec | None = None
    rho: DirichletSpec | None = None
    pi: DirichletSpec | None = None


def encode_all(vp: VariationalParameters, sites: np.ndarray, tape: Tape) -> PosteriorSpecs:
    """Run every encoder of the model family on one tape."""
    specs = PosteriorSpecs(
        family=vp.family,
        ancestor=encode_ancestor(vp.phi_a, sites, tape),
        branches=encode_branches(vp.phi_b, vp.n_sequences, tape),
    )
    if vp.family == K80:
        specs.kappa = encode_kappa(vp.phi_kappa, tape)
    elif vp.family == GTR:
        specs.rho, specs.pi = encode_gtr(vp.phi_rho, vp.phi_pi, tape)
    return specs
