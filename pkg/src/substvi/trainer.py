"""Training loop: sample latents, estimate the ELBO, backpropagate, and
ascend with Adam; full-batch over all sites, one update per iteration.

The tape is rebuilt every iteration. All randomness (weight init, latent
noise, validation noise) comes from child streams of one seed, so a config
plus seed pins the entire trajectory bit-for-bit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tape
from .distributions import DirichletSpec, GammaSpec
from .elbo import ElboBreakdown, elbo_estimate, sample_latent_batch
from .encoders import (
    PriorConfig,
    VariationalParameters,
    encode_all,
    init_variational_parameters,
)
from .seq_io import EncodedAlignment
from .subst_models import GTR, K80, FAMILIES, ModelError


class TrainingDivergedError(RuntimeError):
    """Non-finite ELBO; carries the failing iteration and partial records."""

    def __init__(self, iteration: int, records: list["IterationRecord"]):
        super().__init__(f"non-finite ELBO at iteration {iteration}")
        self.iteration = iteration
        self.records = records


@dataclass
class TrainConfig:
    family: str
    iterations: int = 5000
    sample_size: int = 100
    alpha_kl: float = 1e-3
    learning_rate: float = 0.005
    hidden: int = 32
    temperature: float = 0.1
    seed: int = 0
    priors: PriorConfig = field(default_factory=PriorConfig)
    validation: EncodedAlignment | None = None

    def validate(self) -> "TrainConfig":
        if self.family not in FAMILIES:
            raise ModelError(f"unknown model family {self.family!r}")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.sample_size < 1:
            raise ValueError("sample_size must be >= 1")
        if not self.learning_rate > 0.0:
            raise ValueError("learning_rate must be positive")
        if not self.temperature > 0.0:
            raise ValueError("temperature must be positive")
        self.priors.validate()
        return self


@dataclass
class AdamState:
    """First/second moment accumulators per named weight array."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_weights(cls, weights: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(w) for k, w in weights.items()},
            v={k: np.zeros_like(w) for k, w in weights.items()},
        )


def adam_step(
    weights: dict[str, np.ndarray],
    gradients: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update in the ascent direction."""
    state.step += 1
    t = state.step
    updated = {}
    for name, w in weights.items():
        g = gradients[name]
        if g.shape != w.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = state.m[name] / (1.0 - state.beta1**t)
        v_hat = state.v[name] / (1.0 - state.beta2**t)
        updated[name] = w + lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return updated, state


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    split: str
    elbo: float
    loglik: float
    kl_qp: float


@dataclass(frozen=True)
class ParameterEstimates:
    family: str
    branch_lengths: np.ndarray
    kappa: float | None = None
    rho: np.ndarray | None = None
    pi: np.ndarray | None = None


@dataclass
class TrainReport:
    records: list[IterationRecord]
    estimates: ParameterEstimates
    duration_seconds: float

    def train_records(self) -> list[IterationRecord]:
        return [r for r in self.records if r.split == "train"]


def gamma_posterior_mean(spec: GammaSpec) -> float:
    return float(np.asarray(spec.mean()))


def dirichlet_posterior_mean(spec: DirichletSpec) -> np.ndarray:
    return np.asarray(spec.mean(), dtype=np.float64)


def estimate_point_parameters(vp: VariationalParameters) -> ParameterEstimates:
    """Posterior means of the current variational distributions."""
    from .encoders import encode_branches, encode_gtr, encode_kappa

    tape = Tape()
    branches = encode_branches(vp.phi_b, vp.n_sequences, tape)
    estimates = ParameterEstimates(
        family=vp.family,
        branch_lengths=np.array([gamma_posterior_mean(s) for s in branches]),
    )
    if vp.family == K80:
        estimates = replace(estimates, kappa=gamma_posterior_mean(encode_kappa(vp.phi_kappa, tape)))
    elif vp.family == GTR:
        rho, pi = encode_gtr(vp.phi_rho, vp.phi_pi, tape)
        estimates = replace(
            estimates,
            rho=dirichlet_posterior_mean(rho),
            pi=dirichlet_posterior_mean(pi),
        )
    return estimates


def _evaluate(
    vp: VariationalParameters,
    sites: np.ndarray,
    cfg: TrainConfig,
    noise,
) -> ElboBreakdown:
    tape = Tape()
    specs = encode_all(vp, sites, tape)
    batch = sample_latent_batch(specs, cfg.sample_size, noise, cfg.temperature)
    x = EncodedAlignment(sites=sites)
    return elbo_estimate(x, batch, specs, priors=cfg.priors, alpha_kl=cfg.alpha_kl)


def train(x: EncodedAlignment, cfg: TrainConfig) -> TrainReport:
    """Run the learning loop and return trajectories plus point estimates.

    Raises TrainingDivergedError (with partial records) if the ELBO goes
    non-finite. iterations = 0 returns initial-weight estimates and no
    records.
    """
    cfg.validate()
    if x.n_sequences < 2:
        raise ModelError("training requires at least two sequences")
    started = time.perf_counter()

    seed_seq = np.random.SeedSequence(cfg.seed)
    init_ss, sample_ss, valid_ss = seed_seq.spawn(3)
    vp = init_variational_parameters(
        cfg.family, x.n_sequences, cfg.hidden, np.random.default_rng(init_ss)
    )
    sample_rng = np.random.default_rng(sample_ss)
    valid_rng = np.random.default_rng(valid_ss)

    weights = vp.named_arrays()
    state = AdamState.for_weights(weights)
    records: list[IterationRecord] = []

    for it in range(cfg.iterations):
        tape = Tape()
        specs = encode_all(vp, x.sites, tape)
        batch = sample_latent_batch(specs, cfg.sample_size, sample_rng, cfg.temperature)
        breakdown = elbo_estimate(x, batch, specs, priors=cfg.priors, alpha_kl=cfg.alpha_kl)
        vals = breakdown.values()
        if not np.isfinite(vals["elbo"]):
            raise TrainingDivergedError(it, records)
        records.append(
            IterationRecord(it, "train", vals["elbo"], vals["loglik"], vals["kl_total"])
        )
        if cfg.validation is not None:
            vb = _evaluate(vp, cfg.validation.sites, cfg, valid_rng).values()
            records.append(
                IterationRecord(it, "valid", vb["elbo"], vb["loglik"], vb["kl_total"])
            )

        tape.backward(breakdown.elbo)
        gradients = {}
        for name, array in weights.items():
            leaf = tape.find_leaf(array)
            gradients[name] = (
                leaf.grad if leaf is not None and leaf.grad is not None else np.zeros_like(array)
            )
        updated, state = adam_step(weights, gradients, state, cfg.learning_rate)
        for name, array in weights.items():
            array[...] = updated[name]

    return TrainReport(
        records=records,
        estimates=estimate_point_parameters(vp),
        duration_seconds=time.perf_counter() - started,
    )
