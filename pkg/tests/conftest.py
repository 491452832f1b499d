"""Shared test helpers: one-hot fixtures, flat-parameter model rebuilds for
common-random-number gradient checks, and the brute-force likelihood oracle."""

import numpy as np

from substvi import autodiff as ad
from substvi.autodiff import Node
from substvi.encoders import (
    GlobalEncoderWeights,
    MlpWeights,
    VariationalParameters,
    init_variational_parameters,
)
from substvi.seq_io import encode, parse_fasta
from substvi.subst_models import (
    SubstitutionParams,
    build_rate_matrix,
    transition_matrix,
)


def one_hot_sites(rows: list[str]) -> np.ndarray:
    fasta = "".join(f">t{i}\n{r}\n" for i, r in enumerate(rows))
    return encode(parse_fasta(fasta)).sites


def split_arrays(theta: Node, templates) -> list[Node]:
    out, offset = [], 0
    for t in templates:
        out.append(ad.reshape(ad.narrow(theta, offset, offset + t.size), t.shape))
        offset += t.size
    return out


def _mlp_arrays(phi: MlpWeights):
    return [phi.w1, phi.b1, phi.w2, phi.b2]


def _global_arrays(phi: GlobalEncoderWeights):
    return [phi.inp, *_mlp_arrays(phi.net)]


def flat_model(family: str, m: int, hidden: int, seed: int):
    """A seeded model plus (theta0, rebuild) where rebuild(theta_node) makes
    a VariationalParameters whose weights are slices of the flat leaf."""
    vp = init_variational_parameters(family, m, hidden, np.random.default_rng(seed))
    arrays = _mlp_arrays(vp.phi_a) + _global_arrays(vp.phi_b)
    if vp.phi_kappa is not None:
        arrays += _global_arrays(vp.phi_kappa)
    if vp.phi_rho is not None:
        arrays += _global_arrays(vp.phi_rho) + _global_arrays(vp.phi_pi)
    theta0 = np.concatenate([a.ravel() for a in arrays])

    def rebuild(theta: Node) -> VariationalParameters:
        parts = split_arrays(theta, arrays)
        phi_a = MlpWeights(*parts[:4])
        phi_b = GlobalEncoderWeights(parts[4], MlpWeights(*parts[5:9]))
        built = VariationalParameters(
            family=family, n_sequences=m, hidden=hidden, phi_a=phi_a, phi_b=phi_b
        )
        idx = 9
        if family == "K80":
            built.phi_kappa = GlobalEncoderWeights(parts[idx], MlpWeights(*parts[idx + 1 : idx + 5]))
        elif family == "GTR":
            built.phi_rho = GlobalEncoderWeights(parts[idx], MlpWeights(*parts[idx + 1 : idx + 5]))
            built.phi_pi = GlobalEncoderWeights(parts[idx + 5], MlpWeights(*parts[idx + 6 : idx + 10]))
        return built

    return vp, theta0, rebuild


def brute_force_log_marginal(sites: np.ndarray, params: SubstitutionParams, branch_lengths) -> float:
    """log p(X | b, psi) by enumerating the 4 ancestor states per site with a
    uniform ancestor prior; independent oracle for the ELBO bound."""
    d = build_rate_matrix(params)
    mats = np.stack([transition_matrix(d, float(b)).p for b in branch_lengths])
    total = 0.0
    for site in sites:
        obs = site.argmax(axis=-1)
        per_ancestor = mats[np.arange(len(obs)), :, obs]  # (M, 4): P[m][a, x_m]
        total += np.log(0.25 * per_ancestor.prod(axis=0).sum())
    return total
