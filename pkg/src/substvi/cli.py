"""Command-line entry points: simulate ground-truth alignments, train the
variational model, and evaluate parameter recovery.

Configs are plain key=value text ('#' comments allowed); unknown keys are
rejected. Every output file carries a reproducibility header (version,
seed, config hash) - '#' lines in CSV/manifest/estimates files, ';' lines
in FASTA. All tabular output is a no-quoting CSV subset.

    substvi simulate --config sim.cfg [--seed S]
    substvi train    --config train.cfg --input leaves.fasta [--valid v.fasta]
    substvi evaluate --estimates est.txt --manifest manifest.txt [--output f.csv]

Set SUBSTVI_LOG=DEBUG|INFO|WARNING|ERROR to control verbosity.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .distributions import DistributionError, GammaSpec
from .encoders import PriorConfig
from .metrics import MetricsError, euclidean, kappa_ratio, pearson
from .seq_io import AlignmentError, encode, parse_fasta, write_fasta
from .simulator import SimulatedDataset, SimulationSpec, simulate, true_log_likelihood
from .subst_models import GTR, JC69, K80, FAMILIES, ModelError, SubstitutionParams
from .trainer import TrainConfig, TrainingDivergedError, train

log = logging.getLogger("substvi")

TRAJECTORY_FILE = "trajectory.csv"
ESTIMATES_FILE = "estimates.txt"
LEAVES_FILE = "leaves.fasta"
ROOT_FILE = "root.fasta"
MANIFEST_FILE = "manifest.txt"
METRICS_FILE = "metrics.csv"

_SIMULATE_KEYS = {
    "family", "n_sites", "seed", "branch_lengths", "kappa", "rho", "pi", "output_dir",
}
_TRAIN_KEYS = {
    "family", "iterations", "sample_size", "alpha_kl", "learning_rate", "hidden",
    "temperature", "seed", "output_dir",
    "branch_prior_shape", "branch_prior_rate",
    "kappa_prior_shape", "kappa_prior_rate",
    "rho_prior_concentration", "pi_prior_concentration",
}

_TRAIN_DEFAULTS = {
    "iterations": "5000",
    "sample_size": "100",
    "alpha_kl": "0.001",
    "learning_rate": "0.005",
    "hidden": "32",
    "temperature": "0.1",
    "seed": "0",
    "branch_prior_shape": "0.1",
    "branch_prior_rate": "1.0",
    "kappa_prior_shape": "1.0",
    "kappa_prior_rate": "1.0",
    "rho_prior_concentration": "1.0",
    "pi_prior_concentration": "1.0",
}


class ConfigError(ValueError):
    """Bad config file: syntax, unknown keys, or missing values."""


def parse_config(text: str, allowed: set[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in allowed:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def config_hash(cfg: dict[str, str]) -> str:
    canonical = "".join(f"{k}={cfg[k]}\n" for k in sorted(cfg))
    return hashlib.sha256(canonical.encode()).hexdigest()[:12]


def _floats(value: str, what: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in value.split(",")], dtype=np.float64)
    except ValueError as err:
        raise ConfigError(f"{what}: {err}") from err


def _require(cfg: dict[str, str], key: str) -> str:
    if key not in cfg:
        raise ConfigError(f"missing required key {key!r}")
    return cfg[key]


def _family(cfg: dict[str, str]) -> str:
    family = _require(cfg, "family").upper()
    if family not in FAMILIES:
        raise ConfigError(f"family must be one of {FAMILIES}")
    return family


def _output_dir(cfg: dict[str, str]) -> Path:
    out = Path(_require(cfg, "output_dir"))
    if not out.is_dir():
        raise ConfigError(f"output directory does not exist: {out}")
    return out


def _header_lines(prefix: str, seed: int, digest: str) -> str:
    return (
        f"{prefix} substvi={__version__}\n"
        f"{prefix} seed={seed}\n"
        f"{prefix} config_hash={digest}\n"
    )


def _fmt(x: float) -> str:
    return repr(float(x))


def _fmt_vec(v) -> str:
    return ",".join(_fmt(x) for x in np.asarray(v, dtype=np.float64))


def simulation_spec_from_config(cfg: dict[str, str]) -> SimulationSpec:
    family = _family(cfg)
    if family == JC69:
        params = SubstitutionParams(family=JC69)
    elif family == K80:
        params = SubstitutionParams(family=K80, kappa=float(_require(cfg, "kappa")))
    else:
        params = SubstitutionParams(
            family=GTR,
            rho=_floats(_require(cfg, "rho"), "rho"),
            pi=_floats(_require(cfg, "pi"), "pi"),
        )
    return SimulationSpec(
        params=params,
        branch_lengths=_floats(_require(cfg, "branch_lengths"), "branch_lengths"),
        n_sites=int(_require(cfg, "n_sites")),
        seed=int(cfg.get("seed", "0")),
    )


def manifest_to_config(manifest: dict[str, str]) -> dict[str, str]:
    """Strip result fields so a manifest reruns the simulation it records."""
    return {k: v for k, v in manifest.items() if k in _SIMULATE_KEYS}


def run_simulate(cfg: dict[str, str]) -> dict[str, Path]:
    spec = simulation_spec_from_config(cfg)
    out_dir = _output_dir(cfg)
    digest = config_hash(cfg)
    dataset = simulate(spec)
    loglik = true_log_likelihood(dataset)

    fasta_header = _header_lines(";", spec.seed, digest)
    leaves = out_dir / LEAVES_FILE
    leaves.write_text(fasta_header + write_fasta(dataset.alignment))
    root = out_dir / ROOT_FILE
    root_aln = write_fasta(
        type(dataset.alignment)(names=["root"], rows=[dataset.root])
    )
    root.write_text(fasta_header + root_aln)

    lines = [_header_lines("#", spec.seed, digest)]
    for key in sorted(cfg):
        lines.append(f"{key}={cfg[key]}\n")
    lines.append(f"true_log_likelihood={_fmt(loglik)}\n")
    manifest = out_dir / MANIFEST_FILE
    manifest.write_text("".join(lines))
    log.info("simulated %d x %d alignment into %s", spec.n_sequences, spec.n_sites, out_dir)
    return {"leaves": leaves, "root": root, "manifest": manifest}


def train_config_from_config(cfg: dict[str, str]) -> TrainConfig:
    merged = dict(_TRAIN_DEFAULTS)
    merged.update(cfg)
    family = _family(merged)
    priors = PriorConfig(
        branch=GammaSpec(float(merged["branch_prior_shape"]), float(merged["branch_prior_rate"])),
        kappa=GammaSpec(float(merged["kappa_prior_shape"]), float(merged["kappa_prior_rate"])),
    )
    priors.rho.concentration[...] = float(merged["rho_prior_concentration"])
    priors.pi.concentration[...] = float(merged["pi_prior_concentration"])
    return TrainConfig(
        family=family,
        iterations=int(merged["iterations"]),
        sample_size=int(merged["sample_size"]),
        alpha_kl=float(merged["alpha_kl"]),
        learning_rate=float(merged["learning_rate"]),
        hidden=int(merged["hidden"]),
        temperature=float(merged["temperature"]),
        seed=int(merged["seed"]),
        priors=priors,
    )


def _write_trajectory(path: Path, records, seed: int, digest: str) -> None:
    lines = [_header_lines("#", seed, digest), "iteration,split,elbo,loglik,kl_qp\n"]
    for r in records:
        lines.append(f"{r.iteration},{r.split},{_fmt(r.elbo)},{_fmt(r.loglik)},{_fmt(r.kl_qp)}\n")
    path.write_text("".join(lines))


def run_train(cfg: dict[str, str], input_path: str, valid_path: str | None = None) -> dict[str, Path]:
    tc = train_config_from_config(cfg)
    out_dir = _output_dir(cfg)
    digest = config_hash(cfg)

    x = encode(parse_fasta(Path(input_path).read_text()))
    if valid_path is not None:
        tc.validation = encode(parse_fasta(Path(valid_path).read_text()))

    trajectory = out_dir / TRAJECTORY_FILE
    try:
        report = train(x, tc)
    except TrainingDivergedError as err:
        _write_trajectory(trajectory, err.records, tc.seed, digest)
        log.error("training aborted: %s (partial trajectory retained)", err)
        raise
    _write_trajectory(trajectory, report.records, tc.seed, digest)

    est = report.estimates
    lines = [_header_lines("#", tc.seed, digest)]
    lines.append(f"family={est.family}\n")
    lines.append(f"branch_lengths={_fmt_vec(est.branch_lengths)}\n")
    if est.kappa is not None:
        lines.append(f"kappa={_fmt(est.kappa)}\n")
    if est.rho is not None:
        lines.append(f"rho={_fmt_vec(est.rho)}\n")
        lines.append(f"pi={_fmt_vec(est.pi)}\n")
    estimates = out_dir / ESTIMATES_FILE
    estimates.write_text("".join(lines))
    log.info("trained %s for %d iterations in %.1fs", tc.family, tc.iterations, report.duration_seconds)
    return {"trajectory": trajectory, "estimates": estimates}


def read_key_value_file(path: Path) -> dict[str, str]:
    out: dict[str, str] = {}
    for raw in path.read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def _metric_row(group: str, est: np.ndarray, actual: np.ndarray) -> str:
    dist = euclidean(est, actual)
    try:
        corr, pval = pearson(est, actual)
        return f"{group},{_fmt(dist)},{_fmt(corr)},{_fmt(pval)},\n"
    except MetricsError as err:
        log.warning("pearson undefined for group %s: %s", group, err)
        return f"{group},{_fmt(dist)},,,\n"


def run_evaluate(estimates_path: str, manifest_path: str, output: str | None = None) -> Path:
    est_file = Path(estimates_path)
    man_file = Path(manifest_path)
    if not est_file.is_file():
        raise ConfigError(f"estimates file does not exist: {est_file}")
    if not man_file.is_file():
        raise ConfigError(f"manifest file does not exist: {man_file}")
    est = read_key_value_file(est_file)
    man = read_key_value_file(man_file)
    family = _require(est, "family").upper()
    out_path = Path(output) if output is not None else est_file.parent / METRICS_FILE

    digest = config_hash({**{f"est.{k}": v for k, v in est.items()},
                          **{f"man.{k}": v for k, v in man.items()}})
    rows = [_header_lines("#", int(man.get("seed", "0")), digest)]
    rows.append("group,dist,corr,pval,ratio\n")
    est_b = _floats(_require(est, "branch_lengths"), "branch_lengths")
    man_b = _floats(_require(man, "branch_lengths"), "branch_lengths")
    if est_b.shape != man_b.shape:
        raise ConfigError("branch length arrays differ in length")
    rows.append(_metric_row("branches", est_b, man_b))
    if family == GTR:
        rows.append(_metric_row("rates", _floats(_require(est, "rho"), "rho"),
                                _floats(_require(man, "rho"), "rho")))
        rows.append(_metric_row("frequencies", _floats(_require(est, "pi"), "pi"),
                                _floats(_require(man, "pi"), "pi")))
    elif family == K80:
        ratio = kappa_ratio(float(_require(est, "kappa")), float(_require(man, "kappa")))
        rows.append(f"kappa_ratio,,,,{_fmt(ratio)}\n")
    out_path.write_text("".join(rows))
    return out_path


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="substvi", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="generate a ground-truth alignment")
    p_sim.add_argument("--config", required=True)
    p_sim.add_argument("--seed", type=int, default=None, help="override the config seed")

    p_train = sub.add_parser("train", help="fit the variational model to an alignment")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--input", required=True, help="training alignment (FASTA)")
    p_train.add_argument("--valid", default=None, help="validation alignment (FASTA)")

    p_eval = sub.add_parser("evaluate", help="score estimates against a manifest")
    p_eval.add_argument("--estimates", required=True)
    p_eval.add_argument("--manifest", required=True)
    p_eval.add_argument("--output", default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("SUBSTVI_LOG", "WARNING").upper())
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            cfg_path = Path(args.config)
            if not cfg_path.is_file():
                raise ConfigError(f"config file does not exist: {cfg_path}")
            cfg = parse_config(cfg_path.read_text(), _SIMULATE_KEYS)
            if args.seed is not None:
                cfg["seed"] = str(args.seed)
            run_simulate(cfg)
        elif args.command == "train":
            cfg_path = Path(args.config)
            if not cfg_path.is_file():
                raise ConfigError(f"config file does not exist: {cfg_path}")
            in_path = Path(args.input)
            if not in_path.is_file():
                raise ConfigError(f"input alignment does not exist: {in_path}")
            if args.valid is not None and not Path(args.valid).is_file():
                raise ConfigError(f"validation alignment does not exist: {args.valid}")
            cfg = parse_config(cfg_path.read_text(), _TRAIN_KEYS)
            run_train(cfg, args.input, args.valid)
        else:
            run_evaluate(args.estimates, args.manifest, args.output)
    except (ConfigError, AlignmentError, ModelError, MetricsError, DistributionError, OSError) as err:
        print(f"substvi: error: {err}", file=sys.stderr)
        return 1
    except TrainingDivergedError as err:
        print(f"substvi: error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
