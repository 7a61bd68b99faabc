"""Command-line harness: configuration files, orchestration and artifacts.

Subcommands
-----------
simulate            draw a replicated dataset and write the dataset CSV
fit                 maximize the pairwise likelihood and write the sandwich fit JSON
sample              run one chain and write trace CSV + JSON sidecar
coverage            replicated coverage study -> report CSV, moments CSV, manifest
lr-compare          replicated LR comparison -> scatter CSV, manifest
check-asymptotics   sandwich trace inequality and chain-vs-predicted covariances

Every run is deterministic given (config, seed); artifacts are written with
full-precision floats so re-runs are byte-identical (the manifest's timing
block is the one intentionally volatile piece).
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__, coords
from .adjust import PriorSpec, build_posterior
from .diagnostics import (
    CoverageConfig,
    LrConfig,
    coverage_experiment,
    density_table,
    lr_scatter,
)
from .gp_model import (
    GpParams,
    PairwiseLikelihood,
    ReplicateData,
    SiteLayout,
    load_dataset,
    save_dataset,
    simulate_gp,
)
from .samplers import BlockPartition, adjusted_mh, save_trace
from .sandwich import fit_sandwich


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one reproduction run needs; round-trips through INI text."""

    scenario: str = "omega3"
    mu: float = 0.0
    tau: float = 1.0
    omega: float = 3.0
    k_sites: int = 20
    n_replicates: int = 50
    interval_lo: float = 0.0
    interval_hi: float = 20.0
    prior: PriorSpec = field(default_factory=PriorSpec)
    sampler: str = "mh"
    adjustment: str = "curvature"
    partition: str = "mu|tau|omega"
    iterations: int = 20_000
    burn_in: int = 2_000
    thinning: int = 1
    replicates: int = 200
    seed: int = 20260809
    output_dir: str = "out"
    workers: int | None = None

    def theta0(self) -> GpParams:
        return GpParams(mu=self.mu, tau=self.tau, omega=self.omega)

    def to_config_text(self) -> str:
        parser = configparser.ConfigParser()
        parser["scenario"] = {
            "name": self.scenario,
            "mu": repr(self.mu),
            "tau": repr(self.tau),
            "omega": repr(self.omega),
            "k_sites": str(self.k_sites),
            "n_replicates": str(self.n_replicates),
            "interval_lo": repr(self.interval_lo),
            "interval_hi": repr(self.interval_hi),
        }
        parser["priors"] = {
            "mu_mean": repr(self.prior.mu_mean),
            "mu_var": repr(self.prior.mu_var),
            "tau_shape": repr(self.prior.tau_shape),
            "tau_scale": repr(self.prior.tau_scale),
            "omega_shape": repr(self.prior.omega_shape),
            "omega_scale": repr(self.prior.omega_scale),
        }
        run = {
            "sampler": self.sampler,
            "adjustment": self.adjustment,
            "partition": self.partition,
            "iterations": str(self.iterations),
            "burn_in": str(self.burn_in),
            "thinning": str(self.thinning),
            "replicates": str(self.replicates),
            "seed": str(self.seed),
            "output_dir": self.output_dir,
        }
        if self.workers is not None:
            run["workers"] = str(self.workers)
        parser["run"] = run
        import io

        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    @classmethod
    def from_config_text(cls, text: str, source: str = "<config>") -> "ExperimentConfig":
        parser = configparser.ConfigParser()
        try:
            parser.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc

        def need(section: str):
            if not parser.has_section(section):
                raise ConfigError(f"{source}: missing [{section}] section")
            return parser[section]

        scen, priors, run = need("scenario"), need("priors"), need("run")
        try:
            cfg = cls(
                scenario=scen.get("name", "custom"),
                mu=float(scen["mu"]),
                tau=float(scen["tau"]),
                omega=float(scen["omega"]),
                k_sites=int(scen["k_sites"]),
                n_replicates=int(scen["n_replicates"]),
                interval_lo=float(scen["interval_lo"]),
                interval_hi=float(scen["interval_hi"]),
                prior=PriorSpec(
                    mu_mean=float(priors["mu_mean"]),
                    mu_var=float(priors["mu_var"]),
                    tau_shape=float(priors["tau_shape"]),
                    tau_scale=float(priors["tau_scale"]),
                    omega_shape=float(priors["omega_shape"]),
                    omega_scale=float(priors["omega_scale"]),
                ),
                sampler=run["sampler"],
                adjustment=run["adjustment"],
                partition=run.get("partition", "mu|tau|omega"),
                iterations=int(run["iterations"]),
                burn_in=int(run["burn_in"]),
                thinning=int(run.get("thinning", "1")),
                replicates=int(run["replicates"]),
                seed=int(run["seed"]),
                output_dir=run.get("output_dir", "out"),
                workers=int(run["workers"]) if "workers" in run else None,
            )
        except KeyError as exc:
            raise ConfigError(f"{source}: missing key {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"{source}: {exc}") from exc
        return cfg

    @classmethod
    def from_config_file(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        return cls.from_config_text(path.read_text(), source=str(path))


SCENARIOS = {
    "omega3": ExperimentConfig(scenario="omega3", omega=3.0),
    "omega15": ExperimentConfig(scenario="omega15", omega=1.5),
    "twoblock": ExperimentConfig(
        scenario="twoblock",
        omega=3.0,
        sampler="adaptive-gibbs",
        adjustment="curvature",
        partition="mu|tau,omega",
        replicates=100,
    ),
}


def _resolve_config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        cfg = ExperimentConfig.from_config_file(args.config)
    else:
        name = getattr(args, "scenario", None) or "omega3"
        if name not in SCENARIOS:
            raise ConfigError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")
        cfg = SCENARIOS[name]
    overrides = {}
    for key in ("sampler", "adjustment", "partition", "replicates", "seed", "iterations",
                "burn_in", "thinning", "output_dir", "workers"):
        value = getattr(args, key.replace("-", "_"), None)
        if value is not None:
            overrides[key] = value
    if overrides:
        cfg = replace(cfg, **overrides)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.replicates < 1:
        raise ConfigError(f"[run] replicates must be >= 1, got {cfg.replicates}")
    if cfg.iterations <= cfg.burn_in:
        raise ConfigError(
            f"[run] iterations ({cfg.iterations}) must exceed burn_in ({cfg.burn_in})"
        )
    if cfg.k_sites < 2:
        raise ConfigError(f"[scenario] k_sites must be >= 2, got {cfg.k_sites}")
    if cfg.n_replicates < 1:
        raise ConfigError(f"[scenario] n_replicates must be >= 1, got {cfg.n_replicates}")
    if not cfg.interval_lo < cfg.interval_hi:
        raise ConfigError("[scenario] interval_lo must be below interval_hi")
    try:
        cfg.theta0()
        BlockPartition.from_spec(cfg.partition)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(cfg.to_config_text().encode()).hexdigest()


def _write_manifest(path: Path, cfg: ExperimentConfig, results: dict, artifacts: list,
                    wall_time: float) -> None:
    base = path.parent
    rel = []
    for artifact in artifacts:
        artifact = Path(artifact)
        try:
            rel.append(str(artifact.relative_to(base)))
        except ValueError:
            rel.append(str(artifact))
    payload = {
        "config": json.loads(json.dumps(asdict(cfg))),
        "config_sha256": _config_hash(cfg),
        "versions": {
            "clbayes": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": sys.version.split()[0],
        },
        "results": results,
        "artifacts": sorted(rel),
        "timing": {"wall_time_s": wall_time, "created_unix": time.time()},
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# -- subcommands ---------------------------------------------------------------


def _cmd_simulate(args) -> int:
    params = GpParams(mu=args.mu, tau=args.tau, omega=args.omega)
    if args.layout:
        layout = SiteLayout(np.array([float(tok) for tok in args.layout.split(",")]))
    else:
        lo, hi = (float(tok) for tok in args.interval.split(","))
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(args.seed, 0)))
        layout = SiteLayout(rng.uniform(lo, hi, args.k_sites))
    data = simulate_gp(params, layout, args.n, np.random.SeedSequence(entropy=(args.seed, 1)))
    save_dataset(data, args.out)
    print(f"wrote {args.n} x {layout.k_sites} dataset to {args.out}")
    return 0


def _cmd_fit(args) -> int:
    data = load_dataset(args.data)
    fit = fit_sandwich(PairwiseLikelihood(data), seed=args.seed)
    fit.save_json(args.out)
    lambdas = ", ".join(f"{v:.4f}" for v in fit.lambdas)
    print(f"theta_hat (natural): {fit.params}")
    print(f"lambdas: ({lambdas})  k: {fit.k:.4f}  tr(H^-1 J): {fit.trace_hinv_j:.4f}")
    print(f"wrote sandwich fit to {args.out}")
    return 0


def _cmd_sample(args) -> int:
    data = load_dataset(args.data)
    cfg = CoverageConfig(
        theta0=GpParams(mu=0.0, tau=1.0, omega=3.0),  # unused by the chain runner
        sampler=args.sampler,
        adjustment=args.adjustment,
        partition=args.partition,
        n_iter=args.iterations,
        burn_in=args.burn_in,
        thinning=args.thinning,
        replicates=1,
        seed=args.seed,
    )
    from .diagnostics import _run_cell_chain

    trace, fit = _run_cell_chain(cfg, data, args.seed)
    prefix = Path(args.out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    fit_path = None
    if fit is not None:
        fit_path = f"{prefix}_fit.json"
        fit.save_json(fit_path)
    save_trace(trace, f"{prefix}_trace.csv", f"{prefix}_trace.json", fit_reference=fit_path)
    if args.density_csv:
        with open(f"{prefix}_density.csv", "w") as fh:
            fh.write("param,x,density\n")
            for p_idx, name in enumerate(("mu", "tau", "omega")):
                grid, dens = density_table(trace, p_idx)
                for x, d in zip(grid, dens):
                    fh.write(f"{name},{float(x)!r},{float(d)!r}\n")
    rates = ", ".join(f"{k}={v:.2%}" for k, v in trace.accept_rate.items())
    print(f"stored {trace.n_stored} draws; acceptance: {rates}; skipped: {trace.skipped}")
    return 0


def _coverage_config(cfg: ExperimentConfig, artifact_dir: str | None) -> CoverageConfig:
    return CoverageConfig(
        theta0=cfg.theta0(),
        k_sites=cfg.k_sites,
        n_replicates=cfg.n_replicates,
        interval=(cfg.interval_lo, cfg.interval_hi),
        prior=cfg.prior,
        sampler=cfg.sampler,
        adjustment=cfg.adjustment,
        partition=cfg.partition,
        n_iter=cfg.iterations,
        burn_in=cfg.burn_in,
        thinning=cfg.thinning,
        replicates=cfg.replicates,
        seed=cfg.seed,
        scenario=cfg.scenario,
        workers=cfg.workers,
        artifact_dir=artifact_dir,
    )


def _cmd_coverage(args) -> int:
    cfg = _resolve_config(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.monotonic()
    run_cfg = _coverage_config(cfg, None if args.no_replicate_artifacts else str(out / "replicates"))
    report = coverage_experiment(run_cfg)
    report_path = out / "coverage.csv"
    report.to_csv(report_path)
    moments_path = out / "moments.csv"
    report.moments_to_csv(moments_path)
    artifacts = [report_path, moments_path]
    if run_cfg.artifact_dir:
        artifacts.extend(sorted(Path(run_cfg.artifact_dir).glob("rep*")))
    results = {
        "completed": report.completed,
        "failed": len(report.failures),
        "failures": [[r, msg] for r, msg in report.failures],
        "skipped_updates": report.extras.get("skipped_updates", 0),
        "coverage_at_95": {
            name: report.coverage_for(i, 0.95) if 0.95 in report.alphas else None
            for i, name in enumerate(("mu", "tau", "omega"))
        },
        "mean_corr_tau_omega": report.extras.get("mean_corr_tau_omega"),
        "ratio_coverage": report.extras.get("ratio_coverage"),
    }
    _write_manifest(out / "manifest.json", cfg, results, artifacts, time.monotonic() - started)
    for i, name in enumerate(("mu", "tau", "omega")):
        if 0.95 in report.alphas:
            cov = report.coverage_for(i, 0.95)
            se = report.se_for(i, 0.95)
            print(f"coverage[{name}] at 95%: {100 * cov:.1f}% (se {100 * se:.1f}, R={report.completed})")
    if report.failures:
        print(f"{len(report.failures)} replicate(s) failed and were excluded", file=sys.stderr)
    return 0 if report.completed > 0 else 1


def _cmd_lr_compare(args) -> int:
    cfg = _resolve_config(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.monotonic()
    lr_cfg = LrConfig(
        theta0=cfg.theta0(),
        k_sites=cfg.k_sites,
        n_replicates=args.n if args.n is not None else cfg.n_replicates,
        interval=(cfg.interval_lo, cfg.interval_hi),
        replicates=cfg.replicates,
        seed=cfg.seed,
        workers=cfg.workers,
    )
    result = lr_scatter(lr_cfg)
    scatter_path = out / "lr_scatter.csv"
    result.to_csv(scatter_path)
    results = {
        "correlation": result.correlation,
        "completed": len(result.rows),
        "failed": len(result.failures),
        "n_replicates": lr_cfg.n_replicates,
    }
    _write_manifest(out / "manifest.json", cfg, results, [scatter_path], time.monotonic() - started)
    print(f"LR correlation over {len(result.rows)} datasets (n={lr_cfg.n_replicates}): "
          f"{result.correlation:.3f}")
    return 0 if result.rows else 1


def _cmd_check_asymptotics(args) -> int:
    cfg = _resolve_config(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.monotonic()
    if args.data:
        data = load_dataset(args.data)
    else:
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(cfg.seed, 0)))
        layout = SiteLayout(rng.uniform(cfg.interval_lo, cfg.interval_hi, cfg.k_sites))
        data = simulate_gp(cfg.theta0(), layout, args.n or cfg.n_replicates,
                           np.random.SeedSequence(entropy=(cfg.seed, 1)))
    model = PairwiseLikelihood(data)
    fit = fit_sandwich(model)
    p = fit.p
    trace_ok = fit.trace_hinv_j >= p - 1e-6
    print(f"tr(H^-1 J) = {fit.trace_hinv_j:.4f} >= p = {p}: {trace_ok}")
    predictions = {
        "none": np.linalg.inv(fit.H) / fit.n,
        "magnitude": fit.trace_hinv_j / (fit.n * p) * np.linalg.inv(fit.H),
        "curvature": np.linalg.inv(fit.H) @ fit.J @ np.linalg.inv(fit.H) / fit.n,
    }
    cells = {}
    for kind, predicted in predictions.items():
        posterior_kind = "unadjusted" if kind == "none" else kind
        posterior = build_posterior(
            posterior_kind, model, cfg.prior, fit if posterior_kind != "unadjusted" else None
        )
        trace = adjusted_mh(
            posterior,
            coords.from_working(posterior.mode),
            n_iter=cfg.iterations,
            burn_in=cfg.burn_in,
            seed=cfg.seed,
        )
        working = np.column_stack(
            [trace.column(0), np.log(trace.column(1)), np.log(trace.column(2))]
        )
        observed = np.cov(working, rowvar=False)
        rel_err = float(np.linalg.norm(observed - predicted) / np.linalg.norm(predicted))
        cells[kind] = {
            "frobenius_rel_err": rel_err,
            "predicted": predicted.tolist(),
            "observed": observed.tolist(),
        }
        print(f"{kind:>10}: chain vs predicted covariance, relative Frobenius error {rel_err:.3f}")
    payload = {
        "trace_hinv_j": fit.trace_hinv_j,
        "p": p,
        "trace_inequality_satisfied": bool(trace_ok),
        "cells": cells,
    }
    report_path = out / "asymptotics.json"
    report_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    _write_manifest(out / "manifest.json", cfg, {"trace_inequality": bool(trace_ok)},
                    [report_path], time.monotonic() - started)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clbayes",
        description="Bayesian inference with adjusted composite likelihoods",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="simulate a replicated dataset")
    sim.add_argument("--mu", type=float, default=0.0)
    sim.add_argument("--tau", type=float, default=1.0)
    sim.add_argument("--omega", type=float, default=3.0)
    sim.add_argument("--k-sites", type=int, default=20)
    sim.add_argument("--interval", default="0,20", help="lo,hi for uniform site locations")
    sim.add_argument("--layout", default=None, help="explicit comma-separated site locations")
    sim.add_argument("--n", type=int, default=50)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", required=True)
    sim.set_defaults(func=_cmd_simulate)

    fit_p = sub.add_parser("fit", help="fit the sandwich information on a dataset")
    fit_p.add_argument("data")
    fit_p.add_argument("--seed", type=int, default=0)
    fit_p.add_argument("--out", required=True)
    fit_p.set_defaults(func=_cmd_fit)

    sample = sub.add_parser("sample", help="run one MCMC chain on a dataset")
    sample.add_argument("data")
    sample.add_argument("--sampler", choices=["mh", "overall-gibbs", "adaptive-gibbs", "full-gibbs"],
                        default="mh")
    sample.add_argument("--adjustment", choices=["none", "magnitude", "curvature", "full"],
                        default="curvature")
    sample.add_argument("--partition", default="mu|tau|omega")
    sample.add_argument("--iterations", type=int, default=20_000)
    sample.add_argument("--burn-in", type=int, default=2_000)
    sample.add_argument("--thinning", type=int, default=1)
    sample.add_argument("--seed", type=int, default=0)
    sample.add_argument("--out-prefix", required=True)
    sample.add_argument("--density-csv", action="store_true",
                        help="also write KDE density curves per parameter")
    sample.set_defaults(func=_cmd_sample)

    def add_run_args(p):
        p.add_argument("--scenario", default=None, help=f"one of {sorted(SCENARIOS)}")
        p.add_argument("--config", default=None, help="experiment config file")
        p.add_argument("--sampler", default=None,
                       choices=["mh", "overall-gibbs", "adaptive-gibbs", "full-gibbs"])
        p.add_argument("--adjustment", default=None,
                       choices=["none", "magnitude", "curvature", "full"])
        p.add_argument("--partition", default=None)
        p.add_argument("--replicates", type=int, default=None)
        p.add_argument("--iterations", type=int, default=None)
        p.add_argument("--burn-in", type=int, default=None, dest="burn_in")
        p.add_argument("--thinning", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--output-dir", default=None, dest="output_dir")

    cov = sub.add_parser("coverage", help="replicated coverage study")
    add_run_args(cov)
    cov.add_argument("--no-replicate-artifacts", action="store_true",
                     help="skip per-replicate fit/trace files")
    cov.set_defaults(func=_cmd_coverage)

    lr = sub.add_parser("lr-compare", help="full vs curvature-adjusted LR statistics")
    add_run_args(lr)
    lr.add_argument("--n", type=int, default=None, help="replicates per dataset (data size)")
    lr.set_defaults(func=_cmd_lr_compare)

    chk = sub.add_parser("check-asymptotics", help="trace inequality and covariance checks")
    add_run_args(chk)
    chk.add_argument("--data", default=None, help="existing dataset CSV (else simulate)")
    chk.add_argument("--n", type=int, default=None, help="replicates when simulating")
    chk.set_defaults(func=_cmd_check_asymptotics)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
