"""Trace summaries and replicated calibration experiments.

Turns chains into the evaluation artifacts of the calibration study:
equal-tailed credible intervals, empirical coverage tables over a grid of
credible levels, centered posterior moments, and likelihood-ratio
comparison tables (full versus adjusted composite statistics at the
generating parameter).

Coverage replicates are independent and run on a process pool; aggregation
is associative, so reports do not depend on completion order.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import coords
from .adjust import PriorSpec, build_posterior
from .gp_model import (
    CovarianceNotPD,
    DegeneratePair,
    FullLikelihood,
    GpParams,
    PairwiseLikelihood,
    ReplicateData,
    SiteLayout,
)
from .samplers import (
    BlockPartition,
    ChainTrace,
    SamplerStuck,
    adaptive_gibbs,
    adjusted_mh,
    full_conjugate_gibbs,
    overall_gibbs,
    save_trace,
)
from .sandwich import (
    NotPositiveDefinite,
    OptimizationError,
    SingularJ,
    default_init,
    fit_sandwich,
    maximize_composite,
)

REPLICATE_ERRORS = (
    OptimizationError,
    SamplerStuck,
    CovarianceNotPD,
    DegeneratePair,
    SingularJ,
    NotPositiveDefinite,
    np.linalg.LinAlgError,
)

DEFAULT_ALPHAS = (0.5, 0.8, 0.9, 0.95)
SAMPLERS = ("mh", "overall-gibbs", "adaptive-gibbs", "full-gibbs")
ADJUSTMENTS = ("none", "magnitude", "curvature", "full")


def credible_interval(trace, param_index: int, alpha: float) -> tuple[float, float]:
    """Equal-tailed empirical interval [(1-alpha)/2, (1+alpha)/2] quantiles."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"credible level must lie in (0, 1), got {alpha}")
    draws = trace.column(param_index) if isinstance(trace, ChainTrace) else np.asarray(trace)
    if draws.size == 0:
        raise ValueError("empty trace")
    lo, hi = np.quantile(draws, [(1.0 - alpha) / 2.0, (1.0 + alpha) / 2.0])
    return float(lo), float(hi)


def split_rhat(chains) -> float:
    """Split-chain potential scale reduction factor for one coordinate."""
    halves = []
    for chain in chains:
        chain = np.asarray(chain, dtype=float)
        half = chain.size // 2
        halves.append(chain[:half])
        halves.append(chain[half : 2 * half])
    draws = np.array(halves)
    m, length = draws.shape
    chain_means = draws.mean(axis=1)
    within = draws.var(axis=1, ddof=1).mean()
    between = length * chain_means.var(ddof=1)
    var_hat = (length - 1) / length * within + between / length
    return float(np.sqrt(var_hat / within))


@dataclass(frozen=True, eq=False)
class MomentSummary:
    """Mean, variance and standardized skewness/kurtosis per parameter."""

    mean: np.ndarray
    variance: np.ndarray
    skewness: np.ndarray
    kurtosis: np.ndarray

    def __post_init__(self) -> None:
        for name in ("mean", "variance", "skewness", "kurtosis"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.any(self.variance < 0):
            raise ValueError("variance cannot be negative")
        finite = np.isfinite(self.skewness) & np.isfinite(self.kurtosis)
        if np.any(self.kurtosis[finite] < 1.0 + self.skewness[finite] ** 2 - 1e-10):
            raise ValueError("kurtosis must be at least 1 + skewness^2")


def moment_summary(trace) -> MomentSummary:
    """First four centered moments of each trace column (population
    estimators, so the Pearson inequality holds exactly)."""
    states = trace.states if isinstance(trace, ChainTrace) else np.atleast_2d(np.asarray(trace))
    mean = states.mean(axis=0)
    centered = states - mean
    variance = (centered**2).mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        skewness = (centered**3).mean(axis=0) / variance**1.5
        kurtosis = (centered**4).mean(axis=0) / variance**2
    return MomentSummary(mean=mean, variance=variance, skewness=skewness, kurtosis=kurtosis)


def density_table(trace, param_index: int, n_points: int = 201) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian KDE of one marginal, evaluated on an even grid."""
    from scipy.stats import gaussian_kde

    draws = trace.column(param_index) if isinstance(trace, ChainTrace) else np.asarray(trace)
    grid = np.linspace(draws.min(), draws.max(), n_points)
    return grid, gaussian_kde(draws)(grid)


# -- coverage experiments -----------------------------------------------------


@dataclass(frozen=True)
class CoverageConfig:
    """One coverage-study cell: scenario, sampler/adjustment and MCMC sizes."""

    theta0: GpParams = GpParams(mu=0.0, tau=1.0, omega=3.0)
    k_sites: int = 20
    n_replicates: int = 50
    interval: tuple[float, float] = (0.0, 20.0)
    prior: PriorSpec = field(default_factory=PriorSpec)
    sampler: str = "mh"
    adjustment: str = "curvature"
    partition: str = "mu|tau|omega"
    n_iter: int = 20_000
    burn_in: int = 2_000
    thinning: int = 1
    replicates: int = 200
    seed: int = 20260809
    alphas: tuple[float, ...] = DEFAULT_ALPHAS
    scenario: str = "omega3"
    workers: int | None = None
    artifact_dir: str | None = None

    def __post_init__(self) -> None:
        if self.sampler not in SAMPLERS:
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.adjustment not in ADJUSTMENTS:
            raise ValueError(f"unknown adjustment {self.adjustment!r}")
        if self.sampler == "full-gibbs" and self.adjustment != "full":
            raise ValueError("full-gibbs samples the full posterior; use adjustment='full'")
        if self.sampler == "adaptive-gibbs" and self.adjustment == "full":
            raise ValueError("adaptive-gibbs adjusts composite conditionals; 'full' does not apply")
        if self.replicates < 1:
            raise ValueError(f"need at least one replicate, got {self.replicates}")
        if not 0 < len(self.alphas) or any(not 0 < a < 1 for a in self.alphas):
            raise ValueError("alphas must lie strictly inside (0, 1)")


@dataclass(eq=False)
class CoverageReport:
    """Aggregated empirical coverage per parameter and credible level."""

    scenario: str
    sampler: str
    adjustment: str
    alphas: tuple[float, ...]
    hits: np.ndarray  # (3, len(alphas)) counts of theta0 inside the interval
    completed: int
    failures: list = field(default_factory=list)
    trace_hinv_j: list = field(default_factory=list)
    moments: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    @property
    def coverage(self) -> np.ndarray:
        return self.hits / max(self.completed, 1)

    def coverage_for(self, param_index: int, alpha: float) -> float:
        return float(self.coverage[param_index, self.alphas.index(alpha)])

    def se_for(self, param_index: int, alpha: float) -> float:
        c = self.coverage_for(param_index, alpha)
        return float(np.sqrt(c * (1.0 - c) / max(self.completed, 1)))

    def coverage_curve(self, param_index: int) -> tuple[np.ndarray, np.ndarray]:
        """Coverage as a function of the credible level, including the
        definitional endpoints (0, 0) and (1, 1)."""
        order = np.argsort(self.alphas)
        alphas = np.concatenate([[0.0], np.asarray(self.alphas)[order], [1.0]])
        cov = np.concatenate([[0.0], self.coverage[param_index, order], [1.0]])
        return alphas, cov

    def to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["scenario", "sampler", "adjustment", "param", "alpha", "coverage", "se", "R"])
            for p_idx, name in enumerate(("mu", "tau", "omega")):
                for alpha in self.alphas:
                    writer.writerow(
                        [
                            self.scenario,
                            self.sampler,
                            self.adjustment,
                            name,
                            repr(float(alpha)),
                            repr(self.coverage_for(p_idx, alpha)),
                            repr(self.se_for(p_idx, alpha)),
                            self.completed,
                        ]
                    )

    def moments_to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["replicate", "param", "mean", "variance", "skewness", "kurtosis"])
            for r, summary in self.moments:
                for p_idx, name in enumerate(("mu", "tau", "omega")):
                    writer.writerow(
                        [
                            r,
                            name,
                            repr(float(summary.mean[p_idx])),
                            repr(float(summary.variance[p_idx])),
                            repr(float(summary.skewness[p_idx])),
                            repr(float(summary.kurtosis[p_idx])),
                        ]
                    )


def _replicate_seed(master: int, replicate: int, stream: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=(master, replicate, stream))


def _simulate_replicate(cfg, replicate: int) -> ReplicateData:
    rng = np.random.default_rng(_replicate_seed(cfg.seed, replicate, 0))
    lo, hi = cfg.interval
    layout = SiteLayout(locations=rng.uniform(lo, hi, cfg.k_sites))
    from .gp_model import simulate_gp

    return simulate_gp(cfg.theta0, layout, cfg.n_replicates, _replicate_seed(cfg.seed, replicate, 1))


def _run_cell_chain(cfg: CoverageConfig, data: ReplicateData, chain_seed):
    """Fit whatever the cell needs and run one chain. Returns (trace, fit or None)."""
    prior = cfg.prior
    if cfg.sampler == "full-gibbs":
        trace = full_conjugate_gibbs(
            data,
            prior,
            init=default_init(data),
            n_iter=cfg.n_iter,
            burn_in=cfg.burn_in,
            seed=chain_seed,
            thinning=cfg.thinning,
        )
        return trace, None

    pair_model = PairwiseLikelihood(data)
    if cfg.sampler == "adaptive-gibbs":
        fit = fit_sandwich(pair_model)
        kind = "none" if cfg.adjustment == "none" else cfg.adjustment
        trace = adaptive_gibbs(
            pair_model,
            prior,
            BlockPartition.from_spec(cfg.partition),
            kind,
            fit.params,
            n_iter=cfg.n_iter,
            burn_in=cfg.burn_in,
            seed=chain_seed,
            thinning=cfg.thinning,
        )
        return trace, fit

    if cfg.adjustment == "full":
        posterior = build_posterior("full", FullLikelihood(data), prior)
        fit = None
    elif cfg.adjustment == "none":
        posterior = build_posterior("unadjusted", pair_model, prior)
        fit = None
    else:
        fit = fit_sandwich(pair_model)
        posterior = build_posterior(cfg.adjustment, pair_model, prior, fit)
    init = coords.from_working(posterior.mode)
    if cfg.sampler == "mh":
        trace = adjusted_mh(
            posterior,
            init,
            n_iter=cfg.n_iter,
            burn_in=cfg.burn_in,
            seed=chain_seed,
            thinning=cfg.thinning,
        )
    else:
        trace = overall_gibbs(
            posterior,
            BlockPartition.from_spec(cfg.partition),
            init,
            n_iter=cfg.n_iter,
            burn_in=cfg.burn_in,
            seed=chain_seed,
            thinning=cfg.thinning,
        )
    return trace, fit


def _coverage_worker(args):
    cfg, replicate = args
    try:
        data = _simulate_replicate(cfg, replicate)
        chain_seed = int(_replicate_seed(cfg.seed, replicate, 2).generate_state(1)[0])
        trace, fit = _run_cell_chain(cfg, data, chain_seed)
    except REPLICATE_ERRORS as exc:
        return replicate, None, f"{type(exc).__name__}: {exc}"

    theta0 = cfg.theta0.to_vector()
    hits = np.zeros((3, len(cfg.alphas)), dtype=int)
    for a_idx, alpha in enumerate(cfg.alphas):
        for p_idx in range(3):
            lo, hi = credible_interval(trace, p_idx, alpha)
            hits[p_idx, a_idx] = int(lo <= theta0[p_idx] <= hi)
    tau_draws = trace.column(1)
    omega_draws = trace.column(2)
    lo, hi = credible_interval(tau_draws / omega_draws, 0, 0.95)
    record = {
        "hits": hits,
        "moments": moment_summary(trace),
        "trace_hinv_j": float(fit.trace_hinv_j) if fit is not None else None,
        "corr_tau_omega": float(np.corrcoef(tau_draws, omega_draws)[0, 1]),
        "ratio_covered": int(lo <= theta0[1] / theta0[2] <= hi),
        "skipped": trace.skipped,
    }
    if cfg.artifact_dir is not None:
        out = Path(cfg.artifact_dir)
        out.mkdir(parents=True, exist_ok=True)
        tag = f"rep{replicate:04d}"
        save_trace(
            trace,
            out / f"{tag}_trace.csv",
            out / f"{tag}_trace.json",
            fit_reference=f"{tag}_fit.json" if fit is not None else None,
        )
        if fit is not None:
            fit.save_json(out / f"{tag}_fit.json")
    return replicate, record, None


def _n_workers(requested: int | None) -> int:
    if requested is not None:
        return max(1, requested)
    env = os.environ.get("CLBAYES_WORKERS")
    if env:
        return max(1, int(env))
    return max(1, os.cpu_count() or 1)


def _map_replicates(worker, args_list, workers: int):
    if workers <= 1:
        return [worker(args) for args in args_list]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(worker, args_list, chunksize=1))


def coverage_experiment(cfg: CoverageConfig) -> CoverageReport:
    """Run the replicated coverage study described by ``cfg``.

    Each replicate draws a fresh uniform site layout and dataset at
    ``theta0``, fits whatever the sampler needs, runs one chain and tests
    whether each parameter's equal-tailed interval contains the truth at
    every level in ``cfg.alphas``.  Failed replicates are excluded and
    reported with their error messages.
    """
    results = _map_replicates(
        _coverage_worker,
        [(cfg, r) for r in range(cfg.replicates)],
        _n_workers(cfg.workers),
    )
    results.sort(key=lambda item: item[0])
    hits = np.zeros((3, len(cfg.alphas)), dtype=int)
    completed = 0
    failures = []
    traces = []
    moments = []
    corr = []
    ratio_hits = 0
    skipped = 0
    for replicate, record, error in results:
        if error is not None:
            failures.append((replicate, error))
            continue
        completed += 1
        hits += record["hits"]
        moments.append((replicate, record["moments"]))
        corr.append(record["corr_tau_omega"])
        ratio_hits += record["ratio_covered"]
        skipped += record["skipped"]
        if record["trace_hinv_j"] is not None:
            traces.append(record["trace_hinv_j"])
    return CoverageReport(
        scenario=cfg.scenario,
        sampler=cfg.sampler,
        adjustment=cfg.adjustment,
        alphas=tuple(cfg.alphas),
        hits=hits,
        completed=completed,
        failures=failures,
        trace_hinv_j=traces,
        moments=moments,
        extras={
            "mean_corr_tau_omega": float(np.mean(corr)) if corr else float("nan"),
            "ratio_coverage": ratio_hits / completed if completed else float("nan"),
            "skipped_updates": skipped,
        },
    )


# -- likelihood-ratio comparison ----------------------------------------------


@dataclass(frozen=True)
class LrConfig:
    """Replicated computation of LR statistics at the generating parameter.

    By default one site layout is drawn from the seed and shared by all
    datasets (a single spatial design observed repeatedly); with
    ``shared_layout=False`` every dataset redraws its layout.  The
    population correlation of the full and curvature-adjusted statistics
    equals the layout's mean relative efficiency tr(I^-1 H J^-1 H) / p, so
    the layout choice materially affects the answer.
    """

    theta0: GpParams = GpParams(mu=0.0, tau=1.0, omega=3.0)
    k_sites: int = 20
    n_replicates: int = 50
    interval: tuple[float, float] = (0.0, 20.0)
    replicates: int = 200
    seed: int = 20260809
    shared_layout: bool = True
    workers: int | None = None

    def __post_init__(self) -> None:
        if self.replicates < 2:
            raise ValueError("need at least two replicates for a correlation")


def _lr_worker(args):
    cfg, replicate = args
    try:
        layout_stream = 0 if cfg.shared_layout else replicate
        rng = np.random.default_rng(_replicate_seed(cfg.seed, layout_stream, 0))
        lo, hi = cfg.interval
        layout = SiteLayout(locations=rng.uniform(lo, hi, cfg.k_sites))
        from .gp_model import simulate_gp

        data = simulate_gp(
            cfg.theta0, layout, cfg.n_replicates, _replicate_seed(cfg.seed, replicate, 1)
        )
        pair_model = PairwiseLikelihood(data)
        full_model = FullLikelihood(data)
        fit = fit_sandwich(pair_model)
        mle_full = maximize_composite(full_model, default_init(data))
        w0 = coords.to_working(cfg.theta0.to_vector())
        lam_full = 2.0 * (
            full_model.loglik(mle_full.to_vector()) - full_model.loglik(cfg.theta0.to_vector())
        )
        lc_hat = pair_model.loglik_w(fit.theta_hat)
        lam_unadj = 2.0 * (lc_hat - pair_model.loglik_w(w0))
        w0_star = fit.theta_hat + fit.C @ (w0 - fit.theta_hat)
        lam_curv = 2.0 * (lc_hat - pair_model.loglik_w(w0_star))
        lam_magn = fit.k * lam_unadj
        return replicate, {
            "lambda_full": float(lam_full),
            "lambda_curv": float(lam_curv),
            "lambda_magn": float(lam_magn),
            "lambda_unadj": float(lam_unadj),
            "k": float(fit.k),
            "trace_hinv_j": float(fit.trace_hinv_j),
        }, None
    except REPLICATE_ERRORS as exc:
        return replicate, None, f"{type(exc).__name__}: {exc}"


@dataclass(eq=False)
class LrScatterResult:
    rows: list  # (replicate, lambda_full, lambda_curv)
    correlation: float
    table: dict
    failures: list

    def to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["replicate", "lambda_full", "lambda_curv"])
            for replicate, lam_full, lam_curv in self.rows:
                writer.writerow([replicate, repr(lam_full), repr(lam_curv)])


def lr_batch(cfg: LrConfig) -> tuple[dict, list]:
    """Per-replicate LR statistics (full, curvature, magnitude, unadjusted)
    plus fit diagnostics; returns (column table, failures)."""
    results = _map_replicates(
        _lr_worker, [(cfg, r) for r in range(cfg.replicates)], _n_workers(cfg.workers)
    )
    results.sort(key=lambda item: item[0])
    table: dict = {
        "replicate": [],
        "lambda_full": [],
        "lambda_curv": [],
        "lambda_magn": [],
        "lambda_unadj": [],
        "k": [],
        "trace_hinv_j": [],
    }
    failures = []
    for replicate, record, error in results:
        if error is not None:
            failures.append((replicate, error))
            continue
        table["replicate"].append(replicate)
        for key in ("lambda_full", "lambda_curv", "lambda_magn", "lambda_unadj", "k", "trace_hinv_j"):
            table[key].append(record[key])
    return table, failures


def lr_scatter(cfg: LrConfig) -> LrScatterResult:
    """Table of (full, curvature-adjusted) LR statistics and their Pearson
    correlation across replicated datasets."""
    table, failures = lr_batch(cfg)
    lam_full = np.array(table["lambda_full"])
    lam_curv = np.array(table["lambda_curv"])
    if lam_full.size < 2:
        raise RuntimeError("not enough successful replicates for a correlation")
    corr = float(np.corrcoef(lam_full, lam_curv)[0, 1])
    rows = list(zip(table["replicate"], table["lambda_full"], table["lambda_curv"]))
    return LrScatterResult(rows=rows, correlation=corr, table=table, failures=failures)
