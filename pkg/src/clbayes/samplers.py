"""MCMC samplers for adjusted composite posteriors.

Four samplers share the same trace contract:

* :func:`adjusted_mh`: Gaussian random-walk Metropolis-Hastings in working
  coordinates, proposal covariance ``s^2 * precision^-1`` with ``s`` tuned
  during burn-in only (frozen afterwards so the stationary law is exact).
* :func:`overall_gibbs`: Metropolis-within-Gibbs sweeps over a block
  partition, targeting the same frozen adjusted posterior.
* :func:`adaptive_gibbs`: per sweep and per block, re-maximizes the
  conditional composite likelihood, re-estimates the block-level sandwich
  matrices, re-adjusts (magnitude or curvature) and draws the block with an
  independence Metropolis-Hastings step centered at the restricted maximum.
* :func:`full_conjugate_gibbs`: exact conjugate draws for mu and tau under
  the full likelihood, with a random-walk step for omega.

All samplers consume a single seeded generator sequentially, so identical
inputs and seed give bit-identical traces on one platform.  Acceptance is
the standard rule: accept when log U <= log density difference.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import eigh as generalized_eigh

from . import coords
from .adjust import AdjustedPosterior, PriorSpec
from .gp_model import FullLikelihood, GpParams, PairwiseLikelihood, ReplicateData

logger = logging.getLogger(__name__)

STUCK_LIMIT = 1000
ADAPT_WINDOW = 200
ADAPT_LOW = 0.20
ADAPT_HIGH = 0.45
ADAPT_SHRINK = 0.7
ADAPT_GROW = 1.4
INDEP_INFLATE = 1.3

PARAM_NAMES = ("mu", "tau", "omega")


class SamplerStuck(RuntimeError):
    """No acceptance over STUCK_LIMIT consecutive proposals."""


@dataclass(frozen=True, eq=False)
class BlockPartition:
    """Ordered disjoint blocks of parameter indices covering {0, ..., p-1}."""

    blocks: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        blocks = tuple(tuple(int(i) for i in blk) for blk in self.blocks)
        flat = [i for blk in blocks for i in blk]
        if not flat or sorted(flat) != list(range(max(flat) + 1)):
            raise ValueError(f"blocks must partition {{0..p-1}} without overlap, got {blocks}")
        object.__setattr__(self, "blocks", blocks)

    @classmethod
    def scalar_blocks(cls) -> "BlockPartition":
        return cls(blocks=((0,), (1,), (2,)))

    @classmethod
    def single_block(cls) -> "BlockPartition":
        return cls(blocks=((0, 1, 2),))

    @classmethod
    def from_spec(cls, spec: str) -> "BlockPartition":
        """Parse e.g. ``"mu|tau,omega"`` or ``"0|1,2"`` (blocks separated
        by '|', coordinates within a block by ',')."""
        name_to_idx = {name: i for i, name in enumerate(PARAM_NAMES)}
        blocks = []
        for part in spec.split("|"):
            idxs = []
            for tok in part.split(","):
                tok = tok.strip()
                if tok in name_to_idx:
                    idxs.append(name_to_idx[tok])
                elif tok.isdigit():
                    idxs.append(int(tok))
                else:
                    raise ValueError(f"cannot parse partition token {tok!r} in {spec!r}")
            blocks.append(tuple(idxs))
        return cls(blocks=tuple(blocks))

    def label(self, block_index: int) -> str:
        return ",".join(PARAM_NAMES[i] for i in self.blocks[block_index])

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def max_block_size(self) -> int:
        return max(len(b) for b in self.blocks)


@dataclass(eq=False)
class ChainTrace:
    """Post-burn-in draws in natural coordinates plus acceptance bookkeeping."""

    states: np.ndarray
    sampler: str
    kind: str
    seed: int
    burn_in: int
    thinning: int
    accepts: dict = field(default_factory=dict)
    proposals: dict = field(default_factory=dict)
    skipped: int = 0

    def __post_init__(self) -> None:
        states = np.atleast_2d(np.asarray(self.states, dtype=float))
        if states.shape[0] < 1:
            raise ValueError("trace must store at least one state")
        if not np.all(np.isfinite(states)):
            raise ValueError("trace states must be finite")
        if np.any(states[:, 1] <= 0) or np.any(states[:, 2] <= 0):
            raise ValueError("stored states must lie in the parameter domain (tau, omega > 0)")
        if set(self.accepts) != set(self.proposals):
            raise ValueError("accept and proposal tallies must cover the same blocks")
        self.states = states

    @property
    def n_stored(self) -> int:
        return int(self.states.shape[0])

    @property
    def accept_rate(self) -> dict:
        return {
            key: (self.accepts[key] / self.proposals[key] if self.proposals[key] else 0.0)
            for key in self.accepts
        }

    def column(self, index: int) -> np.ndarray:
        return self.states[:, index]


def _as_natural_vector(init) -> np.ndarray:
    if isinstance(init, GpParams):
        return init.to_vector()
    vec = np.asarray(init, dtype=float)
    if vec.shape != (3,):
        raise ValueError(f"init must be a length-3 natural parameter vector, got {vec.shape}")
    return vec


def _to_chain_coords(posterior: AdjustedPosterior, init) -> np.ndarray:
    vec = _as_natural_vector(init)
    if vec[1] <= 0 or vec[2] <= 0:
        raise ValueError("init must lie in the parameter domain")
    return coords.to_working(vec) if posterior.coordinates == "unconstrained" else vec


def _to_natural(posterior_coordinates: str, x: np.ndarray) -> np.ndarray:
    return coords.from_working(x) if posterior_coordinates == "unconstrained" else np.array(x)


def adjusted_mh(
    posterior: AdjustedPosterior,
    init,
    proposal_scale: float | None = None,
    n_iter: int = 20_000,
    burn_in: int = 2_000,
    seed: int = 0,
    *,
    thinning: int = 1,
    proposal_cov: np.ndarray | None = None,
) -> ChainTrace:
    """Random-walk Metropolis-Hastings targeting the adjusted posterior.

    The proposal is N(0, s^2 V) with V the inverse curvature of the target
    at its mode (or ``proposal_cov`` when given); ``s`` starts at
    ``proposal_scale`` (default 2.38 / sqrt(p)) and is rescaled during
    burn-in toward a 20-45% acceptance rate, then frozen.
    """
    if n_iter <= burn_in:
        raise ValueError(f"need n_iter > burn_in, got {n_iter} <= {burn_in}")
    if thinning < 1:
        raise ValueError("thinning must be >= 1")
    x = _to_chain_coords(posterior, init)
    cov = proposal_cov if proposal_cov is not None else np.linalg.inv(posterior.precision)
    chol = np.linalg.cholesky((cov + cov.T) / 2.0)
    scale = proposal_scale if proposal_scale is not None else 2.38 / np.sqrt(posterior.p)

    rng = np.random.default_rng(seed)
    logp = posterior.log_density(x)
    if not np.isfinite(logp):
        raise ValueError("init has zero posterior density")

    stored = []
    accepts = kept_accepts = kept_props = 0
    window_accepts = 0
    consecutive_rejects = 0
    for t in range(n_iter):
        prop = x + scale * (chol @ rng.standard_normal(posterior.p))
        logp_prop = posterior.log_density(prop)
        if np.log(rng.random()) <= logp_prop - logp:
            x, logp = prop, logp_prop
            accepts += 1
            window_accepts += 1
            consecutive_rejects = 0
            if t >= burn_in:
                kept_accepts += 1
        else:
            consecutive_rejects += 1
            if consecutive_rejects >= STUCK_LIMIT:
                raise SamplerStuck(
                    f"no acceptance over {STUCK_LIMIT} consecutive proposals; "
                    f"reduce the proposal scale (current {scale:.3g})"
                )
        if t >= burn_in:
            kept_props += 1
            if (t - burn_in) % thinning == 0:
                stored.append(_to_natural(posterior.coordinates, x))
        elif (t + 1) % ADAPT_WINDOW == 0:
            rate = window_accepts / ADAPT_WINDOW
            if rate < ADAPT_LOW:
                scale *= ADAPT_SHRINK
            elif rate > ADAPT_HIGH:
                scale *= ADAPT_GROW
            window_accepts = 0

    return ChainTrace(
        states=np.array(stored),
        sampler="mh",
        kind=posterior.kind,
        seed=seed,
        burn_in=burn_in,
        thinning=thinning,
        accepts={"all": kept_accepts},
        proposals={"all": kept_props},
    )


def overall_gibbs(
    posterior: AdjustedPosterior,
    partition: BlockPartition,
    init,
    n_iter: int = 20_000,
    burn_in: int = 2_000,
    seed: int = 0,
    *,
    thinning: int = 1,
) -> ChainTrace:
    """Metropolis-within-Gibbs over a block partition of the frozen
    adjusted posterior; same stationary law as :func:`adjusted_mh`.

    Each block uses a Gaussian random-walk proposal with covariance
    ``s_j^2 * (P_jj)^-1`` where ``P_jj`` is the corresponding block of the
    posterior's curvature at the mode (the conditional precision for a
    Gaussian target); each ``s_j`` adapts during burn-in only.
    """
    if n_iter <= burn_in:
        raise ValueError(f"need n_iter > burn_in, got {n_iter} <= {burn_in}")
    x = _to_chain_coords(posterior, init)
    prec = posterior.precision
    labels = [partition.label(j) for j in range(partition.n_blocks)]
    chols = []
    scales = []
    for blk in partition.blocks:
        idx = np.array(blk)
        cond_cov = np.linalg.inv(prec[np.ix_(idx, idx)])
        chols.append(np.linalg.cholesky((cond_cov + cond_cov.T) / 2.0))
        scales.append(2.38 / np.sqrt(len(blk)))

    rng = np.random.default_rng(seed)
    logp = posterior.log_density(x)
    if not np.isfinite(logp):
        raise ValueError("init has zero posterior density")

    stored = []
    kept_accepts = dict.fromkeys(labels, 0)
    kept_props = dict.fromkeys(labels, 0)
    window_accepts = [0] * partition.n_blocks
    consecutive_rejects = [0] * partition.n_blocks
    for t in range(n_iter):
        for j, blk in enumerate(partition.blocks):
            idx = np.array(blk)
            prop = x.copy()
            prop[idx] += scales[j] * (chols[j] @ rng.standard_normal(len(blk)))
            logp_prop = posterior.log_density(prop)
            if np.log(rng.random()) <= logp_prop - logp:
                x, logp = prop, logp_prop
                window_accepts[j] += 1
                consecutive_rejects[j] = 0
                if t >= burn_in:
                    kept_accepts[labels[j]] += 1
            else:
                consecutive_rejects[j] += 1
                if consecutive_rejects[j] >= STUCK_LIMIT:
                    raise SamplerStuck(
                        f"block {labels[j]}: no acceptance over {STUCK_LIMIT} proposals; "
                        f"reduce the proposal scale (current {scales[j]:.3g})"
                    )
            if t >= burn_in:
                kept_props[labels[j]] += 1
        if t >= burn_in:
            if (t - burn_in) % thinning == 0:
                stored.append(_to_natural(posterior.coordinates, x))
        elif (t + 1) % ADAPT_WINDOW == 0:
            for j in range(partition.n_blocks):
                rate = window_accepts[j] / ADAPT_WINDOW
                if rate < ADAPT_LOW:
                    scales[j] *= ADAPT_SHRINK
                elif rate > ADAPT_HIGH:
                    scales[j] *= ADAPT_GROW
                window_accepts[j] = 0

    return ChainTrace(
        states=np.array(stored),
        sampler="overall-gibbs",
        kind=posterior.kind,
        seed=seed,
        burn_in=burn_in,
        thinning=thinning,
        accepts=kept_accepts,
        proposals=kept_props,
    )


# -- adaptive adjusted Gibbs --------------------------------------------------


def _block_score_fn(model):
    fn = getattr(model, "score_w_block", None)
    if fn is not None:
        return fn
    return lambda w, blk: model.score_w(w)[blk]


def _block_rep_scores_fn(model):
    fn = getattr(model, "replicate_scores_w_block", None)
    if fn is not None:
        return fn
    return lambda w, blk: model.replicate_scores_w(w)[:, blk]


def _block_score_jacobian(model, w: np.ndarray, blk: np.ndarray) -> np.ndarray:
    """Finite-difference Jacobian of the block score (the block Hessian)."""
    score = _block_score_fn(model)
    size = blk.size
    jac = np.empty((size, size))
    for a, idx in enumerate(blk):
        step = 1e-4 * (1.0 + abs(w[idx]))
        e = np.zeros(w.size)
        e[idx] = step
        jac[:, a] = (score(w + e, blk) - score(w - e, blk)) / (2.0 * step)
    return (jac + jac.T) / 2.0


def _maximize_block(model, w_start: np.ndarray, blk: np.ndarray, max_iter: int = 50):
    """Safeguarded Newton ascent of the composite log-likelihood over one
    block, other coordinates held fixed.  Returns (w, value, converged)."""
    score = _block_score_fn(model)
    w = w_start.copy()
    f = model.loglik_w(w)
    for _ in range(max_iter):
        g = score(w, blk)
        if np.linalg.norm(g) <= 1e-6 * (1.0 + abs(f)):
            return w, f, True
        hess = _block_score_jacobian(model, w, blk)
        direction = None
        try:
            direction = np.linalg.solve(-hess, g)
            if g @ direction <= 0:
                direction = None
        except np.linalg.LinAlgError:
            direction = None
        if direction is None:
            direction = g / max(1.0, np.linalg.norm(g))
        slope = g @ direction
        step = 1.0
        improved = False
        for _ in range(30):
            w_try = w.copy()
            w_try[blk] = w[blk] + step * direction
            f_try = model.loglik_w(w_try)
            if np.isfinite(f_try) and f_try >= f + 1e-4 * step * slope:
                w, f = w_try, f_try
                improved = True
                break
            step *= 0.5
        if not improved:
            break
    g = score(w, blk)
    return w, f, bool(np.linalg.norm(g) <= 1e-6 * (1.0 + abs(f)))


def _block_adjustment(model, w: np.ndarray, blk: np.ndarray, kind: str):
    """Restricted fit of one block at the current rest: returns
    (w_hat_block, adjustment payload, proposal cholesky) or None on failure."""
    closed_form = getattr(model, "block_argmax_w", None)
    w_at = None
    if closed_form is not None:
        blk_hat = closed_form(w, blk)
        if blk_hat is not None:
            w_at = w.copy()
            w_at[blk] = blk_hat
    if w_at is None:
        w_at, _, converged = _maximize_block(model, w, blk)
        if not converged:
            return None
    n = model.n
    h_blk = -_block_score_jacobian(model, w_at, blk) / n
    if np.linalg.eigvalsh(h_blk).min() <= 0:
        return None
    scores = _block_rep_scores_fn(model)(w_at, blk)
    j_blk = np.atleast_2d(np.cov(scores, rowvar=False, ddof=1))
    if np.linalg.eigvalsh(j_blk).min() <= 0:
        return None
    h_inv = np.linalg.inv(h_blk)
    if kind == "magnitude":
        lambdas = generalized_eigh(j_blk, h_blk, eigvals_only=True)
        k_blk = blk.size / float(lambdas.sum())
        payload = ("magnitude", k_blk)
        cond_cov = float(lambdas.sum()) / (n * blk.size) * h_inv
    elif kind == "curvature":
        hjh = h_blk @ np.linalg.solve(j_blk, h_blk)
        hjh = (hjh + hjh.T) / 2.0
        c_blk = np.linalg.solve(_sym_sqrt(h_blk), _sym_sqrt(hjh))
        payload = ("curvature", c_blk)
        cond_cov = h_inv @ j_blk @ h_inv / n
    elif kind == "none":
        payload = ("none", None)
        cond_cov = h_inv / n
    else:
        raise ValueError(f"adaptive Gibbs does not support adjustment kind {kind!r}")
    cond_cov = INDEP_INFLATE**2 * (cond_cov + cond_cov.T) / 2.0
    try:
        chol = np.linalg.cholesky(cond_cov)
    except np.linalg.LinAlgError:
        return None
    return w_at[blk].copy(), payload, chol


def _sym_sqrt(mat: np.ndarray) -> np.ndarray:
    evals, evecs = np.linalg.eigh((mat + mat.T) / 2.0)
    if evals.min() <= 0:
        raise np.linalg.LinAlgError("matrix square root needs positive eigenvalues")
    return (evecs * np.sqrt(evals)) @ evecs.T


def _conditional_log_target(model, prior, w: np.ndarray, blk: np.ndarray, value: np.ndarray,
                            w_hat_blk: np.ndarray, payload) -> float:
    """Adjusted conditional log-density of one block (working coordinates)."""
    kind, extra = payload
    w_eval = w.copy()
    if kind == "curvature":
        w_eval[blk] = w_hat_blk + extra @ (value - w_hat_blk)
    else:
        w_eval[blk] = value
    lik = model.loglik_w(w_eval)
    if kind == "magnitude":
        lik *= extra
    prior_part = sum(prior.log_density_coord_w(int(i), float(value[a])) for a, i in enumerate(blk))
    return lik + prior_part


def adaptive_gibbs(
    model: PairwiseLikelihood,
    prior: PriorSpec,
    partition: BlockPartition,
    kind: str,
    init,
    n_iter: int = 20_000,
    burn_in: int = 2_000,
    seed: int = 0,
    *,
    thinning: int = 1,
    refresh_every: int = 1,
) -> ChainTrace:
    """Adaptive adjusted Gibbs sampler.

    Per sweep and per block: (i) maximize the composite likelihood over the
    block with the rest held at current values; (ii) estimate the
    block-level H (finite differences of the score) and J (sample
    covariance of per-replicate scores); (iii) magnitude- or
    curvature-adjust the conditional likelihood; (iv) draw the block by an
    independence Metropolis-Hastings step proposed from a Gaussian centered
    at the restricted maximum with the adjusted asymptotic conditional
    covariance (slightly inflated).

    A failed restricted maximization retains the previous block value and
    counts a skipped update; a warning is logged when more than 1% of
    updates are skipped.
    """
    if n_iter <= burn_in:
        raise ValueError(f"need n_iter > burn_in, got {n_iter} <= {burn_in}")
    if model.n <= partition.max_block_size():
        raise ValueError(
            f"need more replicates than the largest block "
            f"(n={model.n}, max block {partition.max_block_size()})"
        )
    if refresh_every < 1:
        raise ValueError("refresh_every must be >= 1")
    w = coords.to_working(_as_natural_vector(init))
    rng = np.random.default_rng(seed)
    labels = [partition.label(j) for j in range(partition.n_blocks)]
    blocks = [np.array(blk) for blk in partition.blocks]

    stored = []
    kept_accepts = dict.fromkeys(labels, 0)
    kept_props = dict.fromkeys(labels, 0)
    skipped = 0
    total_updates = 0
    cache: list = [None] * partition.n_blocks
    for t in range(n_iter):
        for j, blk in enumerate(blocks):
            total_updates += 1
            if t % refresh_every == 0 or cache[j] is None:
                cache[j] = _block_adjustment(model, w, blk, kind)
            entry = cache[j]
            if entry is None:
                skipped += 1
                continue
            w_hat_blk, payload, chol = entry
            current = w[blk].copy()
            prop = w_hat_blk + chol @ rng.standard_normal(blk.size)
            log_u = np.log(rng.random())
            # Independence proposal: q(z) ~ N(w_hat, chol chol'); the
            # normalization constant cancels in the ratio.
            def _logq(z):
                r = np.linalg.solve(chol, z - w_hat_blk)
                return -0.5 * float(r @ r)

            logf_prop = _conditional_log_target(model, prior, w, blk, prop, w_hat_blk, payload)
            logf_cur = _conditional_log_target(model, prior, w, blk, current, w_hat_blk, payload)
            if t >= burn_in:
                kept_props[labels[j]] += 1
            if log_u <= (logf_prop - logf_cur) + (_logq(current) - _logq(prop)):
                w[blk] = prop
                if t >= burn_in:
                    kept_accepts[labels[j]] += 1
        if t >= burn_in and (t - burn_in) % thinning == 0:
            stored.append(coords.from_working(w))

    if skipped > 0.01 * total_updates:
        logger.warning(
            "adaptive Gibbs skipped %d of %d block updates (restricted fit failures)",
            skipped,
            total_updates,
        )
    return ChainTrace(
        states=np.array(stored),
        sampler="adaptive-gibbs",
        kind=kind,
        seed=seed,
        burn_in=burn_in,
        thinning=thinning,
        accepts=kept_accepts,
        proposals=kept_props,
        skipped=skipped,
    )


def full_conjugate_gibbs(
    data: ReplicateData,
    prior: PriorSpec,
    init,
    n_iter: int = 20_000,
    burn_in: int = 2_000,
    seed: int = 0,
    *,
    thinning: int = 1,
    fix_omega: bool = False,
    omega_step: float = 0.3,
) -> ChainTrace:
    """Gibbs sampler for the exact full-likelihood posterior.

    mu and tau are drawn from their conjugate conditionals (normal and
    inverse gamma); omega uses a random-walk Metropolis step on log omega,
    tuned during burn-in.  With ``fix_omega=True`` the range is held at its
    initial value and only (mu, tau) are sampled.
    """
    if n_iter <= burn_in:
        raise ValueError(f"need n_iter > burn_in, got {n_iter} <= {burn_in}")
    model = FullLikelihood(data)
    n, k = model.n, model.k
    mu, tau, omega = _as_natural_vector(init)
    if tau <= 0 or omega <= 0:
        raise ValueError("init must lie in the parameter domain")
    rng = np.random.default_rng(seed)

    def _omega_log_target(om: float) -> float:
        value = model.loglik(np.array([mu, tau, om]))
        return value + prior.log_density_coord_w(2, np.log(om))

    stored = []
    kept_accepts = kept_props = 0
    window_accepts = 0
    consecutive_rejects = 0
    scale = omega_step
    for t in range(n_iter):
        # mu | tau, omega: conjugate normal
        oro = model.one_rinv_one(omega)
        ors = model.one_rinv_s(omega)
        var = 1.0 / (1.0 / prior.mu_var + n * oro / tau)
        mean = var * (prior.mu_mean / prior.mu_var + ors / tau)
        mu = mean + np.sqrt(var) * rng.standard_normal()
        # tau | mu, omega: conjugate inverse gamma
        shape = prior.tau_shape + 0.5 * n * k
        scale_ig = prior.tau_scale + 0.5 * model.quad_sum(mu, omega)
        tau = scale_ig / rng.gamma(shape)
        if not fix_omega:
            log_target = _omega_log_target(omega)
            prop = float(np.exp(np.log(omega) + scale * rng.standard_normal()))
            log_target_prop = _omega_log_target(prop)
            if t >= burn_in:
                kept_props += 1
            if np.log(rng.random()) <= log_target_prop - log_target:
                omega, log_target = prop, log_target_prop
                window_accepts += 1
                consecutive_rejects = 0
                if t >= burn_in:
                    kept_accepts += 1
            else:
                consecutive_rejects += 1
                if consecutive_rejects >= STUCK_LIMIT:
                    raise SamplerStuck(
                        f"omega step: no acceptance over {STUCK_LIMIT} proposals; "
                        f"reduce omega_step (current {scale:.3g})"
                    )
            if t < burn_in and (t + 1) % ADAPT_WINDOW == 0:
                rate = window_accepts / ADAPT_WINDOW
                if rate < ADAPT_LOW:
                    scale *= ADAPT_SHRINK
                elif rate > ADAPT_HIGH:
                    scale *= ADAPT_GROW
                window_accepts = 0
        if t >= burn_in and (t - burn_in) % thinning == 0:
            stored.append(np.array([mu, tau, omega]))

    tallies_key = "omega" if not fix_omega else "none"
    return ChainTrace(
        states=np.array(stored),
        sampler="full-gibbs",
        kind="full",
        seed=seed,
        burn_in=burn_in,
        thinning=thinning,
        accepts={tallies_key: kept_accepts},
        proposals={tallies_key: kept_props},
    )


# -- Gaussian conditional approximations (diagnostic overlay) ----------------


def _adjusted_precision(fit, adjustment: str) -> np.ndarray:
    if adjustment == "none":
        return fit.n * fit.H
    if adjustment == "magnitude":
        return fit.n * fit.k * fit.H
    if adjustment == "curvature":
        return fit.n * (fit.H @ np.linalg.solve(fit.J, fit.H))
    raise ValueError(f"no adjusted precision for kind {adjustment!r}")


def conditional_gaussian_predictors(
    fit,
    partition: BlockPartition,
    block_index: int,
    theta_rest: np.ndarray,
    *,
    method: str = "overall",
    adjustment: str = "curvature",
) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian approximation to a block conditional posterior.

    ``method="overall"`` conditions the adjusted Gaussian approximation of
    the whole posterior (precision n*H, n*k*H or n*H J^-1 H by adjustment
    kind); ``method="adaptive"`` conditions the asymptotic sandwich law
    (precision n*H J^-1 H regardless of kind).  ``theta_rest`` holds the
    non-block coordinates in ascending index order, in the fit's
    coordinate system.  Returns (mean, covariance) for the block.  This is
    a diagnostic overlay; the samplers never use it.
    """
    if method == "overall":
        q_mat = _adjusted_precision(fit, adjustment)
    elif method == "adaptive":
        q_mat = fit.n * (fit.H @ np.linalg.solve(fit.J, fit.H))
    else:
        raise ValueError(f"unknown method {method!r}")
    blk = np.array(partition.blocks[block_index])
    rest = np.array([i for i in range(fit.p) if i not in set(blk.tolist())])
    center = fit.theta_hat
    q_bb = q_mat[np.ix_(blk, blk)]
    try:
        cov = np.linalg.inv(q_bb)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"singular conditional sub-block for block {blk}") from exc
    if rest.size == 0:
        return center[blk].copy(), (cov + cov.T) / 2.0
    theta_rest = np.asarray(theta_rest, dtype=float)
    if theta_rest.shape != rest.shape:
        raise ValueError(f"theta_rest must have shape {rest.shape}, got {theta_rest.shape}")
    q_br = q_mat[np.ix_(blk, rest)]
    mean = center[blk] - cov @ q_br @ (theta_rest - center[rest])
    return mean, (cov + cov.T) / 2.0


# -- trace persistence --------------------------------------------------------


def save_trace(
    trace: ChainTrace,
    csv_path: str | Path,
    sidecar_path: str | Path | None = None,
    *,
    fit_reference: str | None = None,
) -> None:
    """Write the trace CSV (header iter,mu,tau,omega) and a JSON sidecar
    with seed, sampler, adjustment kind, acceptance and skip bookkeeping."""
    csv_path = Path(csv_path)
    lines = ["iter,mu,tau,omega"]
    for i, row in enumerate(trace.states):
        lines.append(f"{i},{float(row[0])!r},{float(row[1])!r},{float(row[2])!r}")
    csv_path.write_text("\n".join(lines) + "\n")
    if sidecar_path is not None:
        payload = {
            "sampler": trace.sampler,
            "adjustment": trace.kind,
            "seed": int(trace.seed),
            "burn_in": int(trace.burn_in),
            "thinning": int(trace.thinning),
            "n_stored": trace.n_stored,
            "accepts": {k: int(v) for k, v in trace.accepts.items()},
            "proposals": {k: int(v) for k, v in trace.proposals.items()},
            "accept_rate": {k: float(v) for k, v in trace.accept_rate.items()},
            "skipped_updates": int(trace.skipped),
            "sandwich_fit": fit_reference,
        }
        Path(sidecar_path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_trace(csv_path: str | Path, sidecar_path: str | Path | None = None) -> ChainTrace:
    """Read back a trace written by :func:`save_trace`."""
    rows = []
    with Path(csv_path).open() as fh:
        header = fh.readline().strip()
        if header != "iter,mu,tau,omega":
            raise ValueError(f"{csv_path}: unexpected trace header {header!r}")
        for line in fh:
            if line.strip():
                rows.append([float(tok) for tok in line.split(",")[1:]])
    meta = {}
    if sidecar_path is not None:
        meta = json.loads(Path(sidecar_path).read_text())
    accepts = {k: int(v) for k, v in meta.get("accepts", {"all": 0}).items()}
    proposals = {k: int(v) for k, v in meta.get("proposals", {"all": 0}).items()}
    return ChainTrace(
        states=np.array(rows),
        sampler=meta.get("sampler", "unknown"),
        kind=meta.get("adjustment", "unknown"),
        seed=int(meta.get("seed", -1)),
        burn_in=int(meta.get("burn_in", 0)),
        thinning=int(meta.get("thinning", 1)),
        accepts=accepts,
        proposals=proposals,
        skipped=int(meta.get("skipped_updates", 0)),
    )
