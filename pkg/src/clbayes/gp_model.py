"""Stationary Gaussian-process data model with full and pairwise likelihoods.

The process lives on the real line with unknown mean ``mu`` and exponential
covariance ``gamma(h) = tau * exp(-h / omega)`` (sill ``tau``, range
``omega``).  A dataset consists of ``n`` independent replicates observed at
``K`` fixed sites.  The module provides:

* replicate simulation with seeded, bit-reproducible output;
* the full multivariate-normal log-likelihood;
* the pairwise composite log-likelihood built from all two-site margins,
  with analytic per-replicate score vectors;
* conjugate Gibbs conditionals (normal for ``mu``, inverse gamma for
  ``tau``) under both the full and the pairwise likelihood;
* CSV dataset persistence.

Both likelihood evaluators cache per-pair / per-site sufficient statistics
at construction so that a single evaluation costs O(#pairs) rather than
O(n * #pairs); this is what makes the replicated coverage studies cheap.
Evaluators are pure after construction and safe for concurrent reads.
"""

from __future__ import annotations

import csv
import itertools
from collections import namedtuple
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import coords

LOG_2PI = np.log(2.0 * np.pi)

# Diagonal jitter ladder used before declaring a covariance matrix non-PD.
JITTER_START = 1e-10
JITTER_MAX = 1e-6


class CovarianceNotPD(ValueError):
    """Covariance matrix is not positive definite even after jittering."""


class DegeneratePair(ValueError):
    """A site pair has correlation with absolute value >= 1."""


NormalSpec = namedtuple("NormalSpec", ["mean", "var"])
InvGammaSpec = namedtuple("InvGammaSpec", ["shape", "scale"])


@dataclass(frozen=True)
class GpParams:
    """Process parameters (mu, tau, omega); tau and omega must be positive."""

    mu: float
    tau: float
    omega: float

    def __post_init__(self) -> None:
        for name in ("mu", "tau", "omega"):
            v = getattr(self, name)
            if not np.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v}")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.omega <= 0:
            raise ValueError(f"omega must be positive, got {self.omega}")

    def to_vector(self) -> np.ndarray:
        """Ordered vector (mu, tau, omega)."""
        return np.array([self.mu, self.tau, self.omega], dtype=float)

    @classmethod
    def from_vector(cls, theta: np.ndarray) -> "GpParams":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (3,):
            raise ValueError(f"parameter vector must have length 3, got shape {theta.shape}")
        return cls(mu=float(theta[0]), tau=float(theta[1]), omega=float(theta[2]))


@dataclass(frozen=True, eq=False)
class SiteLayout:
    """Observation sites on the line, kept in input order."""

    locations: np.ndarray

    def __post_init__(self) -> None:
        locs = np.atleast_1d(np.asarray(self.locations, dtype=float))
        if locs.ndim != 1 or locs.size < 2:
            raise ValueError("layout needs at least 2 one-dimensional site locations")
        if not np.all(np.isfinite(locs)):
            raise ValueError("site locations must be finite")
        object.__setattr__(self, "locations", locs)

    @property
    def k_sites(self) -> int:
        return int(self.locations.size)

    def distance_matrix(self) -> np.ndarray:
        x = self.locations
        return np.abs(x[:, None] - x[None, :])


@dataclass(frozen=True, eq=False)
class PairIndex:
    """All site pairs (i, j), i < j, in lexicographic order.

    The ordering matches the stacked pair vector
    (y_1, y_2, y_1, y_3, ..., y_{K-1}, y_K) used by the pairwise
    conditionals.  Indices are 0-based.  Weights are implicitly 1.
    """

    first: np.ndarray
    second: np.ndarray

    def __post_init__(self) -> None:
        i = np.asarray(self.first, dtype=np.intp)
        j = np.asarray(self.second, dtype=np.intp)
        if i.shape != j.shape or i.ndim != 1:
            raise ValueError("pair index arrays must be 1-d and equally long")
        k = int(j.max()) + 1 if j.size else 0
        expected = list(itertools.combinations(range(k), 2))
        got = list(zip(i.tolist(), j.tolist()))
        if got != expected:
            raise ValueError("pairs must be exactly all (i, j), i < j, lexicographically ordered")
        object.__setattr__(self, "first", i)
        object.__setattr__(self, "second", j)

    @classmethod
    def all_pairs(cls, k_sites: int) -> "PairIndex":
        if k_sites < 2:
            raise ValueError("need at least 2 sites to form pairs")
        pairs = np.array(list(itertools.combinations(range(k_sites), 2)), dtype=np.intp)
        return cls(first=pairs[:, 0], second=pairs[:, 1])

    @property
    def n_pairs(self) -> int:
        return int(self.first.size)

    def as_tuples(self) -> list[tuple[int, int]]:
        return list(zip(self.first.tolist(), self.second.tolist()))


@dataclass(eq=False)
class ReplicateData:
    """n independent replicates observed at the layout's K sites."""

    values: np.ndarray
    layout: SiteLayout

    def __post_init__(self) -> None:
        vals = np.atleast_2d(np.asarray(self.values, dtype=float))
        if vals.shape[0] < 1 or vals.shape[1] != self.layout.k_sites:
            raise ValueError(
                f"data must be n x K with K={self.layout.k_sites}, got shape {vals.shape}"
            )
        if not np.all(np.isfinite(vals)):
            raise ValueError("replicate values must be finite")
        self.values = vals

    @property
    def n_replicates(self) -> int:
        return int(self.values.shape[0])


def _chol_with_jitter(mat: np.ndarray, scale: float, context: str) -> tuple[np.ndarray, float]:
    """Cholesky factor with an escalating diagonal jitter ladder.

    Jitter starts at ``JITTER_START * scale`` and grows tenfold up to
    ``JITTER_MAX * scale``; beyond that the matrix is declared non-PD.
    Returns (lower factor, jitter actually used).
    """
    eye = np.eye(mat.shape[0])
    jitter = 0.0
    while True:
        try:
            return np.linalg.cholesky(mat + jitter * eye), jitter
        except np.linalg.LinAlgError:
            jitter = JITTER_START * scale if jitter == 0.0 else jitter * 10.0
            if jitter > JITTER_MAX * scale * (1 + 1e-12):
                raise CovarianceNotPD(
                    f"covariance not PD after jitter up to {JITTER_MAX * scale:g} ({context})"
                ) from None


def correlation_matrix(layout: SiteLayout, omega: float) -> np.ndarray:
    """K x K matrix exp(-|x_a - x_b| / omega)."""
    return np.exp(-layout.distance_matrix() / omega)


def simulate_gp(params: GpParams, layout: SiteLayout, n: int, seed: int) -> ReplicateData:
    """Draw n independent replicates of N(mu * 1, tau * R(omega)).

    Identical (params, layout, n, seed) reproduce bit-identical output on
    a given platform.
    """
    if n < 1:
        raise ValueError(f"need n >= 1 replicates, got {n}")
    cov = params.tau * correlation_matrix(layout, params.omega)
    chol, _ = _chol_with_jitter(
        cov, params.tau, f"simulate_gp at mu={params.mu}, tau={params.tau}, omega={params.omega}"
    )
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, layout.k_sites))
    return ReplicateData(values=params.mu + z @ chol.T, layout=layout)


class PairwiseLikelihood:
    """Pairwise composite log-likelihood over all two-site margins.

    Parameters
    ----------
    data : ReplicateData
    pairs : PairIndex, optional
        Defaults to all pairs of the layout.

    Notes
    -----
    Per-pair sufficient statistics (first and second moments of the two
    columns) are precomputed, so :meth:`loglik` and :meth:`score` cost
    O(#pairs).  :meth:`replicate_scores` needs the raw columns and costs
    O(n * #pairs).
    """

    def __init__(self, data: ReplicateData, pairs: PairIndex | None = None):
        self.data = data
        self.pairs = pairs if pairs is not None else PairIndex.all_pairs(data.layout.k_sites)
        if self.pairs.second.max() >= data.layout.k_sites:
            raise ValueError("pair index refers to sites outside the layout")
        x = data.layout.locations
        self.h = np.abs(x[self.pairs.first] - x[self.pairs.second])
        if np.any(self.h <= 0.0):
            bad = int(np.argmin(self.h))
            raise DegeneratePair(
                f"pair ({self.pairs.first[bad]}, {self.pairs.second[bad]}) has zero distance: "
                "bivariate correlation >= 1"
            )
        self.n = data.n_replicates
        u = data.values[:, self.pairs.first]
        v = data.values[:, self.pairs.second]
        self._u = u
        self._v = v
        # Per-pair sums over replicates.
        self._ss = u.sum(axis=0) + v.sum(axis=0)
        self._sab = (u * u).sum(axis=0) + (v * v).sum(axis=0)
        self._suv = (u * v).sum(axis=0)

    # -- internal pieces ---------------------------------------------------

    def _rho(self, omega: float) -> np.ndarray:
        rho = np.exp(-self.h / omega)
        if np.any(rho >= 1.0):
            raise DegeneratePair(f"bivariate correlation >= 1 at omega={omega}")
        return rho

    def _pair_quadratics(self, mu: float, rho: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-pair sums over replicates of zu^2+zv^2, zu*zv and the
        correlation-standardized quadratic form, z = y - mu."""
        apb = self._sab - 2.0 * mu * self._ss + 2.0 * self.n * mu * mu
        cc = self._suv - mu * self._ss + self.n * mu * mu
        s2 = 1.0 - rho * rho
        q = (apb - 2.0 * rho * cc) / s2
        return apb, cc, q

    # -- public evaluators (natural coordinates) ----------------------------

    def loglik(self, theta: np.ndarray) -> float:
        """Sum over replicates and pairs of the bivariate normal log-density.

        Returns -inf outside the domain, including parameter values so
        extreme that a pair correlation saturates to 1 in floating point
        (the exact log-likelihood diverges to -inf there for distinct
        observations); optimizer line searches and MH proposals may probe
        such points.
        """
        mu, tau, omega = float(theta[0]), float(theta[1]), float(theta[2])
        if tau <= 0 or omega <= 0 or not np.all(np.isfinite([mu, tau, omega])):
            return -np.inf
        rho = np.exp(-self.h / omega)
        if np.any(rho >= 1.0):
            return -np.inf
        _, _, q = self._pair_quadratics(mu, rho)
        n_terms = self.n * self.pairs.n_pairs
        return float(
            -n_terms * (LOG_2PI + np.log(tau))
            - 0.5 * self.n * np.log1p(-rho * rho).sum()
            - q.sum() / (2.0 * tau)
        )

    def score(self, theta: np.ndarray) -> np.ndarray:
        """Gradient of :meth:`loglik` with respect to (mu, tau, omega)."""
        mu, tau, omega = float(theta[0]), float(theta[1]), float(theta[2])
        if tau <= 0 or omega <= 0:
            raise ValueError(f"score needs tau, omega > 0, got tau={tau}, omega={omega}")
        rho = self._rho(omega)
        s2 = 1.0 - rho * rho
        apb, cc, q = self._pair_quadratics(mu, rho)
        d_mu = ((self._ss - 2.0 * self.n * mu) / (1.0 + rho)).sum() / tau
        d_tau = -self.n * self.pairs.n_pairs / tau + q.sum() / (2.0 * tau * tau)
        d_rho = self.n * rho / s2 - (rho * apb - (1.0 + rho * rho) * cc) / (tau * s2 * s2)
        d_omega = (d_rho * rho * self.h).sum() / (omega * omega)
        return np.array([d_mu, d_tau, d_omega])

    def replicate_scores(self, theta: np.ndarray) -> np.ndarray:
        """Per-replicate gradients, shape (n, 3); rows sum to :meth:`score`."""
        return self.replicate_scores_block(theta, np.arange(3))

    def replicate_scores_block(self, theta: np.ndarray, blk: np.ndarray) -> np.ndarray:
        """Per-replicate gradients restricted to the coordinates in ``blk``."""
        mu, tau, omega = float(theta[0]), float(theta[1]), float(theta[2])
        if tau <= 0 or omega <= 0:
            raise ValueError(f"scores need tau, omega > 0, got tau={tau}, omega={omega}")
        rho = self._rho(omega)
        zu = self._u - mu
        zv = self._v - mu
        cols = []
        for idx in blk:
            if idx == 0:
                cols.append(((zu + zv) / (1.0 + rho)).sum(axis=1) / tau)
                continue
            s2 = 1.0 - rho * rho
            if idx == 1:
                q = (zu * zu - 2.0 * rho * zu * zv + zv * zv) / s2
                cols.append(-self.pairs.n_pairs / tau + q.sum(axis=1) / (2.0 * tau * tau))
            else:
                d_rho = rho / s2 - (
                    rho * (zu * zu + zv * zv) - (1.0 + rho * rho) * zu * zv
                ) / (tau * s2 * s2)
                cols.append((d_rho * (rho * self.h)).sum(axis=1) / (omega * omega))
        return np.column_stack(cols)

    def score_block(self, theta: np.ndarray, blk: np.ndarray) -> np.ndarray:
        """Total score restricted to the coordinates in ``blk``."""
        mu, tau, omega = float(theta[0]), float(theta[1]), float(theta[2])
        if tau <= 0 or omega <= 0:
            raise ValueError(f"score needs tau, omega > 0, got tau={tau}, omega={omega}")
        rho = self._rho(omega)
        out = np.empty(len(blk))
        cached = None
        for pos, idx in enumerate(blk):
            if idx == 0:
                out[pos] = ((self._ss - 2.0 * self.n * mu) / (1.0 + rho)).sum() / tau
                continue
            if cached is None:
                s2 = 1.0 - rho * rho
                cached = (s2, *self._pair_quadratics(mu, rho))
            s2, apb, cc, q = cached
            if idx == 1:
                out[pos] = -self.n * self.pairs.n_pairs / tau + q.sum() / (2.0 * tau * tau)
            else:
                d_rho = self.n * rho / s2 - (rho * apb - (1.0 + rho * rho) * cc) / (tau * s2 * s2)
                out[pos] = (d_rho * rho * self.h).sum() / (omega * omega)
        return out

    def block_argmax_w(self, w: np.ndarray, blk: np.ndarray) -> np.ndarray | None:
        """Closed-form restricted maximizer over a block in working
        coordinates, when one exists (scalar mu or tau blocks); None means
        the caller must iterate."""
        blk = list(blk)
        theta = coords.from_working(w)
        mu, tau, omega = theta
        rho = self._rho(omega)
        if blk == [0]:
            weights = 1.0 / (1.0 + rho)
            return np.array([(self._ss * weights).sum() / (2.0 * self.n * weights.sum())])
        if blk == [1]:
            _, _, q = self._pair_quadratics(mu, rho)
            tau_hat = q.sum() / (2.0 * self.n * self.pairs.n_pairs)
            return np.array([np.log(tau_hat)])
        return None

    # -- working-coordinate variants ----------------------------------------

    def loglik_w(self, w: np.ndarray) -> float:
        return self.loglik(coords.from_working(w))

    def score_w(self, w: np.ndarray) -> np.ndarray:
        theta = coords.from_working(w)
        return coords.score_to_working(self.score(theta), theta)

    def score_w_block(self, w: np.ndarray, blk: np.ndarray) -> np.ndarray:
        theta = coords.from_working(w)
        scale = np.array([1.0, theta[1], theta[2]])
        return self.score_block(theta, blk) * scale[blk]

    def replicate_scores_w(self, w: np.ndarray) -> np.ndarray:
        theta = coords.from_working(w)
        return coords.score_to_working(self.replicate_scores(theta), theta)

    def replicate_scores_w_block(self, w: np.ndarray, blk: np.ndarray) -> np.ndarray:
        theta = coords.from_working(w)
        scale = np.array([1.0, theta[1], theta[2]])
        return self.replicate_scores_block(theta, blk) * scale[blk]


class FullLikelihood:
    """Full multivariate-normal log-likelihood N(mu * 1, tau * R(omega)).

    Caches the correlation-matrix factorization per omega (the Gibbs
    sampler revisits the current omega many times between accepted moves).
    """

    _CACHE_SIZE = 4

    def __init__(self, data: ReplicateData):
        self.data = data
        self.n = data.n_replicates
        self.k = data.layout.k_sites
        self._dist = data.layout.distance_matrix()
        y = data.values
        self._syy = y.T @ y
        self._s = y.sum(axis=0)
        self._cache: dict[float, tuple] = {}

    def _factor(self, omega: float) -> tuple:
        """Per-omega pieces: (R^-1, log det R, tr(R^-1 Syy), R^-1 s, 1'R^-1 s, 1'R^-1 1)."""
        hit = self._cache.get(omega)
        if hit is not None:
            return hit
        r = np.exp(-self._dist / omega)
        chol, jitter = _chol_with_jitter(r, 1.0, f"correlation matrix at omega={omega}")
        if jitter:
            r = r + jitter * np.eye(self.k)
        inv = np.linalg.inv(chol)
        r_inv = inv.T @ inv
        logdet = 2.0 * np.log(np.diag(chol)).sum()
        r_inv_s = r_inv @ self._s
        entry = (
            r_inv,
            logdet,
            float((r_inv * self._syy).sum()),
            r_inv_s,
            float(r_inv_s.sum()),
            float(r_inv.sum()),
        )
        if len(self._cache) >= self._CACHE_SIZE:
            self._cache.pop(next(iter(self._cache)))
        self._cache[omega] = entry
        return entry

    def quad_sum(self, mu: float, omega: float) -> float:
        """sum_j (y_j - mu 1)' R^-1 (y_j - mu 1)."""
        _, _, tr0, _, ors, oro = self._factor(omega)
        return tr0 - 2.0 * mu * ors + self.n * mu * mu * oro

    def one_rinv_one(self, omega: float) -> float:
        return self._factor(omega)[5]

    def one_rinv_s(self, omega: float) -> float:
        return self._factor(omega)[4]

    def loglik(self, theta: np.ndarray) -> float:
        mu, tau, omega = float(theta[0]), float(theta[1]), float(theta[2])
        if tau <= 0 or omega <= 0 or not np.all(np.isfinite([mu, tau, omega])):
            return -np.inf
        logdet = self._factor(omega)[1]
        q = self.quad_sum(mu, omega)
        return float(
            -0.5 * self.n * (self.k * (LOG_2PI + np.log(tau)) + logdet) - q / (2.0 * tau)
        )

    def score(self, theta: np.ndarray) -> np.ndarray:
        mu, tau, omega = float(theta[0]), float(theta[1]), float(theta[2])
        if tau <= 0 or omega <= 0:
            raise ValueError(f"score needs tau, omega > 0, got tau={tau}, omega={omega}")
        r_inv, _, tr0, _, ors, oro = self._factor(omega)
        d_mu = (ors - self.n * mu * oro) / tau
        q = tr0 - 2.0 * mu * ors + self.n * mu * mu * oro
        d_tau = -self.n * self.k / (2.0 * tau) + q / (2.0 * tau * tau)
        # dR/domega = R .* dist / omega^2, elementwise.
        r = np.exp(-self._dist / omega)
        dr = r * self._dist / (omega * omega)
        a = r_inv @ dr
        # M(mu) = Syy - mu (s 1' + 1 s') + n mu^2 11'
        m_mu = (
            self._syy
            - mu * (self._s[:, None] + self._s[None, :])
            + self.n * mu * mu
        )
        d_omega = -0.5 * self.n * np.trace(a) + 0.5 * ((a @ r_inv) * m_mu).sum() / tau
        return np.array([d_mu, d_tau, d_omega])

    def loglik_w(self, w: np.ndarray) -> float:
        return self.loglik(coords.from_working(w))

    def score_w(self, w: np.ndarray) -> np.ndarray:
        theta = coords.from_working(w)
        return coords.score_to_working(self.score(theta), theta)


# -- functional operation wrappers -------------------------------------------


def full_loglik(params: GpParams, data: ReplicateData) -> float:
    """Log-likelihood of the full joint normal model."""
    value = FullLikelihood(data).loglik(params.to_vector())
    if not np.isfinite(value):
        raise ValueError(f"full log-likelihood not finite at {params}")
    return value


def pairwise_loglik(params: GpParams, data: ReplicateData, pairs: PairIndex | None = None) -> float:
    """Pairwise composite log-likelihood (all weights equal to 1)."""
    model = PairwiseLikelihood(data, pairs)
    model._rho(params.omega)  # raise DegeneratePair when a correlation saturates
    value = model.loglik(params.to_vector())
    if not np.isfinite(value):
        raise ValueError(f"pairwise log-likelihood not finite at {params}")
    return value


def pairwise_score(params: GpParams, data: ReplicateData, pairs: PairIndex | None = None) -> np.ndarray:
    """Per-replicate gradients of the pairwise log-likelihood, shape (n, 3)."""
    return PairwiseLikelihood(data, pairs).replicate_scores(params.to_vector())


def conjugate_conditionals_full(
    params: GpParams, data: ReplicateData, priors
) -> tuple[NormalSpec, InvGammaSpec]:
    """Gibbs conditionals mu | rest and tau | rest under the full likelihood.

    ``priors`` must expose mu_mean, mu_var (normal prior on mu) and
    tau_shape, tau_scale (inverse-gamma prior on tau).  The single-replicate
    formulas extend additively over the n replicates through the sufficient
    sums.
    """
    model = FullLikelihood(data)
    n, k = model.n, model.k
    oro = model.one_rinv_one(params.omega)
    ors = model.one_rinv_s(params.omega)
    var = 1.0 / (1.0 / priors.mu_var + n * oro / params.tau)
    mean = var * (priors.mu_mean / priors.mu_var + ors / params.tau)
    shape = priors.tau_shape + 0.5 * n * k
    scale = priors.tau_scale + 0.5 * model.quad_sum(params.mu, params.omega)
    return NormalSpec(mean=float(mean), var=float(var)), InvGammaSpec(shape=float(shape), scale=float(scale))


def conjugate_conditionals_pairwise(
    params: GpParams, data: ReplicateData, priors, pairs: PairIndex | None = None
) -> tuple[NormalSpec, InvGammaSpec]:
    """Gibbs conditionals under the pairwise likelihood.

    Uses the block-diagonal correlation matrix over the stacked pair vector;
    each 2x2 block has off-diagonal exp(-h/omega).
    """
    model = PairwiseLikelihood(data, pairs)
    rho = model._rho(params.omega)
    n = model.n
    oro = float((2.0 / (1.0 + rho)).sum())
    ors = float((model._ss / (1.0 + rho)).sum())
    var = 1.0 / (1.0 / priors.mu_var + n * oro / params.tau)
    mean = var * (priors.mu_mean / priors.mu_var + ors / params.tau)
    _, _, q = model._pair_quadratics(params.mu, rho)
    shape = priors.tau_shape + n * model.pairs.n_pairs
    scale = priors.tau_scale + 0.5 * float(q.sum())
    return NormalSpec(mean=float(mean), var=float(var)), InvGammaSpec(shape=float(shape), scale=float(scale))


# -- dataset CSV format ------------------------------------------------------


def save_dataset(data: ReplicateData, path: str | Path) -> None:
    """Write the dataset CSV: a '# locations:' comment line, then a header
    ``site_1..site_K``, then one row per replicate."""
    path = Path(path)
    k = data.layout.k_sites
    with path.open("w", newline="") as fh:
        fh.write("# locations: " + ",".join(repr(float(x)) for x in data.layout.locations) + "\n")
        writer = csv.writer(fh)
        writer.writerow([f"site_{i + 1}" for i in range(k)])
        for row in data.values:
            writer.writerow([repr(float(v)) for v in row])


def load_dataset(path: str | Path) -> ReplicateData:
    """Read a dataset CSV written by :func:`save_dataset`."""
    path = Path(path)
    with path.open() as fh:
        first = fh.readline().strip()
        if not first.startswith("# locations:"):
            raise ValueError(f"{path}: expected '# locations:' comment on the first line")
        locations = np.array([float(tok) for tok in first.split(":", 1)[1].split(",")])
        reader = csv.reader(fh)
        header = next(reader)
        if len(header) != locations.size:
            raise ValueError(
                f"{path}: header has {len(header)} columns but {locations.size} locations"
            )
        expected = [f"site_{i + 1}" for i in range(locations.size)]
        if header != expected:
            raise ValueError(f"{path}: header must be site_1..site_{locations.size}")
        rows = [[float(tok) for tok in row] for row in reader if row]
    layout = SiteLayout(locations=locations)
    return ReplicateData(values=np.array(rows), layout=layout)
