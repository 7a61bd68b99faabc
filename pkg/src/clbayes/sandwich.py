"""Sandwich (Godambe) information estimation for composite likelihoods.

Fits the maximum composite likelihood estimate, then estimates the two
information ingredients in working coordinates:

* ``H``: minus the per-replicate-normalized Hessian of the total composite
  log-likelihood at the maximum, obtained by central finite differences of
  the analytic score;
* ``J``: the sample covariance of the per-replicate score vectors.

From (H, J) it derives the eigenvalues of H^-1 J, the magnitude constant
``k = p / sum(lambda)``, and the curvature matrix ``C = M^-1 M_A`` built
from the symmetric positive-definite square roots M^2 = H and
M_A^2 = H J^-1 H, which satisfies C' H C = H J^-1 H.

All functions are pure; a :class:`SandwichFit` is immutable once built.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import optimize
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from . import coords
from .gp_model import GpParams

logger = logging.getLogger(__name__)

MAX_ITER = 500
SCORE_TOL = 1e-6
CTC_RTOL = 1e-8
TRACE_SLACK = 1e-6


class OptimizationError(RuntimeError):
    """Composite-likelihood maximization did not converge.

    Carries the best point found (working coordinates) and the gradient
    norm there.
    """

    def __init__(self, message: str, best_w: np.ndarray, grad_norm: float):
        super().__init__(message)
        self.best_w = best_w
        self.grad_norm = grad_norm


class SingularJ(ValueError):
    """Score covariance is rank deficient."""


class NotPositiveDefinite(ValueError):
    """A matrix that must be positive definite is not."""


def default_init(data) -> GpParams:
    """Moment-based starting point: sample mean, pooled variance, and a
    range set to half the median pair distance."""
    y = data.values
    x = data.layout.locations
    dists = np.abs(x[:, None] - x[None, :])[np.triu_indices(x.size, k=1)]
    omega0 = max(0.5 * float(np.median(dists)), 1e-3)
    tau0 = max(float(y.var()), 1e-8)
    return GpParams(mu=float(y.mean()), tau=tau0, omega=omega0)


def _score_fns(model, coordinates: str):
    if coordinates == "unconstrained":
        return getattr(model, "score_w", None), getattr(model, "replicate_scores_w", None)
    if coordinates == "natural":
        return getattr(model, "score", None), getattr(model, "replicate_scores", None)
    raise ValueError(f"unknown coordinate system {coordinates!r}")


def maximize_composite(model, init: GpParams, *, restarts: int = 5, seed: int = 0) -> GpParams:
    """Maximize the model's log-likelihood in working coordinates.

    Quasi-Newton (BFGS) with the analytic gradient; on failure, up to
    ``restarts`` seeded random perturbations of the starting point are
    tried.  Converged means the score norm is at most
    ``1e-6 * (1 + |loglik|)`` and the value is no lower than at ``init``.
    """
    w0 = coords.to_working(init.to_vector())
    f0 = model.loglik_w(w0)
    rng = np.random.default_rng(seed)
    starts = [w0] + [w0 + rng.normal(0.0, [0.5, 0.4, 0.4]) for _ in range(restarts)]

    best_w, best_f, best_g = w0, -np.inf, np.inf
    for start in starts:
        res = optimize.minimize(
            lambda w: -model.loglik_w(w),
            start,
            jac=lambda w: -model.score_w(w),
            method="BFGS",
            options={"maxiter": MAX_ITER, "gtol": 1e-9},
        )
        value = -res.fun
        gnorm = float(np.linalg.norm(model.score_w(res.x)))
        if value > best_f:
            best_w, best_f, best_g = res.x, value, gnorm
        if gnorm <= SCORE_TOL * (1.0 + abs(value)) and value >= f0 - 1e-9 * (1 + abs(f0)):
            return GpParams.from_vector(coords.from_working(res.x))
    raise OptimizationError(
        f"no stationary point after {MAX_ITER} iterations and {restarts} restarts "
        f"(best loglik {best_f:.6g}, gradient norm {best_g:.3g})",
        best_w=best_w,
        grad_norm=best_g,
    )


def estimate_H(model, theta_hat: np.ndarray, *, coordinates: str = "unconstrained") -> np.ndarray:
    """-(1/n) * Hessian of the total log-likelihood at ``theta_hat``.

    Central finite differences of the analytic score with per-coordinate
    step ``1e-4 * (1 + |theta_i|)``; symmetrized.  ``theta_hat`` must be
    given in the requested coordinate system.
    """
    score, _ = _score_fns(model, coordinates)
    theta_hat = np.asarray(theta_hat, dtype=float)
    p = theta_hat.size
    steps = 1e-4 * (1.0 + np.abs(theta_hat))
    jac = np.empty((p, p))
    for i in range(p):
        e = np.zeros(p)
        e[i] = steps[i]
        jac[:, i] = (score(theta_hat + e) - score(theta_hat - e)) / (2.0 * steps[i])
    h_mat = -(jac + jac.T) / (2.0 * model.n)
    if np.linalg.eigvalsh(h_mat).min() <= 0:
        raise NotPositiveDefinite(
            "estimated H is not positive definite; re-optimize before estimating the sandwich"
        )
    return h_mat


def estimate_J(model, theta_hat: np.ndarray, *, coordinates: str = "unconstrained") -> np.ndarray:
    """Sample covariance (divisor n-1) of per-replicate scores at theta_hat."""
    _, rep_scores = _score_fns(model, coordinates)
    theta_hat = np.asarray(theta_hat, dtype=float)
    p = theta_hat.size
    if model.n <= p:
        raise SingularJ("J singular: need n > p replicates")
    scores = rep_scores(theta_hat)
    j_mat = np.cov(scores, rowvar=False, ddof=1)
    j_mat = (j_mat + j_mat.T) / 2.0
    if np.linalg.eigvalsh(j_mat).min() <= 0:
        raise SingularJ("J singular: need n > p replicates")
    return j_mat


def _check_spd(mat: np.ndarray, name: str) -> None:
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f"{name} must be square")
    if not np.allclose(mat, mat.T, atol=1e-10 * (1 + np.abs(mat).max())):
        raise NotPositiveDefinite(f"{name} must be symmetric")
    if np.linalg.eigvalsh(mat).min() <= 0:
        raise NotPositiveDefinite(f"{name} must be positive definite")


def magnitude_k(h_mat: np.ndarray, j_mat: np.ndarray) -> tuple[np.ndarray, float]:
    """Eigenvalues of H^-1 J (descending) and k = p / sum(lambda).

    Computed through the symmetric pencil L^-1 J L^-T with H = L L', which
    keeps the eigenvalues real and positive in floating point.
    """
    _check_spd(h_mat, "H")
    _check_spd(j_mat, "J")
    chol = np.linalg.cholesky(h_mat)
    half = solve_triangular(chol, j_mat, lower=True)
    pencil = solve_triangular(chol, half.T, lower=True)
    pencil = (pencil + pencil.T) / 2.0
    lambdas = np.sort(np.linalg.eigvalsh(pencil))[::-1]
    if lambdas.min() <= 0:
        raise NotPositiveDefinite("H^-1 J has a non-positive eigenvalue")
    k = h_mat.shape[0] / float(lambdas.sum())
    return lambdas, k


def _sym_sqrt(mat: np.ndarray) -> np.ndarray:
    """Unique symmetric positive-definite square root."""
    evals, evecs = np.linalg.eigh((mat + mat.T) / 2.0)
    if evals.min() <= 0:
        raise NotPositiveDefinite("matrix square root needs positive eigenvalues")
    return (evecs * np.sqrt(evals)) @ evecs.T


def curvature_C(h_mat: np.ndarray, j_mat: np.ndarray) -> np.ndarray:
    """Curvature map C = M^-1 M_A with M^2 = H and M_A^2 = H J^-1 H.

    Uses the symmetric positive-definite square roots, which are the
    deterministic SVD-derived choice; the result satisfies
    C' H C = H J^-1 H to relative Frobenius tolerance 1e-8.
    """
    _check_spd(h_mat, "H")
    _check_spd(j_mat, "J")
    m_root = _sym_sqrt(h_mat)
    hjh = h_mat @ cho_solve(cho_factor(j_mat), h_mat)
    hjh = (hjh + hjh.T) / 2.0
    ma_root = _sym_sqrt(hjh)
    c_mat = np.linalg.solve(m_root, ma_root)
    resid = np.linalg.norm(c_mat.T @ h_mat @ c_mat - hjh) / np.linalg.norm(hjh)
    if resid > CTC_RTOL:
        raise NotPositiveDefinite(f"curvature map residual {resid:.3g} exceeds {CTC_RTOL}")
    return c_mat


@dataclass(frozen=True, eq=False)
class SandwichFit:
    """Composite-likelihood fit with estimated sandwich ingredients.

    ``theta_hat`` is stored in the coordinate system named by
    ``coordinates`` (default: working coordinates (mu, log tau, log omega)).
    """

    theta_hat: np.ndarray
    H: np.ndarray
    J: np.ndarray
    lambdas: np.ndarray
    k: float
    C: np.ndarray
    n: int
    coordinates: str = "unconstrained"

    def __post_init__(self) -> None:
        object.__setattr__(self, "theta_hat", np.asarray(self.theta_hat, dtype=float))
        for name in ("H", "J", "C"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        object.__setattr__(self, "lambdas", np.asarray(self.lambdas, dtype=float))
        _check_spd(self.H, "H")
        _check_spd(self.J, "J")
        if self.lambdas.min() <= 0 or self.k <= 0:
            raise ValueError("eigenvalues and k must be positive")
        if not np.isclose(self.k * self.lambdas.sum(), self.p):
            raise ValueError("k * sum(lambdas) must equal p")
        hjh = self.H @ cho_solve(cho_factor(self.J), self.H)
        resid = np.linalg.norm(self.C.T @ self.H @ self.C - hjh) / np.linalg.norm(hjh)
        if resid > CTC_RTOL:
            raise ValueError(f"C' H C = H J^-1 H violated (relative residual {resid:.3g})")
        trace = float(self.lambdas.sum())
        if trace < self.p - TRACE_SLACK:
            logger.warning(
                "tr(H^-1 J) = %.6g below p = %d (n = %d); the asymptotic variance-inflation "
                "inequality is violated on this fit",
                trace,
                self.p,
                self.n,
            )

    @property
    def p(self) -> int:
        return int(self.theta_hat.size)

    @property
    def trace_hinv_j(self) -> float:
        return float(self.lambdas.sum())

    @property
    def params(self) -> GpParams:
        """MCLE in natural coordinates."""
        if self.coordinates == "unconstrained":
            return GpParams.from_vector(coords.from_working(self.theta_hat))
        return GpParams.from_vector(self.theta_hat)

    def to_dict(self) -> dict:
        return {
            "theta_hat": self.theta_hat.tolist(),
            "H": self.H.tolist(),
            "J": self.J.tolist(),
            "lambdas": self.lambdas.tolist(),
            "k": float(self.k),
            "C": self.C.tolist(),
            "n": int(self.n),
            "coordinates": self.coordinates,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "SandwichFit":
        return cls(
            theta_hat=np.array(payload["theta_hat"]),
            H=np.array(payload["H"]),
            J=np.array(payload["J"]),
            lambdas=np.array(payload["lambdas"]),
            k=float(payload["k"]),
            C=np.array(payload["C"]),
            n=int(payload["n"]),
            coordinates=payload.get("coordinates", "unconstrained"),
        )

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load_json(cls, path: str | Path) -> "SandwichFit":
        return cls.from_dict(json.loads(Path(path).read_text()))


def fit_sandwich(
    model,
    init: GpParams | None = None,
    *,
    seed: int = 0,
    coordinates: str = "unconstrained",
) -> SandwichFit:
    """Maximize the composite likelihood and assemble the full sandwich fit."""
    start = init if init is not None else default_init(model.data)
    mcle = maximize_composite(model, start, seed=seed)
    if coordinates == "unconstrained":
        theta = coords.to_working(mcle.to_vector())
    else:
        theta = mcle.to_vector()
    h_mat = estimate_H(model, theta, coordinates=coordinates)
    j_mat = estimate_J(model, theta, coordinates=coordinates)
    lambdas, k = magnitude_k(h_mat, j_mat)
    c_mat = curvature_C(h_mat, j_mat)
    return SandwichFit(
        theta_hat=theta,
        H=h_mat,
        J=j_mat,
        lambdas=lambdas,
        k=k,
        C=c_mat,
        n=model.n,
        coordinates=coordinates,
    )
