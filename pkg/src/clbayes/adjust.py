"""Adjusted composite log-posteriors and likelihood-ratio statistics.

Given a likelihood evaluator, a prior and (where needed) a sandwich fit,
this module builds unnormalized log-posterior evaluators of four kinds:

* ``unadjusted``: plain composite likelihood times prior;
* ``magnitude``:  composite likelihood raised to the power k, times prior;
* ``curvature``:  composite likelihood evaluated at the affine pre-image
  theta* = theta_hat + C (theta - theta_hat), times prior;
* ``full``:       the exact full likelihood times prior.

Only the likelihood factor is ever adjusted; the prior enters untouched.
Evaluators are immutable after construction and safe to share across
chains.  By default they operate in working coordinates
(mu, log tau, log omega) and include the change-of-variables Jacobian;
the natural-coordinate mode returns -inf outside the parameter domain,
including curvature pre-images that leave the domain.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import optimize
from scipy.special import gammaln

from . import coords, sandwich
from .gp_model import GpParams

KINDS = ("unadjusted", "magnitude", "curvature", "full")


@dataclass(frozen=True)
class PriorSpec:
    """Independent priors: normal on mu, inverse gamma on tau and omega.

    Defaults are the reference setup: mu ~ N(0, 100), tau ~ IG(0.1, 1),
    omega ~ IG(0.1, 1) (shape/scale parameterization).
    """

    mu_mean: float = 0.0
    mu_var: float = 100.0
    tau_shape: float = 0.1
    tau_scale: float = 1.0
    omega_shape: float = 0.1
    omega_scale: float = 1.0

    def __post_init__(self) -> None:
        for name in ("mu_var", "tau_shape", "tau_scale", "omega_shape", "omega_scale"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")

    @staticmethod
    def _log_invgamma(x: float, shape: float, scale: float) -> float:
        if x <= 0:
            return -np.inf
        return shape * np.log(scale) - gammaln(shape) - (shape + 1.0) * np.log(x) - scale / x

    def log_density_coord(self, index: int, value: float) -> float:
        """Log prior density of one natural coordinate (0 = mu, 1 = tau, 2 = omega)."""
        if index == 0:
            z = value - self.mu_mean
            return -0.5 * (np.log(2.0 * np.pi * self.mu_var) + z * z / self.mu_var)
        if index == 1:
            return self._log_invgamma(value, self.tau_shape, self.tau_scale)
        if index == 2:
            return self._log_invgamma(value, self.omega_shape, self.omega_scale)
        raise IndexError(f"no prior coordinate {index}")

    def log_density_coord_w(self, index: int, w_value: float) -> float:
        """Log prior density of one coordinate in working coordinates,
        including the log-Jacobian for the two log-transformed ones."""
        if index == 0:
            return self.log_density_coord(0, w_value)
        return self.log_density_coord(index, float(np.exp(w_value))) + w_value

    def log_density(self, theta: np.ndarray) -> float:
        return sum(self.log_density_coord(i, float(theta[i])) for i in range(3))

    def grad_log_density(self, theta: np.ndarray) -> np.ndarray:
        """d log pi / d theta in natural coordinates (interior points only)."""
        mu, tau, omega = float(theta[0]), float(theta[1]), float(theta[2])
        return np.array(
            [
                -(mu - self.mu_mean) / self.mu_var,
                -(self.tau_shape + 1.0) / tau + self.tau_scale / (tau * tau),
                -(self.omega_shape + 1.0) / omega + self.omega_scale / (omega * omega),
            ]
        )


class AdjustedPosterior:
    """Unnormalized log-posterior evaluator of a given adjustment kind.

    Build through :func:`build_posterior`, which also locates the maximizer
    of the likelihood part (needed for likelihood-ratio statistics and for
    proposal construction).
    """

    def __init__(self, kind, model, prior, fit=None, coordinates="unconstrained", lik_argmax=None):
        if kind not in KINDS:
            raise ValueError(f"unknown adjustment kind {kind!r}")
        if kind in ("unadjusted", "full") and fit is not None:
            raise ValueError(f"kind={kind!r} carries no sandwich fit")
        if kind in ("magnitude", "curvature"):
            if fit is None:
                raise ValueError(f"kind={kind!r} requires a sandwich fit")
            if fit.coordinates != coordinates:
                raise ValueError(
                    f"fit coordinates {fit.coordinates!r} do not match posterior {coordinates!r}"
                )
        if coordinates not in ("unconstrained", "natural"):
            raise ValueError(f"unknown coordinate system {coordinates!r}")
        self.kind = kind
        self.model = model
        self.prior = prior
        self.fit = fit
        self.coordinates = coordinates
        self._lik_argmax = np.asarray(lik_argmax, dtype=float)

    @property
    def p(self) -> int:
        return 3

    @property
    def lik_argmax(self) -> np.ndarray:
        """Maximizer of the likelihood part, in the posterior's coordinates."""
        return self._lik_argmax

    def _natural(self, x: np.ndarray) -> np.ndarray | None:
        """Natural-coordinate image of a state, or None when out of domain."""
        if self.coordinates == "unconstrained":
            return coords.from_working(x)
        theta = np.asarray(x, dtype=float)
        if theta[1] <= 0 or theta[2] <= 0:
            return None
        return theta

    def loglik_part(self, x: np.ndarray) -> float:
        """Adjusted log-likelihood factor (no prior, no Jacobian)."""
        x = np.asarray(x, dtype=float)
        if self.kind == "curvature":
            x = self.fit.theta_hat + self.fit.C @ (x - self.fit.theta_hat)
        theta = self._natural(x)
        if theta is None:
            return -np.inf
        value = self.model.loglik(theta)
        if self.kind == "magnitude":
            value *= self.fit.k
        return value

    def log_density(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=float)
        theta = self._natural(x)
        if theta is None:
            return -np.inf
        value = self.loglik_part(x) + self.prior.log_density(theta)
        if self.coordinates == "unconstrained":
            value += coords.log_jacobian(x)
        return float(value)

    def grad_log_density(self, x: np.ndarray) -> np.ndarray:
        """Analytic gradient of :meth:`log_density` at an interior point."""
        x = np.asarray(x, dtype=float)
        theta = self._natural(x)
        if theta is None:
            raise ValueError("gradient requested outside the parameter domain")
        if self.kind == "curvature":
            x_star = self.fit.theta_hat + self.fit.C @ (x - self.fit.theta_hat)
            theta_star = self._natural(x_star)
            if theta_star is None:
                raise ValueError("curvature pre-image left the parameter domain")
            if self.coordinates == "unconstrained":
                g_lik = self.fit.C.T @ self.model.score_w(x_star)
            else:
                g_lik = self.fit.C.T @ self.model.score(x_star)
        else:
            g_lik = self.model.score_w(x) if self.coordinates == "unconstrained" else self.model.score(x)
            if self.kind == "magnitude":
                g_lik = self.fit.k * g_lik
        g_prior_nat = self.prior.grad_log_density(theta)
        if self.coordinates == "unconstrained":
            # prior pushforward: x * dlogpi/dx + 1 for the two log coordinates
            g_prior = coords.score_to_working(g_prior_nat, theta)
            g_prior[1] += 1.0
            g_prior[2] += 1.0
            return g_lik + g_prior
        return g_lik + g_prior_nat

    @cached_property
    def mode(self) -> np.ndarray:
        """Posterior mode, found by quasi-Newton from the likelihood maximizer."""
        res = optimize.minimize(
            lambda x: -self.log_density(x),
            self._lik_argmax,
            jac=lambda x: -self.grad_log_density(x),
            method="BFGS",
            options={"maxiter": 200, "gtol": 1e-8},
        )
        return res.x

    @cached_property
    def precision(self) -> np.ndarray:
        """Negative Hessian of the log-density at the mode.

        Central finite differences of the analytic gradient; eigenvalues
        floored away from zero so the result is usable as a proposal
        precision even in nearly flat directions.
        """
        x0 = self.mode
        steps = 1e-5 * (1.0 + np.abs(x0))
        p = x0.size
        jac = np.empty((p, p))
        for i in range(p):
            e = np.zeros(p)
            e[i] = steps[i]
            jac[:, i] = (self.grad_log_density(x0 + e) - self.grad_log_density(x0 - e)) / (
                2.0 * steps[i]
            )
        prec = -(jac + jac.T) / 2.0
        evals, evecs = np.linalg.eigh(prec)
        floor = 1e-8 * max(float(evals.max()), 1.0)
        evals = np.maximum(evals, floor)
        return (evecs * evals) @ evecs.T


def build_posterior(
    kind: str,
    model,
    prior: PriorSpec,
    fit: sandwich.SandwichFit | None = None,
    *,
    coordinates: str = "unconstrained",
    init: GpParams | None = None,
    seed: int = 0,
) -> AdjustedPosterior:
    """Construct an :class:`AdjustedPosterior`, locating the likelihood
    maximizer when no fit supplies it (unadjusted and full kinds)."""
    if kind in ("magnitude", "curvature"):
        lik_argmax = fit.theta_hat
    else:
        start = init if init is not None else sandwich.default_init(model.data)
        mcle = sandwich.maximize_composite(model, start, seed=seed)
        if coordinates == "unconstrained":
            lik_argmax = coords.to_working(mcle.to_vector())
        else:
            lik_argmax = mcle.to_vector()
    return AdjustedPosterior(
        kind=kind,
        model=model,
        prior=prior,
        fit=fit,
        coordinates=coordinates,
        lik_argmax=lik_argmax,
    )


def lr_statistic(posterior: AdjustedPosterior, theta0: GpParams | np.ndarray) -> float:
    """Likelihood-ratio statistic 2 {l_adj(argmax) - l_adj(theta0)}.

    Prior-free: only the (adjusted) likelihood factor enters.  ``theta0``
    is given in natural coordinates.
    """
    vec = theta0.to_vector() if isinstance(theta0, GpParams) else np.asarray(theta0, dtype=float)
    if vec[1] <= 0 or vec[2] <= 0:
        raise ValueError("theta0 must be in the parameter interior")
    x0 = coords.to_working(vec) if posterior.coordinates == "unconstrained" else vec
    return 2.0 * (posterior.loglik_part(posterior.lik_argmax) - posterior.loglik_part(x0))
