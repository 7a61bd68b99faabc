"""Transformations between natural and unconstrained parameter coordinates.

Natural coordinates are (mu, tau, omega) with tau > 0 and omega > 0.
Working coordinates are (mu, log tau, log omega); all estimation,
adjustment and random-walk sampling happens in this unconstrained space
and results are mapped back for reporting.
"""

from __future__ import annotations

import numpy as np

NATURAL_NAMES = ("mu", "tau", "omega")
N_PARAMS = 3


def to_working(theta: np.ndarray) -> np.ndarray:
    """Map natural (mu, tau, omega) to working (mu, log tau, log omega)."""
    theta = np.asarray(theta, dtype=float)
    if theta[1] <= 0 or theta[2] <= 0:
        raise ValueError(f"cannot map to working coordinates: tau={theta[1]}, omega={theta[2]}")
    return np.array([theta[0], np.log(theta[1]), np.log(theta[2])])


def from_working(w: np.ndarray) -> np.ndarray:
    """Inverse of :func:`to_working`.

    Overflow to inf is deliberate; likelihood evaluators treat non-finite
    parameters as out of domain (optimizer line searches can wander far).
    """
    w = np.asarray(w, dtype=float)
    with np.errstate(over="ignore"):
        return np.array([w[0], np.exp(w[1]), np.exp(w[2])])


def log_jacobian(w: np.ndarray) -> float:
    """log |d(natural)/d(working)| = log tau + log omega."""
    return float(w[1] + w[2])


def score_to_working(score_nat: np.ndarray, theta_nat: np.ndarray) -> np.ndarray:
    """Chain rule for gradients: dl/dw_i = dl/dtheta_i * dtheta_i/dw_i.

    Works for a single score vector of shape (3,) or a stack of shape (n, 3).
    """
    scale = np.array([1.0, theta_nat[1], theta_nat[2]])
    return np.asarray(score_nat, dtype=float) * scale
