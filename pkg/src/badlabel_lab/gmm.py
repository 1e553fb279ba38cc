"""Two-component 1-D Gaussian mixtures for per-sample loss values.

``fit_em`` is classical maximum likelihood. ``fit_vb`` is mean-field variational
Bayes with a Dirichlet prior on the weights and Normal-Gamma priors on each
component. Both start from the same quantile split, stop when the total
objective (log-likelihood or ELBO, summed over samples) improves by less than
``tol``, and report how many iterations that took. On data that really has one mode the variational fit keeps creeping and
needs many more iterations, which is the signal callers use to reject a
division.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, gammaln, logsumexp

from .errors import ConfigError, DataError

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class VbConfig:
    tol: float = 0.01
    max_iter: int = 20
    weight_concentration: float = 1.0
    mean_precision: float = 1.0
    precision_shape: float = 1.0
    var_floor: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if not self.tol > 0:
            raise ConfigError(f"tol must be > 0, got {self.tol}")
        if self.max_iter < 1:
            raise ConfigError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.weight_concentration <= 0 or self.mean_precision <= 0 or self.precision_shape <= 0:
            raise ConfigError("prior hyperparameters must be positive")


@dataclass
class MixtureFit:
    means: np.ndarray
    variances: np.ndarray
    weights: np.ndarray
    resp: np.ndarray
    converged: bool
    iterations_used: int
    objective: float
    history: list[float] = field(default_factory=list)
    method: str = "em"
    params: dict = field(default_factory=dict)

    @property
    def low_component(self) -> int:
        return int(np.argmin(self.means))

    def responsibilities(self, values) -> np.ndarray:
        """Component posteriors for arbitrary values under the fitted model."""
        x = np.asarray(values, dtype=np.float64).ravel()
        if self.params.get("degenerate"):
            return np.full((x.size, 2), 0.5)
        if self.method == "vb":
            return _vb_e_step(x, self.params)[0]
        return _em_e_step(x, self.weights, self.means, self.variances)[0]


def _validate(values) -> np.ndarray:
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size < 2:
        raise DataError(f"need at least 2 values to fit a mixture, got {x.size}")
    if not np.isfinite(x).all():
        raise DataError("mixture input contains non-finite values")
    return x


def _degenerate(x: np.ndarray, cfg: VbConfig, method: str) -> MixtureFit:
    v = float(x[0])
    return MixtureFit(
        means=np.array([v, v]),
        variances=np.full(2, cfg.var_floor),
        weights=np.array([0.5, 0.5]),
        resp=np.full((x.size, 2), 0.5),
        converged=True,
        iterations_used=0,
        objective=0.0,
        method=method,
        params={"degenerate": True},
    )


def _initial_resp(x: np.ndarray, seed: int) -> np.ndarray:
    """Hard lower/upper half split by rank, softened with a little seeded noise."""
    n = x.size
    rank = np.empty(n, dtype=np.int64)
    rank[np.argsort(x, kind="stable")] = np.arange(n)
    low = (rank < n // 2).astype(np.float64)
    resp = np.column_stack([low, 1.0 - low])
    resp += 0.05 * np.random.default_rng(seed).random((n, 2))
    return resp / resp.sum(axis=1, keepdims=True)


# ----------------------------------------------------------------------------
# EM

def _em_m_step(x, resp, floor):
    nk = resp.sum(axis=0) + 1e-12
    weights = nk / nk.sum()
    means = resp.T @ x / nk
    variances = np.maximum((resp * (x[:, None] - means) ** 2).sum(axis=0) / nk, floor)
    return weights, means, variances


def _em_e_step(x, weights, means, variances):
    log_p = (
        np.log(weights)
        - 0.5 * (LOG_2PI + np.log(variances))
        - 0.5 * (x[:, None] - means) ** 2 / variances
    )
    norm = logsumexp(log_p, axis=1)
    return np.exp(log_p - norm[:, None]), float(norm.sum())


def fit_em(values, config: VbConfig | None = None) -> MixtureFit:
    cfg = config or VbConfig()
    x = _validate(values)
    if np.ptp(x) == 0:
        return _degenerate(x, cfg, "em")
    resp = _initial_resp(x, cfg.seed)
    weights, means, variances = _em_m_step(x, resp, cfg.var_floor)
    resp, ll = _em_e_step(x, weights, means, variances)
    history = [ll]
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        weights, means, variances = _em_m_step(x, resp, cfg.var_floor)
        resp, ll = _em_e_step(x, weights, means, variances)
        history.append(ll)
        if history[-1] - history[-2] < cfg.tol:
            converged = True
            break
    return MixtureFit(
        means, variances, weights, resp, converged, it, history[-1], history, "em",
        {"weights": weights, "means": means, "variances": variances},
    )


# ----------------------------------------------------------------------------
# Variational Bayes

def _vb_prior(x: np.ndarray, cfg: VbConfig) -> dict:
    return {
        "alpha0": cfg.weight_concentration,
        "beta0": cfg.mean_precision,
        "m0": float(x.mean()),
        "a0": cfg.precision_shape,
        "b0": max(float(x.var()), cfg.var_floor),
    }


def _vb_m_step(x, resp, prior, floor) -> dict:
    nk = resp.sum(axis=0) + 1e-12
    xbar = resp.T @ x / nk
    sk = (resp * (x[:, None] - xbar) ** 2).sum(axis=0) / nk
    alpha = prior["alpha0"] + nk
    beta = prior["beta0"] + nk
    m = (prior["beta0"] * prior["m0"] + nk * xbar) / beta
    a = prior["a0"] + 0.5 * nk
    b = prior["b0"] + 0.5 * (nk * sk + prior["beta0"] * nk / beta * (xbar - prior["m0"]) ** 2)
    b = np.maximum(b, floor * a)
    return {**prior, "alpha": alpha, "beta": beta, "m": m, "a": a, "b": b}


def _expectations(q: dict):
    e_log_pi = digamma(q["alpha"]) - digamma(q["alpha"].sum())
    e_log_lam = digamma(q["a"]) - np.log(q["b"])
    e_lam = q["a"] / q["b"]
    return e_log_pi, e_log_lam, e_lam


def _vb_e_step(x, q):
    e_log_pi, e_log_lam, e_lam = _expectations(q)
    log_rho = (
        e_log_pi
        + 0.5 * e_log_lam
        - 0.5 * LOG_2PI
        - 0.5 * (1.0 / q["beta"] + e_lam * (x[:, None] - q["m"]) ** 2)
    )
    norm = logsumexp(log_rho, axis=1)
    return np.exp(log_rho - norm[:, None]), log_rho


def _log_dirichlet_norm(alpha: np.ndarray) -> float:
    return float(gammaln(alpha.sum()) - gammaln(alpha).sum())


def elbo(x: np.ndarray, resp: np.ndarray, q: dict) -> float:
    """Evidence lower bound of the current variational posterior (total, not per sample)."""
    e_log_pi, e_log_lam, e_lam = _expectations(q)
    K = resp.shape[1]
    alpha0, beta0, m0, a0, b0 = (q[k] for k in ("alpha0", "beta0", "m0", "a0", "b0"))

    e_quad = 1.0 / q["beta"] + e_lam * (x[:, None] - q["m"]) ** 2
    lik = (resp * (0.5 * e_log_lam - 0.5 * LOG_2PI - 0.5 * e_quad)).sum()
    log_pz = (resp * e_log_pi).sum()
    log_ppi = _log_dirichlet_norm(np.full(K, alpha0)) + (alpha0 - 1.0) * e_log_pi.sum()
    log_pmulam = (
        0.5 * np.log(beta0 / (2 * np.pi)) + 0.5 * e_log_lam
        - 0.5 * beta0 * (1.0 / q["beta"] + e_lam * (q["m"] - m0) ** 2)
        + a0 * np.log(b0) - gammaln(a0) + (a0 - 1.0) * e_log_lam - b0 * e_lam
    ).sum()

    with np.errstate(divide="ignore", invalid="ignore"):
        log_qz = np.where(resp > 0, resp * np.log(resp), 0.0).sum()
    log_qpi = _log_dirichlet_norm(q["alpha"]) + ((q["alpha"] - 1.0) * e_log_pi).sum()
    log_qmulam = (
        0.5 * np.log(q["beta"] / (2 * np.pi)) + 0.5 * e_log_lam - 0.5
        + q["a"] * np.log(q["b"]) - gammaln(q["a"]) + (q["a"] - 1.0) * e_log_lam - q["a"]
    ).sum()
    return float(lik + log_pz + log_ppi + log_pmulam - log_qz - log_qpi - log_qmulam)


def fit_vb(values, config: VbConfig | None = None) -> MixtureFit:
    cfg = config or VbConfig()
    x = _validate(values)
    if np.ptp(x) == 0:
        return _degenerate(x, cfg, "vb")
    prior = _vb_prior(x, cfg)
    resp = _initial_resp(x, cfg.seed)
    q = _vb_m_step(x, resp, prior, cfg.var_floor)
    history = [elbo(x, resp, q)]
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        resp, _ = _vb_e_step(x, q)
        q = _vb_m_step(x, resp, prior, cfg.var_floor)
        history.append(elbo(x, resp, q))
        if history[-1] - history[-2] < cfg.tol:
            converged = True
            break
    resp, _ = _vb_e_step(x, q)
    weights = q["alpha"] / q["alpha"].sum()
    return MixtureFit(
        q["m"].copy(), q["b"] / q["a"], weights, resp, converged, it, history[-1],
        history, "vb", q,
    )


def fit_mixture(values, config: VbConfig | None = None, bayes: bool = True) -> MixtureFit:
    return fit_vb(values, config) if bayes else fit_em(values, config)


def posterior_low_mean(fit: MixtureFit, values) -> np.ndarray:
    """Posterior probability that each value belongs to the smaller-mean component."""
    x = np.asarray(values, dtype=np.float64).ravel()
    if abs(fit.means[0] - fit.means[1]) < 1e-12:
        return np.full(x.size, 0.5)
    return fit.responsibilities(x)[:, fit.low_component]
