"""Gaussian mixture model with full covariances, fitted by EM.

All density work happens in the log domain (log-sum-exp) so that posteriors
stay finite at feature dimensions around 48 where raw densities underflow.
Covariances are symmetrized and ridge-regularized after every M-step, which is
what keeps the fit alive when a component collapses onto a thin slice of the
data and its sample covariance turns ill-conditioned.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from ._io import atomic_write
from .errors import (
    ConfigError,
    ContractError,
    DegenerateComponentError,
    FitError,
    FormatError,
)

RIDGE_FLOOR = 1e-10
_MASS_FLOOR = 1e-10
_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True, eq=False)
class GaussianComponent:
    """One mixture component: mixing weight, mean vector, covariance matrix.

    The covariance must be exactly symmetric as stored and positive definite;
    the Cholesky factor is computed once at construction and reused for every
    density evaluation.
    """

    weight: float
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64)
        cov = np.array(self.covariance, dtype=np.float64)
        if not -1e-9 <= self.weight <= 1.0 + 1e-9:
            raise ContractError(f"weight must be in [0, 1], got {self.weight}")
        object.__setattr__(self, "weight", float(min(max(self.weight, 0.0), 1.0)))
        if mean.ndim != 1:
            raise ContractError("mean must be a vector")
        if cov.shape != (mean.size, mean.size):
            raise ContractError(
                f"covariance shape {cov.shape} does not match dim {mean.size}"
            )
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise ContractError("mean and covariance must be finite")
        if not np.array_equal(cov, cov.T):
            raise ContractError("covariance must be exactly symmetric as stored")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ContractError("covariance is not positive definite") from exc
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "_chol", chol)
        log_norm = -0.5 * mean.size * _LOG_2PI - np.log(np.diag(chol)).sum()
        object.__setattr__(self, "_log_norm", float(log_norm))

    @property
    def dim(self) -> int:
        return self.mean.size

    def log_density(self, data: np.ndarray) -> np.ndarray:
        """Log N(x | mean, covariance) for each row of data."""
        diff = data - self.mean
        z = solve_triangular(self._chol, diff.T, lower=True, check_finite=False)
        return self._log_norm - 0.5 * np.sum(z * z, axis=0)


@dataclass
class FitInfo:
    iterations: int
    final_log_likelihood: float
    converged: bool
    regularization_applied: bool
    log_likelihood_trace: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "final_log_likelihood": self.final_log_likelihood,
            "converged": self.converged,
            "regularization_applied": self.regularization_applied,
            "log_likelihood_trace": list(self.log_likelihood_trace),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FitInfo":
        return cls(
            iterations=int(data["iterations"]),
            final_log_likelihood=float(data["final_log_likelihood"]),
            converged=bool(data["converged"]),
            regularization_applied=bool(data["regularization_applied"]),
            log_likelihood_trace=[float(v) for v in data.get("log_likelihood_trace", [])],
        )


@dataclass(frozen=True, eq=False)
class GmmModel:
    """Immutable fitted mixture; safe to share across threads for scoring."""

    components: tuple[GaussianComponent, ...]
    dim: int
    fit_info: FitInfo | None = None

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))
        if not self.components:
            raise ContractError("model needs at least one component")
        for comp in self.components:
            if comp.dim != self.dim:
                raise ContractError(
                    f"component dim {comp.dim} does not match model dim {self.dim}"
                )
        total = sum(c.weight for c in self.components)
        if abs(total - 1.0) > 1e-12:
            raise ContractError(f"component weights sum to {total!r}, expected 1")

    @property
    def k(self) -> int:
        return len(self.components)

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "components": [
                {
                    "weight": comp.weight,
                    "mean": comp.mean.tolist(),
                    "covariance": comp.covariance.tolist(),
                }
                for comp in self.components
            ],
            "fit_info": self.fit_info.to_dict() if self.fit_info else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GmmModel":
        try:
            dim = int(data["dim"])
            raw_components = data["components"]
            components = tuple(
                GaussianComponent(c["weight"], c["mean"], c["covariance"])
                for c in raw_components
            )
            raw_info = data.get("fit_info")
            fit_info = FitInfo.from_dict(raw_info) if raw_info else None
        except KeyError as exc:
            raise FormatError(f"model snapshot missing key {exc}") from exc
        except (TypeError, ValueError, ContractError) as exc:
            raise FormatError(f"bad model snapshot: {exc}") from exc
        return cls(components, dim, fit_info)

    def save(self, path: str) -> None:
        with atomic_write(path) as out:
            json.dump(self.to_dict(), out, indent=2)
            out.write("\n")

    @classmethod
    def load(cls, path: str) -> "GmmModel":
        with open(path, "r", encoding="utf-8") as handle:
            try:
                data = json.load(handle)
            except json.JSONDecodeError as exc:
                raise FormatError(f"invalid model snapshot JSON: {exc}") from exc
        return cls.from_dict(data)


def regularize_covariance(sigma: np.ndarray, ridge_scale: float = 1e-6) -> np.ndarray:
    """Return sigma + eps*I with eps = ridge_scale * trace(sigma)/M, floored at
    1e-10, escalating eps tenfold until a Cholesky factorization succeeds."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise ContractError(f"covariance must be square, got shape {sigma.shape}")
    if not np.array_equal(sigma, sigma.T):
        raise ContractError("covariance must be exactly symmetric")
    m = sigma.shape[0]
    eps = max(ridge_scale * max(np.trace(sigma), 0.0) / m, RIDGE_FLOOR)
    eye = np.eye(m)
    for _ in range(32):
        candidate = sigma + eps * eye
        try:
            np.linalg.cholesky(candidate)
        except np.linalg.LinAlgError:
            eps *= 10.0
            continue
        return candidate
    raise FitError("covariance could not be regularized to positive definite")


def _as_data_matrix(data: np.ndarray, what: str = "data") -> np.ndarray:
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 1:
        data = data[:, None]
    if data.ndim != 2:
        raise ContractError(f"{what} must be an N x M matrix")
    if not np.all(np.isfinite(data)):
        raise ContractError(f"{what} must be finite")
    return data


def _log_joint(model: GmmModel, data: np.ndarray) -> np.ndarray:
    """log(weight_k) + log N(x_i | component k) for every row and component."""
    if data.shape[1] != model.dim:
        raise ContractError(
            f"data has {data.shape[1]} columns, model dim is {model.dim}"
        )
    with np.errstate(divide="ignore"):
        log_weights = np.log([comp.weight for comp in model.components])
    cols = [
        comp.log_density(data) + lw
        for comp, lw in zip(model.components, log_weights)
    ]
    return np.column_stack(cols)


def log_density(model: GmmModel, x: np.ndarray) -> float:
    """Log of the mixture density at a single point."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ContractError("x must be a single vector")
    point = _as_data_matrix(x[None, :], "x")
    return float(logsumexp(_log_joint(model, point), axis=1)[0])


def e_step(model: GmmModel, data: np.ndarray) -> tuple[np.ndarray, float]:
    """Posterior responsibilities and total log-likelihood of the data.

    Rows of the returned N x K matrix sum to 1.
    """
    data = _as_data_matrix(data)
    joint = _log_joint(model, data)
    row_ll = logsumexp(joint, axis=1)
    resp = np.exp(joint - row_ll[:, None])
    return resp, float(row_ll.sum())


def _check_responsibilities(resp: np.ndarray, n: int) -> np.ndarray:
    resp = np.asarray(resp, dtype=np.float64)
    if resp.ndim != 2 or resp.shape[0] != n:
        raise ContractError(f"responsibilities must be N x K with N={n}")
    if not np.all(np.isfinite(resp)):
        raise ContractError("responsibilities must be finite")
    if np.any(resp < -1e-9) or np.any(resp > 1.0 + 1e-9):
        raise ContractError("responsibilities must lie in [0, 1]")
    if np.any(np.abs(resp.sum(axis=1) - 1.0) > 1e-9):
        raise ContractError("responsibility rows must sum to 1")
    return resp


def _m_step_impl(
    data: np.ndarray, resp: np.ndarray, ridge_scale: float
) -> tuple[list[GaussianComponent], bool]:
    n = data.shape[0]
    mass = resp.sum(axis=0)
    for k, mk in enumerate(mass):
        if mk <= _MASS_FLOOR:
            raise DegenerateComponentError(
                f"component {k} responsibility mass {mk:.3e} is (numerically) zero"
            )
    weights = mass / n
    weights = weights / weights.sum()
    means = (resp.T @ data) / mass[:, None]
    ridge_needed = False
    components = []
    for k in range(resp.shape[1]):
        diff = data - means[k]
        cov = (resp[:, k, None] * diff).T @ diff / mass[k]
        cov = 0.5 * (cov + cov.T)
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            ridge_needed = True
        cov = regularize_covariance(cov, ridge_scale)
        components.append(GaussianComponent(weights[k], means[k], cov))
    return components, ridge_needed


def m_step(
    data: np.ndarray, resp: np.ndarray, ridge_scale: float = 1e-6
) -> list[GaussianComponent]:
    """Re-estimate weights, means, and covariances from responsibilities.

    Weights are responsibility-mass fractions; means are responsibility-
    weighted averages; covariances are responsibility-weighted outer products
    around the updated means, symmetrized and ridge-regularized.
    """
    data = _as_data_matrix(data)
    resp = _check_responsibilities(resp, data.shape[0])
    components, _ = _m_step_impl(data, resp, ridge_scale)
    return components


def _random_init(
    data: np.ndarray, k: int, rng: np.random.Generator, ridge_scale: float
) -> list[GaussianComponent]:
    # k distinct data points as means; shared diagonal sample-variance covariance.
    idx = rng.choice(data.shape[0], size=k, replace=False)
    cov = regularize_covariance(np.diag(data.var(axis=0)), ridge_scale)
    return [GaussianComponent(1.0 / k, data[i].copy(), cov) for i in idx]


def _run_em(
    data: np.ndarray,
    components: Sequence[GaussianComponent],
    rel_tol: float,
    max_iter: int,
    ridge_scale: float,
) -> tuple[GmmModel, FitInfo]:
    dim = data.shape[1]
    model = GmmModel(tuple(components), dim)
    trace: list[float] = []
    regularized = False
    converged = False
    prev_ll: float | None = None
    for _ in range(max_iter):
        resp, ll = e_step(model, data)
        trace.append(ll)
        if prev_ll is not None and abs(ll - prev_ll) <= rel_tol * max(
            abs(prev_ll), 1e-12
        ):
            converged = True
            break
        new_components, ridge_needed = _m_step_impl(data, resp, ridge_scale)
        regularized = regularized or ridge_needed
        model = GmmModel(tuple(new_components), dim)
        prev_ll = ll
    info = FitInfo(
        iterations=len(trace),
        final_log_likelihood=trace[-1],
        converged=converged,
        regularization_applied=regularized,
        log_likelihood_trace=trace,
    )
    return GmmModel(model.components, dim, info), info


def _standardize(data: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    shift = data.mean(axis=0)
    scale = data.std(axis=0)
    scale[scale == 0.0] = 1.0
    return (data - shift) / scale, shift, scale


def _rescale_component(
    comp: GaussianComponent, shift: np.ndarray, scale: np.ndarray
) -> GaussianComponent:
    mean = shift + scale * comp.mean
    cov = comp.covariance * np.outer(scale, scale)
    cov = 0.5 * (cov + cov.T)
    try:
        return GaussianComponent(comp.weight, mean, cov)
    except ContractError:
        return GaussianComponent(comp.weight, mean, regularize_covariance(cov, 0.0))


def _transform_warm_start(
    warm: GmmModel, shift: np.ndarray, scale: np.ndarray
) -> list[GaussianComponent]:
    components = []
    for comp in warm.components:
        mean = (comp.mean - shift) / scale
        cov = comp.covariance / np.outer(scale, scale)
        cov = 0.5 * (cov + cov.T)
        components.append(GaussianComponent(comp.weight, mean, cov))
    return components


def fit(
    data: np.ndarray,
    k: int,
    *,
    warm_start: GmmModel | None = None,
    seed: int = 0,
    rel_tol: float = 1e-6,
    max_iter: int = 200,
    ridge_scale: float = 1e-6,
    retries: int = 5,
    standardize: bool = False,
) -> GmmModel:
    """Fit a k-component mixture by EM.

    Initialization picks k distinct data points as means with a shared
    diagonal covariance (per-dimension sample variance) and uniform weights,
    unless warm_start supplies the starting parameters. EM alternates
    e_step/m_step until the relative log-likelihood improvement drops below
    rel_tol or max_iter is reached. A component that starves triggers a fresh
    random initialization, up to `retries` times, before a FitError.

    standardize=True runs EM on per-dimension z-scored features for
    conditioning and maps the fitted parameters back to raw feature space, so
    the returned model always lives in raw space.
    """
    data = _as_data_matrix(data)
    if k < 1:
        raise ConfigError(f"k must be at least 1, got {k}")
    if data.shape[0] < k:
        raise ConfigError(f"need at least k={k} points, got {data.shape[0]}")
    shift = scale = None
    if standardize:
        data, shift, scale = _standardize(data)
    rng = np.random.default_rng(seed)
    last_error: Exception | None = None
    attempts = (1 if warm_start is not None else 0) + 1 + max(0, retries)
    for attempt in range(attempts):
        if warm_start is not None and attempt == 0:
            if warm_start.dim != data.shape[1]:
                raise ContractError(
                    f"warm_start dim {warm_start.dim} does not match data "
                    f"dim {data.shape[1]}"
                )
            if warm_start.k != k:
                raise ContractError(
                    f"warm_start has {warm_start.k} components, expected {k}"
                )
            if standardize:
                start = _transform_warm_start(warm_start, shift, scale)
            else:
                start = list(warm_start.components)
        else:
            start = _random_init(data, k, rng, ridge_scale)
        try:
            model, info = _run_em(data, start, rel_tol, max_iter, ridge_scale)
        except DegenerateComponentError as exc:
            last_error = exc
            continue
        if standardize:
            components = tuple(
                _rescale_component(comp, shift, scale) for comp in model.components
            )
            jacobian = data.shape[0] * float(np.log(scale).sum())
            info = FitInfo(
                iterations=info.iterations,
                final_log_likelihood=info.final_log_likelihood - jacobian,
                converged=info.converged,
                regularization_applied=info.regularization_applied,
                log_likelihood_trace=[ll - jacobian for ll in info.log_likelihood_trace],
            )
            model = GmmModel(components, data.shape[1], info)
        return model
    raise FitError(
        f"fit failed: components kept degenerating over {attempts} attempts"
    ) from last_error
