"""Online transmitter authentication from channel estimates.

The authenticator keeps a two-component mixture: one component models the
legitimate transmitter (Bob), the other models "anything else". A message is
accepted when the posterior responsibility of Bob's component is at least the
decision threshold. Every block_size messages the mixture is refit on the
buffered block, warm-started from the current parameters, so the model tracks
the channel without storing history.

Training data comes from Bob alone, before any attack, so a plain two-cluster
EM fit of it cannot represent an attacker: both components land inside Bob's
cloud and the first test block misbehaves (arbitrary splits flag up to ~40% of
Bob's own traffic). train_initial therefore checks whether the fitted
components are credibly separated clusters; when they are not, it installs a
"watchdog" model instead: Bob's component is the training moments and the
second component is a broad background (same mean, covariance scaled by
background_scale**2) that catches estimates far from Bob's cloud. The first
warm-started block update then migrates the background onto the attacker's
actual cluster as soon as one appears. Block updates apply the same check, so
attack-free periods keep the watchdog shape instead of drifting into an
arbitrary split of Bob's cloud.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.linalg import solve_triangular

from . import gmm
from ._io import atomic_write
from .channel import ChannelEstimate
from .errors import ConfigError, ContractError, FitError, FormatError

DEFAULT_BACKGROUND_SCALE = 10.0


class Verdict(str, Enum):
    ACCEPT_BOB = "AcceptBob"
    FLAG_EVE = "FlagEve"


@dataclass(frozen=True)
class AuthDecision:
    """Per-message verdict: accept iff bob_posterior >= threshold_used."""

    verdict: Verdict
    bob_posterior: float
    threshold_used: float

    def __post_init__(self):
        if not 0.0 <= self.bob_posterior <= 1.0:
            raise ContractError(
                f"bob_posterior must be in [0, 1], got {self.bob_posterior}"
            )
        accept = self.bob_posterior >= self.threshold_used
        if accept != (self.verdict is Verdict.ACCEPT_BOB):
            raise ContractError("verdict inconsistent with posterior and threshold")


def _pairwise_separation(model: gmm.GmmModel) -> float:
    """Smallest squared Mahalanobis distance between the two component means,
    measured in each component's own metric."""
    a, b = model.components
    diff = a.mean - b.mean
    worst = np.inf
    for comp in (a, b):
        z = solve_triangular(comp._chol, diff, lower=True, check_finite=False)
        worst = min(worst, float(z @ z))
    return worst


def _separation_crossover(dim: int, background_scale: float) -> float:
    # Squared Mahalanobis radius at which a broad component (covariance scaled
    # by background_scale**2) overtakes the tight one it surrounds.
    beta2 = background_scale**2
    return 2.0 * dim * np.log(background_scale) / (1.0 - 1.0 / beta2)


def _is_credibly_bimodal(model: gmm.GmmModel, background_scale: float) -> bool:
    return _pairwise_separation(model) >= _separation_crossover(
        model.dim, background_scale
    )


def _empirical_moments(data: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = data.mean(axis=0)
    diff = data - mean
    cov = diff.T @ diff / data.shape[0]
    return mean, 0.5 * (cov + cov.T)


def _watchdog_model(
    data: np.ndarray, background_scale: float, ridge_scale: float
) -> gmm.GmmModel:
    """Training moments plus a broad background component around them."""
    mean, raw_cov = _empirical_moments(data)
    try:
        np.linalg.cholesky(raw_cov)
        ridge_needed = False
    except np.linalg.LinAlgError:
        ridge_needed = True
    cov = gmm.regularize_covariance(raw_cov, ridge_scale)
    components = (
        gmm.GaussianComponent(0.5, mean, cov),
        gmm.GaussianComponent(0.5, mean, background_scale**2 * cov),
    )
    model = gmm.GmmModel(components, data.shape[1])
    _, ll = gmm.e_step(model, data)
    info = gmm.FitInfo(
        iterations=0,
        final_log_likelihood=ll,
        converged=True,
        regularization_applied=ridge_needed,
        log_likelihood_trace=[ll],
    )
    return gmm.GmmModel(components, data.shape[1], info)


def _majority_component(model: gmm.GmmModel, data: np.ndarray) -> int:
    """Component holding most hard assignments; ties break to the larger
    mixing weight, then the lower index."""
    resp, _ = gmm.e_step(model, data)
    counts = np.bincount(resp.argmax(axis=1), minlength=model.k)
    order = sorted(
        range(model.k),
        key=lambda k: (-counts[k], -model.components[k].weight, k),
    )
    return order[0]


def _stack_estimates(estimates: list[ChannelEstimate]) -> np.ndarray:
    if not estimates:
        raise ConfigError("need at least one estimate")
    m = estimates[0].m
    for i, est in enumerate(estimates):
        if est.m != m:
            raise ContractError(f"estimate {i} has {est.m} gains, expected {m}")
    return np.stack([est.gains for est in estimates])


@dataclass
class AuthenticatorState:
    """Mutable per-link authentication state machine.

    classify/update_block must be externally serialized; the embedded model is
    immutable and may be shared read-only.
    """

    model: gmm.GmmModel
    bob_component: int
    threshold: float
    block_size: int
    block_count: int = 1
    buffer: list[ChannelEstimate] = field(default_factory=list)
    refit_accepted_only: bool = False
    background_scale: float = DEFAULT_BACKGROUND_SCALE
    rel_tol: float = 1e-6
    max_iter: int = 200
    ridge_scale: float = 1e-6
    _buffer_accepted: list[bool] = field(default_factory=list, init=False, repr=False)

    def __post_init__(self):
        if not 0 <= self.bob_component < self.model.k:
            raise ConfigError(
                f"bob_component must be in [0, {self.model.k - 1}], "
                f"got {self.bob_component}"
            )
        if self.block_size < 2:
            raise ConfigError(f"block_size must be at least 2, got {self.block_size}")
        if self.background_scale <= 1.0:
            raise ConfigError(
                f"background_scale must exceed 1, got {self.background_scale}"
            )
        self.threshold = float(min(max(self.threshold, 0.0), 1.0))

    def bob_posterior(self, estimate: ChannelEstimate) -> float:
        """Posterior responsibility of Bob's component for one estimate."""
        resp, _ = gmm.e_step(self.model, estimate.gains[None, :])
        return float(resp[0, self.bob_component])

    def bob_posteriors(self, data: np.ndarray) -> np.ndarray:
        """Vectorized posterior scores for an N x M matrix; no side effects."""
        resp, _ = gmm.e_step(self.model, data)
        return resp[:, self.bob_component]

    def classify(self, estimate: ChannelEstimate) -> AuthDecision:
        """Score one message, buffer it, and refresh the model when the buffer
        reaches block_size. The verdict always uses the pre-update model."""
        posterior = self.bob_posterior(estimate)
        accept = posterior >= self.threshold
        decision = AuthDecision(
            Verdict.ACCEPT_BOB if accept else Verdict.FLAG_EVE,
            posterior,
            self.threshold,
        )
        self.buffer.append(estimate)
        self._buffer_accepted.append(accept)
        if len(self.buffer) >= self.block_size:
            self.update_block()
        return decision

    def update_block(self) -> None:
        """Refit the mixture on the buffered block, warm-started from the
        current parameters, then re-identify Bob's component as the one whose
        mean is nearest the previous Bob mean (ties to the lower index).

        A block without a credible second cluster (attack-free traffic, or a
        starved component) rebuilds the watchdog model from the block moments
        instead of keeping an arbitrary split. On failure the state is left
        unchanged and the error names the block.
        """
        if len(self.buffer) != self.block_size:
            raise ConfigError(
                f"buffer holds {len(self.buffer)} estimates, need exactly "
                f"{self.block_size}"
            )
        if self.refit_accepted_only:
            selected = [
                est
                for est, ok in zip(self.buffer, self._buffer_accepted)
                if ok
            ]
            if len(selected) < 2:
                # Nothing usable to refit on; keep the model, rotate the block.
                self.buffer.clear()
                self._buffer_accepted.clear()
                self.block_count += 1
                return
        else:
            selected = self.buffer
        try:
            new_model = self._refit(_stack_estimates(selected))
        except (FitError, ContractError) as exc:
            raise FitError(f"block {self.block_count} update failed: {exc}") from exc
        previous_mean = self.model.components[self.bob_component].mean
        distances = [
            np.linalg.norm(comp.mean - previous_mean) for comp in new_model.components
        ]
        self.model = new_model
        self.bob_component = int(np.argmin(distances))
        self.buffer.clear()
        self._buffer_accepted.clear()
        self.block_count += 1

    def _refit(self, data: np.ndarray) -> gmm.GmmModel:
        if data.shape[1] != self.model.dim:
            raise ContractError(
                f"block dim {data.shape[1]} does not match model dim {self.model.dim}"
            )
        try:
            refit = gmm.fit(
                data,
                2,
                warm_start=self.model,
                retries=0,
                rel_tol=self.rel_tol,
                max_iter=self.max_iter,
                ridge_scale=self.ridge_scale,
            )
        except FitError:
            refit = None
        if refit is not None and _is_credibly_bimodal(refit, self.background_scale):
            return refit
        return _watchdog_model(data, self.background_scale, self.ridge_scale)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "bob_component": self.bob_component,
            "threshold": self.threshold,
            "block_size": self.block_size,
            "block_count": self.block_count,
            "refit_accepted_only": self.refit_accepted_only,
            "background_scale": self.background_scale,
        }

    def save(self, path: str) -> None:
        """Snapshot for frozen scoring. The pending buffer is not serialized."""
        with atomic_write(path) as out:
            json.dump(self.to_dict(), out, indent=2)
            out.write("\n")

    @classmethod
    def from_dict(cls, data: dict) -> "AuthenticatorState":
        try:
            return cls(
                model=gmm.GmmModel.from_dict(data["model"]),
                bob_component=int(data["bob_component"]),
                threshold=float(data["threshold"]),
                block_size=int(data["block_size"]),
                block_count=int(data["block_count"]),
                refit_accepted_only=bool(data.get("refit_accepted_only", False)),
                background_scale=float(
                    data.get("background_scale", DEFAULT_BACKGROUND_SCALE)
                ),
            )
        except KeyError as exc:
            raise FormatError(f"state snapshot missing key {exc}") from exc
        except (TypeError, ValueError) as exc:
            raise FormatError(f"bad state snapshot: {exc}") from exc

    @classmethod
    def load(cls, path: str) -> "AuthenticatorState":
        with open(path, "r", encoding="utf-8") as handle:
            try:
                data = json.load(handle)
            except json.JSONDecodeError as exc:
                raise FormatError(f"invalid state snapshot JSON: {exc}") from exc
        return cls.from_dict(data)


def train_initial(
    training: list[ChannelEstimate],
    block_size: int,
    threshold: float,
    *,
    refit_accepted_only: bool = False,
    background_scale: float = DEFAULT_BACKGROUND_SCALE,
    seed: int = 0,
    rel_tol: float = 1e-6,
    max_iter: int = 200,
    ridge_scale: float = 1e-6,
) -> AuthenticatorState:
    """Build the initial authentication state from training messages.

    A two-component EM fit of the training block is adopted when its
    components form credibly separated clusters, with Bob identified as the
    component holding the majority of hard assignments. Otherwise (the normal
    case: training traffic from Bob alone is a single cloud) the watchdog
    model described in the module docstring is installed, whose majority
    component is the training-moments component.

    Thresholds outside [0, 1] are clamped.
    """
    if len(training) < 2:
        raise ConfigError(
            f"need at least 2 training estimates, got {len(training)}"
        )
    data = _stack_estimates(training)
    fitted = None
    try:
        fitted = gmm.fit(
            data,
            2,
            seed=seed,
            rel_tol=rel_tol,
            max_iter=max_iter,
            ridge_scale=ridge_scale,
        )
    except FitError:
        pass
    if fitted is not None and _is_credibly_bimodal(fitted, background_scale):
        model = fitted
    else:
        model = _watchdog_model(data, background_scale, ridge_scale)
    bob = _majority_component(model, data)
    return AuthenticatorState(
        model=model,
        bob_component=bob,
        threshold=threshold,
        block_size=block_size,
        block_count=1,
        refit_accepted_only=refit_accepted_only,
        background_scale=background_scale,
        rel_tol=rel_tol,
        max_iter=max_iter,
        ridge_scale=ridge_scale,
    )
