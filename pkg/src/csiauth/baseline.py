"""Mean-square-error reference detector, the comparison baseline.

Accepts a message when the mean squared distance between its gains and a
reference channel vector stays below a threshold. The reference is the
element-wise mean of the training block, so the baseline trains on exactly
the same data as the mixture authenticator. For interface uniformity with
AuthDecision, distances map to scores via score = 1 / (1 + mse), which is
strictly decreasing, so "mse <= threshold" and "score >= 1/(1+threshold)"
are the same test.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from ._io import atomic_write
from .auth import AuthDecision, Verdict
from .channel import ChannelEstimate
from .errors import ConfigError, ContractError, FormatError


class UpdateRule(str, Enum):
    FROZEN = "frozen"
    RUNNING_MEAN_ACCEPTED = "running_mean_accepted"


def mse_distance(reference: np.ndarray, estimate) -> float:
    """Mean squared difference between a reference vector and an estimate."""
    reference = np.asarray(reference, dtype=np.float64)
    gains = estimate.gains if isinstance(estimate, ChannelEstimate) else np.asarray(
        estimate, dtype=np.float64
    )
    if reference.ndim != 1 or gains.shape != reference.shape:
        raise ContractError(
            f"dimension mismatch: reference {reference.shape}, gains {gains.shape}"
        )
    diff = reference - gains
    return float(diff @ diff) / reference.size


def mse_to_score(distance: float) -> float:
    """Map a distance in [0, inf) to a score in (0, 1], larger = more Bob-like."""
    return 1.0 / (1.0 + distance)


@dataclass
class MseDetector:
    """Reference-vector distance test.

    frozen detectors are stateless and freely shareable; with
    update_rule=running_mean_accepted every accepted estimate folds into the
    reference as an incremental mean (the training block counts toward the
    mean with its full weight).
    """

    reference: np.ndarray
    threshold: float
    update_rule: UpdateRule = UpdateRule.FROZEN
    _accepted_count: int = field(default=1, repr=False)

    def __post_init__(self):
        reference = np.array(self.reference, dtype=np.float64)
        if reference.ndim != 1 or reference.size < 1:
            raise ContractError("reference must be a non-empty vector")
        if not np.all(np.isfinite(reference)):
            raise ContractError("reference must be finite")
        self.reference = reference
        self.update_rule = UpdateRule(self.update_rule)
        if np.isnan(self.threshold) or self.threshold < 0:
            raise ConfigError(f"threshold must be non-negative, got {self.threshold}")

    @classmethod
    def from_training(
        cls,
        training: list[ChannelEstimate],
        threshold: float,
        update_rule: UpdateRule = UpdateRule.FROZEN,
    ) -> "MseDetector":
        """Reference = element-wise mean of the training estimates."""
        if not training:
            raise ConfigError("need at least one training estimate")
        data = np.stack([est.gains for est in training])
        if len({est.m for est in training}) != 1:
            raise ContractError("training estimates must share one dimension")
        return cls(
            reference=data.mean(axis=0),
            threshold=threshold,
            update_rule=update_rule,
            _accepted_count=len(training),
        )

    def score(self, estimate) -> float:
        return mse_to_score(mse_distance(self.reference, estimate))

    def scores(self, data: np.ndarray) -> np.ndarray:
        """Vectorized scores for an N x M matrix; valid for frozen detectors."""
        if self.update_rule is not UpdateRule.FROZEN:
            raise ContractError("batch scoring requires a frozen detector")
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 2 or data.shape[1] != self.reference.size:
            raise ContractError(
                f"data must be N x {self.reference.size}, got {data.shape}"
            )
        distances = np.mean((data - self.reference) ** 2, axis=1)
        return 1.0 / (1.0 + distances)

    def classify(self, estimate) -> AuthDecision:
        """Accept iff the MSE distance is at most the threshold."""
        distance = mse_distance(self.reference, estimate)
        accept = distance <= self.threshold
        decision = AuthDecision(
            Verdict.ACCEPT_BOB if accept else Verdict.FLAG_EVE,
            mse_to_score(distance),
            mse_to_score(self.threshold),
        )
        if accept and self.update_rule is UpdateRule.RUNNING_MEAN_ACCEPTED:
            gains = (
                estimate.gains
                if isinstance(estimate, ChannelEstimate)
                else np.asarray(estimate, dtype=np.float64)
            )
            self._accepted_count += 1
            self.reference = self.reference + (gains - self.reference) / (
                self._accepted_count
            )
        return decision

    def to_dict(self) -> dict:
        return {
            "reference": self.reference.tolist(),
            "threshold": self.threshold,
            "update_rule": self.update_rule.value,
        }

    def save(self, path: str) -> None:
        with atomic_write(path) as out:
            json.dump(self.to_dict(), out, indent=2)
            out.write("\n")

    @classmethod
    def from_dict(cls, data: dict) -> "MseDetector":
        try:
            return cls(
                reference=np.asarray(data["reference"], dtype=np.float64),
                threshold=float(data["threshold"]),
                update_rule=UpdateRule(data["update_rule"]),
            )
        except KeyError as exc:
            raise FormatError(f"detector snapshot missing key {exc}") from exc
        except (TypeError, ValueError) as exc:
            raise FormatError(f"bad detector snapshot: {exc}") from exc

    @classmethod
    def load(cls, path: str) -> "MseDetector":
        with open(path, "r", encoding="utf-8") as handle:
            try:
                data = json.load(handle)
            except json.JSONDecodeError as exc:
                raise FormatError(f"invalid detector snapshot JSON: {exc}") from exc
        return cls.from_dict(data)
