"""Experiment harness: labeled message streams, detector runs, ROC sweeps.

Streams are generated from seeded link channels so that every detector and
every threshold in a comparison consumes bit-identical data. Because noise is
drawn for all active carriers before subsampling, runs that differ only in
m_subcarriers are paired sample-by-sample as well.

Score convention: both detectors emit a per-message score in [0, 1] (the Bob
posterior for the mixture authenticator, 1/(1+mse) for the baseline) and a
message is flagged when score < threshold. ROC curves therefore sweep score
thresholds; for the baseline the configured grid values act as quantile
levels of the observed score distribution, which concentrates resolution
where the heavy-tailed distances actually live.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from ._io import atomic_write
from .auth import train_initial
from .baseline import MseDetector, UpdateRule
from .channel import (
    ChannelEstimate,
    ChannelProfile,
    MessageRecord,
    NoiseModel,
    Sender,
    generate_true_channel,
    observe_estimate,
)
from .errors import ConfigError, ContractError

_trapezoid = getattr(np, "trapezoid", np.trapz)

DETECTOR_KINDS = ("gmm", "mse")
DEFAULT_THRESHOLD_POINTS = 513
M_STUDY_VALUES = (3, 6, 12, 24, 48)
ROC_CSV_HEADER = "threshold,p_fa,p_d,tp,fn,fp,tn"


def default_threshold_grid(points: int = DEFAULT_THRESHOLD_POINTS) -> np.ndarray:
    if points < 2:
        raise ConfigError(f"threshold grid needs at least 2 points, got {points}")
    return np.linspace(0.0, 1.0, points)


@dataclass(frozen=True)
class StreamSeeds:
    """Independent seeds for the two links, the estimation noise, and the
    attacker's message schedule."""

    bob_link: int = 1
    eve_link: int = 2
    noise: int = 3
    attack: int = 4

    def __post_init__(self):
        for name in ("bob_link", "eve_link", "noise", "attack"):
            if getattr(self, name) < 0:
                raise ConfigError(f"seeds.{name} must be non-negative")


@dataclass
class ExperimentConfig:
    m_subcarriers: int = 48
    block_size: int = 1000
    num_test_blocks: int = 99
    attack_intensity: float = 0.5
    snr_db: float = 20.0
    profile: ChannelProfile = field(default_factory=ChannelProfile)
    seeds: StreamSeeds = field(default_factory=StreamSeeds)
    threshold_grid: np.ndarray | None = None

    def __post_init__(self):
        if self.threshold_grid is None:
            self.threshold_grid = default_threshold_grid()
        self.threshold_grid = np.asarray(self.threshold_grid, dtype=np.float64)
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.attack_intensity <= 1.0:
            raise ConfigError(
                f"attack_intensity must be in [0, 1], got {self.attack_intensity}"
            )
        if self.num_test_blocks < 1:
            raise ConfigError(
                f"num_test_blocks must be at least 1, got {self.num_test_blocks}"
            )
        if self.block_size < 2:
            raise ConfigError(f"block_size must be at least 2, got {self.block_size}")
        if self.m_subcarriers < 1 or self.m_subcarriers > self.profile.active_carriers:
            raise ConfigError(
                f"m_subcarriers must be in [1, {self.profile.active_carriers}], "
                f"got {self.m_subcarriers}"
            )
        if self.profile.active_carriers % self.m_subcarriers != 0:
            raise ConfigError(
                f"m_subcarriers ({self.m_subcarriers}) must divide "
                f"active_carriers ({self.profile.active_carriers})"
            )
        if np.isnan(self.snr_db):
            raise ConfigError("snr_db must not be NaN")
        grid = self.threshold_grid
        if grid.ndim != 1 or grid.size < 1:
            raise ConfigError("threshold_grid must be a non-empty vector")
        if np.any(grid < 0.0) or np.any(grid > 1.0):
            raise ConfigError("threshold_grid values must lie in [0, 1]")
        if grid.size > 1 and np.any(np.diff(grid) <= 0):
            raise ConfigError("threshold_grid must be strictly increasing")

    @property
    def noise_model(self) -> NoiseModel:
        return NoiseModel(self.snr_db)


@dataclass(frozen=True)
class ConfusionCounts:
    """Confusion counts with Eve as the positive (to-be-detected) class."""

    true_detections: int
    missed_detections: int
    false_alarms: int
    correct_accepts: int

    @property
    def eve_total(self) -> int:
        return self.true_detections + self.missed_detections

    @property
    def bob_total(self) -> int:
        return self.false_alarms + self.correct_accepts

    @property
    def p_d(self) -> float:
        if self.eve_total == 0:
            raise ContractError("p_d undefined: no Eve messages")
        return self.true_detections / self.eve_total

    @property
    def p_fa(self) -> float:
        if self.bob_total == 0:
            raise ContractError("p_fa undefined: no Bob messages")
        return self.false_alarms / self.bob_total


@dataclass(frozen=True)
class RocPoint:
    threshold: float
    p_fa: float
    p_d: float
    counts: ConfusionCounts


@dataclass(frozen=True)
class RocCurve:
    """Operating points sorted by p_fa, spanning (0,0) to (1,1)."""

    points: tuple[RocPoint, ...]
    auc: float


def build_stream(
    config: ExperimentConfig,
) -> tuple[list[ChannelEstimate], list[MessageRecord]]:
    """Training block (Bob only) plus a labeled test stream.

    Each test message is Eve's with probability attack_intensity; estimates
    come from the respective link with fresh estimation noise. Deterministic
    in the config, including its seeds.
    """
    config.validate()
    profile = config.profile
    noise = config.noise_model
    bob_channel = generate_true_channel(profile, config.seeds.bob_link)
    eve_channel = generate_true_channel(profile, config.seeds.eve_link)
    noise_rng = np.random.default_rng(config.seeds.noise)
    attack_rng = np.random.default_rng(config.seeds.attack)
    m = config.m_subcarriers
    training = [
        observe_estimate(bob_channel, noise, profile, m, noise_rng)
        for _ in range(config.block_size)
    ]
    test: list[MessageRecord] = []
    for block in range(1, config.num_test_blocks + 1):
        for msg in range(config.block_size):
            is_eve = attack_rng.random() < config.attack_intensity
            chan = eve_channel if is_eve else bob_channel
            estimate = observe_estimate(chan, noise, profile, m, noise_rng)
            test.append(
                MessageRecord(
                    estimate,
                    Sender.EVE if is_eve else Sender.BOB,
                    block,
                    msg,
                )
            )
    return training, test


def stream_scores(
    config: ExperimentConfig,
    detector_kind: str,
    stream: tuple[list[ChannelEstimate], list[MessageRecord]] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Train the chosen detector and score every test message in order.

    Returns (scores, is_eve). For the mixture authenticator the stream passes
    through classify message by message, so block updates happen exactly as
    they would online; the model sequence does not depend on the decision
    threshold because updates are label-free.
    """
    if detector_kind not in DETECTOR_KINDS:
        raise ConfigError(
            f"detector_kind must be one of {DETECTOR_KINDS}, got {detector_kind!r}"
        )
    training, test = stream if stream is not None else build_stream(config)
    if not training:
        raise ConfigError("stream has no training estimates")
    if not test:
        raise ConfigError("stream has no test records")
    labels = np.array([rec.true_sender is Sender.EVE for rec in test])
    if detector_kind == "gmm":
        state = train_initial(training, config.block_size, threshold=0.5)
        scores = np.array(
            [state.classify(rec.estimate).bob_posterior for rec in test]
        )
    else:
        detector = MseDetector.from_training(
            training, threshold=np.inf, update_rule=UpdateRule.FROZEN
        )
        data = np.stack([rec.estimate.gains for rec in test])
        scores = detector.scores(data)
    return scores, labels


def confusion_from_scores(
    scores: np.ndarray, is_eve: np.ndarray, threshold: float
) -> ConfusionCounts:
    """Tally verdicts for one score threshold (flag when score < threshold)."""
    scores = np.asarray(scores, dtype=np.float64)
    is_eve = np.asarray(is_eve, dtype=bool)
    if scores.shape != is_eve.shape:
        raise ContractError("scores and labels must have equal length")
    flagged = scores < threshold
    tp = int(np.count_nonzero(flagged & is_eve))
    fp = int(np.count_nonzero(flagged & ~is_eve))
    n_eve = int(np.count_nonzero(is_eve))
    n_bob = is_eve.size - n_eve
    return ConfusionCounts(
        true_detections=tp,
        missed_detections=n_eve - tp,
        false_alarms=fp,
        correct_accepts=n_bob - fp,
    )


def roc_from_scores(
    scores: np.ndarray,
    is_eve: np.ndarray,
    thresholds: Iterable[float],
) -> RocCurve:
    """ROC curve over the given score thresholds.

    The accept-everything (0,0) and flag-everything (1,1) corners are appended
    when no swept threshold realizes them, so every curve spans the full
    range. AUC is the trapezoid integral of p_d over p_fa.
    """
    scores = np.asarray(scores, dtype=np.float64)
    is_eve = np.asarray(is_eve, dtype=bool)
    n_eve = int(np.count_nonzero(is_eve))
    n_bob = is_eve.size - n_eve
    if n_eve == 0 or n_bob == 0:
        raise ConfigError(
            "ROC needs both Bob and Eve messages in the stream "
            f"(got {n_bob} Bob, {n_eve} Eve)"
        )
    points = []
    for threshold in thresholds:
        counts = confusion_from_scores(scores, is_eve, float(threshold))
        points.append(
            RocPoint(float(threshold), counts.p_fa, counts.p_d, counts)
        )
    corners = {(p.p_fa, p.p_d) for p in points}
    if (0.0, 0.0) not in corners:
        accept_all = ConfusionCounts(0, n_eve, 0, n_bob)
        points.append(RocPoint(0.0, 0.0, 0.0, accept_all))
    if (1.0, 1.0) not in corners:
        flag_all = ConfusionCounts(n_eve, 0, n_bob, 0)
        points.append(RocPoint(1.0, 1.0, 1.0, flag_all))
    points.sort(key=lambda p: (p.p_fa, p.p_d))
    p_fa = np.array([p.p_fa for p in points])
    p_d = np.array([p.p_d for p in points])
    auc = float(_trapezoid(p_d, p_fa))
    return RocCurve(tuple(points), auc)


def run_experiment(
    config: ExperimentConfig,
    detector_kind: str,
    threshold: float,
    stream: tuple[list[ChannelEstimate], list[MessageRecord]] | None = None,
) -> ConfusionCounts:
    """Train the detector, stream every test record through it at the given
    score threshold, and tally confusion counts against ground truth."""
    grid = config.threshold_grid
    if not grid[0] <= threshold <= grid[-1]:
        raise ConfigError(
            f"threshold {threshold} outside grid range [{grid[0]}, {grid[-1]}]"
        )
    scores, labels = stream_scores(config, detector_kind, stream)
    return confusion_from_scores(scores, labels, threshold)


def sweep_roc(
    config: ExperimentConfig,
    detector_kind: str,
    stream: tuple[list[ChannelEstimate], list[MessageRecord]] | None = None,
) -> RocCurve:
    """ROC sweep over the configured threshold grid on one shared stream.

    The stream is generated (or taken) once and scored once; every threshold
    reuses the same scores, so points differ only in the decision rule. For
    the mse detector the grid entries are interpreted as quantile levels of
    the observed scores.
    """
    scores, labels = stream_scores(config, detector_kind, stream)
    if detector_kind == "mse":
        thresholds = np.quantile(scores, config.threshold_grid)
    else:
        thresholds = config.threshold_grid
    return roc_from_scores(scores, labels, thresholds)


def sweep_m(
    config: ExperimentConfig,
    m_values: Iterable[int] = M_STUDY_VALUES,
    detector_kind: str = "gmm",
) -> dict[int, RocCurve]:
    """ROC per subcarrier count on paired streams (identical seeds, so the
    m-subsampled streams share the underlying noisy carrier draws)."""
    curves = {}
    for m in m_values:
        curves[int(m)] = sweep_roc(replace(config, m_subcarriers=int(m)), detector_kind)
    return curves


def operating_point(curve: RocCurve, target_p_fa: float) -> RocPoint:
    """The swept point with the largest realized p_fa at most target_p_fa;
    among equals, the one with the best p_d. No interpolation."""
    if not curve.points:
        raise ContractError("empty ROC curve")
    if not 0.0 <= target_p_fa <= 1.0:
        raise ConfigError(f"target_p_fa must be in [0, 1], got {target_p_fa}")
    eligible = [p for p in curve.points if p.p_fa <= target_p_fa]
    if not eligible:
        raise ContractError(
            f"no operating point with p_fa <= {target_p_fa} on this curve"
        )
    best_fa = max(p.p_fa for p in eligible)
    candidates = [p for p in eligible if p.p_fa == best_fa]
    return max(candidates, key=lambda p: p.p_d)


def write_roc_csv(curve: RocCurve, path: str) -> None:
    """Plot-ready CSV: threshold,p_fa,p_d,tp,fn,fp,tn."""
    with atomic_write(path) as out:
        out.write(ROC_CSV_HEADER + "\n")
        for p in curve.points:
            c = p.counts
            out.write(
                f"{p.threshold!r},{p.p_fa!r},{p.p_d!r},"
                f"{c.true_detections},{c.missed_detections},"
                f"{c.false_alarms},{c.correct_accepts}\n"
            )
