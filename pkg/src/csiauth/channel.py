"""Synthetic per-message OFDM channel estimates and trace file I/O.

The feature vector of a message is the magnitude of the channel gain on the
active subcarriers, observed through additive complex Gaussian estimation
noise. Links are tapped-delay-line Rayleigh channels with an exponential
power-delay profile; two links with different seeds are statistically
independent, which is what makes the channel usable as a transmitter
fingerprint.

All generation is a pure function of (profile, seeds): two runs with equal
configuration produce bit-identical traces.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum

import numpy as np

from ._io import atomic_write
from .errors import ConfigError, ContractError, FormatError

TRACE_FIXED_COLUMNS = ("true_sender", "block_index", "msg_index")


class Sender(str, Enum):
    """Ground-truth message originator, encoded as B/E in trace files."""

    BOB = "B"
    EVE = "E"


@dataclass(frozen=True)
class ChannelProfile:
    """Tapped-delay-line multipath profile.

    num_taps i.i.d. complex Gaussian taps are scaled by an exponential
    power-delay profile (per-tap power ratio ``delay_decay``) normalized to
    unit total power, so the mean per-bin power of the frequency response
    is 1.
    """

    num_taps: int = 8
    delay_decay: float = 0.5
    fft_size: int = 64
    active_carriers: int = 48
    seed: int = 0

    def __post_init__(self):
        if self.num_taps < 1:
            raise ConfigError(f"num_taps must be positive, got {self.num_taps}")
        if not self.delay_decay > 0:
            raise ConfigError(f"delay_decay must be positive, got {self.delay_decay}")
        if self.fft_size < 1:
            raise ConfigError(f"fft_size must be positive, got {self.fft_size}")
        if self.active_carriers < 1:
            raise ConfigError(
                f"active_carriers must be positive, got {self.active_carriers}"
            )
        if self.active_carriers > self.fft_size:
            raise ConfigError(
                f"active_carriers ({self.active_carriers}) exceeds fft_size "
                f"({self.fft_size})"
            )
        if self.num_taps > self.fft_size:
            raise ConfigError(
                f"num_taps ({self.num_taps}) exceeds fft_size ({self.fft_size})"
            )
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")

    def power_delay_profile(self) -> np.ndarray:
        """Per-tap powers, normalized to sum to 1."""
        powers = self.delay_decay ** np.arange(self.num_taps)
        return powers / powers.sum()


@dataclass(frozen=True)
class NoiseModel:
    """Estimation-noise level as an SNR in dB relative to mean channel power."""

    snr_db: float = 20.0

    def __post_init__(self):
        if np.isnan(self.snr_db):
            raise ConfigError("snr_db must not be NaN")
        if self.snr_db == -np.inf:
            raise ConfigError("snr_db = -inf gives infinite noise variance")

    def variance(self, mean_channel_power: float) -> float:
        """Complex noise variance for a link with the given mean per-bin power.

        snr_db = +inf disables noise (variance 0).
        """
        if not mean_channel_power > 0:
            raise ConfigError(
                f"mean channel power must be positive, got {mean_channel_power}"
            )
        return mean_channel_power / 10.0 ** (self.snr_db / 10.0)


@dataclass(frozen=True, eq=False)
class ChannelEstimate:
    """Non-negative subcarrier gain magnitudes for one received message."""

    gains: np.ndarray
    carrier_indices: np.ndarray

    def __post_init__(self):
        gains = np.array(self.gains, dtype=np.float64)
        idx = np.array(self.carrier_indices, dtype=np.int64)
        if gains.ndim != 1 or idx.ndim != 1:
            raise ContractError("gains and carrier_indices must be 1-D")
        if gains.size != idx.size or gains.size < 1:
            raise ContractError(
                f"need equal, non-zero lengths: {gains.size} gains vs "
                f"{idx.size} carrier indices"
            )
        if not np.all(np.isfinite(gains)):
            raise ContractError("gains must be finite")
        if np.any(gains < 0):
            raise ContractError("gains must be non-negative")
        if idx.size > 1 and np.any(np.diff(idx) <= 0):
            raise ContractError("carrier_indices must be strictly increasing")
        gains.setflags(write=False)
        idx.setflags(write=False)
        object.__setattr__(self, "gains", gains)
        object.__setattr__(self, "carrier_indices", idx)

    @property
    def m(self) -> int:
        return self.gains.size


@dataclass(frozen=True)
class MessageRecord:
    """Ground-truth-labeled channel estimate used by the evaluation harness."""

    estimate: ChannelEstimate
    true_sender: Sender
    block_index: int
    msg_index: int

    def __post_init__(self):
        object.__setattr__(self, "true_sender", Sender(self.true_sender))
        if self.block_index < 0 or self.msg_index < 0:
            raise ContractError("block_index and msg_index must be non-negative")


def _draw_taps(profile: ChannelProfile, rng: np.random.Generator) -> np.ndarray:
    scale = np.sqrt(profile.power_delay_profile() / 2.0)
    re = rng.standard_normal(profile.num_taps)
    im = rng.standard_normal(profile.num_taps)
    return scale * (re + 1j * im)


def generate_true_channel(profile: ChannelProfile, link_seed: int) -> np.ndarray:
    """Frequency response (fft_size complex bins) of one link realization.

    Deterministic in (profile, link_seed); independent link seeds realize
    spatially decorrelated channels. Mean per-bin power is 1 in expectation.
    """
    if link_seed < 0:
        raise ConfigError(f"link_seed must be non-negative, got {link_seed}")
    rng = np.random.default_rng([profile.seed, int(link_seed)])
    taps = _draw_taps(profile, rng)
    return np.fft.fft(taps, n=profile.fft_size)


class LinkSimulator:
    """Link whose taps drift between messages via a first-order Gauss-Markov
    recursion; drift_rho=1.0 (default) keeps the channel static.

    The initial state reproduces ``generate_true_channel(profile, link_seed)``
    exactly. The marginal tap distribution is preserved for any drift_rho, so
    long-run statistics match the static case. Convenience for mobility
    experiments; not validated against measurements.
    """

    def __init__(self, profile: ChannelProfile, link_seed: int, drift_rho: float = 1.0):
        if not 0.0 < drift_rho <= 1.0:
            raise ConfigError(f"drift_rho must be in (0, 1], got {drift_rho}")
        if link_seed < 0:
            raise ConfigError(f"link_seed must be non-negative, got {link_seed}")
        self.profile = profile
        self.drift_rho = float(drift_rho)
        self._rng = np.random.default_rng([profile.seed, int(link_seed)])
        self._taps = _draw_taps(profile, self._rng)

    @property
    def response(self) -> np.ndarray:
        return np.fft.fft(self._taps, n=self.profile.fft_size)

    def step(self) -> np.ndarray:
        """Advance one message interval and return the new frequency response."""
        if self.drift_rho < 1.0:
            innovation = _draw_taps(self.profile, self._rng)
            self._taps = (
                self.drift_rho * self._taps
                + np.sqrt(1.0 - self.drift_rho**2) * innovation
            )
        return self.response


def sample_estimation_noise(
    variance: float, size: int, rng: np.random.Generator
) -> np.ndarray:
    """i.i.d. circular complex Gaussian noise with E|n|^2 = variance."""
    if variance < 0:
        raise ConfigError(f"noise variance must be non-negative, got {variance}")
    re = rng.standard_normal(size)
    im = rng.standard_normal(size)
    return np.sqrt(variance / 2.0) * (re + 1j * im)


def observe_estimate(
    true_channel: np.ndarray,
    noise: NoiseModel,
    profile: ChannelProfile,
    m_subcarriers: int,
    rng: np.random.Generator,
) -> ChannelEstimate:
    """Noisy magnitude estimate on m_subcarriers equally spaced active carriers.

    Noise is drawn for every active carrier before subsampling, so for the
    same generator state the m=3 estimate equals the m=48 estimate restricted
    to carriers {0, 16, 32}.
    """
    channel = np.asarray(true_channel, dtype=np.complex128)
    if channel.shape != (profile.fft_size,):
        raise ContractError(
            f"true_channel must have shape ({profile.fft_size},), got {channel.shape}"
        )
    if m_subcarriers < 1 or m_subcarriers > profile.active_carriers:
        raise ConfigError(
            f"m_subcarriers must be in [1, {profile.active_carriers}], "
            f"got {m_subcarriers}"
        )
    if profile.active_carriers % m_subcarriers != 0:
        raise ConfigError(
            f"m_subcarriers ({m_subcarriers}) must divide active_carriers "
            f"({profile.active_carriers}) for equal spacing"
        )
    active = channel[: profile.active_carriers]
    mean_power = float(np.mean(np.abs(active) ** 2))
    variance = noise.variance(mean_power)
    noisy = np.abs(active + sample_estimation_noise(variance, active.size, rng))
    step = profile.active_carriers // m_subcarriers
    indices = np.arange(m_subcarriers) * step
    return ChannelEstimate(noisy[indices], indices)


def _resolve_format(path: str, fmt: str | None) -> str:
    if fmt is None:
        fmt = "jsonl" if str(path).endswith(".jsonl") else "csv"
    if fmt not in ("csv", "jsonl"):
        raise ConfigError(f"unknown trace format: {fmt!r} (expected csv or jsonl)")
    return fmt


def _check_consistent_m(records) -> int:
    m = records[0].estimate.m
    for i, rec in enumerate(records):
        if rec.estimate.m != m:
            raise ContractError(
                f"record {i} has {rec.estimate.m} gains, expected {m}"
            )
    return m


def save_trace(path: str, records: list[MessageRecord], fmt: str | None = None) -> None:
    """Write records to a CSV or JSONL trace; floats round-trip exactly."""
    fmt = _resolve_format(path, fmt)
    with atomic_write(path) as out:
        if not records:
            return
        m = _check_consistent_m(records)
        if fmt == "csv":
            gain_cols = ",".join(f"g_{i}" for i in range(m))
            out.write(",".join(TRACE_FIXED_COLUMNS) + "," + gain_cols + "\n")
            for rec in records:
                gains = ",".join(repr(float(g)) for g in rec.estimate.gains)
                out.write(
                    f"{rec.true_sender.value},{rec.block_index},"
                    f"{rec.msg_index},{gains}\n"
                )
        else:
            for rec in records:
                out.write(
                    json.dumps(
                        {
                            "true_sender": rec.true_sender.value,
                            "block_index": rec.block_index,
                            "msg_index": rec.msg_index,
                            "gains": [float(g) for g in rec.estimate.gains],
                        }
                    )
                    + "\n"
                )


def load_trace(path: str, fmt: str | None = None) -> list[MessageRecord]:
    """Read a trace written by save_trace, validating every row.

    Raises FormatError naming the offending line for malformed rows, and for
    inconsistent gain counts across rows. Carrier indices are not stored in
    traces; loaded estimates are indexed 0..M-1.
    """
    fmt = _resolve_format(path, fmt)
    with open(path, "r", encoding="utf-8") as handle:
        lines = handle.read().splitlines()
    if fmt == "csv":
        return _parse_csv(lines)
    return _parse_jsonl(lines)


def _make_record(gains, sender, block_index, msg_index, lineno, seen) -> MessageRecord:
    try:
        estimate = ChannelEstimate(gains, np.arange(len(gains)))
        record = MessageRecord(estimate, Sender(sender), block_index, msg_index)
    except (ContractError, ValueError) as exc:
        raise FormatError(f"line {lineno}: {exc}") from exc
    key = (record.block_index, record.msg_index)
    if key in seen:
        raise FormatError(
            f"line {lineno}: duplicate msg_index {msg_index} in block {block_index}"
        )
    seen.add(key)
    return record


def _parse_csv(lines: list[str]) -> list[MessageRecord]:
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines:
        return []
    header = lines[0].split(",")
    if tuple(header[:3]) != TRACE_FIXED_COLUMNS or len(header) < 4:
        raise FormatError(
            "line 1: expected header 'true_sender,block_index,msg_index,g_0,...'"
        )
    m = len(header) - 3
    if header[3:] != [f"g_{i}" for i in range(m)]:
        raise FormatError("line 1: gain columns must be g_0..g_{M-1} in order")
    records: list[MessageRecord] = []
    seen: set[tuple[int, int]] = set()
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 3 + m:
            raise FormatError(
                f"line {lineno}: expected {3 + m} fields, got {len(parts)}"
            )
        try:
            block_index = int(parts[1])
            msg_index = int(parts[2])
            gains = [float(p) for p in parts[3:]]
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}") from exc
        records.append(
            _make_record(gains, parts[0], block_index, msg_index, lineno, seen)
        )
    return records


def _parse_jsonl(lines: list[str]) -> list[MessageRecord]:
    records: list[MessageRecord] = []
    seen: set[tuple[int, int]] = set()
    m: int | None = None
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"line {lineno}: invalid JSON: {exc}") from exc
        if not isinstance(obj, dict):
            raise FormatError(f"line {lineno}: expected an object")
        try:
            sender = obj["true_sender"]
            block_index = obj["block_index"]
            msg_index = obj["msg_index"]
            gains = obj["gains"]
        except KeyError as exc:
            raise FormatError(f"line {lineno}: missing key {exc}") from exc
        if not isinstance(gains, list):
            raise FormatError(f"line {lineno}: gains must be a list")
        if m is None:
            m = len(gains)
        elif len(gains) != m:
            raise FormatError(
                f"line {lineno}: {len(gains)} gains, expected {m} as in earlier rows"
            )
        records.append(_make_record(gains, sender, block_index, msg_index, lineno, seen))
    return records
