"""PCM16 WAV I/O and the frame-level DSP measurements used by the audit.

All measurements operate on 25 ms non-overlapping frames by default; power
terms carry a 1e-12 floor so that digital silence maps to -120 dB.
"""

from __future__ import annotations

import logging
import math
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
from scipy.signal import lfilter

logger = logging.getLogger(__name__)

POWER_FLOOR = 1e-12
FLOOR_DB = 10.0 * math.log10(POWER_FLOOR)
SILENCE_PEAK_DB = -119.0
SNR_CLAMP_DB = (-10.0, 60.0)
# Minimum distance between the two frame-energy clusters for an SNR split.
SNR_MIN_CONTRAST_DB = 2.0
SILENT_LUFS = -math.inf

PathLike = Union[str, Path]


class AudioFormatError(ValueError):
    """Raised for WAV files that are not 16-bit mono PCM."""


class TooShortError(ValueError):
    pass


@dataclass(frozen=True)
class Waveform:
    """Mono waveform with float samples nominally in [-1, 1]."""

    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("waveform must be one-dimensional (mono)")
        if samples.size < 1:
            raise ValueError("waveform must contain at least one sample")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains NaN or Inf samples")
        if int(self.sample_rate_hz) <= 0:
            raise ValueError("sample rate must be positive")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz

    def replace(self, samples: np.ndarray) -> "Waveform":
        return Waveform(samples, self.sample_rate_hz)


@dataclass(frozen=True)
class VadMask:
    frame_length_samples: int
    flags: np.ndarray  # 1 = speech

    @property
    def n_frames(self) -> int:
        return int(self.flags.size)


@dataclass(frozen=True)
class NuisanceFeature:
    kind: str  # "snr_db" or "nonspeech_proportion"
    value: float
    degenerate: bool = False


def read_pcm(path: PathLike) -> Waveform:
    """Read a 16-bit mono PCM WAV file, scaling samples by 1/32768."""
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            n_frames = wf.getnframes()
            raw = wf.readframes(n_frames)
    except wave.Error as exc:
        raise AudioFormatError(f"{path}: unsupported WAV format ({exc})") from exc
    except EOFError as exc:
        raise AudioFormatError(f"{path}: truncated WAV file") from exc
    if n_channels != 1:
        raise AudioFormatError(f"{path}: expected mono audio, got {n_channels} channels")
    if width != 2:
        raise AudioFormatError(f"{path}: expected 16-bit PCM, got {8 * width}-bit samples")
    ints = np.frombuffer(raw, dtype="<i2")
    if ints.size == 0:
        raise AudioFormatError(f"{path}: no audio samples")
    return Waveform(ints.astype(np.float64) / 32768.0, rate)


def quantize_pcm16(samples: np.ndarray) -> tuple[np.ndarray, int]:
    """Round half away from zero to 16-bit integers; return (ints, n_clipped)."""
    scaled = np.asarray(samples, dtype=np.float64) * 32768.0
    rounded = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    n_clipped = int(np.count_nonzero((rounded > 32767) | (rounded < -32768)))
    return np.clip(rounded, -32768, 32767).astype("<i2"), n_clipped


def write_pcm(waveform: Waveform, path: PathLike) -> int:
    """Write `waveform` as 16-bit mono PCM.

    Out-of-range samples are hard-clipped. Returns the number of clipped
    samples (also logged as a warning when non-zero).
    """
    ints, n_clipped = quantize_pcm16(waveform.samples)
    if n_clipped:
        logger.warning("%s: clipped %d samples", path, n_clipped)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(waveform.sample_rate_hz)
        wf.writeframes(ints.tobytes())
    return n_clipped


def frame_length(sample_rate_hz: int, frame_ms: float = 25.0) -> int:
    n = int(round(frame_ms * sample_rate_hz / 1000.0))
    if n < 1:
        raise ValueError(f"frame of {frame_ms} ms is shorter than one sample")
    return n


def frame_powers(waveform: Waveform, frame_ms: float = 25.0) -> np.ndarray:
    """Mean square per non-overlapping frame; the final partial frame is kept."""
    n = frame_length(waveform.sample_rate_hz, frame_ms)
    x = waveform.samples
    n_frames = -(-x.size // n)
    padded = np.zeros(n_frames * n)
    padded[: x.size] = x
    sums = np.sum(padded.reshape(n_frames, n) ** 2, axis=1)
    counts = np.full(n_frames, n, dtype=np.float64)
    counts[-1] = x.size - (n_frames - 1) * n
    return sums / counts


def frame_energies(waveform: Waveform, frame_ms: float = 25.0) -> np.ndarray:
    """Per-frame log energy in dB: 10*log10(mean square + 1e-12)."""
    return 10.0 * np.log10(frame_powers(waveform, frame_ms) + POWER_FLOOR)


def energy_vad(
    waveform: Waveform, frame_ms: float = 25.0, threshold_db_below_peak: float = 30.0
) -> VadMask:
    """Flag frames whose energy is within `threshold_db_below_peak` of the loudest frame.

    A file whose loudest frame is at or below -119 dB is treated as silence
    and every frame is marked non-speech.
    """
    energies = frame_energies(waveform, frame_ms)
    peak = float(np.max(energies))
    if peak <= SILENCE_PEAK_DB:
        flags = np.zeros(energies.size, dtype=np.int8)
    else:
        flags = (energies >= peak - threshold_db_below_peak).astype(np.int8)
    return VadMask(frame_length(waveform.sample_rate_hz, frame_ms), flags)


def nonspeech_proportion(mask: VadMask) -> float:
    if mask.n_frames == 0:
        raise ValueError("empty VAD mask")
    return float(np.count_nonzero(mask.flags == 0)) / mask.n_frames


def _two_level_split(energies: np.ndarray) -> tuple[np.ndarray, float]:
    """Iterative mid-point (isodata) threshold on frame energies.

    Returns a boolean 'high' mask and the dB distance between the two
    cluster means (0 when only one cluster exists).
    """
    lo, hi = float(energies.min()), float(energies.max())
    threshold = 0.5 * (lo + hi)
    high = energies >= threshold
    for _ in range(100):
        if high.all() or not high.any():
            return high, 0.0
        new = 0.5 * (energies[high].mean() + energies[~high].mean())
        converged = abs(new - threshold) < 1e-9
        threshold = new
        high = energies >= threshold
        if converged:
            break
    if high.all() or not high.any():
        return high, 0.0
    return high, float(energies[high].mean() - energies[~high].mean())


def estimate_snr(waveform: Waveform, frame_ms: float = 25.0) -> NuisanceFeature:
    """Speech-minus-noise power ratio from a two-cluster split of frame energies.

    Frames are split into a high-energy (speech) and a low-energy
    (background) cluster. The estimate is
    10*log10(max(P_speech - P_noise, eps) / max(P_noise, eps)), clamped to
    [-10, 60] dB. When no low-energy background can be separated from the
    rest (silence, or the two clusters are less than 2 dB apart) every frame
    counts as background and -10 dB is returned with ``degenerate=True``.
    """
    powers = frame_powers(waveform, frame_ms)
    energies = 10.0 * np.log10(powers + POWER_FLOOR)
    lo_clamp, hi_clamp = SNR_CLAMP_DB
    if energies.max() <= SILENCE_PEAK_DB:
        return NuisanceFeature("snr_db", lo_clamp, degenerate=True)
    high, contrast = _two_level_split(energies)
    if contrast < SNR_MIN_CONTRAST_DB:
        return NuisanceFeature("snr_db", lo_clamp, degenerate=True)
    p_speech = float(powers[high].mean())
    p_noise = float(powers[~high].mean())
    ratio = max(p_speech - p_noise, POWER_FLOOR) / max(p_noise, POWER_FLOOR)
    value = float(np.clip(10.0 * math.log10(ratio), lo_clamp, hi_clamp))
    return NuisanceFeature("snr_db", value)


def nonspeech_feature(waveform: Waveform, frame_ms: float = 25.0) -> NuisanceFeature:
    return NuisanceFeature(
        "nonspeech_proportion", nonspeech_proportion(energy_vad(waveform, frame_ms))
    )


def extract_feature(waveform: Waveform, kind: str) -> NuisanceFeature:
    if kind == "snr_db":
        return estimate_snr(waveform)
    if kind == "nonspeech_proportion":
        return nonspeech_feature(waveform)
    raise ValueError(f"unknown nuisance feature kind {kind!r}")


# K-weighting analog prototype parameters (BS.1770-4, 48 kHz design).
_SHELF_F0 = 1681.974450955533
_SHELF_GAIN_DB = 3.999843853973347
_SHELF_Q = 0.7071752369554196
_HIGHPASS_F0 = 38.13547087602444
_HIGHPASS_Q = 0.5003270373238773


def k_weighting(sample_rate_hz: int) -> tuple[tuple[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]:
    """Return ((b, a) high-shelf, (b, a) high-pass) K-weighting biquads at `sample_rate_hz`.

    The coefficients come from the bilinear transform of the analog
    prototypes with frequency pre-warping; at 48 kHz they reproduce the
    tabulated coefficients of the standard.
    """
    k = math.tan(math.pi * _SHELF_F0 / sample_rate_hz)
    vh = 10.0 ** (_SHELF_GAIN_DB / 20.0)
    vb = vh ** 0.4996667741545416
    a0 = 1.0 + k / _SHELF_Q + k * k
    shelf_b = np.array([vh + vb * k / _SHELF_Q + k * k, 2.0 * (k * k - vh), vh - vb * k / _SHELF_Q + k * k]) / a0
    shelf_a = np.array([1.0, 2.0 * (k * k - 1.0) / a0, (1.0 - k / _SHELF_Q + k * k) / a0])

    k = math.tan(math.pi * _HIGHPASS_F0 / sample_rate_hz)
    a0 = 1.0 + k / _HIGHPASS_Q + k * k
    hp_b = np.array([1.0, -2.0, 1.0])
    hp_a = np.array([1.0, 2.0 * (k * k - 1.0) / a0, (1.0 - k / _HIGHPASS_Q + k * k) / a0])
    return (shelf_b, shelf_a), (hp_b, hp_a)


def measure_loudness_lufs(waveform: Waveform) -> float:
    """Gated integrated loudness in LUFS.

    Returns ``-inf`` (``SILENT_LUFS``) when every block falls below the
    absolute gate.

    Raises:
        TooShortError: input is shorter than one 400 ms gating block.
    """
    fs = waveform.sample_rate_hz
    block = int(round(0.4 * fs))
    step = int(round(0.1 * fs))
    x = waveform.samples
    if x.size < block:
        raise TooShortError(f"loudness needs at least 400 ms of audio, got {1000 * x.size / fs:.1f} ms")
    (sb, sa), (hb, ha) = k_weighting(fs)
    y = lfilter(hb, ha, lfilter(sb, sa, x))
    n_blocks = (y.size - block) // step + 1
    csum = np.concatenate(([0.0], np.cumsum(y * y)))
    starts = np.arange(n_blocks) * step
    z = (csum[starts + block] - csum[starts]) / block
    z = np.maximum(z, 0.0)  # cumulative-sum round-off
    with np.errstate(divide="ignore"):
        block_lufs = -0.691 + 10.0 * np.log10(z)
    above_abs = block_lufs > -70.0
    if not above_abs.any():
        return SILENT_LUFS
    relative_gate = -0.691 + 10.0 * math.log10(z[above_abs].mean()) - 10.0
    gated = above_abs & (block_lufs > relative_gate)
    return -0.691 + 10.0 * math.log10(z[gated].mean())


def apply_gain(waveform: Waveform, gain_db: float) -> Waveform:
    if not math.isfinite(gain_db):
        raise ValueError("gain must be finite")
    return waveform.replace(waveform.samples * 10.0 ** (gain_db / 20.0))


def save_features(rows, path: PathLike) -> None:
    """Write feature rows ``(id, kind, value)`` as ``id,kind,value`` text."""
    lines = ["id,kind,value"]
    lines += [f"{item_id},{kind},{value!r}" for item_id, kind, value in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
