"""Synthetic two-class corpus and a small Gaussian detector for desk-scale runs.

Each file is a burst/gap sequence of harmonic plus shaped-noise content over
a flat background noise floor. The spectral tilt of the active content is
the only label cue, and its class gap scales with ``class_separation``. The
detector models per-class octave-band log energies with diagonal Gaussians.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from . import audio, interventions, metrics
from .audio import Waveform
from .manifest import AudioItem, DatasetManifest, partition, save_manifest
from .seeding import rng_for

N_BANDS = 8
BASE_TILT = 1.2
TILT_SPAN = 1.6  # tilt gap between classes at class_separation=1
ITEM_TILT_SD = 0.1
GROUP_TILT_SD = 0.05
VARIANCE_FLOOR = 1e-4
_FFT = 512
_HOP = 256


class DegenerateFeatureError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusSpec:
    """Toy corpus layout.

    ``background_snr_db`` is the range of the flat noise floor below the
    active content; ``class_snr_offset_db`` raises it for the positive class
    only, which plants an SNR shortcut.
    """

    n_per_cell: int = 100
    duration_s: float = 1.0
    class_separation: float = 0.2
    n_speakers: int = 10
    n_attacks: int = 6
    seed: int = 0
    sample_rate_hz: int = 16000
    background_snr_db: tuple = (40.0, 60.0)
    class_snr_offset_db: float = 0.0

    def __post_init__(self):
        if self.n_per_cell < 10:
            raise ValueError("n_per_cell must be at least 10")
        if not 0.0 <= self.class_separation <= 1.0:
            raise ValueError("class_separation must lie in [0, 1]")
        if self.duration_s <= 0 or self.n_speakers < 1 or self.n_attacks < 1:
            raise ValueError("duration, speaker and attack counts must be positive")
        lo, hi = (float(v) for v in self.background_snr_db)
        if lo > hi:
            raise ValueError("background_snr_db must be an ordered (low, high) pair")
        object.__setattr__(self, "background_snr_db", (lo, hi))

    @classmethod
    def from_mapping(cls, values: Mapping) -> "CorpusSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown corpus fields {sorted(unknown)}")
        return cls(**dict(values))


@dataclass(frozen=True)
class ToyDetector:
    mean_pos: np.ndarray
    var_pos: np.ndarray
    mean_neg: np.ndarray
    var_neg: np.ndarray


@dataclass(frozen=True)
class ToyRun:
    ids: list
    labels: np.ndarray
    scores: np.ndarray
    eer: float
    plan: interventions.InterventionPlan


def _envelope(n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    """Alternating gaps (50-200 ms) and bursts (150-400 ms) with 10 ms ramps."""
    env = np.zeros(n)
    ramp = max(1, int(0.010 * sr))
    pos = int(rng.uniform(0.05, 0.2) * sr)
    while pos < n:
        length = int(rng.uniform(0.15, 0.4) * sr)
        seg = np.ones(max(length, 2 * ramp))
        window = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        seg[:ramp] *= window
        seg[-ramp:] *= window[::-1]
        end = min(n, pos + seg.size)
        env[pos:end] = seg[: end - pos]
        pos = end + int(rng.uniform(0.05, 0.2) * sr)
    return env


def _active_content(n: int, sr: int, f0: float, tilt: float, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / sr
    f0_t = f0 * (1.0 + 0.03 * np.sin(2 * np.pi * 3.0 * t + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(f0_t) / sr
    n_harm = max(1, int(0.45 * sr / (1.04 * f0)))
    h = np.arange(1, n_harm + 1)
    amps = h ** (-tilt)
    offsets = rng.uniform(0, 2 * np.pi, n_harm)
    harmonic = (amps[:, None] * np.sin(h[:, None] * phase[None, :] + offsets[:, None])).sum(axis=0)
    # noise with the same power-law spectral slope
    spectrum = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    shape = np.ones_like(freqs)
    shape[1:] = (freqs[1:] / f0) ** (-tilt)
    shape[0] = 0.0
    shaped = np.fft.irfft(spectrum * shape, n)
    shaped *= 0.3 * np.std(harmonic) / max(np.std(shaped), 1e-12)
    return harmonic + shaped


def synthesize_item(spec: CorpusSpec, class_label: int, item_seed_keys: tuple, speaker: int,
                    attack: Optional[int]) -> Waveform:
    sr = spec.sample_rate_hz
    n = int(round(spec.duration_s * sr))
    rng = rng_for(spec.seed, "toy-item", *item_seed_keys)
    spk_rng = rng_for(spec.seed, "toy-speaker", speaker)
    f0_speaker = spk_rng.uniform(100.0, 220.0)
    tilt = BASE_TILT + spec.class_separation * TILT_SPAN * (class_label - 0.5)
    tilt += spk_rng.normal(0.0, GROUP_TILT_SD)
    if attack is not None:
        tilt += rng_for(spec.seed, "toy-attack", attack).normal(0.0, GROUP_TILT_SD)
    tilt += rng.normal(0.0, ITEM_TILT_SD)
    f0 = f0_speaker * math.exp(rng.normal(0.0, 0.05))

    env = _envelope(n, sr, rng)
    active = _active_content(n, sr, f0, tilt, rng) * env
    on = env > 0.5
    level_db = rng.uniform(-26.0, -20.0)
    active_rms = math.sqrt(float(np.mean(active[on] ** 2))) if on.any() else 1.0
    active *= 10.0 ** (level_db / 20.0) / active_rms
    bg_lo, bg_hi = spec.background_snr_db
    snr = rng.uniform(bg_lo, bg_hi) + spec.class_snr_offset_db * class_label
    background = rng.standard_normal(n) * 10.0 ** ((level_db - snr) / 20.0)
    return Waveform(active + background, sr)


def _corpus_layout(spec: CorpusSpec) -> list[tuple[str, int, int, int, Optional[int]]]:
    rows = []
    spoof_index = 0
    for split in (0, 1):
        for class_label in (0, 1):
            for k in range(spec.n_per_cell):
                item_id = f"toy_c{class_label}s{split}_{k:05d}"
                speaker = len(rows) % spec.n_speakers
                attack = None
                if class_label == 0:
                    attack = spoof_index % spec.n_attacks
                    spoof_index += 1
                rows.append((item_id, class_label, split, speaker, attack))
    return rows


def generate_corpus(spec: CorpusSpec, out_dir, jobs: int = 1) -> DatasetManifest:
    """Write the corpus audio and ``manifest.csv`` under `out_dir`.

    Speakers are assigned round-robin over all items, attacks round-robin over
    negative-class items; every file is its own recording session.
    """
    out_dir = Path(out_dir)
    audio_dir = out_dir / "audio"
    audio_dir.mkdir(parents=True, exist_ok=True)
    layout = _corpus_layout(spec)

    def make(row):
        item_id, class_label, split, speaker, attack = row
        wf = synthesize_item(spec, class_label, (item_id,), speaker, attack)
        path = audio_dir / f"{item_id}.wav"
        audio.write_pcm(wf, path)
        return AudioItem(item_id, path, class_label, split, f"spk{speaker:03d}",
                         None if attack is None else f"atk{attack:02d}",
                         "f" if speaker % 2 else "m", f"cty{speaker % 3}", item_id)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            items = list(pool.map(make, layout))
    else:
        items = [make(row) for row in layout]
    manifest = DatasetManifest(tuple(items), name="toy", sample_rate_hz=spec.sample_rate_hz)
    save_manifest(manifest, out_dir / "manifest.csv")
    return manifest


def band_edges(sample_rate_hz: int) -> np.ndarray:
    """Nine edges of eight octave bands ending at Nyquist."""
    return (sample_rate_hz / 2.0) / 2.0 ** np.arange(N_BANDS, -1, -1)


def band_features(waveform: Waveform) -> np.ndarray:
    """Mean log band energy over 512-point Hann frames, per octave band."""
    x = waveform.samples
    if x.size < _FFT:
        x = np.pad(x, (0, _FFT - x.size))
    frames = np.lib.stride_tricks.sliding_window_view(x, _FFT)[::_HOP]
    power = np.abs(np.fft.rfft(frames * np.hanning(_FFT), axis=1)) ** 2
    freqs = np.fft.rfftfreq(_FFT, 1.0 / waveform.sample_rate_hz)
    edges = band_edges(waveform.sample_rate_hz)
    bands = np.empty((frames.shape[0], N_BANDS))
    for b in range(N_BANDS):
        upper = freqs <= edges[b + 1] if b == N_BANDS - 1 else freqs < edges[b + 1]
        sel = (freqs >= edges[b]) & upper
        bands[:, b] = power[:, sel].sum(axis=1)
    return np.log(bands + 1e-10).mean(axis=0)


def _feature_matrix(items, jobs: int = 1) -> np.ndarray:
    def one(item):
        return band_features(audio.read_pcm(item.path))

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(one, items))
    else:
        rows = [one(item) for item in items]
    return np.array(rows).reshape(len(items), N_BANDS)


def fit_detector(pos_features: np.ndarray, neg_features: np.ndarray) -> ToyDetector:
    pos = np.asarray(pos_features, dtype=np.float64)
    neg = np.asarray(neg_features, dtype=np.float64)
    if pos.shape[0] < 2 or neg.shape[0] < 2:
        raise DegenerateFeatureError("each training class needs at least two files")
    if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(neg))):
        raise DegenerateFeatureError("non-finite band features")
    pooled = np.var(np.vstack([pos, neg]), axis=0)
    if np.all(pooled == 0.0):
        raise DegenerateFeatureError("all band features are constant")
    return ToyDetector(pos.mean(axis=0), np.maximum(pos.var(axis=0), VARIANCE_FLOOR),
                       neg.mean(axis=0), np.maximum(neg.var(axis=0), VARIANCE_FLOOR))


def train_toy(manifest: DatasetManifest, jobs: int = 1) -> ToyDetector:
    """Per-class diagonal Gaussian MLE on the X_10 and X_00 band features."""
    x00, x10, _, _ = partition(manifest)
    if not x00 or not x10:
        raise DegenerateFeatureError("both training classes must be non-empty")
    return fit_detector(_feature_matrix(x10, jobs), _feature_matrix(x00, jobs))


def score_features(detector: ToyDetector, features) -> np.ndarray:
    f = np.asarray(features, dtype=np.float64)

    def log_gauss(mean, var):
        return -0.5 * (np.log(2 * np.pi * var) + (f - mean) ** 2 / var).sum(axis=-1)

    return log_gauss(detector.mean_pos, detector.var_pos) - log_gauss(detector.mean_neg, detector.var_neg)


def score_toy(detector: ToyDetector, waveform: Waveform) -> float:
    return float(score_features(detector, band_features(waveform)))


def run_experiment(manifest: DatasetManifest, spec: interventions.InterventionSpec,
                   config: interventions.ConfigQuadruple, seed: int, out_dir, jobs: int = 1) -> ToyRun:
    """Intervene, train on the train split, score the eval split, write ``scores.csv``."""
    out_dir = Path(out_dir)
    plan = interventions.assign(manifest, spec, config, seed)
    biased = interventions.apply_plan(manifest, plan, out_dir, jobs)
    detector = train_toy(biased, jobs)
    _, _, x01, x11 = partition(biased)
    eval_items = sorted(x01 + x11, key=lambda it: it.id)
    scores = score_features(detector, _feature_matrix(eval_items, jobs))
    labels = np.array([it.class_label for it in eval_items])
    deltas = interventions.plan_deltas(plan)
    save_scores(out_dir / "scores.csv", eval_items, scores, plan, deltas)
    return ToyRun([it.id for it in eval_items], labels, scores, metrics.eer(scores, labels), plan)


SCORE_COLUMNS = ["id", "score", "y_cls", "config", "intervention", "rho_test_neg", "rho_test_pos",
                 "intervened", "delta_pos", "delta_neg", "speaker", "attack"]


def save_scores(path, items, scores, plan: interventions.InterventionPlan, deltas) -> None:
    _, _, te_neg, te_pos = plan.config.rho
    lines = [",".join(SCORE_COLUMNS)]
    for item, score in zip(items, scores):
        delta = deltas[item.id]
        lines.append(",".join([
            item.id, repr(float(score)), str(item.class_label), plan.config.name, plan.spec.kind,
            repr(float(te_neg)), repr(float(te_pos)), str(int(plan.decisions[item.id].intervene)),
            repr(delta.delta_pos), repr(delta.delta_neg), item.speaker_id or "", item.attack_id or "",
        ]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def corpus_spec_dict(spec: CorpusSpec) -> dict:
    out = asdict(spec)
    out["background_snr_db"] = list(spec.background_snr_db)
    return out
