"""Controlled dataset interventions.

An intervention plan picks, for every (class, split) subset of a manifest,
exactly floor(rho * M) items to transform with one intervention type. Each
selected item draws its control parameter from a substream keyed by the
master seed and the item id, so plans do not depend on item order.
"""

from __future__ import annotations

import logging
import math
import shlex
import subprocess
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import audio
from .audio import Waveform
from .manifest import SUBSET_KEYS, AudioItem, DatasetManifest, partition, save_manifest
from .seeding import rng_for, stream_seed

logger = logging.getLogger(__name__)

KINDS = ("white_noise", "mu_law", "loudness_norm", "nonspeech_zeroing", "external_codec")
PARAMETER_FREE = ("mu_law", "nonspeech_zeroing")
DEFAULT_INTERVALS = {"white_noise": (0.0, 30.0), "loudness_norm": (-31.0, -13.0)}
DEFAULT_CODEC_CHOICES = (16, 32, 64, 128, 256)
MU = 255
MU_LAW_STEPS = 127  # magnitude steps per sign: 8-bit sign-magnitude code

# (train_neg, train_pos, test_neg, test_pos)
CONFIG_BITS = {
    "O": (0, 0, 0, 0),
    "I": (1, 1, 1, 1),
    "M_tr": (1, 1, 0, 0),
    "M_te": (0, 0, 1, 1),
    "IT_p": (0, 1, 0, 1),
    "IT_n": (1, 0, 1, 0),
    "IV_pn": (0, 1, 1, 0),
    "IV_np": (1, 0, 0, 1),
    "O_n": (0, 0, 1, 0),
    "O_p": (0, 0, 0, 1),
}
_ALIASES = {"IV_ps": "IV_pn"}
_RHO_INDEX = {(0, 0): 0, (1, 0): 1, (0, 1): 2, (1, 1): 3}  # (class, split) -> slot

TRAIN_CORNERS = {
    "O-train": (0, 0),
    "bonafide-only-train": (0, 1),
    "spoof-only-train": (1, 0),
}


class InterventionError(RuntimeError):
    pass


class ZeroPowerError(ValueError):
    pass


class SilentInputError(ValueError):
    pass


class CodecError(RuntimeError):
    pass


@dataclass(frozen=True)
class InterventionSpec:
    """Intervention type plus its control-parameter distribution.

    Continuous kinds draw z ~ U[low, high]; ``external_codec`` draws z
    uniformly from ``choices``; ``mu_law`` and ``nonspeech_zeroing`` take no
    parameter.
    """

    kind: str
    low: Optional[float] = None
    high: Optional[float] = None
    choices: Optional[tuple] = None
    codec_cmd: Optional[str] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown intervention kind {self.kind!r}; expected one of {KINDS}")
        if self.kind in PARAMETER_FREE:
            if self.low is not None or self.high is not None or self.choices:
                raise ValueError(f"{self.kind} is parameter-free and takes no control interval")
        elif self.kind == "external_codec":
            if not self.choices:
                raise ValueError("external_codec needs a non-empty choice set")
            if not self.codec_cmd:
                raise ValueError("external_codec needs a command template")
            object.__setattr__(self, "choices", tuple(self.choices))
        else:
            if self.low is None or self.high is None:
                raise ValueError(f"{self.kind} needs a control interval")
            if self.low > self.high:
                raise ValueError(f"control interval [{self.low}, {self.high}] is inverted")

    @classmethod
    def default(cls, kind: str, codec_cmd: Optional[str] = None) -> "InterventionSpec":
        if kind in DEFAULT_INTERVALS:
            lo, hi = DEFAULT_INTERVALS[kind]
            return cls(kind, lo, hi)
        if kind == "external_codec":
            return cls(kind, choices=DEFAULT_CODEC_CHOICES, codec_cmd=codec_cmd)
        return cls(kind)

    @property
    def has_control(self) -> bool:
        return self.kind not in PARAMETER_FREE

    def draw(self, rng: np.random.Generator) -> Optional[float]:
        if self.kind in PARAMETER_FREE:
            return None
        if self.choices:
            return self.choices[int(rng.integers(len(self.choices)))]
        return float(rng.uniform(self.low, self.high))

    def describe(self) -> str:
        if self.kind in PARAMETER_FREE:
            return "none"
        if self.choices:
            return "choices:" + "|".join(str(c) for c in self.choices)
        return f"uniform:{self.low!r}:{self.high!r}"


@dataclass(frozen=True)
class ConfigQuadruple:
    rho: tuple[float, float, float, float]  # (train_neg, train_pos, test_neg, test_pos)
    name: str = "partial"

    def __post_init__(self):
        rho = tuple(float(r) for r in self.rho)
        if len(rho) != 4 or any(not 0.0 <= r <= 1.0 for r in rho):
            raise ValueError(f"configuration needs four probabilities in [0, 1], got {self.rho}")
        object.__setattr__(self, "rho", rho)
        if self.name in CONFIG_BITS and rho != tuple(float(b) for b in CONFIG_BITS[self.name]):
            raise ValueError(f"configuration {self.name} must have bits {CONFIG_BITS[self.name]}")

    def rho_for(self, class_label: int, split: int) -> float:
        return self.rho[_RHO_INDEX[(class_label, split)]]

    @property
    def train_neg(self) -> float:
        return self.rho[0]

    @property
    def train_pos(self) -> float:
        return self.rho[1]

    @property
    def is_corner(self) -> bool:
        return all(r in (0.0, 1.0) for r in self.rho)


@dataclass(frozen=True)
class Decision:
    intervene: bool
    z: Optional[float] = None


@dataclass(frozen=True)
class InterventionPlan:
    spec: InterventionSpec
    config: ConfigQuadruple
    master_seed: int
    decisions: Mapping[str, Decision]
    subsets: Mapping[str, tuple[int, int]] = field(default_factory=dict)

    def intervened_ids(self) -> list[str]:
        return sorted(i for i, d in self.decisions.items() if d.intervene)

    def noise_seed(self, item_id: str) -> int:
        return stream_seed(self.master_seed, "noise", item_id)


@dataclass(frozen=True)
class DeltaFeatures:
    delta_pos: float  # |rho_test(i) - rho_train_pos|, the bonafide-side regressor
    delta_neg: float  # |rho_test(i) - rho_train_neg|, the spoof-side regressor


def config_from_name(name: str) -> ConfigQuadruple:
    key = _ALIASES.get(name, name)
    if key not in CONFIG_BITS:
        raise KeyError(f"unknown configuration {name!r}; expected one of {sorted(CONFIG_BITS)}")
    return ConfigQuadruple(CONFIG_BITS[key], key)


def config_name_for(rho: Sequence[float]) -> str:
    rho = tuple(float(r) for r in rho)
    for name, bits in CONFIG_BITS.items():
        if rho == tuple(float(b) for b in bits):
            return name
    return "partial"


def n_selected(rho: float, m: int) -> int:
    """floor(rho * m) with rho taken at its decimal value (0.29 * 100 -> 29)."""
    return math.floor(Fraction(repr(float(rho))) * m)


def assign(manifest: DatasetManifest, spec: InterventionSpec, config: ConfigQuadruple,
           master_seed: int) -> InterventionPlan:
    decisions: dict[str, Decision] = {}
    subsets: dict[str, tuple[int, int]] = {}
    for key, items in zip(SUBSET_KEYS, partition(manifest)):
        ids = sorted(item.id for item in items)
        n = n_selected(config.rho_for(*key), len(ids))
        order = rng_for(master_seed, "select", f"X_{key[0]}{key[1]}").permutation(len(ids))
        chosen = {ids[k] for k in order[:n]}
        for item_id in ids:
            subsets[item_id] = key
            if item_id in chosen:
                z = spec.draw(rng_for(master_seed, "z", item_id))
                decisions[item_id] = Decision(True, z)
            else:
                decisions[item_id] = Decision(False, None)
    return InterventionPlan(spec, config, int(master_seed), decisions, subsets)


def add_white_noise(x: Waveform, snr_db: float, noise_seed: int) -> Waveform:
    """Add Gaussian noise whose sample power sits exactly `snr_db` below the signal's."""
    p_x = float(np.mean(x.samples ** 2))
    if p_x <= 0.0:
        raise ZeroPowerError("cannot set an SNR relative to a zero-power signal")
    noise = np.random.default_rng(noise_seed).standard_normal(len(x))
    noise *= math.sqrt(p_x / 10.0 ** (snr_db / 10.0) / float(np.mean(noise ** 2)))
    return x.replace(x.samples + noise)


def mu_law_compress(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.log1p(MU * np.abs(x)) / math.log1p(MU)


def mu_law_expand(c: np.ndarray) -> np.ndarray:
    return np.sign(c) * np.expm1(np.abs(c) * math.log1p(MU)) / MU


_MU_LAW_LEVELS = mu_law_expand(np.arange(MU_LAW_STEPS + 1) / MU_LAW_STEPS)
_MU_LAW_LEVELS[-1] = 1.0  # expm1/log1p round-off would land one ulp short


def mu_law_roundtrip(x: Waveform) -> Waveform:
    """mu-law (mu=255) compress, quantize to an 8-bit sign-magnitude code, expand.

    The code keeps 0 and +-1 as exact reconstruction levels, so zero and
    full-scale samples pass through unchanged and a second application is a
    no-op.
    """
    c = mu_law_compress(np.clip(x.samples, -1.0, 1.0))
    codes = np.round(c * MU_LAW_STEPS).astype(np.int64)
    return x.replace(np.sign(codes) * _MU_LAW_LEVELS[np.abs(codes)])


def loudness_normalize(x: Waveform, target_lufs: float) -> Waveform:
    measured = audio.measure_loudness_lufs(x)
    if not math.isfinite(measured):
        raise SilentInputError("cannot loudness-normalize a silent signal")
    y = audio.apply_gain(x, target_lufs - measured)
    remeasured = audio.measure_loudness_lufs(y)
    if abs(remeasured - target_lufs) > 0.2:
        # the absolute gate can admit or reject blocks after a large gain change
        y = audio.apply_gain(y, target_lufs - remeasured)
    peak = float(np.max(np.abs(y.samples)))
    if peak > 1.0:
        logger.info("loudness target %.2f LUFS pushes peak to %.3f; will clip on write", target_lufs, peak)
    return y


def sample_mask(mask: audio.VadMask, n_samples: int) -> np.ndarray:
    return np.repeat(mask.flags.astype(bool), mask.frame_length_samples)[:n_samples]


def zero_nonspeech(x: Waveform) -> Waveform:
    speech = sample_mask(audio.energy_vad(x), len(x))
    return x.replace(np.where(speech, x.samples, 0.0))


def identity_codec_command() -> str:
    """Command template for the bundled pass-through codec (used for testing the plugin path)."""
    return f"{shlex.quote(sys.executable)} -m shortcut_audit.identity_codec {{in}} {{out}} {{z}}"


def external_codec(x: Waveform, cmd_template: str, z, timeout_s: float = 120.0) -> Waveform:
    """Round-trip `x` through an external encode/decode command.

    The template is split shell-style; ``{in}``, ``{out}`` and ``{z}`` are
    substituted inside each argument. The decoded file must be PCM16 mono at
    the input rate; its length is trimmed or zero-padded to the input's.
    """
    with tempfile.TemporaryDirectory(prefix="codec-") as tmp:
        src = Path(tmp) / "in.wav"
        dst = Path(tmp) / "out.wav"
        audio.write_pcm(x, src)
        subst = {"{in}": str(src), "{out}": str(dst), "{z}": str(z)}
        args = []
        for token in shlex.split(cmd_template):
            for placeholder, value in subst.items():
                token = token.replace(placeholder, value)
            args.append(token)
        if not args:
            raise CodecError("empty codec command template")
        try:
            proc = subprocess.run(args, capture_output=True, text=True, timeout=timeout_s)
        except FileNotFoundError as exc:
            raise CodecError(f"codec executable not found: {args[0]}") from exc
        except subprocess.TimeoutExpired as exc:
            raise CodecError(f"codec command timed out after {timeout_s} s: {args[0]}") from exc
        if proc.returncode != 0:
            raise CodecError(f"codec command {args[0]} exited with {proc.returncode}: {proc.stderr.strip()}")
        if not dst.is_file():
            raise CodecError(f"codec command {args[0]} produced no output file")
        y = audio.read_pcm(dst)
    if y.sample_rate_hz != x.sample_rate_hz:
        raise CodecError(f"codec changed the sample rate from {x.sample_rate_hz} to {y.sample_rate_hz}")
    out = np.zeros(len(x))
    n = min(len(x), len(y))
    out[:n] = y.samples[:n]
    return x.replace(out)


def apply_intervention(x: Waveform, spec: InterventionSpec, z, noise_seed: int = 0) -> Waveform:
    if spec.kind == "white_noise":
        return add_white_noise(x, z, noise_seed)
    if spec.kind == "mu_law":
        return mu_law_roundtrip(x)
    if spec.kind == "loudness_norm":
        return loudness_normalize(x, z)
    if spec.kind == "nonspeech_zeroing":
        return zero_nonspeech(x)
    if spec.kind == "external_codec":
        return external_codec(x, spec.codec_cmd, z)
    raise ValueError(spec.kind)


def _subset_label(key: tuple[int, int]) -> str:
    return f"X_{key[0]}{key[1]}"


def format_receipt(plan: InterventionPlan) -> str:
    spec = plan.spec
    lines = [
        f"# kind={spec.kind}",
        f"# control={spec.describe()}",
        f"# codec_cmd={spec.codec_cmd or ''}",
        f"# config={plan.config.name}",
        "# rho=" + ",".join(repr(r) for r in plan.config.rho),
        f"# master_seed={plan.master_seed}",
        "id,subset,intervened,kind,z",
    ]
    for item_id in sorted(plan.decisions):
        d = plan.decisions[item_id]
        z = "" if d.z is None else repr(d.z)
        lines.append(f"{item_id},{_subset_label(plan.subsets[item_id])},{int(d.intervene)},{spec.kind},{z}")
    return "\n".join(lines) + "\n"


def save_receipt(plan: InterventionPlan, path) -> None:
    Path(path).write_text(format_receipt(plan), encoding="utf-8")


def _parse_control(kind: str, control: str, codec_cmd: str) -> InterventionSpec:
    if control == "none":
        return InterventionSpec(kind)
    if control.startswith("choices:"):
        choices = tuple(_number(c) for c in control[len("choices:"):].split("|"))
        return InterventionSpec(kind, choices=choices, codec_cmd=codec_cmd or None)
    _, lo, hi = control.split(":")
    return InterventionSpec(kind, float(lo), float(hi), codec_cmd=codec_cmd or None)


def _number(text: str):
    value = float(text)
    return int(value) if value.is_integer() and "." not in text else value


def load_receipt(path) -> InterventionPlan:
    """Parse a receipt back into the plan it records."""
    header: dict[str, str] = {}
    decisions: dict[str, Decision] = {}
    subsets: dict[str, tuple[int, int]] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("# "):
            key, _, value = line[2:].partition("=")
            header[key] = value
            continue
        if not line or line.startswith("id,"):
            continue
        item_id, subset, intervened, _kind, z = line.split(",")
        subsets[item_id] = (int(subset[2]), int(subset[3]))
        decisions[item_id] = Decision(intervened == "1", _number(z) if z else None)
    spec = _parse_control(header["kind"], header["control"], header.get("codec_cmd", ""))
    rho = tuple(float(r) for r in header["rho"].split(","))
    config = ConfigQuadruple(rho, header["config"])
    return InterventionPlan(spec, config, int(header["master_seed"]), decisions, subsets)


def _apply_item(item: AudioItem, plan: InterventionPlan, audio_dir: Path) -> AudioItem:
    decision = plan.decisions[item.id]
    if not decision.intervene:
        return item
    try:
        x = audio.read_pcm(item.path)
        y = apply_intervention(x, plan.spec, decision.z, plan.noise_seed(item.id))
        out_path = audio_dir / f"{item.id}.wav"
        audio.write_pcm(y, out_path)
    except Exception as exc:
        raise InterventionError(f"item {item.id!r}: {exc}") from exc
    return AudioItem(item.id, out_path, item.class_label, item.split, item.speaker_id,
                     item.attack_id, item.gender, item.country, item.session_id)


def apply_plan(manifest: DatasetManifest, plan: InterventionPlan, out_dir, jobs: int = 1) -> DatasetManifest:
    """Materialize `plan` under `out_dir`.

    Intervened items are written to ``out_dir/audio/<id>.wav``; untouched
    items keep referencing their original files. Writes ``receipt.csv`` and
    ``manifest.csv`` and returns the new manifest (same items, same labels).
    """
    missing = [item.id for item in manifest.items if item.id not in plan.decisions]
    if missing:
        raise InterventionError(f"plan has no decision for items {missing[:5]}")
    out_dir = Path(out_dir)
    audio_dir = out_dir / "audio"
    audio_dir.mkdir(parents=True, exist_ok=True)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            items = list(pool.map(lambda it: _apply_item(it, plan, audio_dir), manifest.items))
    else:
        items = [_apply_item(it, plan, audio_dir) for it in manifest.items]
    new_manifest = manifest.with_items(items, name=f"{manifest.name}-{plan.config.name}-{plan.spec.kind}")
    save_receipt(plan, out_dir / "receipt.csv")
    save_manifest(new_manifest, out_dir / "manifest.csv")
    return new_manifest


def delta_features(test_item_realized: float, config: ConfigQuadruple) -> DeltaFeatures:
    r = float(test_item_realized)
    return DeltaFeatures(abs(r - config.train_pos), abs(r - config.train_neg))


def plan_deltas(plan: InterventionPlan) -> dict[str, DeltaFeatures]:
    """Delta features for every eval item, using its realized intervention bit."""
    return {
        item_id: delta_features(float(plan.decisions[item_id].intervene), plan.config)
        for item_id, key in plan.subsets.items()
        if key[1] == 1
    }


def grid_plans(manifest: DatasetManifest, spec: InterventionSpec, train_corner: str,
               test_grid: Sequence[tuple[float, float]], master_seed: int) -> list[InterventionPlan]:
    """One plan per (rho_test_neg, rho_test_pos) grid point over a fixed training corner.

    Selection and control draws are keyed by subset and item, so every plan
    in the grid shares identical training-side decisions.
    """
    if train_corner not in TRAIN_CORNERS:
        raise KeyError(f"unknown training corner {train_corner!r}; expected one of {sorted(TRAIN_CORNERS)}")
    train_neg, train_pos = TRAIN_CORNERS[train_corner]
    plans = []
    for test_neg, test_pos in test_grid:
        rho = (train_neg, train_pos, float(test_neg), float(test_pos))
        plans.append(assign(manifest, spec, ConfigQuadruple(rho, config_name_for(rho)), master_seed))
    return plans


def parse_grid(text: str) -> list[tuple[float, float]]:
    """``"0,0.5,1"`` -> the full 3x3 product of (rho_test_neg, rho_test_pos)."""
    values = [float(v) for v in text.split(",") if v.strip()]
    return [(neg, pos) for pos in values for neg in values]
