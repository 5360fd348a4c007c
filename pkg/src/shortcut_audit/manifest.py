"""Experiment manifests, train/eval partitions, prior bookkeeping and ASV trial lists."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .seeding import rng_for

MANIFEST_COLUMNS = ["id", "path", "class", "split", "speaker", "attack", "gender", "country", "session"]
TRIAL_COLUMNS = ["enroll_id", "test_id", "is_target", "R", "G", "C"]
SUBSET_KEYS = ((0, 0), (1, 0), (0, 1), (1, 1))  # (class, split): X_00, X_10, X_01, X_11


class ManifestError(ValueError):
    """Base class for manifest validation failures."""


class ManifestParseError(ManifestError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DuplicateIdError(ManifestError):
    def __init__(self, item_id: str):
        super().__init__(f"duplicate item id {item_id!r}")
        self.item_id = item_id


class MissingFileError(ManifestError):
    def __init__(self, path: Path):
        super().__init__(f"audio file not found: {path}")
        self.path = path


class EmptySplitError(ManifestError):
    pass


class InfeasibleFlagsError(ManifestError):
    pass


@dataclass(frozen=True)
class AudioItem:
    id: str
    path: Path
    class_label: int  # 1 positive (bonafide/target side), 0 negative
    split: int  # 0 train, 1 eval
    speaker_id: Optional[str] = None
    attack_id: Optional[str] = None
    gender: Optional[str] = None
    country: Optional[str] = None
    session_id: Optional[str] = None

    @property
    def subset(self) -> tuple[int, int]:
        return (self.class_label, self.split)


@dataclass(frozen=True)
class DatasetManifest:
    items: tuple[AudioItem, ...]
    name: str = "manifest"
    sample_rate_hz: int = 16000

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        seen = set()
        for item in self.items:
            if item.id in seen:
                raise DuplicateIdError(item.id)
            seen.add(item.id)
            if item.class_label not in (0, 1) or item.split not in (0, 1):
                raise ManifestError(f"item {item.id!r}: class and split must be bits")

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def by_id(self) -> dict[str, AudioItem]:
        return {item.id: item for item in self.items}

    def subset_counts(self) -> tuple[int, int, int, int]:
        """Counts of (X_00, X_10, X_01, X_11)."""
        parts = partition(self)
        return tuple(len(p) for p in parts)

    def is_runnable(self) -> bool:
        return all(n > 0 for n in self.subset_counts())

    def with_items(self, items: Iterable[AudioItem], name: Optional[str] = None) -> "DatasetManifest":
        return replace(self, items=tuple(items), name=name or self.name)


@dataclass(frozen=True)
class PriorReport:
    pi_1_given_0: float
    pi_1_given_1: float
    prior_matched: bool
    class_balanced_train: bool
    class_balanced_eval: bool
    subset_counts: tuple[int, int, int, int]


@dataclass(frozen=True)
class AsvTrial:
    enroll_id: str
    test_id: str
    is_target: bool
    same_recording: int
    same_gender: int
    same_country: int

    @property
    def flags(self) -> tuple[int, int, int]:
        return (self.same_recording, self.same_gender, self.same_country)


def _parse_bit(value: str, column: str, line: int) -> int:
    value = value.strip()
    if value not in ("0", "1"):
        raise ManifestParseError(line, f"column {column!r} must be 0 or 1, got {value!r}")
    return int(value)


def _optional(value: Optional[str]) -> Optional[str]:
    if value is None:
        return None
    value = value.strip()
    return value or None


def parse_manifest(text: str, base_dir: Path, name: str = "manifest", check_files: bool = True,
                   sample_rate_hz: int = 16000) -> DatasetManifest:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ManifestParseError(1, "empty manifest (missing header)") from None
    header = [h.strip() for h in header]
    missing = [c for c in ("id", "path", "class", "split") if c not in header]
    if missing:
        raise ManifestParseError(1, f"header lacks required columns {missing}")
    col = {c: header.index(c) for c in MANIFEST_COLUMNS if c in header}

    items = []
    seen = set()
    for row in reader:
        line = reader.line_num
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise ManifestParseError(line, f"expected {len(header)} fields, got {len(row)}")

        def get(c):
            return row[col[c]] if c in col else None

        item_id = get("id").strip()
        if not item_id:
            raise ManifestParseError(line, "empty id")
        if item_id in seen:
            raise DuplicateIdError(item_id)
        seen.add(item_id)
        raw_path = get("path").strip()
        if not raw_path:
            raise ManifestParseError(line, "empty path")
        path = Path(raw_path)
        if not path.is_absolute():
            path = base_dir / path
        if check_files and not path.is_file():
            raise MissingFileError(path)
        items.append(
            AudioItem(
                id=item_id,
                path=path,
                class_label=_parse_bit(get("class"), "class", line),
                split=_parse_bit(get("split"), "split", line),
                speaker_id=_optional(get("speaker")),
                attack_id=_optional(get("attack")),
                gender=_optional(get("gender")),
                country=_optional(get("country")),
                session_id=_optional(get("session")),
            )
        )
    return DatasetManifest(tuple(items), name=name, sample_rate_hz=sample_rate_hz)


def load_manifest(path, check_files: bool = True, sample_rate_hz: int = 16000) -> DatasetManifest:
    """Load and validate a manifest file.

    Relative audio paths are resolved against the manifest's directory.

    Raises:
        ManifestParseError: malformed row (carries the line number).
        DuplicateIdError: an id occurs twice.
        MissingFileError: a referenced audio file does not exist.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    return parse_manifest(text, path.parent, name=path.stem, check_files=check_files,
                          sample_rate_hz=sample_rate_hz)


def format_manifest(manifest: DatasetManifest, base_dir: Optional[Path] = None) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_COLUMNS)
    for item in manifest.items:
        path = item.path
        if base_dir is not None:
            try:
                path = path.resolve().relative_to(Path(base_dir).resolve())
            except ValueError:
                path = item.path
        writer.writerow([
            item.id, path.as_posix(), item.class_label, item.split, item.speaker_id or "",
            item.attack_id or "", item.gender or "", item.country or "", item.session_id or "",
        ])
    return buf.getvalue()


def save_manifest(manifest: DatasetManifest, path) -> None:
    """Write `manifest`; audio paths under the manifest's directory are stored relative."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_manifest(manifest, base_dir=path.parent), encoding="utf-8")


def partition(manifest: DatasetManifest) -> tuple[list[AudioItem], list[AudioItem], list[AudioItem], list[AudioItem]]:
    """Split items into (X_00, X_10, X_01, X_11) by their (class, split) bits."""
    parts = {key: [] for key in SUBSET_KEYS}
    for item in manifest.items:
        parts[item.subset].append(item)
    return tuple(parts[key] for key in SUBSET_KEYS)


def prior_report(manifest: DatasetManifest) -> PriorReport:
    n00, n10, n01, n11 = manifest.subset_counts()
    if n00 + n10 == 0 or n01 + n11 == 0:
        raise EmptySplitError("prior report needs non-empty train and eval splits")
    pi_train = n10 / (n00 + n10)
    pi_eval = n11 / (n01 + n11)
    return PriorReport(
        pi_1_given_0=pi_train,
        pi_1_given_1=pi_eval,
        prior_matched=abs(pi_train - pi_eval) <= 1e-12,
        class_balanced_train=abs(pi_train - 0.5) <= 1e-12,
        class_balanced_eval=abs(pi_eval - 0.5) <= 1e-12,
        subset_counts=(n00, n10, n01, n11),
    )


def _codes(values: Sequence[Optional[str]]) -> np.ndarray:
    """Integer codes for categorical values; None gets a unique negative code per position."""
    mapping: dict[str, int] = {}
    out = np.empty(len(values), dtype=np.int64)
    for i, v in enumerate(values):
        out[i] = -(i + 1) if v is None else mapping.setdefault(v, len(mapping))
    return out


def _sample(pairs: list[tuple[int, int]], max_trials: Optional[int], rng) -> list[tuple[int, int]]:
    if max_trials is None or len(pairs) <= max_trials:
        return pairs
    order = rng.permutation(len(pairs))[:max_trials]
    return [pairs[k] for k in sorted(order)]


def build_asv_trials(
    manifest: DatasetManifest,
    target_flags: Sequence[int],
    nontarget_flags: Sequence[int],
    max_trials: Optional[int] = None,
    seed: int = 0,
    split: Optional[int] = None,
) -> list[AsvTrial]:
    """Enumerate target and nontarget trials whose (R, G, C) flags match the request.

    R is "same session", G "same gender", C "same country". Pairs are
    unordered; enrollment is the lexicographically smaller id. When
    `max_trials` is given, each class is subsampled without replacement by a
    seeded permutation and emitted in canonical order.

    Raises:
        InfeasibleFlagsError: no pair satisfies one of the flag combinations.
        ManifestError: a same-speaker pair disagrees on gender or country, or
            required metadata is absent.
    """
    target_flags = tuple(int(b) for b in target_flags)
    nontarget_flags = tuple(int(b) for b in nontarget_flags)
    if target_flags[1:] != (1, 1):
        raise InfeasibleFlagsError(f"target trials always share gender and country, got flags {target_flags}")

    items = sorted((it for it in manifest.items if split is None or it.split == split), key=lambda it: it.id)
    for it in items:
        if None in (it.speaker_id, it.session_id, it.gender, it.country):
            raise ManifestError(f"item {it.id!r} lacks speaker/session/gender/country metadata")
    ids = [it.id for it in items]
    spk = _codes([it.speaker_id for it in items])
    ses = _codes([it.session_id for it in items])
    gen = _codes([it.gender for it in items])
    cty = _codes([it.country for it in items])

    r_t = target_flags[0]
    rn, gn, cn = nontarget_flags
    targets: list[tuple[int, int]] = []
    nontargets: list[tuple[int, int]] = []
    for i in range(len(items) - 1):
        j = np.arange(i + 1, len(items))
        same_spk = spk[j] == spk[i]
        same_ses = (ses[j] == ses[i]).astype(int)
        same_gen = (gen[j] == gen[i]).astype(int)
        same_cty = (cty[j] == cty[i]).astype(int)
        bad = same_spk & ((same_gen == 0) | (same_cty == 0))
        if bad.any():
            k = int(j[np.argmax(bad)])
            raise ManifestError(f"speaker {items[i].speaker_id!r} has inconsistent gender/country "
                                f"between {ids[i]!r} and {ids[k]!r}")
        tmask = same_spk & (same_ses == r_t)
        nmask = ~same_spk & (same_ses == rn) & (same_gen == gn) & (same_cty == cn)
        targets.extend((i, int(k)) for k in j[tmask])
        nontargets.extend((i, int(k)) for k in j[nmask])

    if not targets:
        raise InfeasibleFlagsError(f"no target pair satisfies flags {target_flags}")
    if not nontargets:
        raise InfeasibleFlagsError(f"no nontarget pair satisfies flags {nontarget_flags}")

    rng = rng_for(seed, "asv-trials", "".join(map(str, target_flags + nontarget_flags)))
    targets = _sample(targets, max_trials, rng)
    nontargets = _sample(nontargets, max_trials, rng)
    trials = [AsvTrial(ids[i], ids[k], True, r_t, 1, 1) for i, k in targets]
    trials += [AsvTrial(ids[i], ids[k], False, rn, gn, cn) for i, k in nontargets]
    return trials


def trial_flags(enroll: AudioItem, test: AudioItem) -> tuple[int, int, int]:
    """Recompute (R, G, C) for a pair from metadata."""
    same_rec = int(enroll.session_id == test.session_id)
    return same_rec, int(enroll.gender == test.gender), int(enroll.country == test.country)


def format_trials(trials: Iterable[AsvTrial]) -> str:
    lines = [",".join(TRIAL_COLUMNS)]
    for t in trials:
        lines.append(f"{t.enroll_id},{t.test_id},{int(t.is_target)},{t.same_recording},"
                     f"{t.same_gender},{t.same_country}")
    return "\n".join(lines) + "\n"


def save_trials(trials: Iterable[AsvTrial], path) -> None:
    Path(path).write_text(format_trials(trials), encoding="utf-8")
