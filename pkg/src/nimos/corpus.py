"""Corpus management: audio clips, manifests, and speaker-disjoint folds.

Manifests are UTF-8 CSV files with a header row and the exact column order
``clip_path,degradation_class,condition_id,speaker_id,mos,fold`` (``mos``
and ``fold`` may be empty).  Audio is mono 16-bit linear PCM WAV.
"""

from __future__ import annotations

import csv
import logging
import wave
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set

import numpy as np

logger = logging.getLogger(__name__)

DEGRADATION_CLASSES = ("CHOP", "CLIP", "ECHO", "NOISE", "REFERENCE")

MANIFEST_COLUMNS = ("clip_path", "degradation_class", "condition_id",
                    "speaker_id", "mos", "fold")

_INT16_FULL_SCALE = 32768.0


class CorpusError(ValueError):
    """Malformed manifest or audio file."""


@dataclass
class AudioClip:
    """Mono waveform with provenance."""

    samples: np.ndarray
    sample_rate: int
    speaker_id: str = ""
    sentence_id: str = ""
    source_path: str = ""

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise CorpusError("AudioClip requires a non-empty 1-D sample array")
        if self.sample_rate <= 0:
            raise CorpusError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise CorpusError("AudioClip samples must be finite")

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class ManifestEntry:
    clip_path: str
    degradation_class: str
    condition_id: str
    speaker_id: str
    mos: Optional[float] = None
    fold: Optional[int] = None

    def validate(self) -> None:
        if self.degradation_class not in DEGRADATION_CLASSES:
            raise CorpusError(
                f"unknown degradation class {self.degradation_class!r}; "
                f"expected one of {DEGRADATION_CLASSES}")
        if self.mos is not None and not (1.0 <= self.mos <= 5.0):
            raise CorpusError(f"mos {self.mos} outside [1, 5]")
        if self.fold is not None and self.fold < 0:
            raise CorpusError(f"fold {self.fold} is negative")


@dataclass
class Manifest:
    """Ordered collection of manifest entries.

    ``root`` is the directory relative clip paths resolve against (set to
    the manifest file's parent on load).
    """

    entries: List[ManifestEntry] = field(default_factory=list)
    root: Optional[Path] = None

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def speakers(self) -> List[str]:
        return sorted({e.speaker_id for e in self.entries})

    def classes(self) -> List[str]:
        return sorted({e.degradation_class for e in self.entries})

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.clip_path)
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p

    def filtered(self, predicate) -> "Manifest":
        return Manifest([replace(e) for e in self.entries if predicate(e)], root=self.root)


@dataclass
class SplitPlan:
    """Speaker-disjoint fold assignment: fold index -> test speaker set."""

    fold_count: int
    test_speakers_per_fold: Dict[int, Set[str]]

    def fold_of(self, speaker_id: str) -> int:
        for fold, speakers in self.test_speakers_per_fold.items():
            if speaker_id in speakers:
                return fold
        raise CorpusError(f"speaker {speaker_id!r} not covered by the split plan")

    def validate(self, all_speakers: Iterable[str]) -> None:
        union: Set[str] = set()
        for fold, speakers in self.test_speakers_per_fold.items():
            overlap = union & speakers
            if overlap:
                raise CorpusError(f"speakers {sorted(overlap)} appear in more than one fold")
            union |= speakers
        missing = set(all_speakers) - union
        if missing:
            raise CorpusError(f"speakers {sorted(missing)} not assigned to any fold")


def _parse_row(row: Sequence[str], row_num: int) -> ManifestEntry:
    if len(row) != len(MANIFEST_COLUMNS):
        raise CorpusError(
            f"row {row_num}: expected {len(MANIFEST_COLUMNS)} fields, got {len(row)}")
    clip_path, degr, cond, speaker, mos_s, fold_s = (c.strip() for c in row)
    if not clip_path:
        raise CorpusError(f"row {row_num}: empty clip_path")
    try:
        mos = float(mos_s) if mos_s else None
    except ValueError:
        raise CorpusError(f"row {row_num}: field 'mos' not a number: {mos_s!r}") from None
    try:
        fold = int(fold_s) if fold_s else None
    except ValueError:
        raise CorpusError(f"row {row_num}: field 'fold' not an integer: {fold_s!r}") from None
    entry = ManifestEntry(clip_path, degr, cond, speaker, mos, fold)
    try:
        entry.validate()
    except CorpusError as exc:
        raise CorpusError(f"row {row_num}: {exc}") from None
    return entry


def load_manifest(path: Path | str) -> Manifest:
    """Load and validate a manifest CSV.

    Raises:
        FileNotFoundError: missing file.
        CorpusError: malformed header or row (message names the row).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CorpusError(f"{path}: empty manifest") from None
        if tuple(h.strip() for h in header) != MANIFEST_COLUMNS:
            raise CorpusError(
                f"{path}: bad header {header!r}; expected {','.join(MANIFEST_COLUMNS)}")
        entries = [_parse_row(row, i) for i, row in enumerate(reader, start=2)]
    logger.info("loaded %d manifest entries from %s", len(entries), path)
    return Manifest(entries, root=path.parent)


def save_manifest(manifest: Manifest, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for e in manifest.entries:
            e.validate()
            writer.writerow([
                e.clip_path,
                e.degradation_class,
                e.condition_id,
                e.speaker_id,
                "" if e.mos is None else repr(float(e.mos)),
                "" if e.fold is None else str(int(e.fold)),
            ])


def make_speaker_folds(manifest: Manifest, fold_count: int, seed: int) -> SplitPlan:
    """Partition speakers into ``fold_count`` disjoint test sets.

    Speakers are sorted lexicographically, shuffled with the given seed and
    dealt round-robin, so the plan is a pure function of (speaker set,
    fold_count, seed).
    """
    speakers = manifest.speakers()
    if len(speakers) < fold_count:
        raise CorpusError(
            f"need at least {fold_count} speakers for {fold_count} folds, "
            f"got {len(speakers)}")
    rng = np.random.default_rng(seed)
    order = list(rng.permutation(len(speakers)))
    shuffled = [speakers[i] for i in order]
    plan = SplitPlan(
        fold_count=fold_count,
        test_speakers_per_fold={k: set(shuffled[k::fold_count]) for k in range(fold_count)},
    )
    plan.validate(speakers)
    return plan


def assign_folds(manifest: Manifest, plan: SplitPlan) -> Manifest:
    """Return a copy of the manifest with fold tags set from the plan.

    Fold assignment is a function of speaker_id only.
    """
    entries = [replace(e, fold=plan.fold_of(e.speaker_id)) for e in manifest.entries]
    return Manifest(entries, root=manifest.root)


def read_wav(path: Path | str) -> AudioClip:
    """Read a mono 16-bit linear PCM WAV file.

    Raises CorpusError for stereo files or encodings other than 16-bit PCM.
    """
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            sample_width = wf.getsampwidth()
            comp = wf.getcomptype()
            rate = wf.getframerate()
            n_frames = wf.getnframes()
            raw = wf.readframes(n_frames)
    except wave.Error as exc:
        raise CorpusError(f"{path}: not a readable WAV file ({exc})") from exc
    if comp != "NONE":
        raise CorpusError(f"{path}: unsupported encoding {comp!r}; need linear PCM")
    if sample_width != 2:
        raise CorpusError(f"{path}: unsupported sample width {sample_width * 8} bit; need 16-bit")
    if n_channels != 1:
        raise CorpusError(f"{path}: {n_channels} channels; mono only")
    ints = np.frombuffer(raw, dtype="<i2")
    samples = ints.astype(np.float64) / _INT16_FULL_SCALE
    return AudioClip(samples=samples, sample_rate=rate, source_path=str(path))


def write_wav(clip: AudioClip, path: Path | str) -> None:
    """Write a clip as mono 16-bit PCM WAV, saturating out-of-range samples.

    Emits a warning if any |sample| > 1 before saturation; the written file
    always satisfies |sample| <= 1 on read-back.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    x = np.asarray(clip.samples, dtype=np.float64)
    peak = float(np.max(np.abs(x))) if x.size else 0.0
    if peak > 1.0:
        logger.warning("clipping on write: %s has peak %.4f > 1", path, peak)
    ints = np.clip(np.rint(x * _INT16_FULL_SCALE), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(clip.sample_rate)
        wf.writeframes(ints.tobytes())
