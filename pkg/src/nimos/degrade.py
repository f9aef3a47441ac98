"""Waveform degradations and synthetic corpus generation.

Five classes: CHOP (periodic dropouts), CLIP (amplitude saturation), ECHO
(single delayed reflection), NOISE (additive background at a target SNR)
and REFERENCE (pass-through).  Every generator preserves length and sample
rate and is a pure function of (input, params, seed).
"""

from __future__ import annotations

import logging
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from nimos.corpus import (AudioClip, Manifest, ManifestEntry, read_wav,
                          save_manifest, write_wav)
from nimos.seeding import clip_seed, derive_seed

logger = logging.getLogger(__name__)

NOISE_KINDS = ("white", "pink")


class DegradationError(ValueError):
    """Invalid degradation parameters."""


@dataclass(frozen=True)
class DegradationCondition:
    """A degradation class plus its parameter set."""

    degradation_class: str
    params: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        c, p = self.degradation_class, self.params
        if c == "CHOP":
            _require(p, {"period_ms", "chopped_fraction"}, c)
            if not 0 < float(p["chopped_fraction"]) < 1:
                raise DegradationError("CHOP chopped_fraction must be in (0, 1)")
            if float(p["period_ms"]) <= 0:
                raise DegradationError("CHOP period_ms must be positive")
        elif c == "CLIP":
            _require(p, {"threshold"}, c)
            if not 0 < float(p["threshold"]) <= 1:
                raise DegradationError("CLIP threshold must be in (0, 1]")
        elif c == "ECHO":
            _require(p, {"delay_ms", "alpha"}, c)
            if float(p["delay_ms"]) <= 0:
                raise DegradationError("ECHO delay_ms must be positive")
            if not 0 <= float(p["alpha"]) < 1:
                raise DegradationError("ECHO alpha must be in [0, 1)")
        elif c == "NOISE":
            _require(p, {"snr_db", "noise_kind"}, c)
            if p["noise_kind"] not in NOISE_KINDS:
                raise DegradationError(f"NOISE noise_kind must be one of {NOISE_KINDS}")
        elif c == "REFERENCE":
            if p:
                raise DegradationError("REFERENCE takes no parameters")
        else:
            raise DegradationError(f"unknown degradation class {c!r}")

    @property
    def condition_id(self) -> str:
        parts = [self.degradation_class]
        parts += [f"{k}={_fmt(self.params[k])}" for k in sorted(self.params)]
        return "_".join(parts)


def _require(params: Dict[str, object], keys: set, cls: str) -> None:
    if set(params) != keys:
        raise DegradationError(f"{cls} requires params {sorted(keys)}, got {sorted(params)}")


def _fmt(v: object) -> str:
    if isinstance(v, float) and v == int(v):
        return str(int(v))
    return str(v)


def apply_clip(clip: AudioClip, threshold: float) -> AudioClip:
    """Clamp samples to [-threshold, +threshold]."""
    if not 0 < threshold <= 1:
        raise DegradationError(f"clip threshold must be in (0, 1], got {threshold}")
    return AudioClip(np.clip(clip.samples, -threshold, threshold), clip.sample_rate,
                     clip.speaker_id, clip.sentence_id, clip.source_path)


def apply_chop(clip: AudioClip, period_ms: float, chopped_fraction: float) -> AudioClip:
    """Zero the final ``chopped_fraction`` portion of each consecutive period.

    Untouched samples are bit-identical to the input.
    """
    if not 0 < chopped_fraction < 1:
        raise DegradationError(f"chopped_fraction must be in (0, 1), got {chopped_fraction}")
    period = int(round(period_ms * clip.sample_rate / 1000.0))
    if period < 1 or period > clip.samples.size:
        raise DegradationError(
            f"chop period of {period} samples does not fit a {clip.samples.size}-sample clip")
    n_chop = int(round(chopped_fraction * period))
    keep = period - n_chop
    idx = np.arange(clip.samples.size)
    mask = (idx % period) >= keep
    out = np.where(mask, 0.0, clip.samples)
    return AudioClip(out, clip.sample_rate, clip.speaker_id, clip.sentence_id,
                     clip.source_path)


def apply_echo(clip: AudioClip, delay_ms: float, alpha: float) -> AudioClip:
    """One-tap echo: y[n] = (x[n] + alpha * x[n-d]) / (1 + alpha)."""
    if not 0 <= alpha < 1:
        raise DegradationError(f"echo alpha must be in [0, 1), got {alpha}")
    d = int(round(delay_ms * clip.sample_rate / 1000.0))
    if d >= clip.samples.size:
        raise DegradationError(
            f"echo delay of {d} samples >= clip length {clip.samples.size}")
    x = clip.samples
    delayed = np.concatenate([np.zeros(d), x[:x.size - d]])
    y = (x + alpha * delayed) / (1.0 + alpha)
    return AudioClip(y, clip.sample_rate, clip.speaker_id, clip.sentence_id,
                     clip.source_path)


def _pink_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    # Shape white noise with a 1/sqrt(f) magnitude envelope in the frequency domain.
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n)
    scale = np.ones_like(freqs)
    scale[1:] = 1.0 / np.sqrt(freqs[1:])
    pink = np.fft.irfft(spec * scale, n)
    return pink / np.std(pink)


def apply_noise(clip: AudioClip, snr_db: float, noise_kind: str = "white",
                seed: int = 0, return_scale: bool = False):
    """Add seeded background noise at the target SNR.

    SNR is defined on full-signal mean square: the noise gain is
    g = sqrt(P_x / (P_w * 10^(snr_db/10))), so the realized SNR equals the
    target by construction.  ``snr_db=inf`` disables the noise (identity).
    The mix is peak-normalized only if it exceeds full scale; the applied
    scale is returned when ``return_scale`` is set (1.0 means untouched).
    """
    if noise_kind not in NOISE_KINDS:
        raise DegradationError(f"noise_kind must be one of {NOISE_KINDS}, got {noise_kind!r}")
    out_clip = AudioClip(clip.samples.copy(), clip.sample_rate, clip.speaker_id,
                         clip.sentence_id, clip.source_path)
    if np.isinf(snr_db) and snr_db > 0:
        return (out_clip, 1.0) if return_scale else out_clip
    p_x = float(np.mean(clip.samples ** 2))
    if p_x == 0.0:
        raise DegradationError("cannot set an SNR on a silent (zero-power) clip")
    rng = np.random.default_rng(seed)
    if noise_kind == "white":
        w = rng.standard_normal(clip.samples.size)
    else:
        w = _pink_noise(clip.samples.size, rng)
    p_w = float(np.mean(w ** 2))
    g = np.sqrt(p_x / (p_w * 10.0 ** (snr_db / 10.0)))
    y = clip.samples + g * w
    scale = 1.0
    peak = float(np.max(np.abs(y)))
    if peak > 1.0:
        scale = 1.0 / peak
        y = y * scale
    out = AudioClip(y, clip.sample_rate, clip.speaker_id, clip.sentence_id,
                    clip.source_path)
    return (out, scale) if return_scale else out


def apply_condition(clip: AudioClip, condition: DegradationCondition,
                    seed: int = 0) -> AudioClip:
    c, p = condition.degradation_class, condition.params
    if c == "REFERENCE":
        return AudioClip(clip.samples.copy(), clip.sample_rate, clip.speaker_id,
                         clip.sentence_id, clip.source_path)
    if c == "CLIP":
        return apply_clip(clip, float(p["threshold"]))
    if c == "CHOP":
        return apply_chop(clip, float(p["period_ms"]), float(p["chopped_fraction"]))
    if c == "ECHO":
        return apply_echo(clip, float(p["delay_ms"]), float(p["alpha"]))
    if c == "NOISE":
        return apply_noise(clip, float(p["snr_db"]), str(p["noise_kind"]), seed=seed)
    raise DegradationError(f"unknown degradation class {c!r}")


def default_condition_grid() -> Dict[str, List[DegradationCondition]]:
    """Stand-in parameter grid covering all five classes (overridable via config)."""
    grid: Dict[str, List[DegradationCondition]] = {c: [] for c in
                                                   ("CHOP", "CLIP", "ECHO", "NOISE", "REFERENCE")}
    for period in (20.0, 40.0, 80.0):
        for frac in (0.1, 0.2, 0.4):
            grid["CHOP"].append(DegradationCondition(
                "CHOP", {"period_ms": period, "chopped_fraction": frac}))
    for thr in (0.1, 0.2, 0.4, 0.6):
        grid["CLIP"].append(DegradationCondition("CLIP", {"threshold": thr}))
    for delay in (100.0, 200.0, 400.0):
        for alpha in (0.2, 0.4, 0.6):
            grid["ECHO"].append(DegradationCondition(
                "ECHO", {"delay_ms": delay, "alpha": alpha}))
    for snr in (0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0):
        grid["NOISE"].append(DegradationCondition(
            "NOISE", {"snr_db": snr, "noise_kind": "white"}))
    grid["REFERENCE"].append(DegradationCondition("REFERENCE", {}))
    return grid


def _plan_rows(clean: Manifest, grid: Dict[str, List[DegradationCondition]],
               per_class: Optional[int], seed: int
               ) -> List[Tuple[int, ManifestEntry, DegradationCondition]]:
    """Deterministic (clean clip, condition) pairing per class.

    Without ``per_class`` every clip x condition combination is emitted; with
    it, exactly ``per_class`` rows per class are drawn by cycling a
    seed-shuffled clip order and the condition list independently, so both
    clips and conditions are covered as evenly as the target allows (pairs
    may repeat once the target exceeds their least common cycle).
    """
    rows = []
    rng = np.random.default_rng(derive_seed(seed, "synth-plan"))
    row_index = 0
    for cls in sorted(grid):
        conditions = grid[cls]
        if not conditions:
            raise DegradationError(f"empty condition grid for class {cls}")
        order = [clean.entries[i] for i in rng.permutation(len(clean.entries))]
        if per_class is None:
            pairs = [(e, c) for c in conditions for e in order]
        else:
            pairs = [(order[i % len(order)], conditions[i % len(conditions)])
                     for i in range(per_class)]
        for entry, cond in pairs:
            rows.append((row_index, entry, cond))
            row_index += 1
    return rows


def synthesize_corpus(clean_manifest: Manifest,
                      grid: Dict[str, List[DegradationCondition]],
                      output_dir: Path | str,
                      seed: int,
                      per_class: Optional[int] = None,
                      jobs: int = 1,
                      exclude_speakers: Sequence[str] = ()) -> Manifest:
    """Generate the degraded corpus and its manifest.

    Deterministic per seed regardless of ``jobs``: noise uses per-row seeds
    derived from the output path.  ``exclude_speakers`` asserts that none of
    the given (held-out) speakers appear in the clean sources.
    """
    if len(clean_manifest) == 0:
        raise DegradationError("clean manifest is empty")
    if not grid:
        raise DegradationError("condition grid is empty")
    for cls, conditions in grid.items():
        if not conditions:
            raise DegradationError(f"empty condition grid for class {cls}")
    overlap = set(exclude_speakers) & set(clean_manifest.speakers())
    if overlap:
        raise DegradationError(
            f"clean sources include held-out speakers: {sorted(overlap)}")

    output_dir = Path(output_dir)
    wav_dir = output_dir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)
    plan = _plan_rows(clean_manifest, grid, per_class, seed)

    def render(item) -> ManifestEntry:
        row_index, src, cond = item
        rel = Path("wav") / f"{row_index:06d}_{cond.degradation_class}_{Path(src.clip_path).stem}.wav"
        out_path = output_dir / rel
        if cond.degradation_class == "REFERENCE":
            # Pass-through: keep the source bytes bit-identical.
            shutil.copyfile(clean_manifest.resolve(src), out_path)
        else:
            clean = read_wav(clean_manifest.resolve(src))
            degraded = apply_condition(clean, cond, seed=clip_seed(seed, str(rel)))
            write_wav(degraded, out_path)
        return ManifestEntry(
            clip_path=str(rel),
            degradation_class=cond.degradation_class,
            condition_id=cond.condition_id,
            speaker_id=src.speaker_id,
        )

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            entries = list(pool.map(render, plan))
    else:
        entries = [render(item) for item in plan]

    manifest = Manifest(entries, root=output_dir)
    save_manifest(manifest, output_dir / "manifest.csv")
    logger.info("synthesized %d clips into %s", len(entries), output_dir)
    return manifest
