"""Synthetic speech surrogates and pseudo-MOS labels.

Lets the whole pipeline run end-to-end without external datasets: clean
"speech" is generated as speaker-specific harmonic tones with formant-like
resonances and a syllabic amplitude envelope, degraded with the standard
condition grid, and annotated with a pseudo-MOS that is a documented
monotone function of degradation severity (the generator doubles as the
oracle for end-to-end tests).
"""

from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from nimos.corpus import AudioClip, Manifest, ManifestEntry, save_manifest, write_wav
from nimos.degrade import DegradationCondition
from nimos.seeding import derive_seed

logger = logging.getLogger(__name__)


def speech_surrogate(duration_s: float, sample_rate: int, f0: float,
                     formants: Sequence[float], seed: int,
                     peak: float = 0.95, tilt: float = 0.0) -> np.ndarray:
    """Noise-shaped harmonic tone that stands in for a speech sentence.

    Harmonics of ``f0`` up to 4 kHz with a 1/h rolloff, boosted near the
    given formant frequencies and tilted by ``tilt`` (dB/octave-ish spectral
    slope), plus a low-level noise floor, all modulated by a slow random
    "syllable" envelope.  Deterministic per seed.
    """
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    x = np.zeros(n)
    h = 1
    while h * f0 < 4000.0:
        freq = h * f0
        gain = (1.0 / h) * (freq / 1000.0) ** tilt
        for fmt in formants:
            gain *= 1.0 + 2.0 * math.exp(-((freq - fmt) / 250.0) ** 2)
        phase = rng.uniform(0, 2 * np.pi)
        x += gain * np.sin(2 * np.pi * freq * t + phase)
        h += 1
    x += 0.02 * rng.standard_normal(n) * np.abs(x).max()

    # Syllabic envelope: low-passed noise, kept strictly positive.
    env_noise = rng.standard_normal(n)
    kernel = np.hanning(int(sample_rate * 0.12))
    env = np.convolve(env_noise, kernel / kernel.sum(), mode="same")
    env = 0.25 + 0.75 * (env - env.min()) / (env.max() - env.min() + 1e-12)
    x = x * env
    return peak * x / np.max(np.abs(x))


def _speaker_voice(index: int) -> Dict[str, object]:
    """Deterministic per-speaker voice: pitch, formants, level and brightness.

    Level and tilt vary across speakers so degradation severity does not map
    to identical absolute acoustics for every speaker; learning the severity
    from a couple of speakers then requires features that transfer.
    """
    f0 = 90.0 + 17.0 * (index % 12)
    formants = (450.0 + 40.0 * (index % 5),
                1500.0 + 90.0 * (index % 7),
                2500.0 + 120.0 * (index % 4))
    peak = 0.55 + 0.4 * ((index * 7) % 10) / 9.0
    tilt = -0.35 + 0.7 * ((index * 3) % 8) / 7.0
    return {"f0": f0, "formants": formants, "peak": peak, "tilt": tilt}


def make_clean_corpus(out_dir: Path | str, n_speakers: int, sentences_per_speaker: int,
                      duration_s: float, sample_rate: int, seed: int,
                      speaker_prefix: str = "spk") -> Manifest:
    """Generate surrogate clean sentences and the clean-corpus manifest."""
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)
    entries: List[ManifestEntry] = []
    for s in range(n_speakers):
        speaker_id = f"{speaker_prefix}{s:02d}"
        voice = _speaker_voice(s)
        for k in range(sentences_per_speaker):
            rel = Path("wav") / f"{speaker_id}_sent{k:02d}.wav"
            samples = speech_surrogate(
                duration_s, sample_rate, voice["f0"], voice["formants"],
                seed=derive_seed(seed, "clean", speaker_id, str(k)),
                peak=voice["peak"], tilt=voice["tilt"])
            write_wav(AudioClip(samples, sample_rate, speaker_id, f"sent{k:02d}"),
                      out_dir / rel)
            entries.append(ManifestEntry(str(rel), "REFERENCE", "clean", speaker_id))
    manifest = Manifest(entries, root=out_dir)
    save_manifest(manifest, out_dir / "manifest.csv")
    logger.info("generated %d surrogate clean clips in %s", len(entries), out_dir)
    return manifest


def severity(condition: DegradationCondition) -> float:
    """Degradation severity in [0, 1]; 0 = transparent, 1 = worst configured.

    CHOP: the zeroed fraction.  CLIP: 1 - threshold.  ECHO: reflection gain,
    weighted up for longer delays.  NOISE: how far the SNR falls below 30 dB.
    REFERENCE: 0.
    """
    c, p = condition.degradation_class, condition.params
    if c == "REFERENCE":
        return 0.0
    if c == "CHOP":
        return float(p["chopped_fraction"])
    if c == "CLIP":
        return 1.0 - float(p["threshold"])
    if c == "ECHO":
        delay_weight = 0.6 + 0.4 * min(float(p["delay_ms"]), 400.0) / 400.0
        return float(p["alpha"]) * delay_weight
    if c == "NOISE":
        snr = float(p["snr_db"])
        return float(np.clip((30.0 - snr) / 30.0, 0.0, 1.0))
    raise ValueError(f"unknown degradation class {c!r}")


def pseudo_mos(condition: DegradationCondition) -> float:
    """Monotone map from severity to a pseudo opinion score: 1 + 4*(1 - severity)."""
    return 1.0 + 4.0 * (1.0 - severity(condition))


def annotate_pseudo_mos(manifest: Manifest,
                        grid: Dict[str, List[DegradationCondition]]) -> Manifest:
    """Fill the mos column from each row's condition (matched by condition_id)."""
    by_id = {"clean": DegradationCondition("REFERENCE", {})}
    for conditions in grid.values():
        for cond in conditions:
            by_id[cond.condition_id] = cond
    entries = []
    for e in manifest.entries:
        cond = by_id.get(e.condition_id)
        if cond is None:
            raise ValueError(f"condition {e.condition_id!r} not found in the grid")
        entries.append(ManifestEntry(e.clip_path, e.degradation_class, e.condition_id,
                                     e.speaker_id, mos=pseudo_mos(cond), fold=e.fold))
    return Manifest(entries, root=manifest.root)


def demo_grid() -> Dict[str, List[DegradationCondition]]:
    """Small condition grid with spread severities for demos and smoke runs."""
    grid: Dict[str, List[DegradationCondition]] = {
        "CHOP": [DegradationCondition("CHOP", {"period_ms": 40.0, "chopped_fraction": f})
                 for f in (0.1, 0.25, 0.4, 0.55, 0.7)],
        "CLIP": [DegradationCondition("CLIP", {"threshold": t})
                 for t in (0.1, 0.25, 0.4, 0.6, 0.8)],
        "ECHO": [DegradationCondition("ECHO", {"delay_ms": d, "alpha": a})
                 for d, a in ((100.0, 0.15), (200.0, 0.3), (300.0, 0.45),
                              (400.0, 0.6), (400.0, 0.8))],
        "NOISE": [DegradationCondition("NOISE", {"snr_db": s, "noise_kind": "white"})
                  for s in (0.0, 7.5, 15.0, 22.5, 30.0)],
        "REFERENCE": [DegradationCondition("REFERENCE", {})],
    }
    return grid
