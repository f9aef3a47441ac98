"""Command-line entry point orchestrating the experiment lifecycle.

Subcommands: ``synth``, ``features``, ``pretrain {ae|dcec|classifier}``,
``finetune <variant>``, ``evaluate``, ``report``, ``config describe`` and the
convenience ``demo-data``.  Every command is idempotent for an unchanged
config + seed: completed outputs are detected via the config hash and
skipped.  All outputs are plain files under the work directory
(``corpus/``, ``features/``, ``checkpoints/``, ``reports/``, ``logs/``).
The work directory can be overridden with the ``NIMOS_WORK_DIR`` env var.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import torch

from nimos import config as config_mod
from nimos import corpus, degrade, evaluate, features as features_mod
from nimos import synthetic, training
from nimos.config import ExperimentConfig
from nimos.dcec import assign_cluster_labels, train_dcec
from nimos.models import Checkpoint, load_checkpoint, save_checkpoint
from nimos.seeding import derive_seed

logger = logging.getLogger(__name__)


class CliError(Exception):
    """User-facing failure with a machine-parseable class."""

    def __init__(self, error_class: str, message: str, exit_code: int = 3):
        super().__init__(message)
        self.error_class = error_class
        self.exit_code = exit_code


def apply_determinism(cfg: ExperimentConfig) -> None:
    """Single-threaded, seeded torch so reruns are bit-identical on CPU."""
    if cfg.deterministic:
        torch.set_num_threads(1)
        torch.manual_seed(cfg.seed)
        torch.use_deterministic_algorithms(True, warn_only=True)


# ---------------------------------------------------------------------------
# Work-directory layout and idempotence stamps
# ---------------------------------------------------------------------------

def _stamp_path(cfg: ExperimentConfig, name: str) -> Path:
    return cfg.work_path("stamps", f"{name}.done")


def _stamp_value(cfg: ExperimentConfig) -> str:
    return f"config_hash={cfg.config_hash()} seed={cfg.seed}"


def _is_stamped(cfg: ExperimentConfig, name: str) -> bool:
    p = _stamp_path(cfg, name)
    return p.exists() and p.read_text(encoding="utf-8") == _stamp_value(cfg)


def _write_stamp(cfg: ExperimentConfig, name: str) -> None:
    p = _stamp_path(cfg, name)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(_stamp_value(cfg), encoding="utf-8")


def _stage_log(cfg: ExperimentConfig, name: str):
    log_dir = cfg.work_path("logs")
    log_dir.mkdir(parents=True, exist_ok=True)
    fh = (log_dir / f"{name}.log").open("w", encoding="utf-8")

    def log_fn(line: str) -> None:
        fh.write(line + "\n")

    return log_fn, fh


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_demo_data(cfg: ExperimentConfig, jobs: int = 1,
                  large_speakers: int = 10, large_sentences: int = 3,
                  small_speakers: int = 4, small_sentences: int = 1,
                  duration_s: float = 1.0) -> None:
    """Generate surrogate clean sources and a pseudo-MOS small corpus.

    The large-corpus clean sources land in ``clean_dir``; the small corpus
    (disjoint speakers, degraded with the demo grid, pseudo-MOS annotated)
    lands next to ``small_manifest``.
    """
    clean_dir = Path(cfg.clean_dir)
    grid = synthetic.demo_grid()
    if not (clean_dir / "manifest.csv").exists():
        synthetic.make_clean_corpus(
            clean_dir, n_speakers=large_speakers, sentences_per_speaker=large_sentences,
            duration_s=duration_s, sample_rate=cfg.frontend.sample_rate,
            seed=derive_seed(cfg.seed, "demo", "clean-large"), speaker_prefix="trainspk")
    small_dir = Path(cfg.small_manifest).parent
    if not Path(cfg.small_manifest).exists():
        small_clean = synthetic.make_clean_corpus(
            small_dir / "clean", n_speakers=small_speakers,
            sentences_per_speaker=small_sentences,
            duration_s=duration_s, sample_rate=cfg.frontend.sample_rate,
            seed=derive_seed(cfg.seed, "demo", "clean-small"), speaker_prefix="testspk")
        small_degraded = degrade.synthesize_corpus(
            small_clean, {c: g for c, g in grid.items() if c != "REFERENCE"},
            small_dir, seed=derive_seed(cfg.seed, "demo", "degr-small"),
            per_class=None, jobs=jobs)
        annotated = synthetic.annotate_pseudo_mos(small_degraded, grid)
        corpus.save_manifest(annotated, cfg.small_manifest)
    logger.info("demo data ready: clean=%s small=%s", clean_dir, cfg.small_manifest)


def cmd_synth(cfg: ExperimentConfig, jobs: int = 1) -> corpus.Manifest:
    """Synthesize the large degraded corpus from the clean sources."""
    out_dir = cfg.work_path("corpus", "large")
    manifest_path = out_dir / "manifest.csv"
    if _is_stamped(cfg, "synth") and manifest_path.exists():
        logger.info("synth: up-to-date, skipping")
        return corpus.load_manifest(manifest_path)
    clean_manifest_path = Path(cfg.clean_dir) / "manifest.csv"
    if not clean_manifest_path.exists():
        raise CliError("missing_input",
                       f"clean corpus manifest not found: {clean_manifest_path}")
    clean = corpus.load_manifest(clean_manifest_path)
    exclude: Tuple[str, ...] = ()
    if Path(cfg.small_manifest).exists():
        exclude = tuple(corpus.load_manifest(cfg.small_manifest).speakers())
    manifest = degrade.synthesize_corpus(
        clean, cfg.synth.conditions(), out_dir,
        seed=derive_seed(cfg.seed, "synth"), per_class=cfg.synth.per_class,
        jobs=jobs, exclude_speakers=exclude)
    _write_stamp(cfg, "synth")
    return manifest


def _cache(cfg: ExperimentConfig) -> features_mod.FeatureCache:
    return features_mod.FeatureCache(cfg.work_path("features", "cache"),
                                     t_fixed=cfg.frontend.t_fixed,
                                     n_mels=cfg.frontend.n_mels)


def _load_features(cfg: ExperimentConfig, manifest: corpus.Manifest,
                   cache: features_mod.FeatureCache) -> np.ndarray:
    """Feature matrix aligned with manifest order, via the on-disk cache."""
    out = np.empty((len(manifest), cfg.frontend.n_mels, cfg.frontend.t_fixed),
                   dtype=np.float32)
    hits = 0
    for i, entry in enumerate(manifest.entries):
        path = manifest.resolve(entry)
        feat, hit = cache.get_or_compute(str(path), lambda p=path: corpus.read_wav(p))
        hits += hit
        out[i] = feat
    logger.info("features: %d/%d cache hits", hits, len(manifest))
    return out


def _norm_stats_path(cfg: ExperimentConfig) -> Path:
    return cfg.work_path("features", "norm_stats.npz")


def _load_norm_stats(cfg: ExperimentConfig) -> features_mod.NormalizationStats:
    p = _norm_stats_path(cfg)
    if not p.exists():
        raise CliError("dependency_missing",
                       "normalization stats not found; run `nimos features` first")
    blob = np.load(p)
    return features_mod.NormalizationStats(blob["mean"], blob["std"],
                                           str(blob["source_tag"]))


def cmd_features(cfg: ExperimentConfig) -> None:
    """Extract and cache features for the large (and, if present, small) corpus."""
    large_path = cfg.work_path("corpus", "large", "manifest.csv")
    if not large_path.exists():
        raise CliError("dependency_missing",
                       "large corpus not found; run `nimos synth` first")
    cache = _cache(cfg)
    large = corpus.load_manifest(large_path)
    feats = _load_features(cfg, large, cache)
    if cfg.frontend.normalize and not _norm_stats_path(cfg).exists():
        stats = features_mod.NormalizationStats.fit(list(feats), source_tag="large-corpus")
        np.savez(_norm_stats_path(cfg), mean=stats.mean, std=stats.std,
                 source_tag=np.str_(stats.source_tag))
    if Path(cfg.small_manifest).exists():
        small = corpus.load_manifest(cfg.small_manifest)
        _load_features(cfg, small, cache)
    _write_stamp(cfg, "features")


def _checkpoint_path(cfg: ExperimentConfig, stage: str) -> Path:
    return cfg.work_path("checkpoints", f"{stage}.pt")


def _load_stage_checkpoint(cfg: ExperimentConfig, stage: str) -> Checkpoint:
    path = _checkpoint_path(cfg, stage)
    if not path.exists():
        raise CliError("dependency_missing",
                       f"{stage} checkpoint not found; run `nimos pretrain` first")
    ckpt = load_checkpoint(path)
    if ckpt.config_hash != cfg.config_hash():
        raise CliError("stale_checkpoint",
                       f"{stage} checkpoint was trained under config "
                       f"{ckpt.config_hash}, current is {cfg.config_hash()}")
    return ckpt


def _normalized_large_features(cfg: ExperimentConfig) -> Tuple[np.ndarray, corpus.Manifest]:
    large_path = cfg.work_path("corpus", "large", "manifest.csv")
    if not large_path.exists():
        raise CliError("dependency_missing",
                       "large corpus not found; run `nimos synth` first")
    manifest = corpus.load_manifest(large_path)
    feats = _load_features(cfg, manifest, _cache(cfg))
    if cfg.frontend.normalize:
        stats = _load_norm_stats(cfg)
        feats = np.stack([stats.apply(f) for f in feats]).astype(np.float32)
    return feats, manifest


def cmd_pretrain(cfg: ExperimentConfig, stage: str) -> None:
    """Run one pretraining stage: ``ae``, ``classifier`` or ``dcec``."""
    stage_names = {"ae": "ae_pretrain", "classifier": "degr_classifier", "dcec": "dcec"}
    if stage not in stage_names:
        raise CliError("invalid_stage",
                       f"unknown pretrain stage {stage!r}; valid: {sorted(stage_names)}",
                       exit_code=2)
    name = stage_names[stage]
    ckpt_path = _checkpoint_path(cfg, name)
    if ckpt_path.exists():
        existing = load_checkpoint(ckpt_path)
        if existing.config_hash == cfg.config_hash() and existing.seed == cfg.seed:
            logger.info("pretrain %s: up-to-date checkpoint, skipping", stage)
            return
    apply_determinism(cfg)
    feats, manifest = _normalized_large_features(cfg)
    log_fn, fh = _stage_log(cfg, name)
    try:
        if stage == "ae":
            result = training.pretrain_autoencoder(feats, cfg, cfg.seed, log_fn=log_fn)
            ckpt = result.checkpoint
        elif stage == "classifier":
            labels = np.array([corpus.DEGRADATION_CLASSES.index(e.degradation_class)
                               for e in manifest.entries])
            result = training.pretrain_degradation_classifier(
                feats, labels, cfg, cfg.seed, log_fn=log_fn)
            ckpt = result.checkpoint
        else:  # dcec
            ae_path = _checkpoint_path(cfg, "ae_pretrain")
            if not ae_path.exists():
                raise CliError("dependency_missing",
                               "dcec requires the autoencoder checkpoint; "
                               "run `nimos pretrain ae` first")
            ae_ckpt = _load_stage_checkpoint(cfg, "ae_pretrain")
            ckpt, _ = train_dcec(feats, ae_ckpt, cfg, cfg.seed, log_fn=log_fn)
    finally:
        fh.close()
    save_checkpoint(ckpt, ckpt_path)
    logger.info("pretrain %s: checkpoint written to %s", stage, ckpt_path)


def _small_corpus(cfg: ExperimentConfig) -> Tuple[corpus.Manifest, np.ndarray]:
    """Small MOS corpus with fold tags plus its aligned raw feature matrix."""
    if not Path(cfg.small_manifest).exists():
        raise CliError("missing_input",
                       f"small MOS corpus manifest not found: {cfg.small_manifest}")
    manifest = corpus.load_manifest(cfg.small_manifest)
    if any(e.mos is None for e in manifest.entries):
        raise CliError("missing_input", "small corpus has rows without MOS")
    plan = corpus.make_speaker_folds(manifest, cfg.cv.folds,
                                     derive_seed(cfg.seed, "folds"))
    manifest = corpus.assign_folds(manifest, plan)
    feats = _load_features(cfg, manifest, _cache(cfg))
    return manifest, feats


def _cluster_labels_for_small(cfg: ExperimentConfig, manifest: corpus.Manifest,
                              feats: np.ndarray) -> np.ndarray:
    """Frozen-DCEC cluster labels for the small corpus (sidecar CSV is the record)."""
    dcec_ckpt = _load_stage_checkpoint(cfg, "dcec")
    x = feats
    if cfg.frontend.normalize:
        stats = _load_norm_stats(cfg)
        x = np.stack([stats.apply(f) for f in x]).astype(np.float32)
    labels = assign_cluster_labels(x, dcec_ckpt, cfg)
    sidecar = cfg.work_path("checkpoints", "cluster_labels.csv")
    sidecar.parent.mkdir(parents=True, exist_ok=True)
    lines = ["clip_path,cluster_label"]
    lines += [f"{e.clip_path},{int(l)}" for e, l in zip(manifest.entries, labels)]
    sidecar.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return labels


def _predictions_dir(cfg: ExperimentConfig) -> Path:
    return cfg.work_path("reports", "predictions")


def _variant_done(cfg: ExperimentConfig, variant: str) -> bool:
    pred_dir = _predictions_dir(cfg)
    stamped = _is_stamped(cfg, f"finetune_{variant}")
    files = all((pred_dir / f"{variant}_fold{k}.csv").exists()
                for k in range(cfg.cv.folds))
    return stamped and files


def _run_variants(cfg: ExperimentConfig, variants: Sequence[str]) -> None:
    pending = [v for v in variants if not _variant_done(cfg, v)]
    for v in variants:
        if v not in pending:
            logger.info("%s: predictions up-to-date, skipping", v)
    if not pending:
        return
    apply_determinism(cfg)
    manifest, feats = _small_corpus(cfg)
    checkpoints: Dict[str, Checkpoint] = {}
    for v in pending:
        stage = training.RECIPES[v].init_stage
        if stage is not None and stage not in checkpoints:
            checkpoints[stage] = _load_stage_checkpoint(cfg, stage)
    cluster_labels = None
    if any(training.RECIPES[v].auxiliary == "cluster" for v in pending):
        cluster_labels = _cluster_labels_for_small(cfg, manifest, feats)
    log_fn, fh = _stage_log(cfg, "finetune")
    try:
        evaluate.run_protocol(pending, manifest, feats, checkpoints, cfg,
                              seed=cfg.seed, cluster_labels=cluster_labels,
                              predictions_dir=_predictions_dir(cfg), log_fn=log_fn)
    finally:
        fh.close()
    for v in pending:
        _write_stamp(cfg, f"finetune_{v}")


def cmd_finetune(cfg: ExperimentConfig, variant: str) -> None:
    """Fine-tune one variant over all folds and store its test predictions."""
    if variant not in training.VARIANT_NAMES:
        raise CliError("invalid_variant",
                       f"unknown variant {variant!r}; valid names: "
                       f"{', '.join(training.VARIANT_NAMES)}", exit_code=2)
    _run_variants(cfg, [variant])


def cmd_evaluate(cfg: ExperimentConfig,
                 variants: Optional[Sequence[str]] = None) -> evaluate.MetricsReport:
    """Fine-tune + evaluate the requested variants (default: all nine) and report."""
    variants = list(variants) if variants else list(training.VARIANT_NAMES)
    for v in variants:
        if v not in training.VARIANT_NAMES:
            raise CliError("invalid_variant",
                           f"unknown variant {v!r}; valid names: "
                           f"{', '.join(training.VARIANT_NAMES)}", exit_code=2)
    _run_variants(cfg, variants)
    return cmd_report(cfg)


def cmd_report(cfg: ExperimentConfig) -> evaluate.MetricsReport:
    """Regenerate the report from stored predictions (bit-identical reruns)."""
    pred_dir = _predictions_dir(cfg)
    if not pred_dir.exists():
        raise CliError("dependency_missing",
                       "no stored predictions; run `nimos evaluate` first")
    small_path = Path(cfg.small_manifest)
    metadata = {"seed": str(cfg.seed), "config_hash": cfg.config_hash()}
    if small_path.exists():
        metadata["dataset_fingerprint"] = evaluate.manifest_fingerprint(
            corpus.load_manifest(small_path))
    report = evaluate.report_from_predictions(pred_dir, metadata)
    report_dir = cfg.work_path("reports")
    report_dir.mkdir(parents=True, exist_ok=True)
    (report_dir / "metrics.txt").write_text(report.to_machine_text(), encoding="utf-8")
    (report_dir / "metrics_table.txt").write_text(report.render_table(), encoding="utf-8")
    print(report.render_table())
    return report


def cmd_config_describe(cfg: ExperimentConfig) -> None:
    print(config_mod.describe(cfg))


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nimos",
        description="Speech quality prediction toolkit: corpus synthesis, "
                    "pretraining, deep-clustering, fine-tuning, evaluation.")
    parser.add_argument("-c", "--config", type=Path, default=None,
                        help="YAML experiment config (defaults used if omitted)")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--workdir", type=Path, default=None,
                        help="override work directory (or set NIMOS_WORK_DIR)")
    parser.add_argument("--jobs", type=int, default=1,
                        help="max parallel workers for corpus synthesis")
    parser.add_argument("-v", "--verbose", action="store_true")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("demo-data", help="generate surrogate clean + pseudo-MOS corpora")
    sub.add_parser("synth", help="synthesize the large degraded corpus")
    sub.add_parser("features", help="extract and cache log-mel features")
    p = sub.add_parser("pretrain", help="run a pretraining stage")
    p.add_argument("stage", choices=["ae", "dcec", "classifier"])
    p = sub.add_parser("finetune", help="fine-tune one variant across folds")
    p.add_argument("variant")
    p = sub.add_parser("evaluate", help="fine-tune + evaluate variants, emit report")
    p.add_argument("--variants", default=None,
                   help="comma-separated variant names (default: all nine)")
    sub.add_parser("report", help="re-render the report from stored predictions")
    p = sub.add_parser("config", help="configuration utilities")
    p.add_argument("action", choices=["describe"])
    return parser


def _load_cli_config(args) -> ExperimentConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    workdir = args.workdir or os.environ.get("NIMOS_WORK_DIR")
    if workdir:
        overrides["work_dir"] = str(workdir)
    try:
        return config_mod.load_config(args.config, overrides)
    except (config_mod.ConfigError, FileNotFoundError) as exc:
        raise CliError("bad_config", str(exc), exit_code=2) from exc


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_cli_config(args)
        if args.command == "demo-data":
            cmd_demo_data(cfg, jobs=args.jobs)
        elif args.command == "synth":
            cmd_synth(cfg, jobs=args.jobs)
        elif args.command == "features":
            cmd_features(cfg)
        elif args.command == "pretrain":
            cmd_pretrain(cfg, args.stage)
        elif args.command == "finetune":
            cmd_finetune(cfg, args.variant)
        elif args.command == "evaluate":
            variants = args.variants.split(",") if args.variants else None
            cmd_evaluate(cfg, variants)
        elif args.command == "report":
            cmd_report(cfg)
        elif args.command == "config":
            cmd_config_describe(cfg)
        return 0
    except CliError as exc:
        print(f"error_class={exc.error_class} message=\"{exc}\"", file=sys.stderr)
        return exc.exit_code
    except (corpus.CorpusError, degrade.DegradationError, features_mod.FeatureError,
            training.RecipeError, evaluate.ProtocolError) as exc:
        print(f"error_class=invalid_input message=\"{exc}\"", file=sys.stderr)
        return 3
    except Exception as exc:  # pragma: no cover - last-resort guard
        logger.exception("internal error")
        print(f"error_class=internal message=\"{exc}\"", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
