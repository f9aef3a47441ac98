"""Evaluation: RMSE/PCC/SRCC metrics and the speaker-independent CV protocol.

Metrics are computed per degradation class and over ALL pooled test clips of
each fold, then fold-averaged.  Undefined correlations (constant inputs) are
surfaced as explicit error markers in the report, never as silent zeros.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from nimos.corpus import Manifest
from nimos.features import NormalizationStats
from nimos.models import Checkpoint
from nimos.seeding import derive_seed
from nimos.training import RECIPES, RecipeSpec, finetune, predict_mos

logger = logging.getLogger(__name__)

ALL_SLICE = "ALL"


class MetricUndefinedError(ValueError):
    """Metric has no defined value for this input (e.g. constant vector)."""


class ProtocolError(RuntimeError):
    """Missing checkpoints, labels, or fold leakage."""


def _check_pair(pred: Sequence[float], mos: Sequence[float]) -> tuple:
    p = np.asarray(pred, dtype=np.float64)
    m = np.asarray(mos, dtype=np.float64)
    if p.shape != m.shape or p.ndim != 1:
        raise ValueError(f"prediction/MOS shape mismatch: {p.shape} vs {m.shape}")
    if p.size == 0:
        raise ValueError("empty input vectors")
    return p, m


def rmse(pred: Sequence[float], mos: Sequence[float]) -> float:
    p, m = _check_pair(pred, mos)
    return float(np.sqrt(np.mean((p - m) ** 2)))


def pcc(pred: Sequence[float], mos: Sequence[float]) -> float:
    """Sample Pearson correlation; errors on constant input instead of returning 0."""
    p, m = _check_pair(pred, mos)
    if p.size < 2:
        raise MetricUndefinedError("correlation needs at least 2 points")
    pc = p - p.mean()
    mc = m - m.mean()
    denom = np.sqrt((pc ** 2).sum() * (mc ** 2).sum())
    if denom == 0.0:
        raise MetricUndefinedError("correlation undefined for a constant vector")
    return float((pc * mc).sum() / denom)


def average_ranks(x: Sequence[float]) -> np.ndarray:
    """Ranks 1..n with ties given the average of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def srcc(pred: Sequence[float], mos: Sequence[float]) -> float:
    """Spearman rank correlation: Pearson correlation of average-tied ranks."""
    p, m = _check_pair(pred, mos)
    if p.size < 2:
        raise MetricUndefinedError("correlation needs at least 2 points")
    return pcc(average_ranks(p), average_ranks(m))


# ---------------------------------------------------------------------------
# Report structures
# ---------------------------------------------------------------------------

@dataclass
class MetricRecord:
    variant: str
    fold: str                      # "0".."k-1" or "mean"
    slice_name: str                # degradation class or "ALL"
    n: int
    rmse: Optional[float] = None
    pcc: Optional[float] = None
    srcc: Optional[float] = None
    error: Optional[str] = None

    def to_line(self) -> str:
        parts = [f"variant={self.variant}", f"fold={self.fold}",
                 f"slice={self.slice_name}", f"n={self.n}"]
        if self.error is not None:
            parts.append(f"error={self.error}")
        else:
            parts += [f"rmse={self.rmse!r}", f"pcc={self.pcc!r}", f"srcc={self.srcc!r}"]
        return " ".join(parts)


@dataclass
class MetricsReport:
    records: List[MetricRecord] = field(default_factory=list)
    metadata: Dict[str, str] = field(default_factory=dict)

    def averaged(self) -> List[MetricRecord]:
        return [r for r in self.records if r.fold == "mean"]

    def lookup(self, variant: str, slice_name: str, fold: str = "mean"
               ) -> MetricRecord:
        for r in self.records:
            if (r.variant, r.slice_name, r.fold) == (variant, slice_name, fold):
                return r
        raise KeyError(f"no record for {variant}/{slice_name}/fold={fold}")

    def to_machine_text(self) -> str:
        lines = [f"# {k}={v}" for k, v in sorted(self.metadata.items())]
        lines += [r.to_line() for r in self.records]
        return "\n".join(lines) + "\n"

    def render_table(self) -> str:
        """Human-readable table: one block per metric, slices as columns."""
        variants = list(dict.fromkeys(r.variant for r in self.records))
        slices = sorted({r.slice_name for r in self.records} - {ALL_SLICE}) + [ALL_SLICE]
        out = []
        for metric in ("rmse", "pcc", "srcc"):
            out.append(metric.upper())
            header = f"{'variant':<22}" + "".join(f"{s:>10}" for s in slices)
            out.append(header)
            for v in variants:
                cells = []
                for s in slices:
                    try:
                        rec = self.lookup(v, s)
                    except KeyError:
                        cells.append(f"{'-':>10}")
                        continue
                    if rec.error is not None:
                        cells.append(f"{'undef':>10}")
                    else:
                        cells.append(f"{getattr(rec, metric):>10.3f}")
                out.append(f"{v:<22}" + "".join(cells))
            out.append("")
        return "\n".join(out)


def evaluate_slices(pred: np.ndarray, mos: np.ndarray, classes: Sequence[str],
                    variant: str, fold: str) -> List[MetricRecord]:
    """Per-degradation-class records plus the pooled ALL record for one fold."""
    records = []
    class_arr = np.asarray(classes)
    slice_names = sorted(set(classes)) + [ALL_SLICE]
    for name in slice_names:
        sel = np.ones(len(pred), dtype=bool) if name == ALL_SLICE else class_arr == name
        rec = MetricRecord(variant, fold, name, int(sel.sum()))
        try:
            rec.rmse = rmse(pred[sel], mos[sel])
            rec.pcc = pcc(pred[sel], mos[sel])
            rec.srcc = srcc(pred[sel], mos[sel])
        except (MetricUndefinedError, ValueError) as exc:
            rec.rmse = rec.pcc = rec.srcc = None
            rec.error = f"undefined:{exc}"
        records.append(rec)
    return records


def average_over_folds(per_fold: List[MetricRecord]) -> List[MetricRecord]:
    """Arithmetic mean of per-fold metric values, per (variant, slice)."""
    grouped: Dict[tuple, List[MetricRecord]] = {}
    for r in per_fold:
        grouped.setdefault((r.variant, r.slice_name), []).append(r)
    out = []
    for (variant, slice_name), recs in grouped.items():
        mean_rec = MetricRecord(variant, "mean", slice_name, sum(r.n for r in recs))
        bad = [r for r in recs if r.error is not None]
        if bad:
            mean_rec.error = f"undefined-in-folds:{','.join(r.fold for r in bad)}"
        else:
            mean_rec.rmse = float(np.mean([r.rmse for r in recs]))
            mean_rec.pcc = float(np.mean([r.pcc for r in recs]))
            mean_rec.srcc = float(np.mean([r.srcc for r in recs]))
        out.append(mean_rec)
    return out


# ---------------------------------------------------------------------------
# Cross-validation protocol
# ---------------------------------------------------------------------------

def _assert_no_fold_leak(stats: NormalizationStats, test_fold: int) -> None:
    """The stats provenance tag must not name the test fold."""
    tag = stats.source_tag
    if tag.startswith("folds="):
        import ast
        named = ast.literal_eval(tag.removeprefix("folds="))
        if test_fold in named:
            raise ProtocolError(
                f"normalization stats leak test fold {test_fold}: {tag}")


def manifest_fingerprint(manifest: Manifest) -> str:
    payload = "\n".join(
        f"{e.clip_path},{e.degradation_class},{e.condition_id},{e.speaker_id},"
        f"{e.mos},{e.fold}" for e in manifest.entries)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def run_protocol(variants: Sequence[str], manifest: Manifest, features: np.ndarray,
                 checkpoints: Dict[str, Checkpoint], config, seed: int,
                 cluster_labels: Optional[np.ndarray] = None,
                 predictions_dir: Optional[Path] = None,
                 global_stats: Optional[NormalizationStats] = None,
                 log_fn=None) -> MetricsReport:
    """Fine-tune and evaluate each variant under k-fold speaker-independent CV.

    ``manifest`` must carry MOS and fold tags; ``features`` is the aligned
    un-normalized feature array (N, mels, frames).  ``cluster_labels`` are the
    frozen-DCEC assignments for the whole small corpus (required for semtl).
    Normalization uses ``global_stats`` when given (e.g. the pretraining
    corpus statistics, so transferred encoders see their native input
    distribution); otherwise per-fold training-split statistics.  Either way
    the statistics provenance tag is asserted to name no test fold.
    Stores per-clip predictions under ``predictions_dir`` when given, so
    reports can be regenerated without re-training.
    """
    for v in variants:
        if v not in RECIPES:
            raise ProtocolError(f"unknown variant {v!r}; valid: {list(RECIPES)}")
    entries = manifest.entries
    mos = np.array([np.nan if e.mos is None else e.mos for e in entries])
    if np.any(np.isnan(mos)):
        raise ProtocolError("manifest has entries without MOS")
    folds = np.array([-1 if e.fold is None else e.fold for e in entries])
    if np.any(folds < 0):
        raise ProtocolError("manifest has entries without fold tags")
    classes = [e.degradation_class for e in entries]
    speakers = np.array([e.speaker_id for e in entries])
    from nimos.corpus import DEGRADATION_CLASSES
    degr_idx = np.array([DEGRADATION_CLASSES.index(c) for c in classes])

    report = MetricsReport(metadata={
        "seed": str(seed),
        "config_hash": config.config_hash(),
        "dataset_fingerprint": manifest_fingerprint(manifest),
    })
    fold_ids = sorted(set(int(f) for f in folds))
    per_fold_records: List[MetricRecord] = []

    for variant in variants:
        recipe: RecipeSpec = RECIPES[variant]
        init_ckpt = None
        if recipe.init_stage is not None:
            init_ckpt = checkpoints.get(recipe.init_stage)
            if init_ckpt is None:
                raise ProtocolError(
                    f"variant {variant} needs a {recipe.init_stage!r} checkpoint")
        if recipe.auxiliary == "cluster" and cluster_labels is None:
            raise ProtocolError(f"variant {variant} needs cluster labels")

        for k in fold_ids:
            train_sel = folds != k
            test_sel = folds == k
            leak = set(speakers[train_sel]) & set(speakers[test_sel])
            if leak:
                raise ProtocolError(f"fold {k} leaks speakers {sorted(leak)}")

            x_train = features[train_sel]
            x_test = features[test_sel]
            if config.frontend.normalize:
                if global_stats is not None:
                    stats = global_stats
                else:
                    train_folds = sorted(set(int(f) for f in folds[train_sel]))
                    stats = NormalizationStats.fit(list(x_train),
                                                   source_tag=f"folds={train_folds}")
                _assert_no_fold_leak(stats, k)
                x_train = np.stack([stats.apply(f) for f in x_train])
                x_test = np.stack([stats.apply(f) for f in x_test])

            if recipe.auxiliary == "degradation":
                aux = degr_idx[train_sel]
            elif recipe.auxiliary == "cluster":
                aux = np.asarray(cluster_labels)[train_sel]
            else:
                aux = None

            fold_seed = derive_seed(seed, "protocol", variant, str(k))
            run = finetune(recipe, x_train, mos[train_sel], aux, config, fold_seed,
                           init_checkpoint=init_ckpt, log_fn=log_fn)
            pred = predict_mos(run.checkpoint, x_test, config)

            if predictions_dir is not None:
                _store_predictions(predictions_dir, variant, k,
                                   [entries[i] for i in np.flatnonzero(test_sel)],
                                   pred)
            recs = evaluate_slices(pred, mos[test_sel],
                                   [classes[i] for i in np.flatnonzero(test_sel)],
                                   variant, str(k))
            per_fold_records.extend(recs)
            logger.info("evaluated %s fold %d (%d test clips)", variant, k,
                        int(test_sel.sum()))

    report.records = per_fold_records + average_over_folds(per_fold_records)
    return report


def _store_predictions(predictions_dir: Path, variant: str, fold: int,
                       entries, pred: np.ndarray) -> None:
    predictions_dir = Path(predictions_dir)
    predictions_dir.mkdir(parents=True, exist_ok=True)
    lines = ["clip_path,degradation_class,mos,pred"]
    for e, p in zip(entries, pred):
        lines.append(f"{e.clip_path},{e.degradation_class},{e.mos!r},{float(p)!r}")
    (predictions_dir / f"{variant}_fold{fold}.csv").write_text(
        "\n".join(lines) + "\n", encoding="utf-8")


def report_from_predictions(predictions_dir: Path, metadata: Dict[str, str]
                            ) -> MetricsReport:
    """Rebuild the metrics report from stored per-clip predictions."""
    predictions_dir = Path(predictions_dir)
    files = sorted(predictions_dir.glob("*_fold*.csv"))
    if not files:
        raise ProtocolError(f"no stored predictions under {predictions_dir}")
    per_fold: List[MetricRecord] = []
    for f in files:
        stem = f.stem
        variant, fold_part = stem.rsplit("_fold", 1)
        rows = f.read_text(encoding="utf-8").strip().splitlines()[1:]
        classes, mos, pred = [], [], []
        for row in rows:
            cp, cls, m, p = row.split(",")
            classes.append(cls)
            mos.append(float(m))
            pred.append(float(p))
        per_fold.extend(evaluate_slices(np.array(pred), np.array(mos), classes,
                                        variant, fold_part))
    return MetricsReport(records=per_fold + average_over_folds(per_fold),
                         metadata=dict(metadata))
