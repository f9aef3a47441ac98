"""Training recipes: large-corpus pretraining and the nine fine-tune variants.

Pretraining stages (degradation classifier, autoencoder) run on the large
synthetic corpus with Adam at lr 1e-3, batch 64, 200 epochs.  Fine-tuning
runs 40 epochs at lr 1e-5 on each fold's training split; single-task
recipes minimize the MOS MSE alone, multi-task recipes the unweighted sum
of auxiliary cross-entropy and MOS MSE.

Loss reductions are computed in float64 over the float32 forward tensors so
the logged decomposition (total = ce + mse, total = l_r + gamma*l_c) holds
against independent re-computation to round-off.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import torch

from nimos.models import (Checkpoint, as_feature_tensor, build_autoencoder,
                          build_classifier, build_task_net, descriptor_from_config,
                          transfer_weights)
from nimos.seeding import derive_seed

logger = logging.getLogger(__name__)

_PROB_FLOOR = 1e-30  # guards log() against float32 underflow in saturated heads


class RecipeError(ValueError):
    """Recipe/checkpoint/label inconsistency."""


class TrainingError(RuntimeError):
    """Diverged or invalid training run."""


@dataclass(frozen=True)
class RecipeSpec:
    """What a fine-tune variant needs: init checkpoint stage and auxiliary labels."""

    name: str
    init_stage: Optional[str]              # None = random initialization
    auxiliary: str                         # "degradation" | "cluster" | "none"


RECIPES: Dict[str, RecipeSpec] = {r.name: r for r in [
    RecipeSpec("single_task_baseline", None, "none"),
    RecipeSpec("multi_task_baseline", None, "degradation"),
    RecipeSpec("degr_single_task", "degr_classifier", "none"),
    RecipeSpec("ae_multi_task", "ae_pretrain", "degradation"),
    RecipeSpec("ae_single_task", "ae_pretrain", "none"),
    RecipeSpec("dcec_multi_task", "dcec", "degradation"),
    RecipeSpec("dcec_single_task", "dcec", "none"),
    RecipeSpec("mtl", "degr_classifier", "degradation"),
    RecipeSpec("semtl", "dcec", "cluster"),
]}

VARIANT_NAMES = tuple(RECIPES)


def check_recipe(recipe: RecipeSpec, init_checkpoint: Optional[Checkpoint],
                 aux_labels: Optional[np.ndarray]) -> None:
    """Fail fast on variant/checkpoint/label mismatches, before any compute."""
    if recipe.name not in RECIPES:
        raise RecipeError(f"unknown variant {recipe.name!r}; valid: {list(VARIANT_NAMES)}")
    if recipe.init_stage is None:
        if init_checkpoint is not None:
            raise RecipeError(f"{recipe.name} trains from random init; got a checkpoint")
    else:
        if init_checkpoint is None:
            raise RecipeError(f"{recipe.name} requires a {recipe.init_stage!r} checkpoint")
        if init_checkpoint.stage != recipe.init_stage:
            raise RecipeError(
                f"{recipe.name} requires stage {recipe.init_stage!r}, "
                f"got {init_checkpoint.stage!r}")
    if recipe.auxiliary == "none":
        if aux_labels is not None:
            raise RecipeError(f"{recipe.name} is single-task; got auxiliary labels")
    elif aux_labels is None:
        raise RecipeError(f"{recipe.name} requires {recipe.auxiliary} labels")


def cross_entropy_from_probs(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean -log p(true class), float64, from the head's softmax output."""
    picked = probs.clamp_min(_PROB_FLOOR).double()[
        torch.arange(probs.shape[0]), labels]
    return -torch.log(picked).mean()


def mse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return ((pred.double() - target.double()) ** 2).mean()


def multitask_loss(class_probs: torch.Tensor, aux_labels: torch.Tensor,
                   mos_pred: torch.Tensor, mos_target: torch.Tensor,
                   weights: Tuple[float, float] = (1.0, 1.0)
                   ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(total, ce, mse) with total = w_ce*ce + w_mse*mse (defaults are unweighted)."""
    ce = cross_entropy_from_probs(class_probs, aux_labels)
    mse = mse_loss(mos_pred, mos_target)
    return weights[0] * ce + weights[1] * mse, ce, mse


@dataclass
class EpochLog:
    epoch: int
    total_loss: float
    ce_loss: Optional[float] = None
    mse_loss: Optional[float] = None
    accuracy: Optional[float] = None

    def log_line(self, lr: float, seed: int) -> str:
        parts = [f"epoch={self.epoch}", f"loss={self.total_loss!r}"]
        if self.ce_loss is not None:
            parts.append(f"ce={self.ce_loss!r}")
        if self.mse_loss is not None:
            parts.append(f"mse={self.mse_loss!r}")
        if self.accuracy is not None:
            parts.append(f"accuracy={self.accuracy!r}")
        parts += [f"lr={lr!r}", f"seed={seed}"]
        return " ".join(parts)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: List[EpochLog] = field(default_factory=list)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield torch.from_numpy(np.ascontiguousarray(order[start:start + batch_size]))


def pretrain_degradation_classifier(features: np.ndarray, labels: np.ndarray,
                                    config, seed: int,
                                    log_fn: Optional[Callable[[str], None]] = None
                                    ) -> TrainResult:
    """Supervised 5-class degradation classifier on the large corpus."""
    stage = config.train.classifier
    n_classes = config.model.n_classes
    present = np.unique(labels)
    missing = sorted(set(range(n_classes)) - set(int(c) for c in present))
    if missing:
        raise TrainingError(f"classes {missing} absent from the training data")
    torch.manual_seed(derive_seed(seed, "classifier", "torch"))
    model = build_classifier(config, derive_seed(seed, "classifier", "init"))
    x_all = as_feature_tensor(features)
    y_all = torch.from_numpy(np.ascontiguousarray(labels, dtype=np.int64))
    optimizer = torch.optim.Adam(model.parameters(), lr=stage.learning_rate)
    rng = np.random.default_rng(derive_seed(seed, "classifier", "batches"))

    result = TrainResult(checkpoint=None)  # filled below
    model.train()
    for epoch in range(stage.epochs):
        losses, hits, count = [], 0, 0
        for idx in _batches(x_all.shape[0], min(stage.batch_size, x_all.shape[0]), rng):
            probs = model(x_all[idx])
            loss = cross_entropy_from_probs(probs, y_all[idx])
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite classifier loss at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
            hits += int((probs.argmax(dim=1) == y_all[idx]).sum())
            count += len(idx)
        log = EpochLog(epoch, float(np.mean(losses)), accuracy=hits / count)
        result.history.append(log)
        if log_fn:
            log_fn(log.log_line(stage.learning_rate, seed))
    model.eval()
    result.checkpoint = _make_checkpoint(model, config, "degr_classifier", seed)
    return result


def pretrain_autoencoder(features: np.ndarray, config, seed: int,
                         log_fn: Optional[Callable[[str], None]] = None) -> TrainResult:
    """Reconstruction-MSE autoencoder pretraining on the large corpus."""
    stage = config.train.autoencoder
    torch.manual_seed(derive_seed(seed, "autoencoder", "torch"))
    model = build_autoencoder(config, derive_seed(seed, "autoencoder", "init"))
    x_all = as_feature_tensor(features)
    optimizer = torch.optim.Adam(model.parameters(), lr=stage.learning_rate)
    rng = np.random.default_rng(derive_seed(seed, "autoencoder", "batches"))

    result = TrainResult(checkpoint=None)
    model.train()
    for epoch in range(stage.epochs):
        losses = []
        for idx in _batches(x_all.shape[0], min(stage.batch_size, x_all.shape[0]), rng):
            batch = x_all[idx]
            recon, _ = model(batch)
            loss = mse_loss(recon, batch)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite autoencoder loss at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        log = EpochLog(epoch, float(np.mean(losses)))
        result.history.append(log)
        if log_fn:
            log_fn(log.log_line(stage.learning_rate, seed))
    model.eval()
    result.checkpoint = _make_checkpoint(model, config, "ae_pretrain", seed)
    return result


def finetune(recipe: RecipeSpec, features: np.ndarray, mos: np.ndarray,
             aux_labels: Optional[np.ndarray], config, seed: int,
             init_checkpoint: Optional[Checkpoint] = None,
             log_fn: Optional[Callable[[str], None]] = None) -> TrainResult:
    """Train one fine-tune variant on a fold's training split."""
    check_recipe(recipe, init_checkpoint, aux_labels)
    if np.any(~np.isfinite(mos)):
        raise RecipeError("missing or non-finite MOS values in the training split")
    stage = config.train.finetune
    multitask = recipe.auxiliary != "none"
    torch.manual_seed(derive_seed(seed, "finetune", recipe.name, "torch"))
    model = build_task_net(config, derive_seed(seed, "finetune", recipe.name, "init"),
                           with_classification=multitask)
    if init_checkpoint is not None:
        if init_checkpoint.config_hash != config.config_hash():
            raise RecipeError(
                f"checkpoint config hash {init_checkpoint.config_hash} does not match "
                f"experiment config {config.config_hash()}")
        transfer_weights(init_checkpoint, model, descriptor_from_config(config))

    x_all = as_feature_tensor(features)
    s_all = torch.from_numpy(np.ascontiguousarray(mos, dtype=np.float64))
    y_all = (torch.from_numpy(np.ascontiguousarray(aux_labels, dtype=np.int64))
             if multitask else None)
    w_ce, w_mse = config.train.loss_weights
    optimizer = torch.optim.Adam(model.parameters(), lr=stage.learning_rate)
    rng = np.random.default_rng(derive_seed(seed, "finetune", recipe.name, "batches"))

    result = TrainResult(checkpoint=None)
    model.train()
    for epoch in range(stage.epochs):
        tot, ces, mses = [], [], []
        for idx in _batches(x_all.shape[0], min(stage.batch_size, x_all.shape[0]), rng):
            out = model(x_all[idx])
            if multitask:
                total, ce, mse = multitask_loss(out["class_probs"], y_all[idx],
                                                out["mos"], s_all[idx], (w_ce, w_mse))
                ces.append(float(ce.detach()))
                mses.append(float(mse.detach()))
            else:
                total = mse_loss(out["mos"], s_all[idx])
                mses.append(float(total.detach()))
            if not torch.isfinite(total):
                raise TrainingError(f"non-finite fine-tune loss at epoch {epoch}")
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            tot.append(float(total.detach()))
        log = EpochLog(epoch, float(np.mean(tot)),
                       ce_loss=float(np.mean(ces)) if ces else None,
                       mse_loss=float(np.mean(mses)) if mses else None)
        result.history.append(log)
        if log_fn:
            log_fn(log.log_line(stage.learning_rate, seed))
    model.eval()
    result.checkpoint = _make_checkpoint(model, config, f"finetune_{recipe.name}", seed)
    return result


def predict_mos(checkpoint: Checkpoint, features: np.ndarray, config,
                batch_size: int = 64) -> np.ndarray:
    """Deterministic MOS predictions in (1, 5), one score per clip.

    The model runs in eval mode (dropout off); extraction is batched in
    input order, so scores are independent of any batching the caller uses.
    """
    if not checkpoint.stage.startswith("finetune_"):
        raise RecipeError(f"checkpoint stage {checkpoint.stage!r} has no regression head")
    variant = checkpoint.stage.removeprefix("finetune_")
    model = build_task_net(config, seed=0,
                           with_classification=RECIPES[variant].auxiliary != "none")
    model.load_state_dict(checkpoint.state_dict)
    model.eval()
    x_all = as_feature_tensor(features)
    out = []
    with torch.no_grad():
        for start in range(0, x_all.shape[0], batch_size):
            out.append(model(x_all[start:start + batch_size])["mos"])
    return torch.cat(out).double().numpy()


def _make_checkpoint(model: torch.nn.Module, config, stage: str, seed: int) -> Checkpoint:
    return Checkpoint(
        state_dict={k: v.detach().clone() for k, v in model.state_dict().items()},
        descriptor=descriptor_from_config(config),
        stage=stage,
        seed=seed,
        config_hash=config.config_hash(),
    )
