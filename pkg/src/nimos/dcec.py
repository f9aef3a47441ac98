"""Deep convolutional embedded clustering.

The math lives here twice on purpose: pure-numpy reference functions
(soft assignment, target distribution, KL loss and its analytic gradients,
K-means) that the tests check against brute-force oracles, and a torch
training loop that alternates gradient steps on the joint loss with
periodic target-distribution refreshes until the hard cluster assignments
stop moving.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
import torch

from nimos.models import (Checkpoint, DcecNet, as_feature_tensor, build_dcec,
                          descriptor_from_config, transfer_weights)
from nimos.seeding import derive_seed

logger = logging.getLogger(__name__)


class DcecError(RuntimeError):
    """Invalid inputs or diverged optimization."""


# ---------------------------------------------------------------------------
# Reference math (numpy, float64)
# ---------------------------------------------------------------------------

def soft_assign(embeddings: np.ndarray, centers: np.ndarray,
                alpha: float = 1.0) -> np.ndarray:
    """Student's-t soft assignment Q, shape (N, J).

    q_ij = (1 + ||z_i - u_j||^2 / alpha)^(-(alpha+1)/2), row-normalized.
    """
    Z = np.asarray(embeddings, dtype=np.float64)
    U = np.asarray(centers, dtype=np.float64)
    if not (np.all(np.isfinite(Z)) and np.all(np.isfinite(U))):
        raise DcecError("non-finite embeddings or centers")
    sq = ((Z[:, None, :] - U[None, :, :]) ** 2).sum(axis=2)
    w = (1.0 + sq / alpha) ** (-(alpha + 1.0) / 2.0)
    return w / w.sum(axis=1, keepdims=True)


def target_distribution(Q: np.ndarray) -> np.ndarray:
    """Auxiliary target P: p_ij = (q_ij^2 / f_j) / sum_j'(q_ij'^2 / f_j'), f_j = sum_i q_ij.

    Sharpens confident assignments and penalizes over-populated clusters.
    """
    Q = np.asarray(Q, dtype=np.float64)
    f = Q.sum(axis=0)
    if np.any(f <= 0):
        raise DcecError("zero soft cluster frequency; Q is not a valid assignment matrix")
    # Q * (Q / f) rather than Q**2 / f: algebraically identical, and exact
    # for the N=1 case where f equals the single row (P = Q bitwise).
    weighted = Q * (Q / f[None, :])
    return weighted / weighted.sum(axis=1, keepdims=True)


def kl_divergence(P: np.ndarray, Q: np.ndarray) -> float:
    """KL(P || Q), summed over clusters and averaged over samples."""
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    return float((P * (np.log(P) - np.log(Q))).sum() / P.shape[0])


def kl_gradients(embeddings: np.ndarray, centers: np.ndarray, P: np.ndarray,
                 alpha: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """Analytic gradients of KL(P||Q)/N w.r.t. embeddings and centers (P constant).

    dL/dz_i =  (alpha+1)/(N*alpha) * sum_j (p_ij - q_ij) (z_i - u_j) / (1 + d_ij^2/alpha)
    dL/du_j = -(alpha+1)/(N*alpha) * sum_i (p_ij - q_ij) (z_i - u_j) / (1 + d_ij^2/alpha)
    """
    Z = np.asarray(embeddings, dtype=np.float64)
    U = np.asarray(centers, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    n = Z.shape[0]
    diff = Z[:, None, :] - U[None, :, :]
    sq = (diff ** 2).sum(axis=2)
    Q = soft_assign(Z, U, alpha)
    coeff = (alpha + 1.0) / (n * alpha) * (P - Q) / (1.0 + sq / alpha)
    grad_z = (coeff[:, :, None] * diff).sum(axis=1)
    grad_u = -(coeff[:, :, None] * diff).sum(axis=0)
    return grad_z, grad_u


def hard_labels(Q: np.ndarray) -> np.ndarray:
    """argmax per row; exact ties resolve to the lowest cluster index."""
    return np.argmax(np.asarray(Q), axis=1)


def cluster_purity(assignments: np.ndarray, reference_labels: np.ndarray) -> float:
    """Fraction of samples in the majority reference class of their cluster."""
    assignments = np.asarray(assignments)
    reference_labels = np.asarray(reference_labels)
    total = 0
    for c in np.unique(assignments):
        _, counts = np.unique(reference_labels[assignments == c], return_counts=True)
        total += counts.max()
    return total / assignments.size


# ---------------------------------------------------------------------------
# K-means center initialization
# ---------------------------------------------------------------------------

def init_centers_kmeans(embeddings: np.ndarray, n_clusters: int, seed: int,
                        restarts: int = 10, max_iter: int = 300) -> np.ndarray:
    """Lloyd's algorithm with seeded farthest-point initialization.

    Each restart seeds a random first center and picks subsequent centers
    greedily at the point farthest from those already chosen; the restart
    with the lowest inertia wins.  An emptied cluster is re-seeded at the
    point farthest from its own center.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    n = X.shape[0]
    if n < n_clusters:
        raise DcecError(f"need at least {n_clusters} points for {n_clusters} clusters, got {n}")
    rng = np.random.default_rng(seed)
    best: Optional[Tuple[float, np.ndarray]] = None
    for _ in range(max(1, restarts)):
        centers = _farthest_point_init(X, n_clusters, rng)
        centers, inertia = _lloyd(X, centers, max_iter)
        if best is None or inertia < best[0]:
            best = (inertia, centers)
    return best[1]


def _farthest_point_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    first = int(rng.integers(X.shape[0]))
    chosen = [first]
    dists = ((X - X[first]) ** 2).sum(axis=1)
    for _ in range(1, k):
        nxt = int(np.argmax(dists))
        chosen.append(nxt)
        dists = np.minimum(dists, ((X - X[nxt]) ** 2).sum(axis=1))
    return X[chosen].copy()


def _lloyd(X: np.ndarray, centers: np.ndarray, max_iter: int) -> Tuple[np.ndarray, float]:
    k = centers.shape[0]
    assign = np.full(X.shape[0], -1)
    for _ in range(max_iter):
        d = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = d.argmin(axis=1)
        for j in range(k):
            members = new_assign == j
            if members.any():
                centers[j] = X[members].mean(axis=0)
            else:
                # Re-seed an emptied cluster at the point farthest from its center.
                centers[j] = X[np.argmax(((X - centers[j]) ** 2).sum(axis=1))]
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    d = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    inertia = float(d.min(axis=1).sum())
    return centers, inertia


# ---------------------------------------------------------------------------
# Joint training
# ---------------------------------------------------------------------------

def dcec_loss(x: torch.Tensor, recon: torch.Tensor, q: torch.Tensor,
              p: torch.Tensor, gamma: float = 0.1
              ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(L_total, L_r, L_c): reconstruction MSE plus gamma-weighted KL(P||Q).

    Reductions run in float64 so the additive decomposition holds to
    round-off against independent re-computation.
    """
    l_r = ((x.double() - recon.double()) ** 2).mean()
    p64 = p.double()
    l_c = (p64 * (torch.log(p64) - torch.log(q.double()))).sum() / q.shape[0]
    return l_r + gamma * l_c, l_r, l_c


@dataclass
class RefreshEvent:
    epoch: int
    batch: int
    recon_loss: float
    cluster_loss: float
    label_change_fraction: float

    def log_line(self) -> str:
        return (f"epoch={self.epoch} batch={self.batch} l_r={self.recon_loss!r} "
                f"l_c={self.cluster_loss!r} label_change_fraction={self.label_change_fraction!r}")


@dataclass
class DcecResult:
    model: DcecNet
    final_q: np.ndarray
    refreshes: List[RefreshEvent] = field(default_factory=list)
    converged: bool = False


def _full_dataset_q(model: DcecNet, features: torch.Tensor, batch_size: int,
                    with_recon: bool = False) -> Tuple[np.ndarray, float]:
    """Soft assignments over the whole dataset in fixed order (deterministic reduce).

    Returns (Q, recon_mse); the reconstruction MSE is only computed when
    requested (it needs the decoder pass).
    """
    was_training = model.training
    model.eval()
    out = []
    sq_err = 0.0
    n_elem = 0
    with torch.no_grad():
        for start in range(0, features.shape[0], batch_size):
            x = features[start:start + batch_size]
            if with_recon:
                recon, _, q = model(x)
                sq_err += float(((x - recon).double() ** 2).sum())
                n_elem += x.numel()
            else:
                q = model.soft_assignments(x)
            out.append(q)
    if was_training:
        model.train()
    recon_mse = sq_err / n_elem if n_elem else float("nan")
    return torch.cat(out).double().numpy(), recon_mse


def _full_dataset_embeddings(model: DcecNet, features: torch.Tensor,
                             batch_size: int) -> np.ndarray:
    was_training = model.training
    model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, features.shape[0], batch_size):
            x = features[start:start + batch_size]
            out.append(model.bottleneck.embed_latent(model.encoder(x)))
    if was_training:
        model.train()
    return torch.cat(out).double().numpy()


def train_dcec(features: np.ndarray, ae_checkpoint: Checkpoint, config, seed: int,
               log_fn: Optional[Callable[[str], None]] = None) -> Tuple[Checkpoint, DcecResult]:
    """Joint reconstruction + clustering training on the large dataset.

    Starts from the pretrained autoencoder, initializes cluster centers with
    K-means on the embedded dataset, then minimizes L_r + gamma*L_c with
    Adam.  Every ``refresh_interval`` batches the target distribution P is
    recomputed from the full-dataset Q; training stops once the fraction of
    samples whose hard label changed between consecutive refreshes drops
    below ``convergence_threshold`` (with ``max_epochs`` as a safety bound).
    """
    dc = config.dcec
    stage = config.train.dcec
    torch.manual_seed(derive_seed(seed, "dcec", "torch"))
    model = build_dcec(config, derive_seed(seed, "dcec", "init"))
    report = transfer_weights(ae_checkpoint, model, descriptor_from_config(config))
    if "encoder" not in report["carried"]:
        raise DcecError("autoencoder checkpoint did not provide encoder weights")

    x_all = as_feature_tensor(features)
    n = x_all.shape[0]
    batch_size = min(stage.batch_size, n)

    emb = _full_dataset_embeddings(model, x_all, batch_size)
    centers = init_centers_kmeans(emb, dc.n_clusters, derive_seed(seed, "dcec", "kmeans"),
                                  restarts=dc.kmeans_restarts)
    with torch.no_grad():
        model.clustering.centers.copy_(torch.from_numpy(centers).float())

    optimizer = torch.optim.Adam(model.parameters(), lr=stage.learning_rate)
    rng = np.random.default_rng(derive_seed(seed, "dcec", "batches"))

    result = DcecResult(model=model, final_q=np.zeros((n, dc.n_clusters)))
    prev_labels: Optional[np.ndarray] = None
    p_all: Optional[torch.Tensor] = None
    global_step = 0
    model.train()

    for epoch in range(dc.max_epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            if global_step % dc.refresh_interval == 0:
                q_full, recon_mse = _full_dataset_q(model, x_all, batch_size,
                                                    with_recon=True)
                p_np = target_distribution(q_full)
                p_all = torch.from_numpy(p_np)
                labels = hard_labels(q_full)
                change = (1.0 if prev_labels is None
                          else float(np.mean(labels != prev_labels)))
                event = RefreshEvent(epoch, global_step, recon_mse,
                                     kl_divergence(p_np, q_full), change)
                result.refreshes.append(event)
                if log_fn:
                    log_fn(event.log_line())
                result.final_q = q_full
                if prev_labels is not None and change < dc.convergence_threshold:
                    result.converged = True
                prev_labels = labels
                if result.converged:
                    break

            idx = torch.from_numpy(np.ascontiguousarray(order[start:start + batch_size]))
            batch = x_all[idx]
            recon, _, q = model(batch)
            total, l_r, l_c = dcec_loss(batch, recon, q, p_all[idx], dc.gamma)
            if not torch.isfinite(total):
                raise DcecError(
                    f"non-finite DCEC loss at epoch {epoch} step {global_step}: "
                    f"l_r={float(l_r)} l_c={float(l_c)}")
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            global_step += 1
        if result.converged:
            break

    model.eval()
    ckpt = Checkpoint(
        state_dict={k: v.detach().clone() for k, v in model.state_dict().items()},
        descriptor=descriptor_from_config(config),
        stage="dcec",
        seed=seed,
        config_hash=config.config_hash(),
        extra={
            "converged": result.converged,
            "refresh_count": len(result.refreshes),
            "final_label_change": result.refreshes[-1].label_change_fraction
            if result.refreshes else None,
        },
    )
    return ckpt, result


def assign_cluster_labels(features: np.ndarray, dcec_checkpoint: Checkpoint,
                          config, batch_size: int = 64) -> np.ndarray:
    """Hard cluster labels from a frozen DCEC model; ties break to the lowest index.

    Extraction is batched in dataset order, so labels are invariant to how
    the caller would batch the data.
    """
    model = build_dcec(config, seed=0)
    model.load_state_dict(dcec_checkpoint.state_dict)
    model.eval()
    x_all = as_feature_tensor(features)
    q, _ = _full_dataset_q(model, x_all, batch_size)
    return hard_labels(q)
