"""Model zoo: shared ConvNet encoder, mirrored decoder, task heads.

Every model variant shares the identical 4-layer stride-2 ConvNet so weights
can be transferred between stages and feature representations compared
fairly.  Convolutions use TF-style "same" padding, so each layer halves both
spatial dims with ceil rounding: (64, 798) -> (256, 4, 50).

Checkpoints are single files embedding an architecture descriptor and the
training-config hash; loading into a mismatching architecture is refused.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

logger = logging.getLogger(__name__)

ENCODER_LAYERS = ((32, 5), (64, 5), (128, 3), (256, 3))
STRIDE = 2


class ModelError(ValueError):
    """Architecture or checkpoint mismatch."""


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def stage_shapes(n_mels: int, t_fixed: int, n_layers: int = 4) -> List[Tuple[int, int]]:
    """Spatial shape after each stride-2 layer, starting from the input."""
    shapes = [(n_mels, t_fixed)]
    h, w = n_mels, t_fixed
    for _ in range(n_layers):
        h, w = _ceil_div(h, STRIDE), _ceil_div(w, STRIDE)
        shapes.append((h, w))
    return shapes


class SamePadConv2d(nn.Module):
    """Stride-2 conv with TF-style asymmetric 'same' padding (extra on bottom/right)."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = STRIDE):
        super().__init__()
        self.kernel = kernel
        self.stride = stride
        self.conv = nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        ih, iw = x.shape[-2:]
        oh, ow = _ceil_div(ih, self.stride), _ceil_div(iw, self.stride)
        ph = max((oh - 1) * self.stride + self.kernel - ih, 0)
        pw = max((ow - 1) * self.stride + self.kernel - iw, 0)
        x = F.pad(x, (pw // 2, pw - pw // 2, ph // 2, ph - ph // 2))
        return self.conv(x)


class ConvNetEncoder(nn.Module):
    """Shared 4-layer ConvNet: conv -> batch-norm -> ReLU, stride 2 everywhere."""

    def __init__(self, n_mels: int, t_fixed: int,
                 layers: Sequence[Tuple[int, int]] = ENCODER_LAYERS):
        super().__init__()
        self.n_mels = n_mels
        self.t_fixed = t_fixed
        self.layers_spec = tuple((int(c), int(k)) for c, k in layers)
        blocks = []
        in_ch = 1
        for out_ch, kernel in self.layers_spec:
            blocks.append(nn.Sequential(
                SamePadConv2d(in_ch, out_ch, kernel),
                nn.BatchNorm2d(out_ch),
                nn.ReLU(),
            ))
            in_ch = out_ch
        self.blocks = nn.ModuleList(blocks)
        h, w = stage_shapes(n_mels, t_fixed, len(self.layers_spec))[-1]
        self.latent_shape = (in_ch, h, w)
        self.latent_dim = in_ch * h * w

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2:] != (self.n_mels, self.t_fixed):
            raise ModelError(
                f"encoder expects input ({self.n_mels}, {self.t_fixed}), got {tuple(x.shape[-2:])}")
        for block in self.blocks:
            x = block(x)
        return x


class ConvNetDecoder(nn.Module):
    """Mirror of the encoder: transposed convs upsample back to the input shape.

    Each transposed conv doubles the spatial dims; the result is cropped to
    the matching encoder stage shape when that stage was odd-sized.
    """

    def __init__(self, n_mels: int, t_fixed: int,
                 layers: Sequence[Tuple[int, int]] = ENCODER_LAYERS):
        super().__init__()
        self.layers_spec = tuple((int(c), int(k)) for c, k in layers)
        self.targets = stage_shapes(n_mels, t_fixed, len(self.layers_spec))[:-1][::-1]
        channels = [1] + [c for c, _ in self.layers_spec]        # [1, 32, 64, 128, 256]
        kernels = [k for _, k in self.layers_spec]               # [5, 5, 3, 3]
        blocks = []
        n = len(self.layers_spec)
        for i in range(n):                                       # deepest first
            in_ch = channels[n - i]
            out_ch = channels[n - i - 1]
            k = kernels[n - i - 1]
            deconv = nn.ConvTranspose2d(in_ch, out_ch, k, stride=STRIDE,
                                        padding=k // 2, output_padding=1)
            if i < n - 1:
                blocks.append(nn.Sequential(deconv, nn.BatchNorm2d(out_ch), nn.ReLU()))
            else:
                blocks.append(nn.Sequential(deconv))             # linear output layer
        self.blocks = nn.ModuleList(blocks)

    def forward(self, latent: torch.Tensor) -> torch.Tensor:
        x = latent
        for block, (th, tw) in zip(self.blocks, self.targets):
            x = block(x)
            x = x[..., :th, :tw]
        return x


class EmbeddingBottleneck(nn.Module):
    """Flatten -> low-dimensional embedding -> expand back to the conv latent."""

    def __init__(self, latent_shape: Tuple[int, int, int], embedding_dim: int):
        super().__init__()
        self.latent_shape = latent_shape
        latent_dim = math.prod(latent_shape)
        self.embed = nn.Linear(latent_dim, embedding_dim)
        self.expand = nn.Linear(embedding_dim, latent_dim)

    def embed_latent(self, latent: torch.Tensor) -> torch.Tensor:
        return self.embed(latent.flatten(1))

    def expand_embedding(self, z: torch.Tensor) -> torch.Tensor:
        return self.expand(z).view(-1, *self.latent_shape)


class ClassificationHead(nn.Module):
    """Flatten -> dense -> ReLU -> dropout -> dense -> softmax."""

    def __init__(self, latent_dim: int, n_classes: int = 5, hidden: int = 256,
                 dropout: float = 0.5):
        super().__init__()
        self.fc1 = nn.Linear(latent_dim, hidden)
        self.dropout = nn.Dropout(dropout)
        self.fc2 = nn.Linear(hidden, n_classes)

    def logits(self, latent: torch.Tensor) -> torch.Tensor:
        h = self.dropout(F.relu(self.fc1(latent.flatten(1))))
        return self.fc2(h)

    def forward(self, latent: torch.Tensor) -> torch.Tensor:
        return F.softmax(self.logits(latent), dim=1)


class RegressionHead(nn.Module):
    """Flatten -> dense -> ReLU -> dropout -> dense -> 1 + 4*sigmoid, so scores lie in (1, 5)."""

    def __init__(self, latent_dim: int, hidden: int = 256, dropout: float = 0.5):
        super().__init__()
        self.fc1 = nn.Linear(latent_dim, hidden)
        self.dropout = nn.Dropout(dropout)
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, latent: torch.Tensor) -> torch.Tensor:
        h = self.dropout(F.relu(self.fc1(latent.flatten(1))))
        return 1.0 + 4.0 * torch.sigmoid(self.fc2(h)).squeeze(-1)


class ClusteringLayer(nn.Module):
    """Student's-t soft assignment of embeddings to trainable cluster centers."""

    def __init__(self, n_clusters: int, embedding_dim: int, alpha: float = 1.0):
        super().__init__()
        self.alpha = alpha
        self.centers = nn.Parameter(torch.zeros(n_clusters, embedding_dim))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        sq = ((z.unsqueeze(1) - self.centers.unsqueeze(0)) ** 2).sum(-1)
        w = (1.0 + sq / self.alpha) ** (-(self.alpha + 1.0) / 2.0)
        return w / w.sum(dim=1, keepdim=True)


class AutoEncoder(nn.Module):
    """Encoder -> embedding bottleneck -> decoder; forward returns (recon, z)."""

    def __init__(self, encoder: ConvNetEncoder, bottleneck: EmbeddingBottleneck,
                 decoder: ConvNetDecoder):
        super().__init__()
        self.encoder = encoder
        self.bottleneck = bottleneck
        self.decoder = decoder

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        z = self.bottleneck.embed_latent(self.encoder(x))
        recon = self.decoder(self.bottleneck.expand_embedding(z))
        return recon, z


class DcecNet(nn.Module):
    """Autoencoder plus clustering layer; forward returns (recon, z, q)."""

    def __init__(self, encoder: ConvNetEncoder, bottleneck: EmbeddingBottleneck,
                 decoder: ConvNetDecoder, clustering: ClusteringLayer):
        super().__init__()
        self.encoder = encoder
        self.bottleneck = bottleneck
        self.decoder = decoder
        self.clustering = clustering

    def forward(self, x: torch.Tensor):
        z = self.bottleneck.embed_latent(self.encoder(x))
        recon = self.decoder(self.bottleneck.expand_embedding(z))
        return recon, z, self.clustering(z)

    def soft_assignments(self, x: torch.Tensor) -> torch.Tensor:
        return self.clustering(self.bottleneck.embed_latent(self.encoder(x)))


class TaskNet(nn.Module):
    """Encoder plus regression head and, for multi-task variants, a classification head."""

    def __init__(self, encoder: ConvNetEncoder, regression: RegressionHead,
                 classification: Optional[ClassificationHead] = None):
        super().__init__()
        self.encoder = encoder
        self.regression = regression
        if classification is not None:
            self.classification = classification

    @property
    def has_classification(self) -> bool:
        return hasattr(self, "classification")

    def forward(self, x: torch.Tensor) -> Dict[str, torch.Tensor]:
        latent = self.encoder(x)
        out = {"mos": self.regression(latent)}
        if self.has_classification:
            out["class_probs"] = self.classification(latent)
        return out


class ClassifierNet(nn.Module):
    """Encoder plus classification head (large-corpus degradation classifier)."""

    def __init__(self, encoder: ConvNetEncoder, classification: ClassificationHead):
        super().__init__()
        self.encoder = encoder
        self.classification = classification

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classification(self.encoder(x))

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.classification.logits(self.encoder(x))


def init_parameters(module: nn.Module, seed: int) -> None:
    """Seeded fan-in-scaled uniform init for conv/dense weights, zero biases."""
    gen = torch.Generator().manual_seed(seed)
    for name, m in sorted(module.named_modules(), key=lambda kv: kv[0]):
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            fan_in = _fan_in(m)
            bound = math.sqrt(6.0 / fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, (nn.BatchNorm2d,)):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()
                m.running_mean.zero_()
                m.running_var.fill_(1.0)


def _fan_in(m: nn.Module) -> int:
    if isinstance(m, nn.Linear):
        return m.weight.shape[1]
    if isinstance(m, nn.Conv2d):
        return m.in_channels * m.kernel_size[0] * m.kernel_size[1]
    if isinstance(m, nn.ConvTranspose2d):
        return m.in_channels * m.kernel_size[0] * m.kernel_size[1]
    raise TypeError(type(m))


@dataclass
class ModelDescriptor:
    """Architecture identity stored inside every checkpoint."""

    n_mels: int
    t_fixed: int
    encoder_layers: List[List[int]]
    head_hidden: int
    n_classes: int
    embedding_dim: int
    n_clusters: int

    def check_same_convnet(self, other: "ModelDescriptor") -> None:
        if (self.n_mels, self.t_fixed, self.encoder_layers) != \
                (other.n_mels, other.t_fixed, other.encoder_layers):
            raise ModelError(
                f"ConvNet spec mismatch: {asdict(self)} vs {asdict(other)}")


@dataclass
class Checkpoint:
    state_dict: Dict[str, torch.Tensor]
    descriptor: ModelDescriptor
    stage: str
    seed: int
    config_hash: str
    extra: Dict[str, object] = field(default_factory=dict)


def save_checkpoint(ckpt: Checkpoint, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format_version": 1,
        "state_dict": ckpt.state_dict,
        "descriptor": asdict(ckpt.descriptor),
        "stage": ckpt.stage,
        "seed": ckpt.seed,
        "config_hash": ckpt.config_hash,
        "extra": ckpt.extra,
    }, path)


def load_checkpoint(path: Path | str) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    return Checkpoint(
        state_dict=blob["state_dict"],
        descriptor=ModelDescriptor(**blob["descriptor"]),
        stage=blob["stage"],
        seed=blob["seed"],
        config_hash=blob["config_hash"],
        extra=blob.get("extra", {}),
    )


def transfer_weights(source: Checkpoint, target: nn.Module,
                     target_descriptor: ModelDescriptor) -> Dict[str, List[str]]:
    """Copy every top-level parameter group present in both source and target.

    The shared ConvNet must match exactly (error otherwise).  Head groups
    absent from the source keep their fresh initialization.  Returns a report
    {"carried": [...], "initialized": [...]} of top-level group names.
    """
    source.descriptor.check_same_convnet(target_descriptor)
    src_groups = {key.split(".", 1)[0] for key in source.state_dict}
    report = {"carried": [], "initialized": []}
    target_state = target.state_dict()
    for group, child in target.named_children():
        keys = [k for k in target_state if k.split(".", 1)[0] == group]
        if group in src_groups:
            for k in keys:
                if k not in source.state_dict:
                    raise ModelError(f"transfer: source missing tensor {k}")
                if source.state_dict[k].shape != target_state[k].shape:
                    raise ModelError(
                        f"transfer: shape mismatch for {k}: "
                        f"{tuple(source.state_dict[k].shape)} vs {tuple(target_state[k].shape)}")
                target_state[k] = source.state_dict[k].clone()
            report["carried"].append(group)
        else:
            report["initialized"].append(group)
    target.load_state_dict(target_state)
    logger.info("weight transfer: carried=%s initialized=%s",
                report["carried"], report["initialized"])
    return report


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def as_feature_tensor(features) -> torch.Tensor:
    """(N, mels, frames) or (N, 1, mels, frames) array -> float32 NCHW tensor."""
    import numpy as np
    x = np.ascontiguousarray(features, dtype=np.float32)
    if x.ndim == 3:
        x = x[:, None, :, :]
    if x.ndim != 4:
        raise ModelError(f"expected 3-D or 4-D feature array, got shape {x.shape}")
    return torch.from_numpy(x)


def descriptor_from_config(config) -> ModelDescriptor:
    return ModelDescriptor(
        n_mels=config.frontend.n_mels,
        t_fixed=config.frontend.t_fixed,
        encoder_layers=[list(l) for l in config.model.encoder_layers],
        head_hidden=config.model.head_hidden,
        n_classes=config.model.n_classes,
        embedding_dim=config.dcec.embedding_dim,
        n_clusters=config.dcec.n_clusters,
    )


def _parts(config, seed: int):
    enc = ConvNetEncoder(config.frontend.n_mels, config.frontend.t_fixed,
                         config.model.encoder_layers)
    return enc


def build_autoencoder(config, seed: int) -> AutoEncoder:
    enc = _parts(config, seed)
    bott = EmbeddingBottleneck(enc.latent_shape, config.dcec.embedding_dim)
    dec = ConvNetDecoder(config.frontend.n_mels, config.frontend.t_fixed,
                         config.model.encoder_layers)
    model = AutoEncoder(enc, bott, dec)
    init_parameters(model, seed)
    return model


def build_dcec(config, seed: int) -> DcecNet:
    enc = _parts(config, seed)
    bott = EmbeddingBottleneck(enc.latent_shape, config.dcec.embedding_dim)
    dec = ConvNetDecoder(config.frontend.n_mels, config.frontend.t_fixed,
                         config.model.encoder_layers)
    clus = ClusteringLayer(config.dcec.n_clusters, config.dcec.embedding_dim,
                           config.dcec.alpha)
    model = DcecNet(enc, bott, dec, clus)
    init_parameters(model, seed)
    return model


def build_classifier(config, seed: int) -> ClassifierNet:
    enc = _parts(config, seed)
    head = ClassificationHead(enc.latent_dim, config.model.n_classes,
                              config.model.head_hidden, config.model.dropout)
    model = ClassifierNet(enc, head)
    init_parameters(model, seed)
    return model


def build_task_net(config, seed: int, with_classification: bool) -> TaskNet:
    enc = _parts(config, seed)
    reg = RegressionHead(enc.latent_dim, config.model.head_hidden, config.model.dropout)
    cls = None
    if with_classification:
        cls = ClassificationHead(enc.latent_dim, config.model.n_classes,
                                 config.model.head_hidden, config.model.dropout)
    model = TaskNet(enc, reg, cls)
    init_parameters(model, seed)
    return model
