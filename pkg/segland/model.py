"""Feature extraction and the orthogonal-prototype (POP) classifier.

Tensors follow torch's channel-first layout: a feature map is N x D x H x W
and a logit map N x K x H x W. The prototype helpers also accept plain N x D
feature matrices since they only touch dimension 1.
"""
import logging
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from segland.core import ArchConfig, LabelMap, PrototypeBank, ProbabilityMap
from segland.errors import (
    DegenerateBasisError,
    DegenerateError,
    DimensionMismatchError,
    ShapeError,
    UnknownArchError,
)

logger = logging.getLogger(__name__)

STRIDES = (4, 8, 16, 32)
POOL_SCALES = (1, 2, 3, 6)
BASIS_EPS = 1e-8
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


def images_to_tensor(images: np.ndarray) -> torch.Tensor:
    """uint8 N x H x W x 3 (or H x W x 3) to normalized float N x 3 x H x W"""
    if images.ndim == 3:
        images = images[None]
    x = torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).float()
    return (x / 255.0 - PIXEL_MEAN) / PIXEL_STD


def conv_bn_relu(in_ch: int, out_ch: int, kernel_size: int = 3, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel_size, stride=stride, padding=kernel_size // 2, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


def _upsample(x: torch.Tensor, size) -> torch.Tensor:
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


# ---------------------------------------------------------------------------
# Encoders
# ---------------------------------------------------------------------------

class ReferenceEncoder(nn.Module):
    """Small 4-stage convolutional pyramid at strides 4/8/16/32"""

    def __init__(self, widths: Sequence[int] = (32, 64, 128, 256)):
        super().__init__()
        self.widths = tuple(widths)
        stem_width = max(widths[0] // 2, 8)
        self.stem = nn.Sequential(
            conv_bn_relu(3, stem_width, stride=2),
            conv_bn_relu(stem_width, widths[0], stride=2),
        )
        self.stages = nn.ModuleList()
        in_ch = widths[0]
        for i, width in enumerate(widths):
            stride = 1 if i == 0 else 2
            self.stages.append(nn.Sequential(
                conv_bn_relu(in_ch, width, stride=stride),
                conv_bn_relu(width, width),
            ))
            in_ch = width

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        x = self.stem(x)
        levels = []
        for stage in self.stages:
            x = stage(x)
            levels.append(x)
        return levels


ENCODERS = {
    "reference": ReferenceEncoder,
}


def check_pyramid(levels: Sequence[torch.Tensor]) -> None:
    """A feature pyramid has 4 levels whose spatial size halves exactly"""
    if len(levels) != len(STRIDES):
        raise ShapeError(f"Feature pyramid needs {len(STRIDES)} levels, got {len(levels)}")
    for upper, lower in zip(levels[:-1], levels[1:]):
        uh, uw = upper.shape[-2:]
        lh, lw = lower.shape[-2:]
        if uh != 2 * lh or uw != 2 * lw:
            raise ShapeError(f"Pyramid level {tuple(lower.shape[-2:])} is not half of {tuple(upper.shape[-2:])}")


# ---------------------------------------------------------------------------
# Decoders
# ---------------------------------------------------------------------------

class PyramidPoolingModule(nn.Module):
    def __init__(self, in_ch: int, ppm_dim: int, out_ch: int, scales: Sequence[int] = POOL_SCALES):
        super().__init__()
        # no BN on pooled branches: a 1x1 pool of a single sample has one value per channel
        self.branches = nn.ModuleList([
            nn.Sequential(nn.AdaptiveAvgPool2d(scale), nn.Conv2d(in_ch, ppm_dim, kernel_size=1), nn.ReLU(inplace=True))
            for scale in scales
        ])
        for branch in self.branches:
            nn.init.zeros_(branch[1].bias)
        self.fuse = conv_bn_relu(in_ch + len(scales) * ppm_dim, out_ch)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        size = x.shape[-2:]
        pooled = [x] + [_upsample(branch(x), size) for branch in self.branches]
        return self.fuse(torch.cat(pooled, dim=1))


class _TopDownDecoder(nn.Module):
    """Lateral projections merged top-down; shared by every decoder variant"""

    def __init__(self, in_widths: Sequence[int], fpn_dim: int, ppm_dim: int, use_ppm: bool):
        super().__init__()
        if use_ppm:
            self.top = PyramidPoolingModule(in_widths[-1], ppm_dim, fpn_dim)
        else:
            self.top = conv_bn_relu(in_widths[-1], fpn_dim, kernel_size=1)
        self.lateral = nn.ModuleList([conv_bn_relu(w, fpn_dim, kernel_size=1) for w in in_widths[:-1]])
        self.smooth = nn.ModuleList([conv_bn_relu(fpn_dim, fpn_dim) for _ in in_widths[:-1]])

    def merge(self, levels: Sequence[torch.Tensor]) -> List[torch.Tensor]:
        """Per-level outputs, finest first"""
        check_pyramid(levels)
        f = self.top(levels[-1])
        outputs = [f]
        for i in reversed(range(len(self.lateral))):
            lateral = self.lateral[i](levels[i])
            f = lateral + _upsample(f, lateral.shape[-2:])
            outputs.append(self.smooth[i](f))
        outputs.reverse()
        return outputs


class UperNetPlusDecoder(_TopDownDecoder):
    """PPM + panoptic-FPN merge at stride 4, then progressive 2x refinement to stride 1"""

    def __init__(self, in_widths: Sequence[int], fpn_dim: int, ppm_dim: int, embed_dim: int):
        super().__init__(in_widths, fpn_dim, ppm_dim, use_ppm=True)
        self.refine = nn.ModuleList([conv_bn_relu(fpn_dim, fpn_dim) for _ in range(2)])
        self.head = nn.Conv2d(fpn_dim, embed_dim, kernel_size=1)
        nn.init.zeros_(self.head.bias)

    def forward(self, levels: Sequence[torch.Tensor]) -> torch.Tensor:
        outputs = self.merge(levels)
        size = outputs[0].shape[-2:]
        f = outputs[0]
        for out in outputs[1:]:
            f = f + _upsample(out, size)
        for step in self.refine:
            f = step(_upsample(f, (f.shape[-2] * 2, f.shape[-1] * 2)))
        return self.head(f)


class UperNetDecoder(_TopDownDecoder):
    """Classic UperNet: concatenate levels at stride 4, fuse, bilinear 4x"""

    def __init__(self, in_widths: Sequence[int], fpn_dim: int, ppm_dim: int, embed_dim: int):
        super().__init__(in_widths, fpn_dim, ppm_dim, use_ppm=True)
        self.fuse = conv_bn_relu(len(in_widths) * fpn_dim, fpn_dim)
        self.head = nn.Conv2d(fpn_dim, embed_dim, kernel_size=1)
        nn.init.zeros_(self.head.bias)

    def forward(self, levels: Sequence[torch.Tensor]) -> torch.Tensor:
        outputs = self.merge(levels)
        size = outputs[0].shape[-2:]
        f = self.fuse(torch.cat([outputs[0]] + [_upsample(o, size) for o in outputs[1:]], dim=1))
        return _upsample(self.head(f), (size[0] * 4, size[1] * 4))


class FPNDecoder(_TopDownDecoder):
    """Plain FPN without pyramid pooling"""

    def __init__(self, in_widths: Sequence[int], fpn_dim: int, ppm_dim: int, embed_dim: int):
        super().__init__(in_widths, fpn_dim, ppm_dim, use_ppm=False)
        self.head = nn.Conv2d(fpn_dim, embed_dim, kernel_size=1)
        nn.init.zeros_(self.head.bias)

    def forward(self, levels: Sequence[torch.Tensor]) -> torch.Tensor:
        outputs = self.merge(levels)
        size = outputs[0].shape[-2:]
        f = outputs[0]
        for out in outputs[1:]:
            f = f + _upsample(out, size)
        return _upsample(self.head(f), (size[0] * 4, size[1] * 4))


DECODERS = {
    "upernetplus": UperNetPlusDecoder,
    "upernet": UperNetDecoder,
    "fpn": FPNDecoder,
}


def build_encoder(arch: ArchConfig) -> nn.Module:
    if arch.encoder not in ENCODERS:
        raise UnknownArchError(f"Unknown encoder '{arch.encoder}'. Available: {sorted(ENCODERS)}")
    return ENCODERS[arch.encoder](arch.widths)


def build_decoder(arch: ArchConfig) -> nn.Module:
    if arch.decoder not in DECODERS:
        raise UnknownArchError(f"Unknown decoder '{arch.decoder}'. Available: {sorted(DECODERS)}")
    return DECODERS[arch.decoder](arch.widths, arch.fpn_dim, arch.ppm_dim, arch.embed_dim)


def upernetplus_decode(pyramid: Sequence[torch.Tensor], decoder: nn.Module) -> torch.Tensor:
    """Decode a 4-level pyramid to a full-resolution feature map"""
    check_pyramid(pyramid)
    return decoder(pyramid)


def extract_features(images: torch.Tensor, encoder: nn.Module, decoder: nn.Module) -> torch.Tensor:
    """N x 3 x H x W images to N x D x H x W features"""
    h, w = images.shape[-2:]
    if h % 32 or w % 32:
        raise ShapeError(f"Image size {h}x{w} is not divisible by 32")
    return upernetplus_decode(encoder(images), decoder)


# ---------------------------------------------------------------------------
# Prototype scoring
# ---------------------------------------------------------------------------

def _row_view(row: torch.Tensor, ndim: int) -> torch.Tensor:
    return row.reshape([1, row.shape[0]] + [1] * (ndim - 2))


def cosine_scores(features: torch.Tensor, rows: torch.Tensor, temperature: float) -> torch.Tensor:
    """Per-row cosine similarity / temperature; rows are scored independently"""
    if features.shape[1] != rows.shape[1]:
        raise DimensionMismatchError(f"Feature width {features.shape[1]} != prototype width {rows.shape[1]}")
    unit = F.normalize(features, dim=1, eps=1e-12)
    scores = []
    for k in range(rows.shape[0]):
        row = rows[k]
        row = row / row.norm().clamp_min(1e-12)
        scores.append((unit * _row_view(row, unit.ndim)).sum(dim=1))
    if not scores:
        return features.new_zeros((features.shape[0], 0) + tuple(features.shape[2:]))
    return torch.stack(scores, dim=1) / temperature


def score_classes(fmap: torch.Tensor, bank: PrototypeBank) -> torch.Tensor:
    """Cosine logits of every bank row against every pixel feature"""
    return cosine_scores(fmap, bank.prototypes.to(fmap.dtype), bank.temperature)


def orthonormal_basis(prototypes: torch.Tensor) -> torch.Tensor:
    """Modified Gram-Schmidt in float64; linearly dependent rows are dropped"""
    norms = prototypes.detach().double().norm(dim=1)
    if bool((norms < BASIS_EPS).any()):
        raise DegenerateBasisError("A base prototype has (near) zero norm")
    basis = []
    for row in prototypes.double():
        v = row
        for q in basis:
            v = v - (v @ q) * q
        n = v.norm()
        if n > BASIS_EPS * row.norm():
            basis.append(v / n)
    return torch.stack(basis)


def project_residual(fmap: torch.Tensor, base_prototypes: torch.Tensor) -> torch.Tensor:
    """Remove the component of every feature lying in the span of the base prototypes"""
    if fmap.shape[1] != base_prototypes.shape[1]:
        raise DimensionMismatchError(f"Feature width {fmap.shape[1]} != prototype width {base_prototypes.shape[1]}")
    if base_prototypes.shape[0] == 0:
        return fmap
    q = orthonormal_basis(base_prototypes)
    f = fmap.double()
    coeffs = torch.einsum("nd...,rd->nr...", f, q)
    residual = f - torch.einsum("nr...,rd->nd...", coeffs, q)
    return residual.to(fmap.dtype)


def orthogonality_loss(bank: Union[PrototypeBank, torch.Tensor]) -> torch.Tensor:
    """Sum of squared pairwise cosines over unordered prototype pairs"""
    rows = bank.prototypes if isinstance(bank, PrototypeBank) else bank
    if rows.shape[0] < 2:
        raise DegenerateError("Orthogonality loss needs at least two prototypes")
    norms = rows.norm(dim=1)
    if bool((norms.detach() < 1e-12).any()):
        raise DegenerateError("Orthogonality loss is undefined for a zero-norm prototype")
    unit = rows / norms[:, None]
    gram = unit @ unit.t()
    upper = torch.triu(gram, diagonal=1)
    return (upper ** 2).sum()


def predict(logits: torch.Tensor):
    """K x H x W logits to (ProbabilityMap, LabelMap); ties go to the lowest id"""
    if logits.ndim == 4:
        if logits.shape[0] != 1:
            raise ShapeError("predict works on one tile at a time")
        logits = logits[0]
    logits64 = logits.detach().double()
    probs = torch.softmax(logits64, dim=0).permute(1, 2, 0).contiguous().numpy()
    labels = np.argmax(logits64.numpy(), axis=0).astype(np.uint8)
    return ProbabilityMap(probs=probs.astype(np.float32)), LabelMap(labels=labels)


def initial_prototypes(num_rows: int, dim: int, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Orthonormal rows from the QR factor of a Gaussian draw"""
    if num_rows > dim:
        raise DimensionMismatchError(f"Cannot place {num_rows} orthonormal prototypes in {dim} dimensions")
    q, r = torch.linalg.qr(torch.randn(dim, num_rows, generator=generator, dtype=torch.float64))
    q = q * torch.sign(torch.diagonal(r))[None, :]
    return q.t().float().contiguous()


def init_novel_prototypes(
    features: torch.Tensor,
    labels: torch.Tensor,
    base_prototypes: torch.Tensor,
    novel_ids: Sequence[int],
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Masked average of residual features per novel class, L2-normalized.

    features is N x D x H x W with labels N x H x W, or flattened to M x D with
    M labels. Falls back to a random unit vector in the residual subspace when
    a class has no pixels or its residual average vanishes.
    """
    with torch.no_grad():
        residual = project_residual(features, base_prototypes)
        if residual.ndim > 2:
            residual = residual.movedim(1, -1).reshape(-1, residual.shape[1])
        flat = residual.double()
        flat_labels = labels.reshape(-1)
        rows = []
        for class_id in novel_ids:
            mask = flat_labels == class_id
            mean = flat[mask].mean(dim=0) if bool(mask.any()) else torch.zeros(flat.shape[1], dtype=torch.float64)
            if mean.norm() < BASIS_EPS:
                logger.warning(f"Novel class {class_id}: empty residual mask, using a random residual direction")
                draw = torch.randn(1, flat.shape[1], generator=generator, dtype=torch.float64)
                mean = project_residual(draw, base_prototypes.double())[0]
                if mean.norm() < BASIS_EPS:
                    mean = draw[0]
            rows.append(mean / mean.norm())
        return torch.stack(rows).float()


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------

class PrototypeHead(nn.Module):
    """Trainable view of a PrototypeBank.

    Frozen rows live in a buffer and trainable rows in a parameter, so frozen
    rows never receive gradients. Rows before ``num_base_rows`` (background and
    base classes) score the raw features; later (novel) rows score the residual
    left after projecting out the base prototypes, damped by the share of the
    feature norm that residual carries.
    """

    def __init__(self, bank: PrototypeBank, num_base_rows: int):
        super().__init__()
        frozen = torch.tensor(bank.frozen_mask, dtype=torch.bool)
        protos = bank.prototypes.detach().float()
        self.temperature = bank.temperature
        self.num_base_rows = num_base_rows
        self.register_buffer("frozen_rows", protos[frozen].clone())
        self.trainable_rows = nn.Parameter(protos[~frozen].clone())
        order = torch.cat([torch.nonzero(frozen).flatten(), torch.nonzero(~frozen).flatten()])
        self.register_buffer("row_order", torch.argsort(order))
        self.frozen_mask = list(bank.frozen_mask)

    def prototypes(self) -> torch.Tensor:
        return torch.cat([self.frozen_rows, self.trainable_rows], dim=0).index_select(0, self.row_order)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        rows = self.prototypes()
        logits = cosine_scores(features, rows[: self.num_base_rows], self.temperature)
        if rows.shape[0] == self.num_base_rows:
            return logits
        base = rows[1: self.num_base_rows].detach()
        residual = project_residual(features, base)
        share = residual.norm(dim=1, keepdim=True) / features.norm(dim=1, keepdim=True).clamp_min(1e-12)
        novel = cosine_scores(residual, rows[self.num_base_rows:], self.temperature) * share
        return torch.cat([logits, novel], dim=1)

    def to_bank(self) -> PrototypeBank:
        return PrototypeBank(
            prototypes=self.prototypes().detach().clone(),
            frozen_mask=list(self.frozen_mask),
            temperature=self.temperature,
        )


class SegmentationNetwork(nn.Module):
    def __init__(self, arch: ArchConfig, bank: PrototypeBank, num_base_rows: int):
        super().__init__()
        if bank.dim != arch.embed_dim:
            raise DimensionMismatchError(f"Bank width {bank.dim} != embedding width {arch.embed_dim}")
        self.arch = arch
        self.encoder = build_encoder(arch)
        self.decoder = build_decoder(arch)
        self.head = PrototypeHead(bank, num_base_rows)

    def features(self, images: torch.Tensor) -> torch.Tensor:
        return extract_features(images, self.encoder, self.decoder)

    def pop_logits(self, fmap: torch.Tensor) -> torch.Tensor:
        """Base rows on the raw features, novel rows on the base-free residual"""
        return self.head(fmap)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.pop_logits(self.features(images))

    def export_params(self) -> Dict[str, Dict[str, np.ndarray]]:
        """Encoder and decoder state (parameters and BN statistics) as float32 arrays"""
        return {
            "encoder": {k: v.detach().cpu().float().numpy().copy() for k, v in self.encoder.state_dict().items()},
            "decoder": {k: v.detach().cpu().float().numpy().copy() for k, v in self.decoder.state_dict().items()},
        }

    def load_params(self, encoder_params: Dict[str, np.ndarray], decoder_params: Dict[str, np.ndarray]) -> None:
        for module, params in ((self.encoder, encoder_params), (self.decoder, decoder_params)):
            current = module.state_dict()
            state = {k: torch.from_numpy(np.asarray(v)).to(current[k].dtype) for k, v in params.items()}
            module.load_state_dict(state)
