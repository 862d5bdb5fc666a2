"""Concept bottleneck heads: the average-pooling CBM and the part-prototype CBM."""

from __future__ import annotations

import logging
import math
from typing import NamedTuple, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import Backbone, FeatureMaps

log = logging.getLogger(__name__)


class CBMOutput(NamedTuple):
    concept_logits: torch.Tensor  # (B, C)
    concept_probs: torch.Tensor  # (B, C)
    class_logits: torch.Tensor  # (B, K)
    features: FeatureMaps
    maps: torch.Tensor | None = None  # (B, M, H_z, W_z), prototype models only
    activations: torch.Tensor | None = None  # (B, M)


def _seeded_linear(in_features: int, out_features: int, gen: torch.Generator) -> nn.Linear:
    layer = nn.Linear(in_features, out_features)
    bound = 1.0 / math.sqrt(in_features)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=gen)
        layer.bias.uniform_(-bound, bound, generator=gen)
    return layer


def _safe_normalize(x: torch.Tensor, dim: int) -> torch.Tensor:
    """Unit-normalize along ``dim``; zero vectors stay zero (and get zero gradient)."""
    norm = torch.linalg.vector_norm(x, dim=dim, keepdim=True)
    nonzero = norm > 0
    return torch.where(nonzero, x / torch.where(nonzero, norm, torch.ones_like(norm)), torch.zeros_like(x))


def prototype_similarity_maps(
    deep: torch.Tensor, prototypes: torch.Tensor, kind: str = "cosine"
) -> torch.Tensor:
    """Similarity of every prototype to every cell of the deep map.

    ``deep`` is (B, D, H, W) or (D, H, W); ``prototypes`` is (M, D). Returns
    (B, M, H, W) (or (M, H, W)). ``kind="cosine"`` gives values in [-1, 1] with
    similarity 0 wherever either vector is zero; ``kind="log"`` is the
    ProtoPNet score ``log((d + 1) / (d + 1e-4))`` of the squared distance d.
    """
    squeeze = deep.dim() == 3
    if squeeze:
        deep = deep.unsqueeze(0)
    if deep.shape[1] != prototypes.shape[1]:
        raise ValueError(f"feature dim {deep.shape[1]} != prototype dim {prototypes.shape[1]}")
    if kind == "cosine":
        z = _safe_normalize(deep, dim=1)
        p = _safe_normalize(prototypes, dim=1)
        maps = torch.einsum("bdhw,md->bmhw", z, p)
    elif kind == "log":
        z2 = (deep**2).sum(dim=1, keepdim=True)
        p2 = (prototypes**2).sum(dim=1).view(1, -1, 1, 1)
        zp = torch.einsum("bdhw,md->bmhw", deep, prototypes)
        d = F.relu(z2 - 2 * zp + p2)
        maps = torch.log((d + 1) / (d + 1e-4))
    else:
        raise ValueError(f"unknown similarity {kind!r}")
    return maps.squeeze(0) if squeeze else maps


def prototype_activations(maps: torch.Tensor) -> torch.Tensor:
    """Max over the spatial cells of each map: (..., M, H, W) -> (..., M)."""
    if maps.numel() == 0:
        raise ValueError("empty maps")
    return maps.amax(dim=(-2, -1))


def top_n_prototypes(concept_row: Sequence[float] | torch.Tensor, n: int, warn: bool = True) -> list[int]:
    """Indices of the ``n`` largest weights, descending; ties go to the lower index."""
    w = torch.as_tensor(concept_row).detach().flatten()
    M = w.numel()
    if not 1 <= n <= M:
        raise ValueError(f"N must be in [1, {M}], got {n}")
    order = torch.sort(w, descending=True, stable=True).indices[:n].tolist()
    if warn and bool((w[order] <= 0).any()):
        log.warning("top-%d selection includes prototypes with non-positive weight", n)
    return order


def top_n_table(weight: torch.Tensor, n: int) -> torch.Tensor:
    """(C, M) concept weights -> (C, n) prototype indices, same rule as ``top_n_prototypes``."""
    C, M = weight.shape
    if not 1 <= n <= M:
        raise ValueError(f"N must be in [1, {M}], got {n}")
    idx = torch.sort(weight.detach(), dim=1, descending=True, stable=True).indices[:, :n]
    if bool((torch.gather(weight.detach(), 1, idx) <= 0).any()):
        log.debug("top-%d selection includes non-positive weights", n)
    return idx


def concept_localization_map(maps: torch.Tensor, concept_row, n: int) -> torch.Tensor:
    """Mean of the top-``n`` prototypes' maps for one concept: (..., M, H, W) -> (..., H, W)."""
    idx = top_n_prototypes(concept_row, n)
    return maps[..., idx, :, :].mean(dim=-3)


def concept_maps(maps: torch.Tensor, weight: torch.Tensor, n: int) -> torch.Tensor:
    """All concept maps at once: (B, M, H, W) x (C, M) -> (B, C, H, W)."""
    idx = top_n_table(weight, n)  # (C, n)
    B, M, H, W = maps.shape
    picked = maps[:, idx.flatten()].view(B, idx.shape[0], n, H, W)
    return picked.mean(dim=2)


class VanillaCBM(nn.Module):
    """Average-pool the deep map, predict concepts, predict the class from concept probabilities."""

    kind = "vanilla"

    def __init__(self, backbone: Backbone, num_concepts: int, num_classes: int, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed + 1)
        self.backbone = backbone
        self.concept_head = _seeded_linear(backbone.dim, num_concepts, gen)
        self.class_head = _seeded_linear(num_concepts, num_classes, gen)

    def head_parameters(self):
        return list(self.concept_head.parameters()) + list(self.class_head.parameters())

    def heads(self, features: FeatureMaps) -> CBMOutput:
        pooled = features.deep.mean(dim=(-2, -1))
        logits = self.concept_head(pooled)
        probs = torch.sigmoid(logits)
        return CBMOutput(logits, probs, self.class_head(probs), features)

    def forward(self, images: torch.Tensor) -> CBMOutput:
        return self.heads(self.backbone(images))


class PrototypeCBM(nn.Module):
    """Concepts predicted from the max similarity of M prototypes to deep-map cells."""

    kind = "proto"

    def __init__(
        self,
        backbone: Backbone,
        num_concepts: int,
        num_classes: int,
        num_prototypes: int = 64,
        top_n: int = 10,
        similarity: str = "cosine",
        seed: int = 0,
    ):
        super().__init__()
        gen = torch.Generator().manual_seed(seed + 1)
        self.backbone = backbone
        self.top_n = top_n
        self.similarity = similarity
        protos = torch.randn(num_prototypes, backbone.dim, generator=gen)
        self.prototypes = nn.Parameter(protos / protos.norm(dim=1, keepdim=True))
        self.concept_head = _seeded_linear(num_prototypes, num_concepts, gen)
        self.class_head = _seeded_linear(num_concepts, num_classes, gen)

    @property
    def num_prototypes(self) -> int:
        return self.prototypes.shape[0]

    def head_parameters(self):
        return [self.prototypes, *self.concept_head.parameters(), *self.class_head.parameters()]

    def heads(self, features: FeatureMaps) -> CBMOutput:
        maps = prototype_similarity_maps(features.deep, self.prototypes, self.similarity)
        acts = prototype_activations(maps)
        logits = self.concept_head(acts)
        probs = torch.sigmoid(logits)
        return CBMOutput(logits, probs, self.class_head(probs), features, maps, acts)

    def forward(self, images: torch.Tensor) -> CBMOutput:
        return self.heads(self.backbone(images))

    def concept_maps(self, maps: torch.Tensor, n: int | None = None) -> torch.Tensor:
        return concept_maps(maps, self.concept_head.weight, n or self.top_n)


class LinearProbe(nn.Module):
    """Non-interpretable baseline: pooled deep features straight to class logits."""

    kind = "baseline"

    def __init__(self, backbone: Backbone, num_concepts: int, num_classes: int, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed + 1)
        self.backbone = backbone
        self.num_concepts = num_concepts
        self.class_head = _seeded_linear(backbone.dim, num_classes, gen)

    def head_parameters(self):
        return list(self.class_head.parameters())

    def heads(self, features: FeatureMaps) -> CBMOutput:
        logits = self.class_head(features.deep.mean(dim=(-2, -1)))
        B = logits.shape[0]
        # no concept head: report undecided concepts
        zeros = logits.new_zeros(B, self.num_concepts)
        return CBMOutput(zeros, torch.full_like(zeros, 0.5), logits, features)

    def forward(self, images: torch.Tensor) -> CBMOutput:
        return self.heads(self.backbone(images))


def vanilla_forward(model: VanillaCBM, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    out = model(images)
    return out.concept_probs, out.class_logits


def proto_forward(model: PrototypeCBM, images: torch.Tensor):
    out = model(images)
    return out.concept_probs, out.class_logits, out.maps, out.activations
