"""Training objectives.

Feature maps are channel-first: a single map is (D, H, W), a batch (B, D, H, W).
Losses over a batch are averaged over the batch.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Mapping, Sequence

import torch
import torch.nn.functional as F

PROB_EPS = 1e-7


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    concept: float = 1.0
    task: float = 1.0
    cla: float = 1.0
    cia: float = 1.0
    pa: float = 1.0
    # L_div hinge margin squared; None -> (H_z^2 + W_z^2) / 4
    div_margin_sq: float | None = None
    # raw (unbounded) division term instead of the hinged one
    div_raw: bool = False
    # divide L_grp by the number of ordered pairs instead of T
    grp_pair_norm: bool = False
    # average CLA over matrix entries instead of the raw squared Frobenius norm
    cla_mean: bool = False
    center_mode: str = "relu"

    def __post_init__(self) -> None:
        for name in ("concept", "task", "cla", "cia", "pa"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise LossError(f"loss weight {name}={v} must be finite and >= 0")
        if self.div_margin_sq is not None and not (self.div_margin_sq >= 0):
            raise LossError("div_margin_sq must be >= 0")
        if self.center_mode not in ("relu",):
            raise LossError(f"unknown center_mode {self.center_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------- task / concept


def concept_loss(concept_probs: torch.Tensor, c_gt: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy over concepts (and batch); probabilities clipped to [eps, 1 - eps]."""
    if concept_probs.shape != c_gt.shape:
        raise LossError(f"shape mismatch: probs {tuple(concept_probs.shape)} vs labels {tuple(c_gt.shape)}")
    p = concept_probs.clamp(PROB_EPS, 1 - PROB_EPS)
    y = c_gt.to(p.dtype)
    return -(y * torch.log(p) + (1 - y) * torch.log1p(-p)).mean()


def task_loss(class_logits: torch.Tensor, y_gt: torch.Tensor) -> torch.Tensor:
    if class_logits.dim() == 1:
        class_logits = class_logits.unsqueeze(0)
        y_gt = torch.as_tensor(y_gt).reshape(1)
    if class_logits.shape[0] != y_gt.shape[0]:
        raise LossError(f"shape mismatch: {class_logits.shape[0]} logit rows vs {y_gt.shape[0]} labels")
    return F.cross_entropy(class_logits, y_gt.long())


# --------------------------------------------------------------------------- cross-layer alignment


def space_to_depth_match(shallow: torch.Tensor, ratio: int) -> torch.Tensor:
    """(…, D_s, r·H, r·W) -> (…, r²·D_s, H, W).

    Output channel ``(i·r + j)·D_s + d`` holds channel d of source pixel (i, j)
    of the cell's r x r block, i.e. blocks are concatenated in row-major order.
    """
    if int(ratio) != ratio or ratio < 1:
        raise LossError(f"ratio must be a positive integer, got {ratio}")
    *lead, D, Hs, Ws = shallow.shape
    if Hs % ratio or Ws % ratio:
        raise LossError(f"shallow map {Hs}x{Ws} is not an integer multiple of ratio {ratio}")
    H, W = Hs // ratio, Ws // ratio
    x = shallow.reshape(-1, D, H, ratio, W, ratio)
    x = x.permute(0, 3, 5, 1, 2, 4).reshape(-1, ratio * ratio * D, H, W)
    return x.reshape(*lead, ratio * ratio * D, H, W)


def enrich_multiscale(grid: torch.Tensor, e: int) -> torch.Tensor:
    """Concatenate every e x e window (stride 1): (…, D, H, W) -> (…, e²·D, H-e+1, W-e+1).

    Window cell (a, b) lands in channels ``(a·e + b)·D ... + D``.
    """
    H, W = grid.shape[-2:]
    if not 1 <= e <= min(H, W):
        raise LossError(f"window size {e} must be in [1, {min(H, W)}]")
    Ho, Wo = H - e + 1, W - e + 1
    parts = [grid[..., a : a + Ho, b : b + Wo] for a in range(e) for b in range(e)]
    return torch.cat(parts, dim=-3)


def pairwise_similarity(rows: torch.Tensor) -> torch.Tensor:
    """Cosine similarity between all rows: (n, d) -> (n, n). Zero rows give zero entries."""
    norm = torch.linalg.vector_norm(rows, dim=-1, keepdim=True)
    nonzero = norm > 0
    unit = torch.where(nonzero, rows / torch.where(nonzero, norm, torch.ones_like(norm)), torch.zeros_like(rows))
    return unit @ unit.transpose(-1, -2)


def _grid_similarity(grid: torch.Tensor) -> torch.Tensor:
    # (B, D, H, W) -> (B, HW, HW)
    B, D = grid.shape[:2]
    return pairwise_similarity(grid.reshape(B, D, -1).transpose(1, 2))


def cla_loss(deep: torch.Tensor, shallow: torch.Tensor, levels: int = 2, mean: bool = False) -> torch.Tensor:
    """Align the pairwise cell similarities of the deep map with the shallow map's.

    The shallow map is space-to-depth matched to the deep grid, both are
    enriched with e x e windows for e = 1..levels, and the squared Frobenius
    distance between the similarity matrices is averaged over levels. The
    shallow side is a constant target (no gradient).
    """
    single = deep.dim() == 3
    if single:
        deep, shallow = deep.unsqueeze(0), shallow.unsqueeze(0)
    Hd, Wd = deep.shape[-2:]
    Hs, Ws = shallow.shape[-2:]
    if Hs % Hd or Ws % Wd or Hs // Hd != Ws // Wd:
        raise LossError(f"shallow {Hs}x{Ws} is not an integer multiple of deep {Hd}x{Wd}")
    matched = space_to_depth_match(shallow.detach(), Hs // Hd)
    total = deep.new_zeros(())
    for e in range(1, levels + 1):
        phi_d = _grid_similarity(enrich_multiscale(deep, e))
        with torch.no_grad():
            phi_s = _grid_similarity(enrich_multiscale(matched, e))
        sq = (phi_d - phi_s) ** 2
        per_image = sq.mean(dim=(-2, -1)) if mean else sq.sum(dim=(-2, -1))
        total = total + per_image.mean()
    return total / levels


# --------------------------------------------------------------------------- cross-image alignment


@dataclass(frozen=True)
class AugmentationTransform:
    """Grid-exact spatial transform acting on the last two axes.

    ``kind`` is one of ``identity``, ``hflip``, ``vflip``, ``rot90`` (with
    ``k`` quarter turns counter-clockwise) or ``rotate`` (with ``angle`` in
    degrees, accepted only for multiples of 90).
    """

    kind: str = "identity"
    k: int = 1
    angle: float = 0.0

    def _quarter_turns(self) -> int:
        if self.kind == "rot90":
            return self.k % 4
        if self.kind == "rotate":
            if self.angle % 90 != 0:
                raise LossError(f"rotation by {self.angle} degrees is not grid-exact")
            return int(self.angle // 90) % 4
        raise AssertionError

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        if self.kind == "identity":
            return x
        if self.kind == "hflip":
            return torch.flip(x, dims=(-1,))
        if self.kind == "vflip":
            return torch.flip(x, dims=(-2,))
        if self.kind in ("rot90", "rotate"):
            k = self._quarter_turns()
            if k % 2 and x.shape[-1] != x.shape[-2]:
                raise LossError("odd quarter turns need square grids")
            return torch.rot90(x, k, dims=(-2, -1))
        raise LossError(f"unsupported augmentation {self.kind!r}")

    def check(self) -> None:
        if self.kind in ("identity", "hflip", "vflip"):
            return
        if self.kind in ("rot90", "rotate"):
            self._quarter_turns()
            return
        raise LossError(f"augmentation {self.kind!r} is not grid-exact")

    def name(self) -> str:
        if self.kind == "rot90":
            return f"rot{90 * (self.k % 4)}"
        return self.kind


CIA_TRANSFORMS = (
    AugmentationTransform("hflip"),
    AugmentationTransform("vflip"),
    AugmentationTransform("rot90", 1),
    AugmentationTransform("rot90", 2),
    AugmentationTransform("rot90", 3),
)


def cia_loss_from_maps(
    augmented_deep: torch.Tensor, original_deep: torch.Tensor, aug: AugmentationTransform
) -> torch.Tensor:
    """Squared L2 between f(Aug(x)) and the constant Aug(f(x)), summed per image, batch mean."""
    aug.check()
    target = aug(original_deep.detach())
    if target.shape != augmented_deep.shape:
        raise LossError(f"augmented map {tuple(augmented_deep.shape)} vs target {tuple(target.shape)}")
    sq = (augmented_deep - target) ** 2
    if sq.dim() == 3:
        return sq.sum()
    return sq.flatten(1).sum(dim=1).mean()


def cia_loss(
    extractor: Callable[[torch.Tensor], torch.Tensor],
    images: torch.Tensor,
    aug: AugmentationTransform,
    original_deep: torch.Tensor | None = None,
) -> torch.Tensor:
    """Equivariance loss of ``extractor`` (images -> deep map) under ``aug``.

    ``original_deep`` may pass an already computed f(x); it is detached either way.
    """
    aug.check()
    if original_deep is None:
        with torch.no_grad():
            original_deep = extractor(images)
    return cia_loss_from_maps(extractor(aug(images)), original_deep, aug)


# --------------------------------------------------------------------------- prediction alignment


def localization_center(values: torch.Tensor) -> torch.Tensor:
    """Weighted mean (row, col) of a map with weights relu(values) / sum(relu(values)).

    (…, H, W) -> (…, 2). Maps without any positive value fall back to uniform weights.
    """
    H, W = values.shape[-2:]
    w = F.relu(values)
    total = w.sum(dim=(-2, -1), keepdim=True)
    positive = total > 0
    uniform = torch.full_like(values, 1.0 / (H * W))
    weights = torch.where(positive, w / torch.where(positive, total, torch.ones_like(total)), uniform)
    rows = torch.arange(H, dtype=values.dtype, device=values.device)
    cols = torch.arange(W, dtype=values.dtype, device=values.device)
    r = (weights.sum(dim=-1) * rows).sum(dim=-1)
    c = (weights.sum(dim=-2) * cols).sum(dim=-1)
    return torch.stack([r, c], dim=-1)


def _group_index(groups: Sequence[Sequence[int]], num_concepts: int) -> list[int]:
    owner = [-1] * num_concepts
    for g, members in enumerate(groups):
        for c in members:
            if not 0 <= c < num_concepts:
                raise LossError(f"group {g} lists concept {c} outside [0, {num_concepts})")
            if owner[c] != -1:
                raise LossError(f"concept {c} appears in groups {owner[c]} and {g}")
            owner[c] = g
    return owner


def pa_loss(
    concept_maps: torch.Tensor,
    groups: Sequence[Sequence[int]],
    present: torch.Tensor | Sequence[int] | None = None,
    margin_sq: float | None = None,
    raw: bool = False,
    pair_norm: bool = False,
    parts: bool = False,
):
    """Grouping + division loss on the centers of per-concept localization maps.

    ``concept_maps`` is (C, H, W) for one image, or (B, C, H, W) with the
    result averaged over images. Only concepts with ``present`` == 1 take
    part; T is the number of groups with at least one present concept. The
    division term is hinged at ``margin_sq`` (default (H² + W²) / 4) unless
    ``raw``. Returns L_grp + L_div, or the pair (L_grp, L_div) with ``parts``.
    """
    if concept_maps.dim() == 4:
        B = concept_maps.shape[0]
        pres = None if present is None else torch.as_tensor(present)
        out = [
            pa_loss(concept_maps[b], groups, None if pres is None else pres[b], margin_sq, raw, pair_norm, True)
            for b in range(B)
        ]
        grp = torch.stack([o[0] for o in out]).mean()
        div = torch.stack([o[1] for o in out]).mean()
        return (grp, div) if parts else grp + div

    C, H, W = concept_maps.shape
    owner = _group_index(groups, C)
    for c in range(C):
        if owner[c] == -1:
            raise LossError(f"concept {c} is in no group")
    if present is None:
        present_list = [1] * C
    else:
        present_list = [int(v) for v in torch.as_tensor(present).flatten().tolist()]
    if margin_sq is None:
        margin_sq = (H * H + W * W) / 4.0

    members: list[list[int]] = []
    for g in groups:
        m = [c for c in g if present_list[c]]
        if m:
            members.append(m)
    zero = concept_maps.sum() * 0
    T = len(members)
    if T == 0:
        return (zero, zero) if parts else zero

    used = [c for m in members for c in m]
    centers = localization_center(concept_maps[used])  # (n, 2)
    pos = {c: i for i, c in enumerate(used)}
    d2 = ((centers[:, None, :] - centers[None, :, :]) ** 2).sum(dim=-1)

    grp = zero
    n_pairs = 0
    for m in members:
        if len(m) > 1:
            idx = torch.tensor([pos[c] for c in m])
            block = d2[idx][:, idx]
            grp = grp + block.sum()
            n_pairs += len(m) * (len(m) - 1)
    if pair_norm:
        grp = grp / max(n_pairs, 1)
    else:
        grp = grp / T

    div = zero
    if T > 1:
        gid = torch.tensor([i for i, m in enumerate(members) for _ in m])
        cross = gid[:, None] != gid[None, :]
        vals = d2 if raw else torch.clamp(d2, max=margin_sq)
        div = -(vals * cross).sum() / (T * T)
    return (grp, div) if parts else grp + div


# --------------------------------------------------------------------------- total


def total_loss(components: Mapping[str, torch.Tensor | float], weights: LossWeights = LossWeights()):
    """Weighted sum of the named components (concept, task, cla, cia, pa); missing ones count as 0."""
    known = ("concept", "task", "cla", "cia", "pa")
    unknown = set(components) - set(known)
    if unknown:
        raise LossError(f"unknown loss components {sorted(unknown)}")
    total = 0.0
    for name in known:
        if name not in components:
            continue
        value = components[name]
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(v):
            raise LossError(f"non-finite loss component {name!r}: {v}")
        total = total + getattr(weights, name) * value
    return total
