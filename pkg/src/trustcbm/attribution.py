"""Grad-CAM / Grad-CAM++ concept maps and localizers for the trust metric.

CAMs target the pre-sigmoid concept logit S_c and are taken on the deep
feature map A (the backbone output), so they live on the H_z x W_z grid.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import FeatureMaps, to_tensor
from .models import PrototypeCBM, VanillaCBM

METHODS = ("grad-cam", "grad-cam++")


class AttributionError(RuntimeError):
    pass


def grad_cam_from_grads(acts: torch.Tensor, grads: torch.Tensor) -> torch.Tensor:
    """relu(sum_k alpha_k A_k) with alpha_k the spatial mean of dS/dA_k. (…, K, H, W) -> (…, H, W)."""
    alpha = grads.mean(dim=(-2, -1), keepdim=True)
    return F.relu((alpha * acts).sum(dim=-3))


def grad_cam_pp_from_grads(acts: torch.Tensor, grads: torch.Tensor) -> torch.Tensor:
    """Grad-CAM++ with the exponential-score closed form.

    For Y = exp(S) the n-th derivatives are exp(S)·g^n (g = dS/dA), so
    alpha = g² / (2g² + sum_ab A_ab · g³); the exp(S) factors cancel there.
    The channel weight sum_uv alpha · relu(exp(S)·g) keeps a positive global
    exp(S) factor, which is dropped: it rescales the map without moving it.
    """
    g2 = grads**2
    g3 = grads**3
    sum_a = acts.sum(dim=(-2, -1), keepdim=True)
    denom = 2 * g2 + sum_a * g3
    nonzero = denom != 0
    alpha = torch.where(nonzero, g2 / torch.where(nonzero, denom, torch.ones_like(denom)), torch.zeros_like(denom))
    weights = (alpha * F.relu(grads)).sum(dim=(-2, -1), keepdim=True)
    return F.relu((weights * acts).sum(dim=-3))


def _logit_grads(model, images: torch.Tensor, concepts: list[int]) -> tuple[torch.Tensor, torch.Tensor]:
    """Deep map A (B, K, H, W) and dS_c/dA for each requested concept (B, len(concepts), K, H, W)."""
    with torch.no_grad():
        feats = model.backbone(images)
    acts = feats.deep.detach().requires_grad_(True)
    with torch.enable_grad():
        out = model.heads(FeatureMaps(feats.shallow, acts))
        grads = []
        for i, c in enumerate(concepts):
            (g,) = torch.autograd.grad(
                out.concept_logits[:, c].sum(), acts, retain_graph=i < len(concepts) - 1, allow_unused=True
            )
            grads.append(torch.zeros_like(acts) if g is None else g)
    grads_t = torch.stack(grads, dim=1)
    if not torch.isfinite(grads_t).all():
        raise AttributionError("non-finite gradients of the concept logit")
    return acts.detach(), grads_t


def concept_cams(model: VanillaCBM, images: torch.Tensor, concepts=None, method: str = "grad-cam++") -> torch.Tensor:
    """CAMs of the listed concepts (default: all): (B, 3, H, W) -> (B, n, H_z, W_z)."""
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    C = model.concept_head.out_features
    concepts = list(range(C)) if concepts is None else [int(c) for c in concepts]
    for c in concepts:
        if not 0 <= c < C:
            raise ValueError(f"concept id {c} outside [0, {C})")
    acts, grads = _logit_grads(model, images, concepts)
    fn = grad_cam_from_grads if method == "grad-cam" else grad_cam_pp_from_grads
    return fn(acts.unsqueeze(1), grads)


def grad_cam(model: VanillaCBM, images: torch.Tensor, concept: int) -> torch.Tensor:
    return concept_cams(model, images, [concept], "grad-cam")[:, 0]


def grad_cam_pp(model: VanillaCBM, images: torch.Tensor, concept: int) -> torch.Tensor:
    return concept_cams(model, images, [concept], "grad-cam++")[:, 0]


Localizer = Callable[[np.ndarray], np.ndarray]


def model_localizer(model, method: str | None = None, batch_size: int = 32) -> Localizer:
    """Map (B, H, W, 3) float images to (B, C, H_l, W_l) concept localization maps.

    Prototype models use their top-N prototype maps; the vanilla CBM uses
    ``method`` (Grad-CAM++ by default).
    """
    if isinstance(model, PrototypeCBM):
        if method not in (None, "prototype"):
            raise ValueError("prototype models localize with their own prototype maps")

        def localize(images: np.ndarray) -> np.ndarray:
            outs = []
            model.eval()
            with torch.no_grad():
                for i in range(0, len(images), batch_size):
                    x = to_tensor(images[i : i + batch_size], dtype=next(model.parameters()).dtype)
                    out = model(x)
                    outs.append(model.concept_maps(out.maps).double().numpy())
            return np.concatenate(outs)

        return localize
    if isinstance(model, VanillaCBM):
        method = method or "grad-cam++"

        def localize(images: np.ndarray) -> np.ndarray:
            outs = []
            model.eval()
            for i in range(0, len(images), batch_size):
                x = to_tensor(images[i : i + batch_size], dtype=next(model.parameters()).dtype)
                outs.append(concept_cams(model, x, None, method).double().numpy())
            return np.concatenate(outs)

        return localize
    raise TypeError(f"no concept localizer for {type(model).__name__}")


def save_heatmap(image: np.ndarray, cam: np.ndarray, path, alpha: float = 0.5) -> None:
    """Overlay an upsampled, color-mapped map on ``image`` (H, W, 3 in [0, 1]) and write a PNG."""
    from matplotlib import colormaps
    from PIL import Image

    from .metric import upsample_map

    H, W = image.shape[:2]
    up = upsample_map(np.asarray(cam, dtype=np.float64), H, W)
    lo, hi = up.min(), up.max()
    norm = (up - lo) / (hi - lo) if hi > lo else np.zeros_like(up)
    heat = colormaps["jet"](norm)[..., :3]
    blended = (1 - alpha) * image + alpha * heat
    Image.fromarray(np.clip(np.rint(blended * 255), 0, 255).astype(np.uint8)).save(path)
