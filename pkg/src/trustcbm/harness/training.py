"""Training, evaluation and checkpoints."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..attribution import model_localizer
from ..backbone import Backbone, to_tensor
from ..data import Dataset, load_cub_annotations, load_dataset
from ..data.synthetic import GeneratorSpec, generate_synthetic_dataset
from ..losses import (
    CIA_TRANSFORMS,
    LossError,
    cia_loss_from_maps,
    cla_loss,
    concept_loss,
    pa_loss,
    task_loss,
    total_loss,
)
from ..metric import BoxSpec, TrustReport, trust_score
from ..models import LinearProbe, PrototypeCBM, VanillaCBM
from .config import TrainConfig

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    def __init__(self, message: str, checkpoint: str | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint


class SchemaMismatchError(ValueError):
    pass


def load_data(spec: dict) -> Dataset:
    source = spec.get("source", "synthetic")
    if source == "synthetic":
        return generate_synthetic_dataset(GeneratorSpec.from_dict({**_default_generator(), **spec.get("generator", {})}))
    if source == "dir":
        return load_dataset(spec["path"])
    if source == "cub":
        return load_cub_annotations(
            spec["path"], crop_to_bbox=spec.get("crop_to_bbox", True), image_size=spec.get("image_size", 224)
        )
    raise ValueError(f"unknown dataset source {source!r}")


def _default_generator() -> dict:
    d = GeneratorSpec().to_dict()
    d.pop("anchors")
    return d


def build_model(config: TrainConfig, num_concepts: int, num_classes: int):
    backbone = Backbone(config.backbone_config())
    if config.model == "vanilla":
        return VanillaCBM(backbone, num_concepts, num_classes, seed=config.seed)
    if config.model == "proto":
        return PrototypeCBM(
            backbone,
            num_concepts,
            num_classes,
            num_prototypes=config.num_prototypes,
            top_n=config.top_n,
            similarity=config.similarity,
            seed=config.seed,
        )
    return LinearProbe(backbone, num_concepts, num_classes, seed=config.seed)


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(path: str | Path, model, config: TrainConfig, dataset: Dataset) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "config": config.to_dict(),
            "schema": dataset.schema.to_dict(),
            "schema_hash": dataset.schema.digest(),
            "num_classes": dataset.num_categories,
            "state_dict": model.state_dict(),
        },
        path,
    )
    return str(path)


def load_checkpoint(path: str | Path, dataset: Dataset | None = None):
    """Rebuild a model from ``path``; refuses a ``dataset`` whose schema differs from the trained one."""
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {blob.get('version')!r}")
    if dataset is not None and dataset.schema.digest() != blob["schema_hash"]:
        raise SchemaMismatchError(f"{path}: checkpoint was trained on a different concept schema")
    config = TrainConfig.from_dict(blob["config"])
    model = build_model(config, len(blob["schema"]["concepts"]), blob["num_classes"])
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, config


# --------------------------------------------------------------------------- evaluation


def predict(model, images: np.ndarray, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Concept probabilities (N, C) and class logits (N, K) for float images (N, H, W, 3)."""
    model.eval()
    dtype = next(model.parameters()).dtype
    probs, logits = [], []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            out = model(to_tensor(images[i : i + batch_size], dtype=dtype))
            probs.append(out.concept_probs.double().numpy())
            logits.append(out.class_logits.double().numpy())
    return np.concatenate(probs), np.concatenate(logits)


def accuracies(concept_probs: np.ndarray, class_logits: np.ndarray, dataset: Dataset) -> tuple[float, float]:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    labels = dataset.concept_matrix()
    concept_acc = float(np.mean((concept_probs > 0.5) == (labels == 1)))
    class_acc = float(np.mean(np.argmax(class_logits, axis=1) == dataset.categories()))
    return concept_acc, class_acc


def evaluate(model, dataset: Dataset, batch_size: int = 64) -> tuple[float, float]:
    """(concept accuracy, class accuracy) of ``model`` on ``dataset``."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    probs, logits = predict(model, dataset.images(), batch_size)
    return accuracies(probs, logits, dataset)


def model_trust(model, dataset: Dataset, box: BoxSpec, config: TrainConfig | None = None) -> TrustReport | None:
    if isinstance(model, LinearProbe):
        return None
    if isinstance(model, PrototypeCBM):
        return trust_score(model_localizer(model), dataset, box, source="prototype")
    method = config.localization if config else "grad-cam++"
    return trust_score(model_localizer(model, method), dataset, box, source=method)


# --------------------------------------------------------------------------- training


@dataclass
class RunRecord:
    config: dict
    history: list[dict] = field(default_factory=list)
    concept_accuracy: float | None = None
    class_accuracy: float | None = None
    train_concept_accuracy: float | None = None
    train_class_accuracy: float | None = None
    trust: dict | None = None
    wall_clock: float = 0.0
    checkpoint: str | None = None
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "history": self.history,
            "concept_accuracy": self.concept_accuracy,
            "class_accuracy": self.class_accuracy,
            "train_concept_accuracy": self.train_concept_accuracy,
            "train_class_accuracy": self.train_class_accuracy,
            "trust": self.trust,
            "wall_clock": self.wall_clock,
            "checkpoint": self.checkpoint,
            "error": self.error,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> RunRecord:
        return cls(**json.loads(Path(path).read_text()))

    @property
    def trust_score(self) -> float | None:
        return None if self.trust is None else self.trust["score"]


def _step_losses(model, config: TrainConfig, x, c, y, groups, warm: bool, rng: np.random.Generator) -> dict:
    w = config.weights
    backbone = model.backbone
    if warm:
        with torch.no_grad():
            feats = backbone(x)
    else:
        feats = backbone(x)
    out = model.heads(feats)
    comps = {"task": task_loss(out.class_logits, y)}
    if not isinstance(model, LinearProbe):
        comps["concept"] = concept_loss(out.concept_probs, c)
    if "pa" in config.modules and w.pa > 0:
        cmaps = model.concept_maps(out.maps)
        comps["pa"] = pa_loss(
            cmaps, groups, present=c, margin_sq=w.div_margin_sq, raw=w.div_raw, pair_norm=w.grp_pair_norm
        )
    if not warm and "cla" in config.modules and w.cla > 0:
        comps["cla"] = cla_loss(feats.deep, feats.shallow, config.levels, mean=w.cla_mean)
    if not warm and "cia" in config.modules and w.cia > 0:
        aug = CIA_TRANSFORMS[int(rng.integers(len(CIA_TRANSFORMS)))]
        comps["cia"] = cia_loss_from_maps(backbone(aug(x)).deep, feats.deep, aug)
    return comps


def train(
    config: TrainConfig,
    dataset: Dataset | None = None,
    out_dir: str | Path | None = None,
    box: BoxSpec = BoxSpec(),
    evaluate_trust: bool = True,
) -> tuple[object, RunRecord]:
    """Train one model; returns (model, RunRecord).

    The first ``warmup_epochs`` epochs keep the backbone frozen and train the
    prototypes and predictors only; afterwards all parameters follow the
    weighted total loss. Runs are deterministic given ``config.seed``.
    """
    t0 = time.perf_counter()
    torch.manual_seed(config.seed)
    if dataset is None:
        dataset = load_data(config.dataset)
    train_set = dataset.split("train")
    eval_set = dataset.split("test")
    if len(train_set) == 0 and config.epochs > 0:
        raise TrainingError("no training samples")
    model = build_model(config, dataset.schema.num_concepts, dataset.num_categories)
    groups = dataset.schema.groups
    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt_path = str(out_dir / "model.pt") if out_dir else None
    last_good = copy.deepcopy(model.state_dict())

    head_params = model.head_parameters()
    head_ids = {id(p) for p in head_params}
    body_params = [p for p in model.parameters() if id(p) not in head_ids]
    opt = torch.optim.Adam(
        [
            {"params": body_params, "lr": config.lr},
            {"params": head_params, "lr": config.head_lr or config.lr},
        ],
        betas=tuple(config.betas),
        eps=config.eps,
    )

    rng = np.random.default_rng([config.seed, 17])
    images = torch.as_tensor(train_set.images()).permute(0, 3, 1, 2).contiguous() if len(train_set) else None
    concepts = torch.as_tensor(train_set.concept_matrix(), dtype=torch.float32)
    cats = torch.as_tensor(train_set.categories())
    history = []
    for epoch in range(config.epochs):
        warm = epoch < config.warmup_epochs
        for p in body_params:
            p.requires_grad_(not warm)
        model.train()
        order = rng.permutation(len(train_set))
        sums: dict[str, float] = {}
        steps = 0
        for i in range(0, len(order), config.batch_size):
            idx = torch.as_tensor(order[i : i + config.batch_size])
            comps = _step_losses(model, config, images[idx], concepts[idx], cats[idx], groups, warm, rng)
            try:
                loss = total_loss(comps, config.weights)
            except LossError as exc:
                path = None
                if out_dir is not None:
                    model.load_state_dict(last_good)
                    path = save_checkpoint(out_dir / "last_good.pt", model, config, dataset)
                raise TrainingError(f"epoch {epoch} step {steps}: {exc}", path) from exc
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            steps += 1
            for k, v in comps.items():
                sums[k] = sums.get(k, 0.0) + float(v.detach())
            sums["total"] = sums.get("total", 0.0) + float(loss.detach())
        rec = {"epoch": epoch + 1, "warmup": warm, **{k: v / max(steps, 1) for k, v in sorted(sums.items())}}
        history.append(rec)
        log.info("%s epoch %d %s", config.label, epoch + 1, {k: round(v, 4) for k, v in rec.items() if k not in ("epoch", "warmup")})
        last_good = copy.deepcopy(model.state_dict())
    for p in model.parameters():
        p.requires_grad_(True)
    model.eval()

    record = RunRecord(config=config.to_dict(), history=history)
    if ckpt_path:
        record.checkpoint = save_checkpoint(ckpt_path, model, config, dataset)
    if len(eval_set):
        record.concept_accuracy, record.class_accuracy = evaluate(model, eval_set)
        if evaluate_trust:
            report = model_trust(model, eval_set, box, config)
            record.trust = None if report is None else report.to_dict()
    if len(train_set):
        record.train_concept_accuracy, record.train_class_accuracy = evaluate(model, train_set)
    record.wall_clock = time.perf_counter() - t0
    if out_dir is not None:
        record.save(out_dir / "run_record.json")
    return model, record


def finite_history(record: RunRecord) -> bool:
    return all(math.isfinite(v) for h in record.history for k, v in h.items() if isinstance(v, float))
