from .cub import IngestionError, load_cub_annotations
from .io import dataset_digest, load_dataset, save_dataset
from .patch_drop import apply_patch_drop, random_like, region_mask
from .schema import (
    Concept,
    ConceptSchema,
    DataError,
    Dataset,
    Disk,
    ImageSample,
    PartAnnotation,
    Rect,
    concept_part_groups,
)
from .synthetic import GenerationError, GeneratorSpec, generate_synthetic_dataset, synthetic_schema

__all__ = [
    "Concept",
    "ConceptSchema",
    "DataError",
    "Dataset",
    "Disk",
    "GenerationError",
    "GeneratorSpec",
    "ImageSample",
    "IngestionError",
    "PartAnnotation",
    "Rect",
    "apply_patch_drop",
    "concept_part_groups",
    "dataset_digest",
    "generate_synthetic_dataset",
    "load_cub_annotations",
    "load_dataset",
    "random_like",
    "region_mask",
    "save_dataset",
    "synthetic_schema",
]
