"""Train and score a suite of model variants on one shared dataset."""

from __future__ import annotations

import csv
import json
import logging
import traceback
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from ..data import Dataset, dataset_digest
from ..metric import BoxSpec
from .config import ConfigError, TrainConfig
from .training import RunRecord, load_data, train

log = logging.getLogger(__name__)

DEFAULT_SUITE = ("baseline", "vanilla", "proto", "proto+cla+cia+pa")
TABLE_FIELDS = ("label", "kind", "trust", "concept_accuracy", "class_accuracy", "wall_clock", "error")


@dataclass(frozen=True)
class BenchmarkSpec:
    """A shared base config, per-run overrides, and the metric box.

    File layout (JSON)::

        {"seed": 0,
         "box_fraction": 0.4017857142857143,
         "base": {<TrainConfig fields shared by every run>},
         "runs": [{"model": "vanilla"}, {"model": "proto+cla+cia+pa", "weights": {...}}]}
    """

    base: dict = field(default_factory=dict)
    runs: tuple[dict, ...] = tuple({"model": k} for k in DEFAULT_SUITE)
    seed: int = 0
    box_fraction: float = BoxSpec().fraction

    def configs(self, seed: int | None = None) -> list[TrainConfig]:
        seed = self.seed if seed is None else seed
        out = []
        for run in self.runs:
            d = {**self.base, **run, "seed": seed}
            if "weights" in self.base and "weights" in run:
                d["weights"] = {**self.base["weights"], **run["weights"]}
            out.append(TrainConfig.from_dict(d))
        return out

    def dataset_spec(self) -> dict:
        return self.base.get("dataset", TrainConfig().dataset)

    @property
    def box(self) -> BoxSpec:
        return BoxSpec(fraction=self.box_fraction)

    def to_dict(self) -> dict:
        return {"base": self.base, "runs": list(self.runs), "seed": self.seed, "box_fraction": self.box_fraction}

    @classmethod
    def from_dict(cls, d: dict) -> BenchmarkSpec:
        unknown = set(d) - {"base", "runs", "seed", "box_fraction"}
        if unknown:
            raise ConfigError(f"unknown benchmark keys {sorted(unknown)}")
        return cls(
            base=dict(d.get("base", {})),
            runs=tuple(d.get("runs", cls.runs)),
            seed=int(d.get("seed", 0)),
            box_fraction=float(d.get("box_fraction", BoxSpec().fraction)),
        )

    @classmethod
    def load(cls, path: str | Path) -> BenchmarkSpec:
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc


def default_benchmark() -> BenchmarkSpec:
    """The shipped desk-scale benchmark on the default synthetic dataset."""
    text = resources.files("trustcbm.harness").joinpath("configs/benchmark.json").read_text()
    return BenchmarkSpec.from_dict(json.loads(text))


@dataclass
class BenchmarkReport:
    runs: list[RunRecord]
    dataset_digest: str
    box: dict
    seed: int

    @property
    def failed(self) -> list[RunRecord]:
        return [r for r in self.runs if r.error is not None]

    def by_kind(self, kind: str) -> RunRecord:
        for r in self.runs:
            if r.config.get("kind") == kind:
                return r
        raise KeyError(kind)

    def table(self) -> list[dict]:
        rows = []
        for r in self.runs:
            rows.append({
                "label": r.config.get("name") or r.config.get("kind"),
                "kind": r.config.get("kind"),
                "trust": r.trust_score,
                "concept_accuracy": r.concept_accuracy,
                "class_accuracy": r.class_accuracy,
                "wall_clock": round(r.wall_clock, 3),
                "error": r.error.splitlines()[0] if r.error else None,
            })
        return rows

    def results(self) -> dict:
        """Everything reported except wall-clock timings (which vary between runs)."""
        d = self.to_dict()
        for r in d["runs"]:
            r.pop("wall_clock")
            r.pop("checkpoint")
        return d

    def to_dict(self) -> dict:
        return {
            "runs": [r.to_dict() for r in self.runs],
            "dataset_digest": self.dataset_digest,
            "box": self.box,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> BenchmarkReport:
        return cls([RunRecord(**r) for r in d["runs"]], d["dataset_digest"], d["box"], d["seed"])

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "benchmark.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        with open(out / "table.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=TABLE_FIELDS)
            w.writeheader()
            w.writerows(self.table())

    @classmethod
    def load(cls, out_dir: str | Path) -> BenchmarkReport:
        return cls.from_dict(json.loads((Path(out_dir) / "benchmark.json").read_text()))

    def markdown(self) -> str:
        def fmt(v, pct=True):
            if v is None:
                return "n/a"
            return f"{100 * v:.1f}" if pct else f"{v:.1f}"

        lines = ["| model | trust | concept acc | class acc | time (s) |", "|---|---|---|---|---|"]
        for row in self.table():
            if row["error"]:
                lines.append(f"| {row['label']} | failed: {row['error']} | | | |")
                continue
            lines.append(
                f"| {row['label']} | {fmt(row['trust'])} | {fmt(row['concept_accuracy'])} | "
                f"{fmt(row['class_accuracy'])} | {fmt(row['wall_clock'], pct=False)} |"
            )
        return "\n".join(lines) + "\n"


def run_benchmark(
    configs: list[TrainConfig],
    dataset: Dataset | None = None,
    box: BoxSpec = BoxSpec(),
    out_dir: str | Path | None = None,
) -> BenchmarkReport:
    """Train every config on the shared ``dataset``; a failed run is recorded and the rest continue."""
    if not configs:
        raise ConfigError("empty benchmark suite")
    if dataset is None:
        dataset = load_data(configs[0].dataset)
    out = Path(out_dir) if out_dir is not None else None
    records = []
    for i, cfg in enumerate(configs):
        run_dir = out / f"{i:02d}_{cfg.label}" if out is not None else None
        if run_dir is not None:
            run_dir.mkdir(parents=True, exist_ok=True)
        log.info("benchmark run %d/%d: %s", i + 1, len(configs), cfg.label)
        try:
            _, rec = train(cfg, dataset, run_dir, box)
        except Exception as exc:  # a failed variant must not stop the suite
            log.error("run %s failed: %s", cfg.label, exc)
            rec = RunRecord(config=cfg.to_dict(), error=f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}")
        records.append(rec)
    seeds = {c.seed for c in configs}
    report = BenchmarkReport(records, dataset_digest(dataset), {**box.to_dict()}, seeds.pop() if len(seeds) == 1 else -1)
    if out is not None:
        report.save(out)
    return report
