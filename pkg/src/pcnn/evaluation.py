"""Accuracy, confusion matrices, robustness tables and ablation runs."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from statistics import median
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .data import NUM_CLASSES, AugSpec, Dataset, augment_dataset, make_batches, write_pgm
from .errors import EmptyDataset
from .model import BackboneConfig, PcnnModel, Variant, pcnn_forward, predict_classes
from .regions import RegionSpec
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

DEFAULT_ALPHA_BETA_GRID = ((4.0, 16.0), (8.0, 12.0), (10.0, 10.0), (12.0, 8.0), (16.0, 4.0))


class ConfusionMatrix:
    """Counts with rows = true class, columns = predicted class."""

    def __init__(self, counts: np.ndarray):
        self.counts = np.asarray(counts, dtype=np.int64)

    @classmethod
    def from_predictions(cls, labels, predictions, classes: int = NUM_CLASSES) -> "ConfusionMatrix":
        counts = np.zeros((classes, classes), dtype=np.int64)
        np.add.at(counts, (np.asarray(labels), np.asarray(predictions)), 1)
        return cls(counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total if self.total else 0.0

    def per_class_accuracy(self) -> np.ndarray:
        rows = self.counts.sum(axis=1)
        return np.divide(np.diag(self.counts), rows, out=np.zeros(len(rows)), where=rows > 0)

    def to_csv(self) -> str:
        k = self.counts.shape[0]
        lines = ["true\\pred," + ",".join(str(j) for j in range(k)) + "\n"]
        lines += [f"{i}," + ",".join(str(int(v)) for v in row) + "\n" for i, row in enumerate(self.counts)]
        return "".join(lines)

    def write_pgm(self, path, cell: int = 8) -> None:
        """Heatmap of row-normalized counts, dark = high."""
        rows = self.counts.sum(axis=1, keepdims=True)
        frac = np.divide(self.counts, rows, out=np.zeros(self.counts.shape), where=rows > 0)
        img = np.rint(255 * (1.0 - frac)).astype(np.int64)
        write_pgm(path, np.kron(img, np.ones((cell, cell), dtype=np.int64)))


def predict(model: PcnnModel, dataset: Dataset, batch_size: int = 64) -> Tuple[np.ndarray, float]:
    """Eval-mode class predictions and the mean combined loss."""
    if len(dataset) == 0:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    was_training = model.training
    model.eval()
    preds, loss_sum = [], 0.0
    try:
        with no_grad():
            for batch in make_batches(dataset, batch_size):
                out = pcnn_forward(model, Tensor(batch.images.astype(model.dtype)), batch.labels, training=False)
                preds.append(predict_classes(out.global_logits.data))
                loss_sum += out.loss.item() * len(batch.labels)
    finally:
        model.training = was_training
    return np.concatenate(preds), loss_sum / len(dataset)


def evaluate(model: PcnnModel, dataset: Dataset, batch_size: int = 64) -> Tuple[float, ConfusionMatrix]:
    preds, _ = predict(model, dataset, batch_size)
    cm = ConfusionMatrix.from_predictions(dataset.labels, preds, model.classes)
    return cm.accuracy(), cm


@dataclass
class RobustnessRow:
    spec: str
    accuracy: float


def robustness_report(model: PcnnModel, base: Dataset, specs: Sequence[AugSpec]) -> List[RobustnessRow]:
    rows = []
    for spec in specs:
        acc, _ = evaluate(model, augment_dataset(base, spec))
        rows.append(RobustnessRow(spec.describe(), acc))
    return rows


def format_robustness(rows: Sequence[RobustnessRow]) -> str:
    width = max([len("spec")] + [len(r.spec) for r in rows])
    lines = [f"{'spec':<{width}}  accuracy", f"{'-' * width}  --------"]
    lines += [f"{r.spec:<{width}}  {r.accuracy:8.4f}" for r in rows]
    return "\n".join(lines) + "\n"


@dataclass
class AblationRow:
    variant: str
    dataset: str
    seed: int
    accuracy: float
    mean_loss: float


@dataclass
class AblationReport:
    rows: List[AblationRow] = field(default_factory=list)

    def median_accuracy(self, variant: str, dataset: str) -> float:
        return median(r.accuracy for r in self.rows if r.variant == variant and r.dataset == dataset)

    def summary(self) -> List[Tuple[str, str, float, float]]:
        """One (variant, dataset, median accuracy, median loss) entry per requested pair, in run order."""
        keys = list(dict.fromkeys((r.variant, r.dataset) for r in self.rows))
        out = []
        for v, d in keys:
            sel = [r for r in self.rows if r.variant == v and r.dataset == d]
            out.append((v, d, median(r.accuracy for r in sel), median(r.mean_loss for r in sel)))
        return out

    def to_csv(self) -> str:
        lines = ["variant,dataset,seed,accuracy,mean_loss\n"]
        lines += [f"{r.variant},{r.dataset},{r.seed},{r.accuracy!r},{r.mean_loss!r}\n" for r in self.rows]
        lines += [f"{v},{d},median,{a!r},{l!r}\n" for v, d, a, l in self.summary()]
        return "".join(lines)

    def to_table(self) -> str:
        summ = self.summary()
        vw = max([len("variant")] + [len(v) for v, *_ in summ])
        dw = max([len("dataset")] + [len(d) for _, d, *_ in summ])
        lines = [f"{'variant':<{vw}}  {'dataset':<{dw}}  accuracy  mean_loss"]
        lines += [f"{v:<{vw}}  {d:<{dw}}  {a:8.4f}  {l:9.4f}" for v, d, a, l in summ]
        return "\n".join(lines) + "\n"


def alpha_beta_variants(grid: Sequence[Tuple[float, float]] = DEFAULT_ALPHA_BETA_GRID) -> List[Variant]:
    return [Variant("custom_alpha_beta", a, b) for a, b in grid]


def ablation_suite(config, variants: Sequence[Variant], datasets: Mapping[str, Tuple[Dataset, Dataset]],
                   seeds: Sequence[int], backbone: BackboneConfig = BackboneConfig(),
                   regions: RegionSpec = RegionSpec(), alpha_beta_grid: Optional[Sequence[Tuple[float, float]]] = None,
                   ) -> AblationReport:
    """Train every variant once per seed on each (train, test) pair and record test accuracy.

    Seed ``s`` fixes both the initialization and the batch order; every
    variant sees the same data.
    """
    from .training import build_for_config, train

    if not seeds:
        raise ValueError("need at least one seed")
    variants = list(variants)
    if alpha_beta_grid:
        variants += alpha_beta_variants(alpha_beta_grid)
    report = AblationReport()
    for name, (train_set, test_set) in datasets.items():
        for variant in variants:
            for s in seeds:
                cfg = replace(config, seed=int(s))
                model = build_for_config(cfg, variant, backbone, regions, input_size=train_set.image_size)
                train(model, train_set, None, cfg)
                preds, loss = predict(model, test_set)
                acc = float((preds == test_set.labels).mean())
                report.rows.append(AblationRow(str(variant), name, int(s), acc, loss))
                logger.info("ablation %s %s seed %d: acc %.4f loss %.4f", variant, name, s, acc, loss)
    return report
