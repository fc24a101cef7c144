"""Accuracy metrics, run reports and feature-embedding export."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

Batches = Iterable[Tuple[torch.Tensor, torch.Tensor]]


@dataclass
class EvalSet:
    """Validation images with targets expressed as classifier output columns."""

    images: torch.Tensor
    targets: torch.Tensor

    def batches(self, batch_size: int = 512) -> Batches:
        for i in range(0, len(self.targets), batch_size):
            yield self.images[i:i + batch_size], self.targets[i:i + batch_size]

    def __len__(self):
        return int(self.targets.shape[0])


def as_eval_set(task_data, column_of: Dict[int, int]) -> EvalSet:
    """Map a :class:`~skd_cil.data.TaskData` onto output columns."""
    targets = torch.tensor([column_of[int(c)] for c in task_data.class_ids], dtype=torch.long)
    return EvalSet(task_data.images, targets)


def _iter_batches(data) -> Batches:
    if isinstance(data, EvalSet):
        return data.batches()
    if isinstance(data, tuple) and len(data) == 2 and isinstance(data[0], torch.Tensor):
        return [data]
    return data


@torch.no_grad()
def predict_logits(model: nn.Module, data) -> Tuple[torch.Tensor, torch.Tensor]:
    was_training = model.training
    model.eval()
    logits, targets = [], []
    for x, y in _iter_batches(data):
        logits.append(model(x))
        targets.append(y)
    model.train(was_training)
    if not logits:
        raise ValueError("empty evaluation stream")
    return torch.cat(logits), torch.cat(targets)


def top1_from_logits(logits: torch.Tensor, targets: torch.Tensor) -> float:
    if logits.shape[0] == 0:
        raise ValueError("empty evaluation stream")
    if int(targets.max()) >= logits.shape[1]:
        raise ValueError("targets exceed the model's output width")
    return 100.0 * (logits.argmax(dim=1) == targets).double().mean().item()


def top1_accuracy(model: nn.Module, data) -> float:
    """Percentage of argmax-correct predictions."""
    return top1_from_logits(*predict_logits(model, data))


def accuracy_gap(teacher: nn.Module, student_with_teacher_head: nn.Module, data) -> float:
    return top1_accuracy(teacher, data) - top1_accuracy(student_with_teacher_head, data)


def class_coverage(labels: torch.Tensor, num_classes: int) -> float:
    """Fraction of classes that receive at least one label."""
    if labels.dim() == 2:
        labels = labels.argmax(dim=1)
    return len(torch.unique(labels)) / float(num_classes)


# ---------------------------------------------------------------------------
# Embeddings
# ---------------------------------------------------------------------------


@torch.no_grad()
def extract_features(model, images: torch.Tensor, batch_size: int = 512) -> torch.Tensor:
    was_training = model.training
    model.eval()
    out = torch.cat([model.extract(images[i:i + batch_size]) for i in range(0, len(images), batch_size)])
    model.train(was_training)
    return out


def export_embeddings(model, sources: Sequence[Tuple[str, torch.Tensor, torch.Tensor]], count: int,
                      path=None) -> List[list]:
    """Features from ``model``'s extractor tagged with label and source.

    ``sources`` holds (tag, images, labels) triples, e.g. ("real", x, y) and
    ("pseudo", x', y'). Up to ``count`` rows are taken from each source. When
    ``path`` is given the table is written as CSV with a header row.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rows: List[list] = []
    dim = None
    for tag, images, labels in sources:
        images, labels = images[:count], labels[:count]
        if labels.dim() == 2:
            labels = labels.argmax(dim=1)
        feats = extract_features(model, images)
        dim = feats.shape[1]
        for f, y in zip(feats.tolist(), labels.tolist()):
            rows.append(f + [int(y), tag])
    if path is not None and dim is not None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"feature_{i}" for i in range(dim)] + ["label", "source"])
            w.writerows(rows)
    return rows


def read_embeddings(path) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    with Path(path).open() as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    d = len(header) - 2
    feats = np.array([[float(v) for v in r[:d]] for r in rows])
    labels = np.array([int(r[d]) for r in rows])
    tags = np.array([r[d + 1] for r in rows])
    return feats, labels, tags


def class_centroids(features: torch.Tensor, labels: torch.Tensor) -> Dict[int, torch.Tensor]:
    """Mean of L2-normalized features per class."""
    normed = F.normalize(torch.as_tensor(features, dtype=torch.float64), dim=1)
    labels = torch.as_tensor(labels)
    return {int(c): normed[labels == c].mean(dim=0) for c in torch.unique(labels)}


def centroid_alignment(real_feats, real_labels, pseudo_feats, pseudo_labels) -> Dict[int, bool]:
    """Per real class: is its centroid closer (cosine) to the matching pseudo centroid than to any other?

    Classes with no pseudo samples count as misaligned.
    """
    real = class_centroids(real_feats, real_labels)
    pseudo = class_centroids(pseudo_feats, pseudo_labels)
    out = {}
    for c, rc in real.items():
        if c not in pseudo:
            out[c] = False
            continue
        sims = {k: F.cosine_similarity(rc, pc, dim=0).item() for k, pc in pseudo.items()}
        matched = sims.pop(c)
        out[c] = all(matched > s for s in sims.values())
    return out


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class RunReport:
    per_task_top1: List[float] = field(default_factory=list)
    teacher_student_gap: List[Optional[float]] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    config_hash: str = ""
    seed: int = 0
    name: str = ""
    complete: bool = True
    error: Optional[str] = None
    trace_files: List[str] = field(default_factory=list)
    extras: dict = field(default_factory=dict)
    timing: Dict[str, float] = field(default_factory=dict)

    @property
    def average_top1(self) -> float:
        return float(np.mean(self.per_task_top1)) if self.per_task_top1 else math.nan

    def validate(self) -> None:
        for v in self.per_task_top1:
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"accuracy {v} outside [0, 100]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["average_top1"] = self.average_top1
        return d

    def comparable(self) -> dict:
        """Everything except wall-clock timing."""
        d = self.to_dict()
        d.pop("timing")
        return d

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "RunReport":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValueError(f"malformed report {path}: {exc}") from exc
        if not isinstance(d, dict) or "per_task_top1" not in d:
            raise ValueError(f"malformed report {path}: no per_task_top1")
        stored_avg = d.pop("average_top1", None)
        known = {f for f in cls.__dataclass_fields__}
        report = cls(**{k: v for k, v in d.items() if k in known})
        if stored_avg is not None and report.per_task_top1 and abs(stored_avg - report.average_top1) > 1e-9:
            raise ValueError(f"report {path}: stored average does not match its accuracies")
        return report
