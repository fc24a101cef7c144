"""Dataset ingestion, seeded class ordering and task partitioning.

Two sources are supported: the bundled 8x8 handwritten-digits set (upsampled)
for desk-scale runs, and an image-folder layout ``root/{train,val}/<class>/*``
for anything larger. Every read goes through :class:`DataSource`, which keeps
an access log so tests can audit which classes were touched and when.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

logger = logging.getLogger(__name__)

INDEX_FILE = ".skd_index.json"


class DatasetError(RuntimeError):
    """Missing or unreadable dataset files."""


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    input_shape: Tuple[int, int, int]
    class_count: int
    mean: Optional[Tuple[float, ...]] = None
    std: Optional[Tuple[float, ...]] = None
    root: Optional[str] = None
    source: str = "folder"

    def __post_init__(self):
        if len(self.input_shape) != 3:
            raise ValueError("input_shape must be (C, H, W)")
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if self.mean is not None and len(self.mean) != self.input_shape[0]:
            raise ValueError("one mean per channel")


# Pixel mean/std of the 16x16 digits training split, computed once.
DIGITS = DatasetSpec("digits", (1, 16, 16), 10, mean=(0.30538,), std=(0.31896,), source="digits")
CIFAR100 = DatasetSpec("cifar100", (3, 32, 32), 100, mean=(0.5071, 0.4865, 0.4409),
                       std=(0.2673, 0.2564, 0.2762))
IMAGENET_SUBSET = DatasetSpec("imagenet-subset", (3, 224, 224), 100, mean=(0.485, 0.456, 0.406),
                              std=(0.229, 0.224, 0.225))
CALTECH101 = DatasetSpec("caltech101", (3, 128, 128), 102)
FLOWERS102 = DatasetSpec("flowers102", (3, 128, 128), 102)

REGISTRY = {s.name: s for s in (DIGITS, CIFAR100, IMAGENET_SUBSET, CALTECH101, FLOWERS102)}


def get_spec(name: str, root: Optional[str] = None) -> DatasetSpec:
    if name not in REGISTRY:
        raise KeyError(f"unknown dataset {name!r}; known: {sorted(REGISTRY)}")
    spec = REGISTRY[name]
    if root is not None:
        spec = DatasetSpec(spec.name, spec.input_shape, spec.class_count, spec.mean, spec.std, root, spec.source)
    return spec


# ---------------------------------------------------------------------------
# Task sequence
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TaskSequence:
    class_order: Tuple[int, ...]
    base_classes: Tuple[int, ...]
    incremental_tasks: Tuple[Tuple[int, ...], ...]
    seed: int

    @property
    def num_incremental(self) -> int:
        return len(self.incremental_tasks)

    @property
    def groups(self) -> Tuple[Tuple[int, ...], ...]:
        """Base group followed by each incremental group."""
        return (self.base_classes,) + self.incremental_tasks

    def seen_classes(self, task: int) -> Tuple[int, ...]:
        """Classes seen after finishing task ``task`` (0 is the base task)."""
        out: Tuple[int, ...] = ()
        for g in self.groups[: task + 1]:
            out += g
        return out

    def output_index(self) -> Dict[int, int]:
        """Global class id -> classifier output column."""
        return {c: i for i, c in enumerate(self.class_order)}

    def to_dict(self) -> dict:
        return {"class_order": list(self.class_order), "base_classes": list(self.base_classes),
                "incremental_tasks": [list(g) for g in self.incremental_tasks], "seed": self.seed}


def build_task_sequence(spec: DatasetSpec, num_incremental: int, seed: int,
                        base_count: Optional[int] = None) -> TaskSequence:
    """Seeded permutation; first ceil(K/2) classes are the base task, rest split into N groups."""
    k = spec.class_count
    if k < 2:
        raise ValueError("need at least two classes")
    if num_incremental < 0:
        raise ValueError("num_incremental must be >= 0")
    base = base_count if base_count is not None else (k + 1) // 2
    rest = k - base
    if num_incremental > rest:
        raise ValueError(f"{num_incremental} incremental tasks but only {rest} classes remain")
    if num_incremental == 0 and base_count is None:
        base = k
        rest = 0
    order = np.random.default_rng(seed).permutation(k).tolist()
    groups = []
    if num_incremental:
        sizes = [rest // num_incremental + (1 if i < rest % num_incremental else 0) for i in range(num_incremental)]
        start = base
        for s in sizes:
            groups.append(tuple(order[start:start + s]))
            start += s
    return TaskSequence(tuple(order), tuple(order[:base]), tuple(groups), seed)


# ---------------------------------------------------------------------------
# Data access
# ---------------------------------------------------------------------------


@dataclass
class AccessRecord:
    context: str
    split: str
    classes: Tuple[int, ...]
    sample_count: int


class TaskData:
    """In-memory samples for one class group, delivered as seeded batch streams."""

    def __init__(self, images: torch.Tensor, class_ids: torch.Tensor, group: Sequence[int], split: str,
                 seed: int = 0):
        self.images = images
        self.class_ids = class_ids
        self.group = tuple(int(c) for c in group)
        self.split = split
        self.seed = seed
        self._pos = {c: i for i, c in enumerate(self.group)}

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def local_targets(self) -> torch.Tensor:
        return torch.tensor([self._pos[int(c)] for c in self.class_ids], dtype=torch.long)

    def batches(self, batch_size: int, epoch: int = 0, shuffle: Optional[bool] = None,
                drop_last: bool = False) -> Iterator[Tuple[torch.Tensor, torch.Tensor, torch.Tensor]]:
        """Yield (images, one-hot within the group, global class ids).

        Training streams are shuffled with a per-epoch seed; validation
        streams keep file order.
        """
        if shuffle is None:
            shuffle = self.split == "train"
        n = len(self)
        if shuffle:
            gen = torch.Generator().manual_seed(self.seed * 100003 + epoch)
            order = torch.randperm(n, generator=gen)
        else:
            order = torch.arange(n)
        local = self.local_targets()
        stop = n - (n % batch_size) if drop_last else n
        for i in range(0, stop, batch_size):
            idx = order[i:i + batch_size]
            yield (self.images[idx], F.one_hot(local[idx], len(self.group)).float(), self.class_ids[idx])


def concat_task_data(parts: Sequence[TaskData]) -> TaskData:
    group: Tuple[int, ...] = ()
    for p in parts:
        group += p.group
    return TaskData(torch.cat([p.images for p in parts]), torch.cat([p.class_ids for p in parts]),
                    group, parts[0].split, parts[0].seed)


class DataSource:
    """Reads samples for requested classes and logs every access.

    Nothing is cached between calls; each request reads exactly the files
    (or records) of the classes asked for.
    """

    def __init__(self, spec: DatasetSpec, seed: int = 0, val_fraction: float = 0.2):
        self.spec = spec
        self.seed = seed
        self.val_fraction = val_fraction
        self.context = "default"
        self.access_log: List[AccessRecord] = []

    def load_task_data(self, classes: Sequence[int], split: str) -> TaskData:
        if split not in ("train", "val"):
            raise ValueError("split must be 'train' or 'val'")
        classes = tuple(int(c) for c in classes)
        bad = [c for c in classes if not 0 <= c < self.spec.class_count]
        if bad:
            raise ValueError(f"classes {bad} are not in dataset {self.spec.name}")
        if self.spec.source == "digits":
            images, ids = self._read_digits(classes, split)
        else:
            images, ids = self._read_folder(classes, split)
        images = self.normalize(images)
        self.access_log.append(AccessRecord(self.context, split, classes, int(ids.shape[0])))
        return TaskData(images, ids, classes, split, seed=self.seed)

    def normalize(self, images: torch.Tensor) -> torch.Tensor:
        mean, std = self._norm_constants()
        m = torch.tensor(mean, dtype=images.dtype).view(1, -1, 1, 1)
        s = torch.tensor(std, dtype=images.dtype).view(1, -1, 1, 1)
        return (images - m) / s

    # -- digits ------------------------------------------------------------

    def _read_digits(self, classes, split):
        from sklearn.datasets import load_digits
        from sklearn.model_selection import train_test_split

        d = load_digits()
        idx = np.arange(len(d.target))
        tr, va = train_test_split(idx, test_size=self.val_fraction, stratify=d.target, random_state=0)
        chosen = np.sort(tr if split == "train" else va)
        chosen = chosen[np.isin(d.target[chosen], classes)]
        x = torch.tensor(d.images[chosen], dtype=torch.float32).unsqueeze(1) / 16.0
        _, h, w = self.spec.input_shape
        if x.shape[-2:] != (h, w):
            x = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)
        return x, torch.tensor(d.target[chosen], dtype=torch.long)

    # -- image folders -----------------------------------------------------

    def _index(self) -> dict:
        if self.spec.root is None:
            raise DatasetError(f"dataset {self.spec.name} needs a root directory")
        root = Path(self.spec.root)
        index_path = root / INDEX_FILE
        if index_path.exists():
            return json.loads(index_path.read_text())
        if not (root / "train").is_dir():
            raise DatasetError(f"missing {root / 'train'}")
        names = sorted(p.name for p in (root / "train").iterdir() if p.is_dir())
        index = {"classes": names, "files": {}}
        for split in ("train", "val"):
            index["files"][split] = {
                str(i): sorted(str(p.relative_to(root)) for p in (root / split / n).glob("*") if p.is_file())
                if (root / split / n).is_dir() else []
                for i, n in enumerate(names)
            }
        try:
            index_path.write_text(json.dumps(index))
        except OSError:
            logger.warning("could not cache dataset index at %s", index_path)
        return index

    def _read_folder(self, classes, split):
        from PIL import Image

        index = self._index()
        root = Path(self.spec.root)
        c, h, w = self.spec.input_shape
        mode = "L" if c == 1 else "RGB"
        xs, ys = [], []
        for cls in classes:
            for rel in index["files"][split].get(str(cls), []):
                path = root / rel
                if not path.exists():
                    raise DatasetError(f"missing file {path}")
                try:
                    with Image.open(path) as im:
                        arr = np.asarray(im.convert(mode).resize((w, h), Image.BILINEAR), dtype=np.float32)
                except OSError as exc:
                    raise DatasetError(f"corrupted record {path}: {exc}") from exc
                arr = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
                xs.append(torch.from_numpy(arr / 255.0))
                ys.append(cls)
        if not xs:
            return torch.empty(0, c, h, w), torch.empty(0, dtype=torch.long)
        return torch.stack(xs), torch.tensor(ys, dtype=torch.long)

    def _norm_constants(self):
        if self.spec.mean is not None and self.spec.std is not None:
            return self.spec.mean, self.spec.std
        index = self._index()
        if "mean" not in index:
            # one pass over the full training split, cached in the index file
            logger.info("computing normalization constants for %s", self.spec.name)
            x, _ = self._read_folder(range(self.spec.class_count), "train")
            dims = (0, 2, 3)
            index["mean"] = x.mean(dim=dims).tolist()
            index["std"] = x.std(dim=dims, unbiased=False).clamp_min(1e-6).tolist()
            try:
                (Path(self.spec.root) / INDEX_FILE).write_text(json.dumps(index))
            except OSError:
                pass
        return tuple(index["mean"]), tuple(index["std"])


def load_task_data(source: DataSource, classes: Sequence[int], split: str) -> TaskData:
    return source.load_task_data(classes, split)
