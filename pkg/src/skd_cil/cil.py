"""Exemplar-free incremental learning with delegator-generated pseudo data.

Each incremental task copies the previous model, widens its head, and trains
on batches that pair real new-task samples one-to-one with freshly generated
pseudo samples labeled by the previous model. Nothing from earlier tasks'
real data is read.
"""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from .data import DataSource, TaskData, TaskSequence
from .delegate import (
    MAX_CONSECUTIVE_NONFINITE,
    NonFiniteLossError,
    SkdTrainConfig,
    TrainingDiverged,
    evaluate_student_with_teacher_head,
    train_skd,
    write_trace_csv,
)
from .evalkit import RunReport, as_eval_set, top1_accuracy
from .losses import GammaSchedule, adaptive_gamma, cil_components, pseudo_label
from .networks import (
    ClassifierModel,
    Delegator,
    HeadExtension,
    extend_head,
    freeze,
    save_classifier,
    save_delegator,
)

logger = logging.getLogger(__name__)

CIL_TRACE_FIELDS = ("step", "epoch", "l_cls", "l_fc", "gamma", "total")


@dataclass
class CilTrainConfig:
    epochs: int = 160
    lr: float = 0.1
    lr_drops: Tuple[int, ...] = (80, 120)
    lr_drop_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size_real: int = 64
    beta: float = 5.0
    # "seen": gamma's class sum counts every class seen so far (base included);
    # "new": only classes added by incremental tasks
    gamma_counts: str = "seen"
    adaptive: bool = True
    fixed_gamma: float = 1.0
    use_pseudo: bool = True
    consolidate: bool = True
    pseudo_eval_mode: bool = True
    seed: int = 0

    def __post_init__(self):
        self.lr_drops = tuple(int(e) for e in self.lr_drops)
        if any(b <= a for a, b in zip(self.lr_drops, self.lr_drops[1:])):
            raise ValueError("lr_drops must be strictly increasing")
        if self.lr_drops and self.epochs > 0 and self.lr_drops[-1] >= self.epochs:
            raise ValueError("lr_drops must be smaller than epochs")
        if self.epochs < 0 or self.batch_size_real < 1:
            raise ValueError("epochs must be >= 0 and batch_size_real >= 1")
        if self.gamma_counts not in ("seen", "new"):
            raise ValueError("gamma_counts must be 'seen' or 'new'")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_drop_factor ** sum(epoch >= d for d in self.lr_drops)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_drops"] = list(self.lr_drops)
        return d


@dataclass
class PseudoBatch:
    images: torch.Tensor
    labels: torch.Tensor  # one-hot over the old classes


@dataclass
class MixedBatch:
    images: torch.Tensor
    labels: torch.Tensor  # one-hot over old + new classes
    num_pseudo: int

    @property
    def num_real(self) -> int:
        return int(self.images.shape[0]) - self.num_pseudo


@torch.no_grad()
def make_pseudo_batch(delegator: Delegator, teacher: ClassifierModel, count: int,
                      rng: torch.Generator, eval_mode: bool = True) -> PseudoBatch:
    """Generate ``count`` samples and label them with the teacher's argmax."""
    from .networks import frozen_bn_stats

    z = torch.randn(count, delegator.latent_dim, generator=rng)
    was_training = delegator.training
    if eval_mode:
        delegator.eval()
        x = delegator(z)
    else:
        delegator.train()
        with frozen_bn_stats(delegator):
            x = delegator(z)
    delegator.train(was_training)
    t_was = teacher.training
    teacher.eval()
    labels = pseudo_label(teacher(x))
    teacher.train(t_was)
    return PseudoBatch(x, labels)


def mix_batch(pseudo: Optional[PseudoBatch], real_images: torch.Tensor, real_labels: torch.Tensor,
              old_k: int, new_k: int) -> MixedBatch:
    """Stack pseudo and real samples; widen labels to old_k + new_k columns."""
    if real_labels.shape[1] != new_k:
        raise ValueError(f"real labels are {real_labels.shape[1]} wide, expected {new_k}")
    real = torch.cat([torch.zeros(real_labels.shape[0], old_k, dtype=real_labels.dtype), real_labels], dim=1)
    if pseudo is None:
        return MixedBatch(real_images, real, 0)
    if pseudo.images.shape[0] != real_images.shape[0]:
        raise ValueError(f"{pseudo.images.shape[0]} pseudo vs {real_images.shape[0]} real samples")
    if pseudo.labels.shape[1] != old_k:
        raise ValueError(f"pseudo labels are {pseudo.labels.shape[1]} wide, expected {old_k}")
    fake = torch.cat([pseudo.labels.to(real.dtype),
                      torch.zeros(pseudo.labels.shape[0], new_k, dtype=real.dtype)], dim=1)
    return MixedBatch(torch.cat([pseudo.images, real_images]), torch.cat([fake, real]),
                      int(pseudo.images.shape[0]))


def gamma_for_task(cfg: CilTrainConfig, seq: TaskSequence, task_index: int) -> float:
    """Loss weight for incremental task ``task_index`` (1-based)."""
    if not cfg.adaptive:
        return cfg.fixed_gamma
    counts = [len(g) for g in seq.incremental_tasks]
    if cfg.gamma_counts == "seen" and counts:
        counts[0] += len(seq.base_classes)
    sched = GammaSchedule(cfg.beta, seq.num_incremental, tuple(counts))
    return adaptive_gamma(sched, task_index)


def train_classifier(model: ClassifierModel, data: TaskData, epochs: int, lr: float = 0.05,
                     batch_size: int = 64, momentum: float = 0.9, weight_decay: float = 5e-4,
                     seed: int = 0) -> ClassifierModel:
    """Plain cross-entropy training with a cosine schedule (used for the base task)."""
    if model.num_classes != len(data.group):
        raise ValueError("model head width must equal the number of classes in the data")
    opt = torch.optim.SGD(model.parameters(), lr=lr, momentum=momentum, weight_decay=weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(epochs, 1))
    data.seed = seed
    for epoch in range(epochs):
        model.train()
        for x, y, _ in data.batches(batch_size, epoch=epoch):
            loss = F.cross_entropy(model(x), y.argmax(dim=1))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        sched.step()
    model.eval()
    return model


def train_cil_task(old_model: ClassifierModel, delegator: Optional[Delegator], new_data: TaskData,
                   cfg: CilTrainConfig, task_index: int, gamma: float,
                   trace: Optional[List[dict]] = None) -> ClassifierModel:
    """Learn ``new_data``'s classes on top of ``old_model``; returns the new model.

    ``old_model`` is frozen and left unchanged. With ``delegator=None`` (or
    ``cfg.use_pseudo`` off) batches carry only real new-task samples.
    """
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    old_model = freeze(old_model)
    old_k, new_k = old_model.num_classes, len(new_data.group)
    model = extend_head(old_model, HeadExtension(old_k, new_k), seed=cfg.seed + task_index)
    for p in model.parameters():
        p.requires_grad_(True)
    use_pseudo = cfg.use_pseudo and delegator is not None
    if use_pseudo:
        delegator.eval()
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    rng = torch.Generator().manual_seed(cfg.seed * 7919 + task_index)
    new_data.seed = cfg.seed + task_index
    step = 0
    bad = 0
    for epoch in range(cfg.epochs):
        for g in opt.param_groups:
            g["lr"] = cfg.lr_at(epoch)
        for x_real, y_real, _ in new_data.batches(cfg.batch_size_real, epoch=epoch):
            pseudo = None
            if use_pseudo:
                pseudo = make_pseudo_batch(delegator, old_model, x_real.shape[0], rng,
                                           eval_mode=cfg.pseudo_eval_mode)
            batch = mix_batch(pseudo, x_real, y_real, old_k, new_k)
            model.train()
            comps = cil_components(batch.images, batch.labels, old_model, model, consolidate=cfg.consolidate)
            total = gamma * comps["l_cls"] + comps["l_fc"]
            step += 1
            if not torch.isfinite(total):
                bad += 1
                logger.warning("skipping non-finite CIL loss at step %d", step)
                if bad >= MAX_CONSECUTIVE_NONFINITE:
                    raise TrainingDiverged(f"{bad} consecutive non-finite CIL losses", trace)
                continue
            bad = 0
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            if trace is not None:
                trace.append({"step": step, "epoch": epoch, "l_cls": comps["l_cls"].item(),
                              "l_fc": comps["l_fc"].item(), "gamma": gamma, "total": total.item(),
                              "num_pseudo": batch.num_pseudo, "num_real": batch.num_real})
    model.eval()
    return model


@dataclass
class RunFlags:
    no_skd: bool = False
    no_alw: bool = False
    no_fc: bool = False


def run_sequence(base_model: ClassifierModel, seq: TaskSequence, source: DataSource,
                 skd_cfg: SkdTrainConfig, cil_cfg: CilTrainConfig, flags: RunFlags = RunFlags(),
                 out_dir=None, report: Optional[RunReport] = None) -> RunReport:
    """Alternate delegator training and incremental learning over every task in ``seq``."""
    report = report or RunReport()
    report.seed = seq.seed
    out = Path(out_dir) if out_dir is not None else None
    cil_cfg = copy.deepcopy(cil_cfg)
    if flags.no_skd:
        cil_cfg.use_pseudo = False
    if flags.no_alw:
        cil_cfg.adaptive = False
    if flags.no_fc:
        cil_cfg.consolidate = False
    column_of = seq.output_index()

    def evaluate(model, task):
        source.context = f"task{task}/eval"
        val = source.load_task_data(seq.seen_classes(task), "val")
        return as_eval_set(val, column_of)

    t0 = time.perf_counter()
    current = base_model
    report.per_task_top1.append(top1_accuracy(current, evaluate(current, 0)))
    report.teacher_student_gap.append(None)
    report.timing["base_eval"] = time.perf_counter() - t0

    delegator: Optional[Delegator] = None
    try:
        for n in range(seq.num_incremental):
            task = n + 1
            if not flags.no_skd:
                t = time.perf_counter()
                source.context = f"task{task}/skd"
                task_skd = copy.deepcopy(skd_cfg)
                task_skd.seed = skd_cfg.seed + 1000 * n
                result = train_skd(current, delegator, task_skd)
                delegator = result.delegator
                val_old = evaluate(current, n)
                gap = top1_accuracy(current, val_old) - evaluate_student_with_teacher_head(
                    result.student, current, val_old)
                report.teacher_student_gap.append(gap)
                report.timing[f"task{task}_skd"] = time.perf_counter() - t
                if out is not None:
                    save_delegator(delegator, out / f"delegator_task{task}.pt")
                    report.trace_files.append(str(write_trace_csv(result.loss_trace, out / f"skd_trace_task{task}.csv")))
            else:
                report.teacher_student_gap.append(None)
            t = time.perf_counter()
            source.context = f"task{task}/train"
            new_data = source.load_task_data(seq.incremental_tasks[n], "train")
            gamma = gamma_for_task(cil_cfg, seq, task)
            trace: List[dict] = []
            current = train_cil_task(current, delegator, new_data, cil_cfg, task, gamma, trace)
            del new_data
            report.timing[f"task{task}_cil"] = time.perf_counter() - t
            report.per_task_top1.append(top1_accuracy(current, evaluate(current, task)))
            report.extras.setdefault("gamma", []).append(gamma)
            if out is not None:
                save_classifier(current, out / f"model_task{task}.pt")
                report.trace_files.append(str(_write_cil_trace(trace, out / f"cil_trace_task{task}.csv")))
            logger.info("task %d: top-1 %.2f", task, report.per_task_top1[-1])
    except TrainingDiverged as exc:
        report.complete = False
        report.error = str(exc)
        logger.error("run aborted: %s", exc)
    finally:
        source.context = "default"
    report.timing["total"] = time.perf_counter() - t0
    report.validate()
    if out is not None:
        report.save(out / "report.json")
    return report


def _write_cil_trace(trace: List[dict], path) -> Path:
    import csv

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CIL_TRACE_FIELDS, extrasaction="ignore")
        w.writeheader()
        w.writerows(trace)
    return path
