"""Data-free imitate & explore training of the knowledge delegator.

A frozen teacher's feature extractor is transferred to a re-initialized clone
using only generated samples. The imitate phase trains the clone to match the
teacher's normalized features; the explore phase pushes the generator (and
the clone) the other way, regularized by the teacher's category, diversity
and feature-statistic terms.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import torch
import torch.nn as nn

from .losses import ExploreWeights, combine_explore, explore_components, feature_cosine_discrepancy
from .networks import (
    ClassifierModel,
    Delegator,
    HeadSwapped,
    build_delegator,
    clone_reinit,
    freeze,
    frozen_bn_stats,
    state_digest,
)

logger = logging.getLogger(__name__)

TRACE_FIELDS = ("step", "phase", "l_imi", "l_exp", "l_cat", "l_div", "r_feature", "total")
MAX_CONSECUTIVE_NONFINITE = 10


class NonFiniteLossError(FloatingPointError):
    pass


class TrainingDiverged(RuntimeError):
    """Raised after too many consecutive non-finite losses; carries the partial trace."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


@dataclass
class SkdTrainConfig:
    epochs: int = 200
    steps_per_epoch: int = 50
    imitate_steps_per_explore: int = 5
    imitate_lr: float = 0.1
    imitate_momentum: float = 0.9
    weight_decay: float = 5e-4
    explore_lr: float = 1e-3
    lr_drop_every: int = 100
    lr_drop_factor: float = 0.1
    pseudo_batch_size: int = 256
    latent_dim: int = 256
    generator_width: Optional[int] = None
    helper_bn: bool = True
    explore_weights: ExploreWeights = field(default_factory=ExploreWeights)
    explore_updates_delegator_only: bool = False
    stat_source: str = "teacher"
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.explore_weights, dict):
            self.explore_weights = ExploreWeights(**self.explore_weights)
        for name in ("epochs", "steps_per_epoch", "imitate_steps_per_explore", "pseudo_batch_size",
                     "latent_dim", "lr_drop_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.imitate_lr <= 0 or self.explore_lr <= 0:
            raise ValueError("learning rates must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SkdTrainResult:
    delegator: Delegator
    student: ClassifierModel
    loss_trace: List[Dict[str, float]]
    teacher_digest_before: str
    teacher_digest_after: str

    @property
    def teacher_unchanged(self) -> bool:
        return self.teacher_digest_before == self.teacher_digest_after


def sample_latent(batch: int, latent_dim: int, generator: torch.Generator) -> torch.Tensor:
    if batch < 1 or latent_dim < 1:
        raise ValueError("batch and latent_dim must be positive")
    return torch.randn(batch, latent_dim, generator=generator)


def _finite(value: torch.Tensor, what: str) -> None:
    if not torch.isfinite(value).all():
        raise NonFiniteLossError(f"non-finite {what}: {value.item()}")


class SkdTrainer:
    """Holds optimizers and RNG state for one stage-1 run."""

    def __init__(self, teacher: ClassifierModel, delegator: Delegator, student: ClassifierModel,
                 cfg: SkdTrainConfig):
        self.teacher = freeze(teacher)
        self.delegator = delegator
        self.student = student
        self.cfg = cfg
        self.rng = torch.Generator().manual_seed(cfg.seed)
        self.imitate_opt = torch.optim.SGD(student.features.parameters(), lr=cfg.imitate_lr,
                                           momentum=cfg.imitate_momentum, weight_decay=cfg.weight_decay)
        self.explore_opt = torch.optim.Adam(delegator.parameters(), lr=cfg.explore_lr)
        for p in student.head.parameters():
            p.requires_grad_(False)
        self.step_count = 0

    def set_epoch(self, epoch: int) -> None:
        scale = self.cfg.lr_drop_factor ** (epoch // self.cfg.lr_drop_every)
        for g in self.imitate_opt.param_groups:
            g["lr"] = self.cfg.imitate_lr * scale
        for g in self.explore_opt.param_groups:
            g["lr"] = self.cfg.explore_lr * scale

    def _latent(self) -> torch.Tensor:
        return sample_latent(self.cfg.pseudo_batch_size, self.cfg.latent_dim, self.rng)

    def imitate_step(self) -> Dict[str, float]:
        """One SGD step on the student's feature extractor; delegator untouched."""
        z = self._latent()
        self.delegator.train()
        with torch.no_grad(), frozen_bn_stats(self.delegator):
            x = self.delegator(z)
        self.student.train()
        with torch.no_grad():
            t_feat = self.teacher.extract(x)
        loss = feature_cosine_discrepancy(t_feat, self.student.extract(x))
        _finite(loss, "imitation loss")
        self.imitate_opt.zero_grad(set_to_none=True)
        loss.backward()
        self.imitate_opt.step()
        self.step_count += 1
        v = loss.item()
        return {"step": self.step_count, "phase": "imitate", "l_imi": v, "l_exp": math.nan,
                "l_cat": math.nan, "l_div": math.nan, "r_feature": math.nan, "total": v}

    def explore_step(self) -> Dict[str, float]:
        """One Adam step on the delegator (and, by default, the student) against the explore loss."""
        z = self._latent()
        self.delegator.train()
        self.student.train()
        x = self.delegator(z)
        comps = explore_components(x, self.teacher, self.student, stat_source=self.cfg.stat_source)
        total = combine_explore(comps, self.cfg.explore_weights)
        _finite(total, "explore loss")
        self.explore_opt.zero_grad(set_to_none=True)
        self.imitate_opt.zero_grad(set_to_none=True)
        total.backward()
        self.explore_opt.step()
        if not self.cfg.explore_updates_delegator_only:
            # the student's share of the explore gradient goes through its own SGD optimizer
            self.imitate_opt.step()
        self.step_count += 1
        row = {"step": self.step_count, "phase": "explore"}
        row.update({k: float(v.item()) for k, v in comps.items()})
        row["total"] = float(total.item())
        return row

    def cycle(self) -> List[Dict[str, float]]:
        rows = [self.imitate_step() for _ in range(self.cfg.imitate_steps_per_explore)]
        rows.append(self.explore_step())
        return rows


def train_skd(teacher: ClassifierModel, delegator_init: Optional[Delegator], cfg: SkdTrainConfig,
              student_seed: Optional[int] = None,
              on_epoch: Optional[Callable[[int, SkdTrainer], None]] = None) -> SkdTrainResult:
    """Train a delegator and a re-initialized student against a frozen teacher.

    ``delegator_init`` warm-starts the generator (it is copied, not mutated);
    pass None for a fresh one.
    """
    teacher = freeze(teacher)
    digest_before = state_digest(teacher)
    if delegator_init is None:
        delegator = build_delegator(teacher.input_shape, cfg.latent_dim, width=cfg.generator_width,
                                    helper_bn=cfg.helper_bn, seed=cfg.seed)
    else:
        delegator = copy.deepcopy(delegator_init)
        for p in delegator.parameters():
            p.requires_grad_(True)
    student = clone_reinit(teacher, seed=cfg.seed + 1 if student_seed is None else student_seed)
    for p in student.features.parameters():
        p.requires_grad_(True)

    trainer = SkdTrainer(teacher, delegator, student, cfg)
    trace: List[Dict[str, float]] = []
    bad = 0
    for epoch in range(cfg.epochs):
        trainer.set_epoch(epoch)
        for _ in range(cfg.steps_per_epoch):
            for phase in ["imitate"] * cfg.imitate_steps_per_explore + ["explore"]:
                try:
                    row = trainer.imitate_step() if phase == "imitate" else trainer.explore_step()
                except NonFiniteLossError as exc:
                    bad += 1
                    logger.warning("skipping %s step: %s", phase, exc)
                    if bad >= MAX_CONSECUTIVE_NONFINITE:
                        raise TrainingDiverged(
                            f"{bad} consecutive non-finite losses at epoch {epoch}", trace) from exc
                    continue
                bad = 0
                trace.append(row)
        if on_epoch is not None:
            on_epoch(epoch, trainer)
        if trace:
            logger.debug("skd epoch %d: %s", epoch, trace[-1])

    delegator.eval()
    student.eval()
    return SkdTrainResult(delegator, student, trace, digest_before, state_digest(teacher))


@torch.no_grad()
def evaluate_student_with_teacher_head(student: ClassifierModel, teacher: ClassifierModel, val_data) -> float:
    """Top-1 (percent) of the teacher's head on the student's features."""
    from .evalkit import top1_accuracy

    model = HeadSwapped(student, teacher)
    return top1_accuracy(model, val_data)


def write_trace_csv(trace: List[Dict[str, float]], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=TRACE_FIELDS, extrasaction="ignore")
        writer.writeheader()
        for row in trace:
            writer.writerow({k: ("" if isinstance(v, float) and math.isnan(v) else v) for k, v in row.items()})
    return path


def read_trace_csv(path) -> List[Dict[str, float]]:
    rows = []
    with Path(path).open() as f:
        for row in csv.DictReader(f):
            out: Dict[str, float] = {}
            for k, v in row.items():
                if k == "phase":
                    out[k] = v
                elif k == "step":
                    out[k] = int(v)
                else:
                    out[k] = float(v) if v != "" else math.nan
            rows.append(out)
    return rows
