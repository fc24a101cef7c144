"""Objectives for delegator training and incremental learning.

All batch reductions are means over the batch. Functions taking models run
the forward passes themselves; the ``*_from_*`` variants operate on
precomputed tensors so they can be tested in isolation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .networks import ClassifierModel, record_bn_inputs

StatList = Sequence[Tuple[torch.Tensor, torch.Tensor]]


class LossInputError(ValueError):
    """Raised when a loss receives inputs outside its domain."""


@dataclass(frozen=True)
class ExploreWeights:
    """Weights of the explore objective.

    ``lambda_exp`` scales the adversarial term; the other three are 1 in the
    full method and are set to 0 by the ablation switches.
    """

    lambda_exp: float = 1.0
    category: float = 1.0
    diversity: float = 1.0
    feature_stats: float = 1.0

    def __post_init__(self):
        for name in ("lambda_exp", "category", "diversity", "feature_stats"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass(frozen=True)
class GammaSchedule:
    beta: float
    total_tasks: int
    class_counts: Tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.total_tasks < 1:
            raise ValueError("total_tasks must be positive")
        if any(c <= 0 for c in self.class_counts):
            raise ValueError("class counts must be positive")
        object.__setattr__(self, "class_counts", tuple(int(c) for c in self.class_counts))


# ---------------------------------------------------------------------------
# Feature cosine discrepancy and its uses
# ---------------------------------------------------------------------------


def feature_cosine_discrepancy(feat_a: torch.Tensor, feat_b: torch.Tensor) -> torch.Tensor:
    """Batch mean of 1 - cos(a_i / |a_i|, b_i / |b_i|); lies in [0, 2]."""
    if feat_a.shape != feat_b.shape:
        raise LossInputError(f"feature shapes differ: {tuple(feat_a.shape)} vs {tuple(feat_b.shape)}")
    if feat_a.dim() != 2 or feat_a.shape[0] == 0:
        raise LossInputError("features must be a non-empty B x d matrix")
    na = feat_a.norm(dim=1, keepdim=True)
    nb = feat_b.norm(dim=1, keepdim=True)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise LossInputError("zero-norm feature row; cosine discrepancy is undefined")
    cos = ((feat_a / na) * (feat_b / nb)).sum(dim=1)
    return (1.0 - cos).mean()


def imitate_loss(x_pseudo: torch.Tensor, teacher: ClassifierModel, student: ClassifierModel) -> torch.Tensor:
    return feature_cosine_discrepancy(teacher.extract(x_pseudo), student.extract(x_pseudo))


def explore_adversarial_loss(x_pseudo: torch.Tensor, teacher: ClassifierModel,
                             student: ClassifierModel) -> torch.Tensor:
    return -imitate_loss(x_pseudo, teacher, student)


def feature_consolidation_loss(x_mixed: torch.Tensor, old_model: ClassifierModel,
                               new_model: ClassifierModel) -> torch.Tensor:
    with torch.no_grad():
        old_feat = old_model.extract(x_mixed)
    return feature_cosine_discrepancy(old_feat, new_model.extract(x_mixed))


# ---------------------------------------------------------------------------
# Teacher-output terms
# ---------------------------------------------------------------------------


def pseudo_label(logits: torch.Tensor) -> torch.Tensor:
    """Row-wise one-hot at the argmax; ties go to the lowest class index."""
    if logits.dim() != 2 or logits.shape[1] < 1:
        raise LossInputError("logits must be B x K with K >= 1")
    if logits.shape[0] == 0:
        raise LossInputError("empty batch")
    idx = logits.argmax(dim=1)
    return F.one_hot(idx, logits.shape[1]).to(logits.dtype)


def category_loss_from_logits(logits: torch.Tensor) -> torch.Tensor:
    target = logits.detach().argmax(dim=1)
    return F.cross_entropy(logits, target)


def category_loss(x_pseudo: torch.Tensor, teacher: ClassifierModel) -> torch.Tensor:
    return category_loss_from_logits(teacher(x_pseudo))


def diversity_loss(scores: torch.Tensor, check: bool = True) -> torch.Tensor:
    """sum_k w_k log w_k over the batch-mean class scores, with 0 log 0 = 0.

    Ranges over [-log K, 0]; lower means the batch spreads more evenly.
    """
    if scores.dim() != 2 or scores.shape[0] == 0:
        raise LossInputError("scores must be a non-empty B x K matrix")
    if check:
        if bool((scores < 0).any()) or not torch.allclose(
                scores.sum(dim=1), torch.ones(scores.shape[0], dtype=scores.dtype), atol=1e-5, rtol=0):
            raise LossInputError("score rows must be probability distributions")
    w = scores.mean(dim=0)
    safe = w.clamp_min(1e-12)
    return torch.where(w > 0, w * torch.log(safe), torch.zeros_like(w)).sum()


def bn_statistic_regularizer(observed: StatList, stored: StatList) -> torch.Tensor:
    """sum_l |mu_l - mu_hat_l|_2 + sum_l |sigma_l - sigma_hat_l|_2."""
    if len(observed) != len(stored):
        raise LossInputError(f"{len(observed)} observed layers vs {len(stored)} stored")
    if not observed:
        raise LossInputError("no normalization layers to match")
    total = None
    for (mu, sd), (mu_hat, sd_hat) in zip(observed, stored):
        if mu.shape != mu_hat.shape or sd.shape != sd_hat.shape:
            raise LossInputError("channel widths differ between observed and stored statistics")
        term = torch.linalg.vector_norm(mu - mu_hat) + torch.linalg.vector_norm(sd - sd_hat)
        total = term if total is None else total + term
    return total


def stored_bn_targets(model: ClassifierModel) -> List[Tuple[torch.Tensor, torch.Tensor]]:
    """Running mean and running std of each normalization layer."""
    return [(bn.running_mean.detach(), torch.sqrt(bn.running_var.detach() + bn.eps)) for bn in model.bn_layers()]


# ---------------------------------------------------------------------------
# Explore objective
# ---------------------------------------------------------------------------


def explore_components(x_pseudo: torch.Tensor, teacher: ClassifierModel, student: ClassifierModel,
                       stat_source: str = "teacher") -> Dict[str, torch.Tensor]:
    """Unweighted explore terms from one teacher pass and one student pass.

    ``stat_source`` picks where observed feature statistics are measured:
    ``"teacher"`` (batch statistics at the frozen teacher's normalization
    layers) or ``"student"`` (the same at the student's layers).
    """
    if stat_source not in ("teacher", "student"):
        raise ValueError("stat_source must be 'teacher' or 'student'")
    probe = teacher if stat_source == "teacher" else student
    with record_bn_inputs(probe.bn_layers()) as observed:
        t_feat = teacher.extract(x_pseudo)
        s_feat = student.extract(x_pseudo)
    logits = teacher.head(t_feat)
    l_imi = feature_cosine_discrepancy(t_feat, s_feat)
    return {
        "l_imi": l_imi,
        "l_exp": -l_imi,
        "l_cat": category_loss_from_logits(logits),
        "l_div": diversity_loss(F.softmax(logits, dim=1), check=False),
        "r_feature": bn_statistic_regularizer(list(observed), stored_bn_targets(teacher)),
    }


def combine_explore(components: Dict[str, torch.Tensor], weights: ExploreWeights) -> torch.Tensor:
    return (weights.lambda_exp * components["l_exp"]
            + weights.category * components["l_cat"]
            + weights.diversity * components["l_div"]
            + weights.feature_stats * components["r_feature"])


def explore_total_loss(x_pseudo: torch.Tensor, teacher: ClassifierModel, student: ClassifierModel,
                       weights: ExploreWeights = ExploreWeights(),
                       observed_stats: Optional[StatList] = None) -> torch.Tensor:
    """lambda * L_exp + L_cat + L_div + R_feature.

    If ``observed_stats`` is given it replaces the statistics measured on the
    teacher during this call.
    """
    comps = explore_components(x_pseudo, teacher, student)
    if observed_stats is not None:
        comps["r_feature"] = bn_statistic_regularizer(observed_stats, stored_bn_targets(teacher))
    return combine_explore(comps, weights)


# ---------------------------------------------------------------------------
# Incremental-learning objective
# ---------------------------------------------------------------------------


def soft_cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    if logits.shape != targets.shape:
        raise LossInputError(
            f"label width {targets.shape[-1]} does not match {logits.shape[-1]} logits"
        )
    return -(targets * F.log_softmax(logits, dim=1)).sum(dim=1).mean()


def cil_classification_loss(x_mixed: torch.Tensor, labels_mixed: torch.Tensor,
                            new_model: ClassifierModel) -> torch.Tensor:
    return soft_cross_entropy(new_model(x_mixed), labels_mixed)


def adaptive_gamma(sched: GammaSchedule, task_index: int) -> float:
    """beta / (N * number of classes added over incremental tasks 1..n)."""
    n = int(task_index)
    if not 1 <= n <= sched.total_tasks:
        raise ValueError(f"task index {n} outside 1..{sched.total_tasks}")
    if len(sched.class_counts) < n:
        raise ValueError(f"class counts cover {len(sched.class_counts)} tasks, need {n}")
    return sched.beta / (sched.total_tasks * sum(sched.class_counts[:n]))


def cil_components(x_mixed: torch.Tensor, labels: torch.Tensor, old_model: ClassifierModel,
                   new_model: ClassifierModel, consolidate: bool = True) -> Dict[str, torch.Tensor]:
    feats = new_model.extract(x_mixed)
    comps = {"l_cls": soft_cross_entropy(new_model.head(feats), labels)}
    if consolidate:
        with torch.no_grad():
            old_feat = old_model.extract(x_mixed)
        comps["l_fc"] = feature_cosine_discrepancy(old_feat, feats)
    else:
        comps["l_fc"] = torch.zeros((), dtype=feats.dtype)
    return comps


def cil_total_loss(x_mixed: torch.Tensor, labels: torch.Tensor, old_model: ClassifierModel,
                   new_model: ClassifierModel, gamma: float) -> torch.Tensor:
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    comps = cil_components(x_mixed, labels, old_model, new_model)
    return gamma * comps["l_cls"] + comps["l_fc"]


def model_is_frozen(model: nn.Module) -> bool:
    return not model.training and not any(p.requires_grad for p in model.parameters())
