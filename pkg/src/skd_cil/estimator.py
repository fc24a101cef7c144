"""scikit-learn compatible wrapper around the full pipeline.

``fit`` trains the base model; every ``partial_fit`` call with previously
unseen classes runs one incremental task (delegator training, then
consolidated learning on the new data only)::

    clf = SKDIncrementalClassifier(n_incremental_tasks=2)
    clf.fit(X_base, y_base)
    clf.partial_fit(X_task1, y_task1)
    clf.predict(X_test)
"""

from __future__ import annotations

import copy
from typing import Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_images, check_labels
from .cil import CilTrainConfig, train_cil_task, train_classifier
from .data import TaskData
from .delegate import SkdTrainConfig, train_skd
from .evalkit import extract_features
from .losses import ExploreWeights, GammaSchedule, adaptive_gamma
from .networks import build_classifier


class SKDIncrementalClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Exemplar-free class-incremental image classifier.

    Parameters mirror the experiment configuration; defaults are desk-scale.
    ``transform`` returns penultimate features.
    """

    def __init__(self, arch="desk-cnn", n_incremental_tasks=1, pretrain_epochs=30, pretrain_lr=0.05,
                 batch_size=64, skd_epochs=20, skd_steps_per_epoch=10, skd_lr_drop_every=10,
                 pseudo_batch_size=128, latent_dim=256, generator_width=32, lambda_exp=1.0,
                 cil_epochs=40, cil_lr=0.1, cil_lr_drops=(20, 30), beta=0.25, adaptive_gamma=True,
                 use_skd=True, standardize=True, random_state=0):
        self.arch = arch
        self.n_incremental_tasks = n_incremental_tasks
        self.pretrain_epochs = pretrain_epochs
        self.pretrain_lr = pretrain_lr
        self.batch_size = batch_size
        self.skd_epochs = skd_epochs
        self.skd_steps_per_epoch = skd_steps_per_epoch
        self.skd_lr_drop_every = skd_lr_drop_every
        self.pseudo_batch_size = pseudo_batch_size
        self.latent_dim = latent_dim
        self.generator_width = generator_width
        self.lambda_exp = lambda_exp
        self.cil_epochs = cil_epochs
        self.cil_lr = cil_lr
        self.cil_lr_drops = cil_lr_drops
        self.beta = beta
        self.adaptive_gamma = adaptive_gamma
        self.use_skd = use_skd
        self.standardize = standardize
        self.random_state = random_state

    # -- helpers ----------------------------------------------------------------

    def _prep(self, X):
        x = check_images(X, getattr(self, "input_shape_", None))
        if self.standardize and hasattr(self, "mean_"):
            x = (x - self.mean_) / self.std_
        return x

    def _task_data(self, x, y, new_classes):
        col = {c: i + self.n_seen_before_ for i, c in enumerate(new_classes)}
        ids = torch.tensor([col[v] for v in y.tolist()], dtype=torch.long)
        return TaskData(x, ids, [col[c] for c in new_classes], "train", seed=self.random_state)

    def _skd_config(self, task):
        return SkdTrainConfig(epochs=self.skd_epochs, steps_per_epoch=self.skd_steps_per_epoch,
                              lr_drop_every=self.skd_lr_drop_every, pseudo_batch_size=self.pseudo_batch_size,
                              latent_dim=self.latent_dim, generator_width=self.generator_width,
                              explore_weights=ExploreWeights(lambda_exp=self.lambda_exp),
                              seed=self.random_state + 1000 * task)

    def _cil_config(self):
        drops = tuple(d for d in self.cil_lr_drops if d < self.cil_epochs)
        return CilTrainConfig(epochs=self.cil_epochs, lr=self.cil_lr, lr_drops=drops,
                              batch_size_real=self.batch_size, beta=self.beta, adaptive=self.adaptive_gamma,
                              use_pseudo=self.use_skd, seed=self.random_state)

    # -- API ----------------------------------------------------------------------

    def fit(self, X, y):
        """Train the base model on (X, y); discards any previous state."""
        x = check_images(X)
        y = check_labels(y, x.shape[0])
        for attr in ("mean_", "std_", "input_shape_"):
            self.__dict__.pop(attr, None)
        self.input_shape_ = tuple(x.shape[1:])
        if self.standardize:
            dims = (0, 2, 3)
            self.mean_ = x.mean(dim=dims).view(1, -1, 1, 1)
            self.std_ = x.std(dim=dims, unbiased=False).clamp_min(1e-6).view(1, -1, 1, 1)
            x = (x - self.mean_) / self.std_
        classes = list(dict.fromkeys(sorted(np.unique(y).tolist())))
        if len(classes) < 2:
            raise ValueError("need at least two classes in the base task")
        self.n_seen_before_ = 0
        model = build_classifier(self.arch, len(classes), self.input_shape_, seed=self.random_state)
        torch.manual_seed(self.random_state)
        train_classifier(model, self._task_data(x, y, classes), self.pretrain_epochs, lr=self.pretrain_lr,
                         batch_size=self.batch_size, seed=self.random_state)
        self.model_ = model
        self.classes_ = np.array(classes)
        self.task_class_counts_ = []
        self.delegator_ = None
        self.gap_history_ = []
        return self

    def partial_fit(self, X, y, classes=None):
        """Learn the classes in ``y`` as one new incremental task."""
        if not hasattr(self, "model_"):
            return self.fit(X, y)
        x = self._prep(X)
        y = check_labels(y, x.shape[0])
        new = sorted(set(np.unique(y).tolist()))
        seen = set(self.classes_.tolist())
        overlap = seen.intersection(new)
        if overlap:
            raise ValueError(f"classes {sorted(overlap)} were already learned; tasks must be disjoint")
        task = len(self.task_class_counts_) + 1
        if self.adaptive_gamma and task > self.n_incremental_tasks:
            raise ValueError(f"task {task} exceeds n_incremental_tasks={self.n_incremental_tasks}")
        self.n_seen_before_ = len(self.classes_)
        counts = self.task_class_counts_ + [len(new)]
        if self.adaptive_gamma:
            seen_counts = [counts[0] + len(self.classes_) - sum(self.task_class_counts_)] + counts[1:]
            gamma = adaptive_gamma(GammaSchedule(self.beta, self.n_incremental_tasks, tuple(seen_counts)), task)
        else:
            gamma = 1.0
        delegator = None
        if self.use_skd:
            result = train_skd(self.model_, self.delegator_, self._skd_config(task))
            delegator = result.delegator
        data = self._task_data(x, y, new)
        self.model_ = train_cil_task(self.model_, delegator, data, self._cil_config(), task, gamma)
        self.delegator_ = delegator
        self.task_class_counts_ = counts
        self.classes_ = np.concatenate([self.classes_, np.array(new, dtype=self.classes_.dtype)])
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        x = self._prep(X)
        self.model_.eval()
        with torch.no_grad():
            return torch.cat([self.model_(x[i:i + 512]) for i in range(0, len(x), 512)]).numpy()

    def predict_proba(self, X):
        logits = torch.from_numpy(self.decision_function(X))
        return torch.softmax(logits, dim=1).numpy()

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]

    def transform(self, X):
        check_is_fitted(self, "model_")
        return extract_features(self.model_, self._prep(X)).numpy()

    def sample_pseudo(self, n: int, random_state: Optional[int] = None):
        """Draw ``n`` delegator samples with their teacher-assigned labels (in input units)."""
        check_is_fitted(self, "delegator_")
        if self.delegator_ is None:
            raise ValueError("no delegator has been trained yet")
        from .cil import make_pseudo_batch

        gen = torch.Generator().manual_seed(self.random_state if random_state is None else random_state)
        batch = make_pseudo_batch(self.delegator_, self.model_, n, gen)
        x = batch.images
        if self.standardize:
            x = x * self.std_ + self.mean_
        return x.numpy(), self.classes_[batch.labels.argmax(dim=1).numpy()]
