import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from skd_cil.evalkit import (
    EvalSet,
    RunReport,
    accuracy_gap,
    centroid_alignment,
    class_centroids,
    class_coverage,
    export_embeddings,
    read_embeddings,
    top1_accuracy,
    top1_from_logits,
)
from skd_cil.networks import build_classifier


class Constant(torch.nn.Module):
    def __init__(self, k, c=0):
        super().__init__()
        self.k, self.c = k, c

    def forward(self, x):
        out = torch.zeros(x.shape[0], self.k)
        out[:, self.c] = 1
        return out


class Oracle(torch.nn.Module):
    """Reads the label out of the first pixel."""

    def __init__(self, k):
        super().__init__()
        self.k = k

    def forward(self, x):
        return torch.nn.functional.one_hot(x[:, 0].long(), self.k).float()


def balanced(k, per=7):
    y = torch.arange(k).repeat(per)
    return EvalSet(y.float().view(-1, 1), y)


class TestTop1:
    def test_constant_model(self):
        assert top1_accuracy(Constant(4, 2), balanced(4)) == pytest.approx(25.0)

    def test_oracle(self):
        assert top1_accuracy(Oracle(5), balanced(5)) == 100.0

    def test_empty(self):
        with pytest.raises(ValueError):
            top1_accuracy(Constant(3), EvalSet(torch.zeros(0, 1), torch.zeros(0, dtype=torch.long)))
        with pytest.raises(ValueError):
            top1_accuracy(Constant(3), [])

    def test_narrow_head(self):
        with pytest.raises(ValueError):
            top1_from_logits(torch.zeros(2, 3), torch.tensor([0, 5]))

    def test_tuple_input(self):
        x, y = torch.tensor([[0.0], [1.0]]), torch.tensor([0, 1])
        assert top1_accuracy(Oracle(2), (x, y)) == 100.0

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float32, (12, 5), elements=st.floats(-20, 20, width=32)), st.integers(-4, 4))
    def test_monotone_invariance(self, logits, k):
        # float32 inputs: scaling by 2**k and cubing in float64 keep every order relation exactly
        x = torch.tensor(logits)
        targets = torch.arange(12) % 5
        base = top1_from_logits(x, targets)
        assert top1_from_logits(x.double() * 2.0 ** k, targets) == base
        assert top1_from_logits(x.double() ** 3, targets) == base

    def test_gap_zero_with_self(self):
        m = build_classifier("desk-cnn", 3, (1, 8, 8), seed=0)
        data = EvalSet(torch.randn(10, 1, 8, 8), torch.arange(10) % 3)
        assert accuracy_gap(m, m, data) == 0.0

    def test_gap_sign(self):
        data = balanced(4)
        assert accuracy_gap(Oracle(4), Constant(4), data) == pytest.approx(75.0)
        assert accuracy_gap(Constant(4), Oracle(4), data) == pytest.approx(-75.0)

    def test_teacher_fits_train_subset(self, desk_teacher, digits_source):
        from skd_cil.evalkit import as_eval_set

        train = as_eval_set(digits_source.load_task_data(range(10), "train"), {i: i for i in range(10)})
        assert top1_accuracy(desk_teacher, train) >= 90


class TestCoverage:
    def test_counts(self):
        assert class_coverage(torch.tensor([0, 0, 3]), 4) == 0.5
        assert class_coverage(torch.eye(3), 3) == 1.0


class TestEmbeddings:
    def test_export_shape_and_tags(self, tmp_path):
        m = build_classifier("desk-cnn", 3, (1, 8, 8), seed=0)
        real = ("real", torch.randn(10, 1, 8, 8), torch.arange(10) % 3)
        fake = ("pseudo", torch.randn(6, 1, 8, 8), torch.eye(3)[torch.arange(6) % 3])
        rows = export_embeddings(m, [real, fake], count=5, path=tmp_path / "emb.csv")
        assert len(rows) == 10
        feats, labels, tags = read_embeddings(tmp_path / "emb.csv")
        assert feats.shape == (10, m.feature_dim)
        assert list(tags) == ["real"] * 5 + ["pseudo"] * 5
        assert labels[5:].tolist() == [0, 1, 2, 0, 1]
        header = (tmp_path / "emb.csv").read_text().splitlines()[0].split(",")
        assert header[0] == "feature_0" and header[-2:] == ["label", "source"]

    def test_count_positive(self):
        with pytest.raises(ValueError):
            export_embeddings(None, [], 0)


class TestCentroids:
    def test_alignment(self):
        real = torch.tensor([[1.0, 0.0], [2.0, 0.1], [0.0, 1.0], [0.1, 3.0]])
        real_y = torch.tensor([0, 0, 1, 1])
        pseudo = torch.tensor([[1.0, 0.2], [0.2, 1.0]])
        assert centroid_alignment(real, real_y, pseudo, torch.tensor([0, 1])) == {0: True, 1: True}
        assert centroid_alignment(real, real_y, pseudo, torch.tensor([1, 0])) == {0: False, 1: False}
        assert centroid_alignment(real, real_y, pseudo[:1], torch.tensor([0])) == {0: True, 1: False}

    def test_centroids_are_mean_normalized(self):
        c = class_centroids(torch.tensor([[3.0, 4.0], [0.0, 2.0]]), torch.tensor([0, 0]))
        assert torch.allclose(c[0], torch.tensor([0.3, 0.9], dtype=torch.float64))


class TestRunReport:
    def report(self):
        return RunReport(per_task_top1=[90.0, 70.5, 61.25], teacher_student_gap=[None, 0.5, 1.0],
                         config={"a": 1}, config_hash="abc", seed=3, name="x", timing={"total": 1.0})

    def test_average(self):
        r = self.report()
        assert abs(r.average_top1 - (90.0 + 70.5 + 61.25) / 3) <= 1e-9
        assert math.isnan(RunReport().average_top1)

    def test_validate(self):
        with pytest.raises(ValueError):
            RunReport(per_task_top1=[101.0]).validate()

    def test_roundtrip(self, tmp_path):
        r = self.report()
        back = RunReport.load(r.save(tmp_path / "r.json"))
        assert back.to_dict() == r.to_dict()

    def test_comparable_ignores_timing(self):
        a, b = self.report(), self.report()
        b.timing["total"] = 99.0
        assert a.comparable() == b.comparable()
        b.per_task_top1[1] += 1e-9
        assert a.comparable() != b.comparable()

    @pytest.mark.parametrize("content", ["{not json", "[]", '{"seed": 1}'])
    def test_malformed(self, tmp_path, content):
        p = tmp_path / "bad.json"
        p.write_text(content)
        with pytest.raises(ValueError):
            RunReport.load(p)

    def test_tampered_average(self, tmp_path):
        p = self.report().save(tmp_path / "r.json")
        d = json.loads(p.read_text())
        d["average_top1"] += 1
        p.write_text(json.dumps(d))
        with pytest.raises(ValueError):
            RunReport.load(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ValueError):
            RunReport.load(tmp_path / "none.json")
