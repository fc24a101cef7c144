import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from skd_cil.data import (
    CIFAR100,
    DIGITS,
    DataSource,
    DatasetError,
    DatasetSpec,
    TaskData,
    build_task_sequence,
    concat_task_data,
    get_spec,
    load_task_data,
)


class TestTaskSequence:
    def test_hundred_classes_ten_tasks(self):
        seq = build_task_sequence(CIFAR100, 10, seed=1993)
        assert len(seq.base_classes) == 50
        assert [len(g) for g in seq.incremental_tasks] == [5] * 10

    def test_hundred_classes_five_tasks(self):
        seq = build_task_sequence(CIFAR100, 5, seed=1993)
        assert len(seq.base_classes) == 50
        assert [len(g) for g in seq.incremental_tasks] == [10] * 5

    def test_deterministic(self):
        assert build_task_sequence(CIFAR100, 5, 3) == build_task_sequence(CIFAR100, 5, 3)
        assert build_task_sequence(CIFAR100, 5, 3).class_order != build_task_sequence(CIFAR100, 5, 4).class_order

    def test_uneven_split(self):
        seq = build_task_sequence(DIGITS, 2, seed=0)
        assert len(seq.base_classes) == 5
        assert sorted(len(g) for g in seq.incremental_tasks) == [2, 3]

    def test_zero_tasks_uses_every_class(self):
        seq = build_task_sequence(DIGITS, 0, seed=0)
        assert sorted(seq.base_classes) == list(range(10))
        assert seq.num_incremental == 0

    def test_too_many_tasks(self):
        with pytest.raises(ValueError):
            build_task_sequence(DIGITS, 6, seed=0)

    def test_invalid(self):
        with pytest.raises(ValueError):
            build_task_sequence(DIGITS, -1, seed=0)
        with pytest.raises(ValueError):
            build_task_sequence(DatasetSpec("one", (1, 8, 8), 1), 0, seed=0)

    def test_seen_classes_and_index(self):
        seq = build_task_sequence(DIGITS, 2, seed=0)
        assert seq.seen_classes(0) == seq.base_classes
        assert seq.seen_classes(2) == seq.class_order
        idx = seq.output_index()
        assert [idx[c] for c in seq.seen_classes(1)] == list(range(len(seq.seen_classes(1))))

    @settings(max_examples=200, deadline=None)
    @given(st.integers(2, 300), st.data(), st.integers(0, 2**31 - 1))
    def test_disjoint_and_covering(self, k, data, seed):
        rest = k - (k + 1) // 2
        n = data.draw(st.integers(0, rest))
        seq = build_task_sequence(DatasetSpec("x", (1, 8, 8), k), n, seed)
        groups = seq.groups
        flat = [c for g in groups for c in g]
        assert sorted(flat) == list(range(k))
        assert len(flat) == len(set(flat))
        if n:
            sizes = [len(g) for g in seq.incremental_tasks]
            assert max(sizes) - min(sizes) <= 1
            assert len(seq.base_classes) == (k + 1) // 2


class TestDigitsSource:
    def test_split_sizes(self, digits_source):
        tr = digits_source.load_task_data(range(10), "train")
        va = digits_source.load_task_data(range(10), "val")
        assert len(tr) + len(va) == 1797
        assert tr.images.shape[1:] == DIGITS.input_shape

    def test_normalized_mean_near_zero(self, digits_source):
        tr = digits_source.load_task_data(range(10), "train")
        total = torch.cat([x for x, _, _ in tr.batches(128, epoch=0)])
        assert abs(total.mean().item()) <= 0.05
        assert abs(total.std().item() - 1) <= 0.05

    def test_ids_within_group(self, digits_source):
        data = digits_source.load_task_data([3, 7], "train")
        for x, onehot, ids in data.batches(32, epoch=1):
            assert set(ids.tolist()) <= {3, 7}
            assert onehot.shape[1] == 2
            assert torch.equal(onehot.argmax(1), (ids == 7).long())

    def test_val_order_stable(self, digits_source):
        a = digits_source.load_task_data([1, 2], "val")
        b = digits_source.load_task_data([1, 2], "val")
        ids_a = torch.cat([i for _, _, i in a.batches(16, epoch=0)])
        ids_b = torch.cat([i for _, _, i in b.batches(16, epoch=5)])
        assert torch.equal(ids_a, ids_b)

    def test_train_shuffle_per_epoch(self, digits_source):
        data = digits_source.load_task_data([1, 2], "train")
        e0 = torch.cat([i for _, _, i in data.batches(16, epoch=0)])
        again = torch.cat([i for _, _, i in data.batches(16, epoch=0)])
        e1 = torch.cat([i for _, _, i in data.batches(16, epoch=1)])
        assert torch.equal(e0, again)
        assert not torch.equal(e0, e1)
        assert sorted(e0.tolist()) == sorted(e1.tolist())

    def test_drop_last(self, digits_source):
        data = digits_source.load_task_data([0], "train")
        sizes = [len(x) for x, _, _ in data.batches(50, drop_last=True)]
        assert all(s == 50 for s in sizes)

    def test_access_log(self):
        src = DataSource(DIGITS)
        src.context = "task1/train"
        load_task_data(src, [4], "train")
        rec = src.access_log[-1]
        assert (rec.context, rec.split, rec.classes) == ("task1/train", "train", (4,))
        assert rec.sample_count > 0

    def test_bad_requests(self, digits_source):
        with pytest.raises(ValueError):
            digits_source.load_task_data([10], "train")
        with pytest.raises(ValueError):
            digits_source.load_task_data([0], "test")

    def test_concat(self, digits_source):
        a = digits_source.load_task_data([0], "val")
        b = digits_source.load_task_data([5], "val")
        both = concat_task_data([a, b])
        assert both.group == (0, 5)
        assert len(both) == len(a) + len(b)


def _write_png(path, value, size=(10, 10)):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.full(size + (3,), value, dtype=np.uint8)).save(path)


class TestFolderSource:
    @pytest.fixture
    def root(self, tmp_path):
        for split, n in (("train", 3), ("val", 1)):
            for cls, value in (("ant", 10), ("bee", 200)):
                for i in range(n):
                    _write_png(tmp_path / split / cls / f"{i}.png", value + i)
        return tmp_path

    def spec(self, root):
        return DatasetSpec("toy", (3, 8, 8), 2, root=str(root))

    def test_reads_and_caches_index(self, root):
        src = DataSource(self.spec(root))
        data = src.load_task_data([1], "train")
        assert data.images.shape == (3, 3, 8, 8)
        assert data.class_ids.tolist() == [1, 1, 1]
        index = json.loads((root / ".skd_index.json").read_text())
        assert index["classes"] == ["ant", "bee"]
        assert "mean" in index

    def test_computed_normalization(self, root):
        src = DataSource(self.spec(root))
        tr = src.load_task_data([0, 1], "train")
        assert abs(tr.images.mean().item()) < 1e-5

    def test_missing_root(self, tmp_path):
        with pytest.raises(DatasetError):
            DataSource(DatasetSpec("toy", (3, 8, 8), 2, root=str(tmp_path / "nope"))).load_task_data([0], "train")
        with pytest.raises(DatasetError):
            DataSource(DatasetSpec("toy", (3, 8, 8), 2)).load_task_data([0], "train")

    def test_missing_file(self, root):
        src = DataSource(self.spec(root))
        src.load_task_data([0], "train")
        (root / "val" / "ant" / "0.png").unlink()
        with pytest.raises(DatasetError):
            src.load_task_data([0], "val")

    def test_corrupted_record(self, root):
        src = DataSource(self.spec(root))
        src.load_task_data([0], "train")
        (root / "train" / "bee" / "1.png").write_bytes(b"not an image")
        with pytest.raises(DatasetError):
            src.load_task_data([1], "train")


class TestSpecs:
    def test_registry(self):
        assert get_spec("cifar100").input_shape == (3, 32, 32)
        assert get_spec("imagenet-subset").input_shape == (3, 224, 224)
        assert get_spec("flowers102", root="/data").root == "/data"
        with pytest.raises(KeyError):
            get_spec("mnist")

    def test_validation(self):
        with pytest.raises(ValueError):
            DatasetSpec("x", (8, 8), 2)
        with pytest.raises(ValueError):
            DatasetSpec("x", (3, 8, 8), 2, mean=(0.5,))

    def test_taskdata_local_targets(self):
        td = TaskData(torch.zeros(3, 1, 4, 4), torch.tensor([9, 2, 9]), [9, 2], "val")
        assert td.local_targets().tolist() == [0, 1, 0]
