import numpy as np
import pytest

from zslgen import episodes as ep
from zslgen.datasets import make_toy_dataset


@pytest.fixture(scope="module")
def pool40():
    return make_toy_dataset(
        n_seen=40, n_unseen=5, attr_dim=6, feat_dim=8, per_class=12, noise_sigma=0.1, seed=7
    )


class TestSampleTask:
    def test_instance_counts(self, pool40):
        task = ep.sample_task(pool40, n_way=10, k_sup=5, k_qry=3, rng=ep.substream(0, 1, 0, 0))
        assert task.support.features.shape[0] == 50
        assert task.query.features.shape[0] == 30
        assert task.support.attribute_rows.shape == (10, pool40.attr_dim)

    def test_support_query_classes_disjoint(self, pool40):
        for i in range(50):
            task = ep.sample_task(pool40, 10, 5, 3, ep.substream(3, 1, 0, i))
            assert not set(task.support.class_ids) & set(task.query.class_ids)

    def test_no_image_repeats_within_task_set(self, pool40):
        task = ep.sample_task(pool40, 10, 5, 3, ep.substream(5, 1, 0, 0))
        # within one class block all drawn rows are distinct feature rows
        for ts in (task.support, task.query):
            for c in ts.class_ids:
                block = ts.features[ts.labels == c]
                assert len(np.unique(block, axis=0)) == len(block)

    def test_only_seen_classes_appear(self, pool40):
        for i in range(20):
            task = ep.sample_task(pool40, 10, 5, 3, ep.substream(11, 1, 0, i))
            used = set(task.support.class_ids) | set(task.query.class_ids)
            assert used <= set(pool40.split.seen)

    def test_insufficient_classes(self):
        tiny = make_toy_dataset(3, 1, 4, 4, 6, 0.1, seed=0)
        with pytest.raises(ep.SamplingError, match="eligible seen classes"):
            ep.sample_task(tiny, 2, 3, 2, ep.substream(0, 1, 0, 0))

    def test_short_classes_excluded_with_warning(self):
        ds = make_toy_dataset(6, 1, 4, 4, 3, 0.1, seed=0)
        with pytest.warns(UserWarning, match="excluding"):
            with pytest.raises(ep.SamplingError):
                ep.sample_task(ds, 3, 5, 2, ep.substream(0, 1, 0, 0))

    def test_deterministic_under_fixed_stream(self, pool40):
        t1 = ep.sample_task(pool40, 10, 5, 3, ep.substream(9, 1, 2, 3))
        t2 = ep.sample_task(pool40, 10, 5, 3, ep.substream(9, 1, 2, 3))
        assert np.array_equal(t1.support.class_ids, t2.support.class_ids)
        assert np.array_equal(t1.support.features, t2.support.features)
        assert np.array_equal(t1.query.features, t2.query.features)

    def test_class_coverage_uniformity(self, pool40):
        # 1000 tasks over a 40-class pool: every class appears and the
        # per-class appearance counts stay within 3 sigma of the
        # binomial(1000, 20/40) expectation.
        counts = np.zeros(pool40.n_classes)
        n_tasks = 1000
        for i in range(n_tasks):
            task = ep.sample_task(pool40, 10, 5, 3, ep.substream(13, 1, 0, i))
            for c in np.concatenate([task.support.class_ids, task.query.class_ids]):
                counts[c] += 1
        seen = np.array(sorted(pool40.split.seen))
        assert np.all(counts[seen] > 0)
        p = 20 / 40
        mu, sigma = n_tasks * p, np.sqrt(n_tasks * p * (1 - p))
        assert np.all(np.abs(counts[seen] - mu) <= 3 * sigma)


class TestSampleBatch:
    def test_default_shape(self, pool40):
        batch = ep.sample_batch(pool40, 10, 5, 3, tasks_per_batch=10, seed=1, epoch=0)
        assert len(batch) == 10
        total = sum(t.support.features.shape[0] + t.query.features.shape[0] for t in batch)
        assert total == 10 * 10 * (5 + 3)  # 800 instances

    def test_single_task_batch(self, pool40):
        batch = ep.sample_batch(pool40, 10, 5, 3, tasks_per_batch=1, seed=1, epoch=0)
        assert len(batch) == 1

    def test_replay_determinism(self, pool40):
        b1 = ep.sample_batch(pool40, 10, 5, 3, 10, seed=21, epoch=4)
        b2 = ep.sample_batch(pool40, 10, 5, 3, 10, seed=21, epoch=4)
        for t1, t2 in zip(b1, b2):
            assert np.array_equal(t1.support.features, t2.support.features)
            assert np.array_equal(t1.query.labels, t2.query.labels)

    def test_epochs_differ(self, pool40):
        b1 = ep.sample_batch(pool40, 10, 5, 3, 1, seed=21, epoch=0)
        b2 = ep.sample_batch(pool40, 10, 5, 3, 1, seed=21, epoch=1)
        assert not np.array_equal(b1[0].support.features, b2[0].support.features)


def test_instance_attribute_alignment(pool40):
    task = ep.sample_task(pool40, 4, 3, 2, ep.substream(2, 1, 0, 0))
    ts = task.support
    inst = ts.instance_attributes
    assert inst.shape == (12, pool40.attr_dim)
    for i, label in enumerate(ts.labels):
        expect = pool40.attributes.values[label]
        assert np.array_equal(inst[i], expect)
