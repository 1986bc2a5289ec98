import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zslgen import evaluation as ev
from zslgen import networks as nets
from zslgen.datasets import load_binary, make_toy_dataset
from zslgen.networks import ModulationVariant, NetworkConfig


@pytest.fixture(scope="module")
def toy():
    return make_toy_dataset(6, 2, 4, 6, 8, 0.05, seed=11)


@pytest.fixture(scope="module")
def state(toy):
    cfg = NetworkConfig(
        gen_hidden=(6,), critic_hidden=(6,), decoder_hidden=(5,),
        projector_hidden=(5,), modulator_hidden=(5,), embed_dim=4, z_dim=3,
    )
    return nets.init_model(cfg, toy.feat_dim, toy.attr_dim, sorted(toy.split.seen),
                           ModulationVariant(), seed=3)


class TestPerClassTop1:
    def test_all_correct(self):
        labels = np.array([0, 0, 1, 2])
        report = ev.per_class_top1(labels.copy(), labels, [0, 1, 2])
        assert report.mean_acc == 1.0
        assert all(v == 1.0 for v in report.per_class_acc.values())

    def test_per_class_vs_per_sample(self):
        # class 0: 1 of 2 correct; class 1: 1 of 1. mean over classes 0.75
        preds = np.array([0, 1, 1])
        labels = np.array([0, 0, 1])
        report = ev.per_class_top1(preds, labels, [0, 1])
        assert report.mean_acc == 0.75

    def test_matches_counting_oracle(self):
        rng = np.random.default_rng(0)
        labels = rng.integers(0, 5, size=200)
        preds = rng.integers(0, 5, size=200)
        report = ev.per_class_top1(preds, labels, range(5))
        for c in range(5):
            correct = total = 0
            for p, t in zip(preds, labels):
                if t == c:
                    total += 1
                    correct += int(p == c)
            assert report.per_class_acc[c] == correct / total

    def test_empty_class_rejected(self):
        with pytest.raises(ev.EvalError, match="no samples"):
            ev.per_class_top1(np.array([0]), np.array([0]), [0, 7])

    def test_sample_order_invariance(self):
        rng = np.random.default_rng(1)
        labels = rng.integers(0, 4, size=60)
        preds = rng.integers(0, 4, size=60)
        r1 = ev.per_class_top1(preds, labels, range(4))
        perm = rng.permutation(60)
        r2 = ev.per_class_top1(preds[perm], labels[perm], range(4))
        assert r1.per_class_acc == r2.per_class_acc


class TestHarmonic:
    def test_published_anchor_values(self):
        assert abs(ev.gzsl_harmonic(60.1, 69.2) - 64.3) <= 0.05
        assert abs(ev.gzsl_harmonic(56.0, 74.6) - 64.0) <= 0.05

    def test_zero_unseen(self):
        assert ev.gzsl_harmonic(0.0, 80.0) == 0.0
        assert ev.gzsl_harmonic(0.0, 0.0) == 0.0

    def test_equal_inputs(self):
        assert ev.gzsl_harmonic(50.0, 50.0) == 50.0

    @settings(max_examples=60)
    @given(st.floats(0.01, 100), st.floats(0.01, 100))
    def test_bounds_and_symmetry(self, u, s):
        h = ev.gzsl_harmonic(u, s)
        assert abs(h - ev.gzsl_harmonic(s, u)) < 1e-9
        assert h <= max(u, s) + 1e-12
        assert h <= (u + s) / 2 + 1e-12


class TestGzslReport:
    def test_percent_scaling_and_fields(self, toy):
        labels = toy.labels
        report = ev.gzsl_report(labels.copy(), labels, toy)
        assert report.seen_acc == 100.0 and report.unseen_acc == 100.0
        assert report.harmonic == 100.0


class TestRetrieval:
    def test_centroid_representative_is_perfect(self, toy, state, monkeypatch):
        # plant the representative exactly on a class centroid of a
        # well-separated dataset: precision@5 must be 1.0
        from zslgen import synthesis as syn

        ds = make_toy_dataset(4, 2, 4, 8, 10, noise_sigma=0.01, seed=5)

        def fake_synthesize(state_, c, attr, count, sigma, n_way, rng):
            centroid = ds.features.values[ds.labels == c].mean(axis=0)
            return syn.SyntheticSet(
                np.repeat(centroid.reshape(1, -1), count, axis=0),
                np.full(count, c, dtype=np.int64),
                np.ones(count),
            )

        monkeypatch.setattr(syn, "synthesize_for_class", fake_synthesize)
        report = ev.retrieval_eval(state, ds, ks=(5,), samples_per_class=10, n_way=2)
        assert all(v[5] == 1.0 for v in report.per_class.values())

    def test_full_pool_limit_is_class_prior(self, state, toy):
        n_unseen_imgs = sum((toy.labels == c).sum() for c in toy.split.unseen)
        report = ev.retrieval_eval(
            state, toy, ks=(n_unseen_imgs,), samples_per_class=5, n_way=2, sigma=1.0
        )
        for c in toy.split.unseen:
            prior = (toy.labels == c).sum() / n_unseen_imgs
            assert abs(report.per_class[c][n_unseen_imgs] - prior) < 1e-12

    def test_k_exceeding_pool_rejected(self, state, toy):
        with pytest.raises(ev.EvalError, match="pool"):
            ev.retrieval_eval(state, toy, ks=(10_000,), samples_per_class=5, n_way=2)

    def test_ranking_matches_sort_oracle(self):
        ds = make_toy_dataset(4, 2, 4, 8, 25, noise_sigma=0.3, seed=9)
        cfg = NetworkConfig(
            gen_hidden=(6,), critic_hidden=(6,), decoder_hidden=(5,),
            projector_hidden=(5,), modulator_hidden=(5,), embed_dim=4, z_dim=3,
        )
        state = nets.init_model(cfg, ds.feat_dim, ds.attr_dim, sorted(ds.split.seen),
                                ModulationVariant(), seed=3)
        report = ev.retrieval_eval(state, ds, ks=(5, 10), samples_per_class=20, n_way=2, seed=3)
        # recompute one class by brute force
        from zslgen.episodes import STREAM_SYNTHESIS, substream
        from zslgen.synthesis import synthesize_for_class

        c = sorted(ds.split.unseen)[0]
        synth = synthesize_for_class(
            state, c, ds.attributes.values[c], 20, 1.0, 10, substream(3, STREAM_SYNTHESIS, c)
        )
        rep = synth.features.mean(axis=0)
        pool_mask = np.isin(ds.labels, sorted(ds.split.unseen))
        pool = ds.features.values[pool_mask]
        pool_labels = ds.labels[pool_mask]
        pairs = sorted(
            range(len(pool)), key=lambda i: (np.linalg.norm(pool[i] - rep), i)
        )
        for k in (5, 10):
            topk = [pool_labels[i] for i in pairs[:k]]
            assert report.per_class[c][k] == np.mean([t == c for t in topk])

    def test_unseen_pool_excludes_seen_images(self, state, toy):
        report = ev.retrieval_eval(state, toy, ks=(5,), samples_per_class=5, n_way=2, pool="unseen")
        assert set(report.per_class) == set(toy.split.unseen)


class TestExport:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(2)
        feats = rng.normal(size=(12, 6)).astype(np.float32).astype(np.float64)
        labels = rng.integers(0, 3, size=12)
        fp, lp = tmp_path / "f.zslf", tmp_path / "l.zsll"
        ev.export_features(feats, labels, fp, lp)
        assert np.array_equal(load_binary(fp).values, feats)
        assert np.array_equal(load_binary(lp), labels)

    def test_row_count_alignment_enforced(self, tmp_path):
        with pytest.raises(ev.EvalError):
            ev.export_features(np.ones((3, 2)), np.ones(4), tmp_path / "f", tmp_path / "l")

    def test_empty_rejected(self, tmp_path):
        with pytest.raises(ev.EvalError):
            ev.export_features(np.ones((0, 2)), np.ones(0), tmp_path / "f", tmp_path / "l")


def test_format_report_contains_summary_block():
    report = ev.EvalReport(per_class_acc={0: 50.0, 1: 100.0}, mean_acc=75.0)
    text = ev.format_report(report, extra={"checkpoint_sha256": "abc"})
    assert "[summary]" in text
    assert "mean_acc = 75.00" in text
    assert "checkpoint_sha256 = abc" in text
