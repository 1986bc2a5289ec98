import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zslgen import autodiff as ad
from zslgen import networks as nets
from zslgen.autodiff import Tape, Tensor, backward, grad_check
from zslgen.episodes import substream
from zslgen.networks import ModulationVariant

TINY = nets.NetworkConfig(
    gen_hidden=(6,),
    critic_hidden=(6,),
    decoder_hidden=(5,),
    projector_hidden=(5,),
    modulator_hidden=(5,),
    embed_dim=4,
    z_dim=3,
)


@pytest.fixture
def state():
    return nets.init_model(
        TINY, feat_dim=5, attr_dim=3, seen_classes=(0, 1, 2, 3),
        variant=ModulationVariant(), seed=0,
    )


def modulation_for(state, attr_rows):
    e = nets.project_attributes(state, attr_rows)
    return nets.compute_modulation(state, e)


class TestModulationVariant:
    def test_parse_default(self):
        v = ModulationVariant.parse("base,+,sigmoid,bias")
        assert v == ModulationVariant(base=True, op="+", activation="sigmoid", bias=True)

    def test_roundtrip(self):
        for text in ("base,-,softmax,nobias", "nobase,+,none,bias"):
            assert ModulationVariant.parse(text).encode() == text

    def test_bad_fields(self):
        with pytest.raises(ValueError):
            ModulationVariant.parse("base,+,sigmoid")
        with pytest.raises(ValueError):
            ModulationVariant.parse("base,*,sigmoid,bias")


class TestModulate:
    def test_default_formula_fixed_point(self):
        # sigmoid(0) = 0.5 so gain is 1.5 and shift 0.5
        out = nets.modulate(Tensor([[1.0, 2.0]]), Tensor([[0.0, 0.0]]), Tensor([[0.0, 0.0]]), ModulationVariant())
        np.testing.assert_allclose(out.values, [[2.0, 3.5]], atol=1e-15)

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(0)
        variant = ModulationVariant()
        for _ in range(200):
            d = rng.integers(1, 9)
            o = rng.normal(size=(4, d))
            w = rng.normal(size=(1, d))
            b = rng.normal(size=(1, d))
            out = nets.modulate(Tensor(o), Tensor(w), Tensor(b), variant).values
            # independent scalar-loop evaluation
            expect = np.empty_like(o)
            for i in range(o.shape[0]):
                for j in range(d):
                    sw = 1.0 / (1.0 + np.exp(-w[0, j]))
                    sb = 1.0 / (1.0 + np.exp(-b[0, j]))
                    expect[i, j] = (1.0 + sw) * o[i, j] + sb
            assert np.abs(out - expect).max() < 1e-12

    def test_identity_limit(self):
        rng = np.random.default_rng(1)
        o = rng.normal(size=(6, 7))
        w = np.full((1, 7), -40.0)
        out = nets.modulate(Tensor(o), Tensor(w), Tensor(w), ModulationVariant())
        assert np.abs(out.values - o).max() < 1e-8

    def test_variant_grid(self):
        o = np.array([[2.0, -1.0]])
        w = np.array([[0.0, 0.0]])
        b = np.array([[0.0, 0.0]])
        sw = 0.5
        cases = {
            "nobase,+,none,nobias": o * w,                      # bare w*o baseline
            "nobase,+,sigmoid,nobias": o * sw,
            "base,+,sigmoid,nobias": o * (1 + sw),
            "base,-,sigmoid,nobias": o * (1 - sw),
            "base,+,softmax,nobias": o * 1.5,                   # softmax of equal entries
            "base,+,sigmoid,bias": o * 1.5 + 0.5,
        }
        for text, expect in cases.items():
            out = nets.modulate(Tensor(o), Tensor(w), Tensor(b), ModulationVariant.parse(text))
            np.testing.assert_allclose(out.values, expect, atol=1e-12, err_msg=text)

    @settings(max_examples=50)
    @given(st.integers(0, 2**31 - 1))
    def test_default_gain_and_shift_bounds(self, seed):
        rng = np.random.default_rng(seed)
        w = rng.normal(scale=3.0, size=(1, 5))
        b = rng.normal(scale=3.0, size=(1, 5))
        o = np.ones((1, 5))
        with_bias = nets.modulate(Tensor(o), Tensor(w), Tensor(b), ModulationVariant()).values
        no_bias = nets.modulate(
            Tensor(o), Tensor(w), Tensor(b), ModulationVariant(bias=False)
        ).values
        gain, shift = no_bias, with_bias - no_bias
        assert np.all(gain > 1.0) and np.all(gain < 2.0)
        assert np.all(shift > 0.0) and np.all(shift < 1.0)


class TestProjector:
    def test_replication_invariance(self, state):
        a = np.random.default_rng(2).uniform(size=(1, 3))
        single = nets.project_attributes(state, a).values
        for n in (5, 10):
            replicated = nets.project_attributes(state, np.repeat(a, n, axis=0)).values
            assert np.array_equal(single, replicated)

    def test_permutation_invariance(self, state):
        rng = np.random.default_rng(3)
        rows = rng.uniform(size=(6, 3))
        e1 = nets.project_attributes(state, rows).values
        e2 = nets.project_attributes(state, rows[::-1].copy()).values
        np.testing.assert_allclose(e1, e2, atol=1e-12)

    def test_distinct_tasks_distinct_embeddings(self, state):
        rng = np.random.default_rng(4)
        e1 = nets.project_attributes(state, rng.uniform(size=(4, 3))).values
        e2 = nets.project_attributes(state, rng.uniform(size=(4, 3))).values
        assert not np.allclose(e1, e2)

    def test_dim_mismatch(self, state):
        with pytest.raises(ad.DimensionError):
            nets.project_attributes(state, np.ones((2, 7)))


class TestModulatorHeads:
    def test_shapes_per_layer(self, state):
        e = nets.project_attributes(state, np.ones((1, 3)))
        mods = nets.compute_modulation(state, e)
        widths = nets.modulated_widths(state, state.z_dim + state.attr_dim, state.feat_dim, (6,))
        assert len(mods) == len(widths)
        for (w, b), width in zip(mods, widths):
            assert w.shape == (1, width) and b.shape == (1, width)

    def test_deterministic(self, state):
        e = nets.project_attributes(state, np.ones((1, 3)))
        m1 = nets.compute_modulation(state, e)
        m2 = nets.compute_modulation(state, e)
        for (w1, b1), (w2, b2) in zip(m1, m2):
            assert np.array_equal(w1.values, w2.values)

    def test_smoothness_in_embedding(self, state):
        e = nets.project_attributes(state, np.ones((1, 3)))
        bumped = Tensor(e.values + 1e-6)
        m1 = nets.compute_modulation(state, e)
        m2 = nets.compute_modulation(state, bumped)
        delta = max(np.abs(w2.values - w1.values).max() for (w1, _), (w2, _) in zip(m1, m2))
        assert delta < 1e-3


class TestGeneratorForward:
    def test_output_shape(self, state):
        rng = np.random.default_rng(5)
        mods = modulation_for(state, rng.uniform(size=(2, 3)))
        out = nets.generate(state, rng.uniform(size=(7, 3)), rng.normal(size=(7, 3)), mods, train=False)
        assert out.shape == (7, 5)

    def test_identity_modulation_equals_baseline(self, state):
        rng = np.random.default_rng(6)
        attrs = rng.uniform(size=(4, 3))
        z = rng.normal(size=(4, 3))
        widths = nets.modulated_widths(state, 6, 5, (6,))
        frozen = [
            (Tensor(np.full((1, w), -40.0)), Tensor(np.full((1, w), -40.0)))
            for w in widths
        ]
        modded = nets.generate(state, attrs, z, frozen, train=False).values
        baseline = nets.generate(state, attrs, z, None, train=False).values
        assert np.abs(modded - baseline).max() < 1e-8

    def test_eval_mode_deterministic(self, state):
        rng = np.random.default_rng(7)
        attrs, z = rng.uniform(size=(3, 3)), rng.normal(size=(3, 3))
        mods = modulation_for(state, attrs)
        o1 = nets.generate(state, attrs, z, mods, train=False).values
        o2 = nets.generate(state, attrs, z, mods, train=False).values
        assert np.array_equal(o1, o2)


class TestCriticAndHeads:
    def test_critic_shape(self, state):
        rng = np.random.default_rng(8)
        out = nets.discriminate(state, rng.normal(size=(6, 5)), rng.uniform(size=(6, 3)), train=False)
        assert out.shape == (6, 1)

    def test_zero_weight_critic_scores_zero(self, state):
        for layer in state.critic.layers:
            layer.weight.values[:] = 0.0
            layer.bias.values[:] = 0.0
        out = nets.discriminate(state, np.ones((4, 5)), np.ones((4, 3)), train=False)
        assert np.all(out.values == 0.0)

    def test_classifier_shape_and_uniform_ce(self, state):
        rng = np.random.default_rng(9)
        logits = nets.classify_aux(state, rng.normal(size=(5, 5)))
        assert logits.shape == (5, 4)
        for layer in state.classifier.layers:
            layer.weight.values[:] = 0.0
            layer.bias.values[:] = 0.0
        logits = nets.classify_aux(state, rng.normal(size=(5, 5)))
        ce = ad.softmax_cross_entropy(logits, [0, 1, 2, 3, 0])
        assert abs(ce.item() - np.log(4)) < 1e-12

    def test_decoder_shape(self, state):
        rng = np.random.default_rng(10)
        out = nets.reconstruct_attribute(state, rng.normal(size=(6, 5)), train=False)
        assert out.shape == (6, 3)


class TestGradChecks:
    """Finite-difference checks through full compositions."""

    def test_full_path_projector_to_critic(self, state):
        rng = np.random.default_rng(11)
        attrs = rng.uniform(size=(2, 3))
        inst_attrs = np.repeat(attrs, 2, axis=0)
        z = rng.normal(size=(4, 3))

        def build():
            e = nets.project_attributes(state, attrs)
            mods = nets.compute_modulation(state, e)
            fake = nets.generate(state, inst_attrs, z, mods, train=True)
            score = nets.discriminate(state, fake, inst_attrs, train=False)
            return ad.reduce_mean(score)

        params = nets.all_params(state)
        report = grad_check(build, params, tolerance=1e-5)
        assert report.passed, report

    def test_generator_to_decoder_path(self, state):
        rng = np.random.default_rng(12)
        attrs = rng.uniform(size=(8, 3))
        z = rng.normal(size=(8, 3))

        def build():
            mods = modulation_for(state, attrs)
            fake = nets.generate(state, attrs, z, mods, train=True)
            recon = nets.reconstruct_attribute(state, fake, train=False)
            diff = ad.sub(Tensor(attrs), recon)
            return ad.scalar_mul(ad.squared_l2(diff), 1.0 / 8)

        report = grad_check(build, nets.all_params(state), tolerance=1e-5)
        assert report.passed, report

    def test_critic_gradient_wrt_features(self, state):
        rng = np.random.default_rng(13)
        x = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        attrs = rng.uniform(size=(4, 3))

        def build():
            return ad.reduce_mean(nets.discriminate(state, x, attrs, train=False))

        report = grad_check(build, [x], tolerance=1e-5)
        assert report.passed, report


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, state, tmp_path):
        rng = np.random.default_rng(14)
        # make running stats nontrivial
        state.generator.norms[0].running_mean[:] = rng.normal(size=(1, 6))
        state.generator.norms[0].running_var[:] = rng.uniform(0.5, 2.0, size=(1, 6))
        path = tmp_path / "model.ckpt"
        nets.save_checkpoint(state, path, extra={"epoch": "12", "config_hash": "cafe"})
        loaded, extra = nets.load_checkpoint(path)
        assert extra == {"epoch": "12", "config_hash": "cafe"}
        for (n1, t1), (n2, t2) in zip(nets.named_parameters(state), nets.named_parameters(loaded)):
            assert n1 == n2
            assert np.array_equal(t1.values, t2.values), n1
        for (n1, b1), (n2, b2) in zip(nets.named_buffers(state), nets.named_buffers(loaded)):
            assert np.array_equal(b1, b2), n1
        assert loaded.seen_classes == state.seen_classes
        assert loaded.variant == state.variant

    def test_forward_identical_after_reload(self, state, tmp_path):
        rng = np.random.default_rng(15)
        path = tmp_path / "model.ckpt"
        nets.save_checkpoint(state, path)
        loaded, _ = nets.load_checkpoint(path)
        attrs, z = rng.uniform(size=(3, 3)), rng.normal(size=(3, 3))
        mods1 = modulation_for(state, attrs)
        mods2 = modulation_for(loaded, attrs)
        o1 = nets.generate(state, attrs, z, mods1, train=False).values
        o2 = nets.generate(loaded, attrs, z, mods2, train=False).values
        assert np.array_equal(o1, o2)

    def test_corrupt_block_rejected(self, state, tmp_path):
        path = tmp_path / "model.ckpt"
        nets.save_checkpoint(state, path)
        raw = bytearray(path.read_bytes())
        idx = raw.find(b"\nEND\n") + 5
        raw[idx:idx + 4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(nets.CheckpointError, match="bad block"):
            nets.load_checkpoint(path)


def test_clone_state_detaches_parameters(state):
    clone = nets.clone_state(state)
    clone.generator.layers[0].weight.values[0, 0] += 123.0
    assert state.generator.layers[0].weight.values[0, 0] != clone.generator.layers[0].weight.values[0, 0]
    # running buffers stay shared on purpose
    assert clone.generator.norms[0].running_mean is state.generator.norms[0].running_mean


def test_seen_index_mapping(state):
    idx = state.seen_index(np.array([3, 0, 2]))
    assert idx.tolist() == [3, 0, 2]
    with pytest.raises(ad.DimensionError, match="not a seen class"):
        state.seen_index(np.array([9]))
