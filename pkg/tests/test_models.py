import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pemma import autograd as ag
from pemma.autograd import Tensor
from pemma.layers import ConfigError
from pemma.lora import AdapterStateError, count_params, count_trainable, lora_param_formula
from pemma.models import (
    InputError,
    LateFusionPair,
    ModelConfig,
    SegModel,
    build_early_fusion,
    build_pemma,
    combine_skips,
    infer_with_missing,
    late_fusion_combine,
    predict_proba,
    route_tokens,
)

from conftest import volume


def prob_field(rng, shape=(3, 4, 4, 4)):
    e = rng.uniform(0.01, 1.0, size=shape).astype(np.float32)
    return e / e.sum(0, keepdims=True)


def nondegenerate(model, rng, scale=0.05):
    for a in model.adapters.adapters.values():
        a.B.data[...] = rng.normal(0, scale, size=a.B.shape)
    w = model.skip_pet.conv2.weight
    w.data[...] = rng.normal(0, scale, size=w.shape)
    return model


class TestModelConfig:
    def test_defaults(self):
        c = ModelConfig()
        assert (c.depth, c.dim, c.heads, c.patch, c.size) == (12, 32, 4, 4, 16)
        assert c.n_tokens == 64 and c.tap_blocks == [3, 6, 9, 12]

    @pytest.mark.parametrize("kw", [{"size": 10}, {"heads": 5}, {"patch": 2}, {"depth": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            ModelConfig(**kw)


class TestRouting:
    def ids(self, n, strategy):
        tokens = Tensor(np.arange(2 * n, dtype=np.float32)[:, None])
        return route_tokens(tokens, strategy).data[:, 0].astype(int).tolist()

    def test_ct_only(self):
        assert self.ids(4, "ct_only") == [0, 1, 2, 3]

    def test_pet_only(self):
        assert self.ids(4, "pet_only") == [4, 5, 6, 7]

    def test_mix(self):
        assert self.ids(4, "mix") == [0, 5, 2, 7]

    def test_odd_count(self):
        with pytest.raises(ag.ShapeError):
            route_tokens(Tensor(np.zeros((5, 2))), "ct_only")

    def test_unknown(self):
        with pytest.raises(ConfigError):
            route_tokens(Tensor(np.zeros((4, 2))), "random")


class TestCombineSkips:
    def test_beta_zero(self, rng):
        z_c, z_p = Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(2, 3)))
        np.testing.assert_array_equal(combine_skips(z_c, z_p, 0.0).data, z_c.data)

    def test_zero_pet(self, rng):
        z_c = Tensor(rng.normal(size=(2, 3)))
        np.testing.assert_array_equal(combine_skips(z_c, Tensor(np.zeros((2, 3))), 0.7).data, z_c.data)

    def test_substitution(self):
        assert combine_skips(Tensor([1.0]), Tensor([2.0]), 0.5).data[0] == 2.0

    def test_shape_mismatch(self):
        with pytest.raises(ag.ShapeError):
            combine_skips(Tensor(np.zeros(2)), Tensor(np.zeros(3)), 1.0)


class TestLateFusionCombine:
    def test_endpoints_bit_exact(self, rng):
        m_c, m_p = prob_field(rng), prob_field(rng)
        np.testing.assert_array_equal(late_fusion_combine(m_c, m_p, 1.0), m_c)
        np.testing.assert_array_equal(late_fusion_combine(m_c, m_p, 0.0), m_p)

    def test_half(self):
        assert late_fusion_combine(np.array([0.2]), np.array([0.6]), 0.5)[0] == pytest.approx(0.4)

    @settings(max_examples=60, deadline=None)
    @given(st.floats(0.0, 1.0), st.integers(0, 1000))
    def test_valid_probability_field(self, w_c, seed):
        r = np.random.default_rng(seed)
        out = late_fusion_combine(prob_field(r), prob_field(r), w_c)
        assert (out >= 0).all()
        np.testing.assert_allclose(out.sum(0), 1.0, atol=1e-6)

    @pytest.mark.parametrize("w", [-0.1, 1.5])
    def test_out_of_range(self, w, rng):
        with pytest.raises(ConfigError):
            late_fusion_combine(prob_field(rng), prob_field(rng), w)


class TestEarlyFusion:
    def test_zero_init_reproduces_ct_embedding(self, tiny_ct, rng):
        model = build_early_fusion(tiny_ct, "zero", rng)
        x_c, x_p = volume(rng), volume(rng)
        fused = model.pe(ag.concat([Tensor(x_c), Tensor(x_p)], axis=0)).data
        np.testing.assert_array_equal(fused, tiny_ct.pe(Tensor(x_c)).data)
        skip = model.skip.conv1(ag.concat([Tensor(x_c), Tensor(x_p)], axis=0)).data
        np.testing.assert_allclose(skip, tiny_ct.skip.conv1(Tensor(x_c)).data, atol=1e-6)

    def test_cross_modal_copies_ct_slice(self, tiny_ct, rng):
        model = build_early_fusion(tiny_ct, "cross_modal", rng)
        p3 = 4**3
        np.testing.assert_array_equal(model.pe.proj.data[p3:], model.pe.proj.data[:p3])
        w = model.skip.conv1.weight.data
        np.testing.assert_array_equal(w[:, 1], w[:, 0])

    def test_random_init_differs(self, tiny_ct, rng):
        model = build_early_fusion(tiny_ct, "random", rng)
        assert not np.array_equal(model.pe.proj.data[64:], model.pe.proj.data[:64])

    @pytest.mark.parametrize("init", ["random", "zero", "cross_modal"])
    def test_added_params_exact(self, init, tiny_ct):
        c = tiny_ct.config
        model = build_early_fusion(tiny_ct, init)
        added = count_params(model)["total"] - count_params(tiny_ct)["total"]
        assert added == c.patch**3 * c.dim + 27 * c.features
        assert count_trainable(model)["total"] == count_params(model)["total"]

    def test_pretrained_untouched(self, tiny_ct):
        before = {n: p.data.copy() for n, p in tiny_ct.named_parameters()}
        build_early_fusion(tiny_ct, "random")
        for n, p in tiny_ct.named_parameters():
            np.testing.assert_array_equal(p.data, before[n])

    def test_unknown_init(self, tiny_ct):
        with pytest.raises(ConfigError):
            build_early_fusion(tiny_ct, "xavier")

    def test_rejects_non_ct_base(self, tiny_config):
        with pytest.raises(ConfigError):
            build_early_fusion(SegModel(tiny_config, "unimodal_pet"))


class TestLateFusionPair:
    def test_param_total(self, tiny_config):
        ct, pet = SegModel(tiny_config, "unimodal_ct"), SegModel(tiny_config, "unimodal_pet")
        pair = LateFusionPair(ct, pet, 0.5)
        assert count_params(pair)["total"] == 2 * count_params(ct)["total"]
        ids = {id(p) for p in ct.parameters()}
        assert not ids & {id(p) for p in pet.parameters()}

    def test_pet_only_inference(self, tiny_config, rng):
        pair = LateFusionPair(SegModel(tiny_config, "unimodal_ct"), SegModel(tiny_config, "unimodal_pet"), 0.3)
        x_p = volume(rng, low=0.0)
        out = pair.predict_proba(None, x_p)
        pet = predict_proba(pair.pet_model, None, x_p)
        expect = 0.3 * (1 / 3) + 0.7 * pet
        np.testing.assert_allclose(out, expect / expect.sum(0), atol=1e-6)
        np.testing.assert_allclose(out.sum(0), 1.0, atol=1e-6)

    def test_wrong_topologies(self, tiny_config):
        with pytest.raises(ConfigError):
            LateFusionPair(SegModel(tiny_config, "unimodal_ct"), SegModel(tiny_config, "unimodal_ct"))


class TestBuildPemma:
    def test_groups_and_trainable(self, tiny_ct):
        model = build_pemma(tiny_ct, rank=2)
        trainable = {p.group for p in model.parameters() if p.trainable}
        assert trainable == {"pet_pe", "lora", "pet_sk"}
        assert all(not p.trainable for p in model.parameters() if p.group == "base")

    def test_counts(self, tiny_ct):
        c = tiny_ct.config
        model = build_pemma(tiny_ct, rank=2)
        counts = count_params(model)
        assert counts["base"] == count_params(tiny_ct)["total"]
        assert counts["lora"] == lora_param_formula(c.depth, 2, c.dim)
        assert counts["pet_pe"] == 64 * c.dim + c.dim
        f = c.features
        assert counts["pet_sk"] == (27 * f + f) + (27 * f * f + f)  # conv1 1->f, conv2 f->f, with biases
        assert count_trainable(model)["total"] == counts["pet_pe"] + counts["lora"] + counts["pet_sk"]

    def test_default_alpha(self, tiny_ct):
        assert build_pemma(tiny_ct, rank=2).adapters.alpha == 4.0

    def test_beta_insensitive_at_birth(self, tiny_ct, rng):
        model = build_pemma(tiny_ct, rank=2, rng=rng)
        x_c, x_p = volume(rng), volume(rng, low=0.0)
        with ag.no_grad():
            model.beta = 0.0
            a = model(x_c=x_c, x_p=x_p).data
            model.beta = 3.0
            b = model(x_c=x_c, x_p=x_p).data
        np.testing.assert_array_equal(a, b)

    def test_rebuild_rejected(self, tiny_ct):
        model = build_pemma(tiny_ct, rank=2)
        with pytest.raises(AdapterStateError):
            build_pemma(model, rank=2)

    def test_pretrained_untouched(self, tiny_ct):
        build_pemma(tiny_ct, rank=2)
        assert tiny_ct.adapters is None and tiny_ct.pe_pet is None
        assert all(p.trainable for p in tiny_ct.parameters())


class TestForwardPemma:
    @pytest.mark.parametrize("routing", ["ct_only", "pet_only", "mix"])
    def test_token_counts(self, routing, tiny_ct, rng):
        model = build_pemma(tiny_ct, rank=2, routing=routing)
        with ag.no_grad():
            out = model(x_c=volume(rng), x_p=volume(rng, low=0.0))
        n = model.config.n_tokens
        assert out.shape == (3, 8, 8, 8)
        assert model.trace["block_tokens"] == [2 * n] * model.config.depth
        assert model.trace["tap_tokens"] == [n] * 4

    def test_distillation_through_attention(self, tiny_ct, rng):
        model = nondegenerate(build_pemma(tiny_ct, rank=2, beta=0.0, rng=rng), rng)
        x_c, x_p = volume(rng), volume(rng, low=0.0)
        with ag.no_grad():
            a = model(x_c=x_c, x_p=x_p).data
            b = model(x_c=x_c, x_p=x_p + 1e-2).data
        assert np.abs(a - b).max() > 1e-6

    def test_stays_float32(self, tiny_ct, rng):
        model = build_pemma(tiny_ct, rank=2)
        with ag.no_grad():
            assert model(x_c=volume(rng), x_p=volume(rng, low=0.0)).data.dtype == np.float32

    def test_deterministic(self, tiny_ct, rng):
        model = nondegenerate(build_pemma(tiny_ct, rank=2, rng=rng), rng)
        x_c, x_p = volume(rng), volume(rng, low=0.0)
        with ag.no_grad():
            np.testing.assert_array_equal(model(x_c=x_c, x_p=x_p).data, model(x_c=x_c, x_p=x_p).data)

    def test_shape_mismatch(self, tiny_ct, rng):
        model = build_pemma(tiny_ct, rank=2)
        with pytest.raises(ag.ShapeError):
            model.forward_pemma(volume(rng), np.zeros((1, 4, 4, 4), np.float32))


class TestInferWithMissing:
    def test_ct_only(self, tiny_ct, rng):
        model = nondegenerate(build_pemma(tiny_ct, rank=2, rng=rng), rng)
        x_c = volume(rng)
        with ag.no_grad():
            np.testing.assert_array_equal(infer_with_missing(model, x_c, None).data,
                                          model.forward_pemma(x_c, np.zeros_like(x_c)).data)

    def test_pet_only(self, tiny_ct, rng):
        model = nondegenerate(build_pemma(tiny_ct, rank=2, rng=rng), rng)
        x_p = volume(rng, low=0.0)
        with ag.no_grad():
            np.testing.assert_array_equal(infer_with_missing(model, None, x_p).data,
                                          model.forward_pemma(np.zeros_like(x_p), x_p).data)

    def test_none(self, tiny_ct):
        with pytest.raises(InputError):
            infer_with_missing(tiny_ct, None, None)

    def test_early_fusion_zero_fill(self, tiny_ct, rng):
        model = build_early_fusion(tiny_ct, "random", rng)
        x_c = volume(rng)
        with ag.no_grad():
            np.testing.assert_array_equal(infer_with_missing(model, x_c).data,
                                          model(x_c=x_c, x_p=np.zeros_like(x_c)).data)
