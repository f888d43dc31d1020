import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pemma import autograd as ag
from pemma.autograd import Tensor
from pemma.layers import ConfigError
from pemma.lora import (
    AdapterStateError,
    LoraAdapter,
    count_params,
    count_trainable,
    inject_lora,
    lora_forward,
    lora_param_formula,
    merge_weights,
)
from pemma.models import ModelConfig, SegModel


def adapter(d, r, alpha, rng, b_scale=0.0):
    a = LoraAdapter(d, r, alpha, (1, "Q"), rng)
    if b_scale:
        a.B.data[...] = rng.normal(0, b_scale, size=a.B.shape)
    return a


class TestInjection:
    def test_twelve_blocks_give_24(self, rng):
        model = SegModel(ModelConfig(depth=12, dim=8, heads=2, size=8, features=2), rng=rng)
        aset = inject_lora(model, 2, 4.0, rng)
        assert len(aset) == 24
        assert set(aset.adapters) == {(i, p) for i in range(1, 13) for p in ("Q", "V")}

    def test_small_count(self, tiny_ct, rng):
        inject_lora(tiny_ct, 2, 4.0, rng)
        assert count_params(tiny_ct)["lora"] == 2 * 2 * (2 * 8 + 8 * 2) == 128

    def test_init_distribution(self, rng):
        model = SegModel(ModelConfig(depth=4, dim=32, heads=4, size=8, features=2), rng=rng)
        aset = inject_lora(model, 8, 16.0, rng)
        a = np.concatenate([x.A.data.ravel() for x in aset.adapters.values()])
        assert all(not x.B.data.any() for x in aset.adapters.values())
        assert abs(a.std() - 0.02) < 0.002 and abs(a.mean()) < 0.002

    def test_zero_delta_birth(self, tiny_ct, rng):
        xs = [rng.normal(size=(1, 8, 8, 8)).astype(np.float32) for _ in range(3)]
        with ag.no_grad():
            before = [tiny_ct(x_c=x).data for x in xs]
            inject_lora(tiny_ct, 2, 4.0, rng)
            after = [tiny_ct(x_c=x).data for x in xs]
        for a, b in zip(before, after):
            np.testing.assert_array_equal(a, b)

    def test_base_weights_untouched(self, tiny_ct, rng):
        before = {n: p.data.copy() for n, p in tiny_ct.named_parameters()}
        inject_lora(tiny_ct, 2, 4.0, rng)
        for n, p in tiny_ct.named_parameters():
            if n in before:
                np.testing.assert_array_equal(p.data, before[n])

    def test_double_injection(self, tiny_ct, rng):
        inject_lora(tiny_ct, 2, 4.0, rng)
        with pytest.raises(AdapterStateError):
            inject_lora(tiny_ct, 2, 4.0, rng)

    @pytest.mark.parametrize("r", [0, 8, 9])
    def test_rank_bounds(self, r, rng):
        with pytest.raises(ConfigError):
            LoraAdapter(8, r, 1.0, (1, "Q"), rng)

    def test_only_q_and_v(self, tiny_ct, rng):
        inject_lora(tiny_ct, 2, 4.0, rng)
        lora_names = [n for n, p in tiny_ct.named_parameters() if p.group == "lora"]
        assert all(".lora_q." in n or ".lora_v." in n for n in lora_names)


class TestLoraForward:
    def test_zero_b(self, rng):
        a = adapter(6, 2, 3.0, rng)
        W, h = Tensor(rng.normal(size=(6, 6))), Tensor(rng.normal(size=(4, 6)))
        np.testing.assert_array_equal(lora_forward(W, a, h).data, ag.matmul(h, W.T).data)

    def test_zero_alpha(self, rng):
        a = adapter(6, 2, 0.0, rng, b_scale=1.0)
        W, h = Tensor(rng.normal(size=(6, 6))), Tensor(rng.normal(size=(4, 6)))
        np.testing.assert_array_equal(lora_forward(W, a, h).data, ag.matmul(h, W.T).data)

    def test_rank_one_by_hand(self, rng):
        a = LoraAdapter(2, 1, 1.0, (1, "Q"), rng)
        a.A.data[...] = [[1.0, 0.0]]
        a.B.data[...] = [[1.0], [0.0]]
        out = lora_forward(Tensor(np.eye(2)), a, Tensor([[3.0, 4.0]]))
        np.testing.assert_array_equal(out.data, [[6.0, 4.0]])


class TestMerge:
    def test_zero_b_bit_identical(self, rng):
        W = rng.normal(size=(6, 6)).astype(np.float32)
        np.testing.assert_array_equal(merge_weights(W, adapter(6, 2, 3.0, rng)), W)

    def test_additive_inverse(self, rng):
        W = rng.normal(size=(6, 6)).astype(np.float32)
        a = adapter(6, 2, 3.0, rng, b_scale=0.5)
        np.testing.assert_allclose(merge_weights(W, a) - a.delta(), W, atol=1e-6)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_merged_matches_adapter_path(self, seed):
        rng = np.random.default_rng(seed)
        a = adapter(4, 2, float(rng.uniform(0.5, 8)), rng, b_scale=0.5)
        W = rng.normal(size=(4, 4)).astype(np.float32)
        h = Tensor(rng.normal(size=(5, 4)).astype(np.float32))
        merged = ag.matmul(h, Tensor(merge_weights(W, a)).T).data
        np.testing.assert_allclose(merged, lora_forward(Tensor(W), a, h).data, atol=1e-5)

    def test_rank_bound(self, rng):
        a = adapter(16, 3, 6.0, rng, b_scale=1.0)
        a.A.data[...] = rng.normal(size=a.A.shape)
        sv = np.linalg.svd(a.delta(), compute_uv=False)
        assert (sv[3:] < 1e-5 * sv[0]).all() and sv[2] > 1e-5 * sv[0]


class TestCounts:
    def test_formula_l12_r4(self, rng):
        model = SegModel(ModelConfig(depth=12, dim=32, heads=4, size=8, features=2), rng=rng)
        inject_lora(model, 4, 8.0, rng)
        assert count_params(model)["lora"] == lora_param_formula(12, 4, 32) == 6144

    def test_empty_groups(self, tiny_ct):
        assert count_trainable(tiny_ct, groups=set())["total"] == 0

    def test_total_is_sum(self, tiny_ct, rng):
        inject_lora(tiny_ct, 2, 4.0, rng)
        c = count_params(tiny_ct)
        assert c["total"] == sum(p.data.size for p in tiny_ct.parameters()) == c["base"] + c["lora"]


class TestAdapterSwap:
    def test_restore_is_lossless(self, tiny_ct, rng):
        aset = inject_lora(tiny_ct, 2, 4.0, rng)
        for a in aset.adapters.values():
            a.B.data[...] = rng.normal(0, 0.1, size=a.B.shape)
        x = rng.normal(size=(1, 8, 8, 8)).astype(np.float32)
        with ag.no_grad():
            ref = tiny_ct(x_c=x).data
            saved = aset.state()
            for a in aset.adapters.values():
                a.A.data += 0.3
            assert not np.array_equal(tiny_ct(x_c=x).data, ref)
            aset.restore(saved)
            np.testing.assert_array_equal(tiny_ct(x_c=x).data, ref)
