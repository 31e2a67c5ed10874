import pytest

from ctnet.complexity import (PUBLISHED_PARAMS, Layer, count_parameters, estimate_flops, layer_flops,
                              layer_params, per_block)
from ctnet.config import ModelConfig
from ctnet.model import init_params


def _brute(cfg):
    return sum(p.data.size for p in init_params(cfg).values())


def test_single_conv_count():
    cfg = ModelConfig.full()
    assert layer_params(Layer("x", "c", "conv", 64, 64), cfg) == 36_928


def test_single_conv_flops():
    cfg = ModelConfig.full()
    assert layer_flops(Layer("x", "c", "conv", 64, 64), cfg, 48 * 48) == 2 * 9 * 64 * 64 * 48 * 48


@pytest.mark.parametrize("cfg", [
    ModelConfig.tiny(), ModelConfig.tiny(image_channels=3), ModelConfig.full(),
    ModelConfig.full(token_patch=3, window=16, heads=12),
    ModelConfig.tiny(serial=True), ModelConfig.tiny(subnet3_itm=False), ModelConfig.tiny(sb_tm=False),
    ModelConfig.tiny(subnet1=False), ModelConfig.tiny(subnet2_fms=False, subnet3_first_fms=False),
])
def test_closed_form_equals_brute_force(cfg):
    assert count_parameters(cfg) == _brute(cfg)


def test_known_totals():
    assert count_parameters(ModelConfig.tiny()) == 20_713
    assert count_parameters(ModelConfig.full()) == 1_155_139


def test_patch_token_variant_lands_near_reference():
    n = count_parameters(ModelConfig.full(token_patch=3, window=16, heads=12))
    assert n == 48_028_227
    assert abs(n / PUBLISHED_PARAMS - 1) < 0.025


def test_per_block_sums_to_total():
    cfg = ModelConfig.full()
    table = per_block(cfg, 48, 48)
    assert list(table) == ["sb", "subnet1", "subnet2", "subnet3", "rb"]
    assert sum(p for p, _ in table.values()) == count_parameters(cfg)
    assert sum(f for _, f in table.values()) == estimate_flops(cfg, 48, 48)


def test_flops_use_padded_size():
    cfg = ModelConfig.tiny()
    assert estimate_flops(cfg, 7, 7) == estimate_flops(cfg, 8, 8)


def test_attention_flops_scale_with_window():
    small = ModelConfig.full(window=4)
    big = ModelConfig.full(window=8)
    pix = 48 * 48
    tm = Layer("x", "tm", "tm")
    diff = layer_flops(tm, big, pix) - layer_flops(tm, small, pix)
    # Q K^T and A V: 2 products * 2 flops * tokens * window^2 * D
    assert diff == 4 * pix * (64 - 16) * 64
