import time

import numpy as np
import pytest

from dntdf.arch import ConfigError, DecoderConfig, build_model
from dntdf.complexity import (COMPONENTS, CostReport, count_flops, count_params, cost_report, cost_table, human,
                              layer_cost)
from dntdf.nn import Conv2d, Module
from dntdf.tensor import MetaTensor, tracing


def _single(module, shape):
    with tracing() as tr:
        module(MetaTensor(shape))
    return CostReport([layer_cost(r) for r in tr.records])


def test_conv_param_formula():
    assert _single(Conv2d(64, 64, 3), (1, 64, 8, 8)).params == 36_928
    assert _single(Conv2d(2048, 512, 1), (1, 2048, 9, 9)).params == 1_049_088


def test_conv_mac_formula():
    assert _single(Conv2d(2048, 512, 1), (1, 2048, 9, 9)).macs == 84_934_656


def test_resize_and_pool_costs():
    from dntdf import ops
    with tracing() as tr:
        x = MetaTensor((1, 4, 6, 6))
        ops.bilinear_resize(x, 12, 12)
        ops.bilinear_resize(x, 6, 6)
        ops.adaptive_avg_pool(x, 3)
        ops.relu(x)
    costs = [layer_cost(r) for r in tr.records]
    assert [c.macs for c in costs] == [4 * 4 * 144, 0, 4 * 36, 0]
    assert all(c.params == 0 for c in costs)


def test_resnet50_backbone_macs():
    rep = cost_report("resnet50", DecoderConfig(r=4), 288)
    enc_params, enc_macs = rep.subtotals()["encoder"]
    assert enc_params == 23_508_032          # conv weights + frozen affine scale/shift
    assert abs(enc_macs / 6.8e9 - 1) < 0.02


def test_subtotals_sum_to_totals():
    rep = cost_report("resnet50", DecoderConfig(r=8), 288)
    sub = rep.subtotals()
    assert set(COMPONENTS) <= set(sub)
    assert sum(p for p, _ in sub.values()) == rep.params
    assert sum(m for _, m in sub.values()) == rep.macs


def test_doubling_input_quadruples_conv_macs():
    g = build_model("resnet50", DecoderConfig(r=4), 288)
    small = count_flops(g, 288)
    big = count_flops(g, 576)
    fixed = []
    for a, b in zip(small.layers, big.layers):
        assert a.op == b.op
        assert b.params == a.params
        if a.op == "conv2d":
            if ".ppm.branches." in a.scope:
                fixed.append(a.scope)  # runs on the bins x bins pooled map
                assert b.macs == a.macs
            else:
                assert b.macs == 4 * a.macs
    assert len(fixed) == 4


def test_count_flops_defaults_to_build_size():
    g = build_model("tiny", None, 64)
    assert count_flops(g).macs == count_flops(g, 64).macs == count_params(g).macs


def test_decoder_params_monotone_in_r():
    rows = cost_table("resnet50", None, (2, 4, 8, 16, 32), 288)
    params = [r.decoder_params for r in rows]
    macs = [r.decoder_macs for r in rows]
    assert params == sorted(params, reverse=True) and len(set(params)) == 5
    assert macs == sorted(macs, reverse=True)
    assert 2.5 <= params[0] / params[1] <= 4.0


def test_cost_table_rejects_bad_ratio():
    with pytest.raises(ConfigError):
        cost_table("efficientnet-b0", None, (32,), 288)


def test_cost_table_is_fast():
    t = time.perf_counter()
    cost_table("resnet50", None, (2, 4, 8, 16, 32), 288)
    assert time.perf_counter() - t < 1.0


@pytest.mark.parametrize("n,text", [(0, "0.000"), (999, "999.000"), (379_500, "379.500K"), (5_330_000, "5.330M"),
                                    (1_290_000_000, "1.290G"), (1_234_5, "12.345K"), (12_345_5, "123.455K"),
                                    (1_000_500, "1.001M")])
def test_human_rendering_round_half_up(n, text):
    assert human(n) == text


def test_csv_and_text_render():
    rep = cost_report("tiny", None, 64)
    csv = rep.to_csv().splitlines()
    assert csv[0] == "layer,op,component,scope,params,macs"
    assert len(csv) == len(rep.layers) + 1
    assert "decoder total" in rep.to_text()
