from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from kvq.planner import (
    PlanConfig,
    avg_bits,
    compression_ratio,
    fp16_kv_bytes,
    key_bits,
    model_config,
    parse_scheme,
    plan,
    plan_grid,
    render_table,
    scheme_config,
    value_bits,
)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
LLAMA_7B = PlanConfig(n_layers=32, n_heads=32, head_dim=128, batch=1, seq_len=131072)


def test_fp16_bytes():
    assert fp16_kv_bytes(PlanConfig(1, 1, 1, 1, 1)) == 4
    assert fp16_kv_bytes(LLAMA_7B) == 2**36
    assert fp16_kv_bytes(replace(LLAMA_7B, seq_len=2 * 131072)) == 2**37


def test_fp16_bytes_do_not_overflow():
    huge = PlanConfig(n_layers=1000, n_heads=1000, head_dim=1000, batch=1000, seq_len=10**7)
    assert fp16_kv_bytes(huge) == 4 * 10**19


@pytest.mark.parametrize(
    "scheme, lo, hi",
    [("nuq4", 4.00, 4.02), ("nuq4-1%", 4.32, 4.35), ("nuq3-1%", 3.32, 3.35), ("nuq2-1%", 2.32, 2.35)],
)
def test_average_bits_ranges(scheme, lo, hi):
    assert lo <= avg_bits(scheme_config(LLAMA_7B, scheme)) <= hi


@pytest.mark.parametrize("scheme, lo, hi", [("nuq4-1%", 3.67, 3.75), ("nuq3-1%", 4.75, 4.85), ("nuq2-1%", 6.85, 6.95)])
def test_compression_ratios(scheme, lo, hi):
    assert lo <= compression_ratio(scheme_config(LLAMA_7B, scheme)) <= hi


def test_hand_accounting():
    cfg = scheme_config(LLAMA_7B, "nuq3-1%")
    l, hd = 131072, 32 * 128
    assert key_bits(cfg) == pytest.approx(3 + 32 / l + 0.32 + 32 / l)
    assert value_bits(cfg) == pytest.approx(3 + 32 / hd + 0.32 + 32 / hd)
    cfg = scheme_config(LLAMA_7B, "int4")
    assert key_bits(cfg) == pytest.approx(4 + 20 / l)
    assert avg_bits(scheme_config(LLAMA_7B, "fp16")) == 16
    assert compression_ratio(scheme_config(LLAMA_7B, "fp16")) == 1.0


def test_parse_scheme():
    assert parse_scheme("nuq3-1%") == ("nuq", 3, 0.01)
    assert parse_scheme("fp16") == ("fp16", 16, 0.0)
    assert parse_scheme("int2-0.5%") == ("int", 2, 0.005)
    for bad in ("nuq", "fp16-1%", "q4", "nuq4-%"):
        with pytest.raises(ValueError):
            parse_scheme(bad)


def test_config_validation():
    with pytest.raises(ValueError):
        PlanConfig(0, 1, 1, 1, 1)
    with pytest.raises(ValueError):
        PlanConfig(1, 1, 1, 1, 1, scheme="fp8")
    with pytest.raises(ValueError):
        PlanConfig(1, 1, 1, 1, 1, bits=4)  # fp16 with a bit width
    with pytest.raises(ValueError):
        model_config({"n_layers": 2, "n_heads": 2})


def test_shipped_config_is_llama_7b():
    base = model_config(json.loads((CONFIGS / "llama-7b.json").read_text()), seq_len=131072)
    assert base == LLAMA_7B


def test_grid_and_table():
    reports = plan_grid(replace(LLAMA_7B, seq_len=1), ["fp16", "nuq3-1%"], [4096, 131072])
    assert [(r.scheme, r.seq_len) for r in reports] == [
        ("fp16", 4096), ("fp16", 131072), ("nuq3-1%", 4096), ("nuq3-1%", 131072)
    ]
    assert reports[0].compression_ratio == 1.0
    assert reports[3].compression_ratio == pytest.approx(4.8, abs=0.1)
    table = render_table(reports)
    assert "nuq3-1%" in table and "68.72 GB" in table
    r = plan(scheme_config(LLAMA_7B, "nuq4"))
    assert r.quant_bytes == pytest.approx(r.fp16_bytes * r.avg_bits_per_element / 16)


@given(st.integers(1, 8), st.integers(1, 64), st.sampled_from([2, 4, 8, 64, 128]),
       st.integers(1, 8), st.integers(1, 1 << 20), st.sampled_from(["nuq", "int"]),
       st.sampled_from([2, 3, 4]), st.sampled_from([0.0, 0.001, 0.01, 0.05]))
def test_plan_invariants(n, h, d, b, l, kind, bits, f):
    cfg = PlanConfig(n, h, d, b, l, bits=bits, outlier_fraction=f, scheme=kind)
    bits_avg = avg_bits(cfg)
    assert bits_avg > bits
    assert compression_ratio(cfg) == pytest.approx(16 / bits_avg)
    assert fp16_kv_bytes(cfg) == 4 * n * h * d * b * l
    assert avg_bits(replace(cfg, batch=b + 1)) == bits_avg
