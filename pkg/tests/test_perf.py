from __future__ import annotations

from fractions import Fraction

import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from ringpipe.perf import (
    CalibrationError, CalibrationTable, InfeasibleMemory, PAGE_TOKENS, global_pool_size,
    kv_bytes, load_calibration_csv, max_batch_size, memory_budget, page_bytes,
    per_instance_time, stage_compute_time, table1,
)
from ringpipe.types import GiB, MiB, NodeSpec, llama70b_preset

TABLE1_MS = [(1, "66.6"), (2, "68.9"), (4, "69.1"), (8, "69.5"), (16, "70.3"),
             (32, "76.5"), (64, "80.2"), (128, "89.1"), (256, "137.5")]


@pytest.mark.parametrize("batch,ms", TABLE1_MS)
def test_table1_points_exact(batch, ms):
    assert stage_compute_time(table1(), batch) == int(Fraction(ms) * 1000)


def test_interpolation_midpoint():
    # halfway between (64, 80.2 ms) and (128, 89.1 ms)
    assert stage_compute_time(table1(), 96) == (80_200 + 89_100) // 2 == 84_650


def test_extrapolation_and_floor():
    slope = Fraction(137_500 - 89_100, 128)
    assert stage_compute_time(table1(), 512) == 137_500 + round(slope * 256)
    cal = CalibrationTable(((4, 10), (8, 20)))
    assert stage_compute_time(cal, 1) == 10
    with pytest.raises(ValueError):
        stage_compute_time(cal, 0)


def test_per_instance_examples():
    assert per_instance_time(table1(), 8) == 8_688
    assert per_instance_time(table1(), 1) == 66_600
    assert per_instance_time(table1(), 128) == 696


def test_invalid_tables():
    with pytest.raises(CalibrationError):
        CalibrationTable(((1, 10),))
    with pytest.raises(CalibrationError):
        CalibrationTable(((2, 10), (1, 20)))
    with pytest.raises(CalibrationError):
        CalibrationTable(((1, 20), (2, 10)))


def test_csv_loader(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("batch_size,total_time_ms\n# comment\n1,1.5\n4,2.25\n")
    cal = load_calibration_csv(p)
    assert cal.entries == ((1, 1500), (4, 2250))


@given(st.integers(1, 2000), st.integers(1, 2000))
def test_stage_time_monotone(a, b):
    lo, hi = sorted((a, b))
    assert stage_compute_time(table1(), lo) <= stage_compute_time(table1(), hi)


def test_per_instance_monotone_over_table_points():
    vals = [per_instance_time(table1(), b) for b, _ in TABLE1_MS]
    assert vals == sorted(vals, reverse=True)


def test_kv_examples():
    m = llama70b_preset()
    assert kv_bytes(m, 4096, 1) == 5 * GiB // 4
    assert kv_bytes(m, 0, 1) == 0
    quarter = kv_bytes(m, 4096, Fraction(1, 4))
    # direct multiplication, then rounded up to whole pages
    raw = 4096 * m.kv_bytes_per_token // 4
    page = PAGE_TOKENS * m.kv_bytes_per_token // 4
    assert quarter == -(-raw // page) * page
    assert 320 * MiB <= quarter < 320 * MiB + page


@given(st.integers(0, 10_000), st.integers(0, 10_000),
       st.sampled_from([Fraction(1), Fraction(1, 8), Fraction(3, 80), Fraction(1, 3)]))
def test_kv_additive_up_to_one_page(a, b, f):
    m = llama70b_preset()
    whole = kv_bytes(m, a + b, f)
    parts = kv_bytes(m, a, f) + kv_bytes(m, b, f)
    assert 0 <= parts - whole <= page_bytes(m, f)


def test_global_pool_examples():
    assert global_pool_size(16_000_000_000, 125_000) == 2_000_000_000
    assert global_pool_size(8_000_000_000, 70_000) == 560_000_000
    page = 1 << 20
    assert global_pool_size(8_000_000_000, 70_000, page) == 560_000_000 // page * page
    with pytest.raises(ValueError):
        global_pool_size(8_000_000_000, 0)


def _node(mem):
    return NodeSpec("x", mem, 32_000_000_000)


def test_memory_budget_examples():
    b = memory_budget(_node(24 * GiB), 16 * GiB, 4, 2 * GiB, True)
    assert b.m_per_microbatch_offload == 3 * GiB
    b = memory_budget(_node(24 * GiB), 16 * GiB, 4, 0, False)
    assert b.m_per_microbatch_no_offload == 2 * GiB and b.per_microbatch == 2 * GiB
    b = memory_budget(_node(24 * GiB), 16 * GiB, 64, 2 * GiB, True)
    assert b.m_per_microbatch_offload == 2 * GiB + 64 * MiB


def test_memory_budget_errors():
    with pytest.raises(InfeasibleMemory, match="weights-exceed-memory"):
        memory_budget(_node(GiB), 2 * GiB, 1)
    with pytest.raises(InfeasibleMemory, match="global-pools-exceed-kv-memory"):
        memory_budget(_node(4 * GiB), 2 * GiB, 2, GiB + 1, True)


PAGE = 1 << 20  # pools are page-granular; 1 MiB is below any real page
budgets = st.tuples(st.integers(1, 1 << 36), st.integers(0, 1 << 36), st.integers(1, 1024))


@given(budgets, st.integers(0, 1 << 15))
def test_eq1_properties(mw, g_pages):
    m_kv, w, nb = mw
    m_g = g_pages * PAGE
    assume(2 * m_g <= m_kv)
    node = _node(m_kv + w)
    off = memory_budget(node, w, nb, m_g, True)
    assert off.m_kv == m_kv
    assert off.m_per_microbatch_no_offload == m_kv // nb
    assert off.m_per_microbatch_offload == (m_kv - 2 * m_g) // nb + m_g
    assert off.m_per_microbatch_offload >= m_g
    if nb >= 3 and m_g > 0:
        assert off.m_per_microbatch_offload > off.m_per_microbatch_no_offload


@given(st.integers(1, 1 << 36).map(lambda k: 2 * k), st.integers(1, 1 << 15))
def test_eq1_two_microbatches_gain_nothing(half_kv, g_pages):
    # (M_KV - 2 M_G) / 2 + M_G == M_KV / 2: both pools are needed just to rotate two
    m_g = g_pages * PAGE
    assume(2 * m_g <= 2 * half_kv)
    b = memory_budget(_node(2 * half_kv), 0, 2, m_g, True)
    assert b.m_per_microbatch_offload == b.m_per_microbatch_no_offload == half_kv


@given(st.integers(1 << 20, 1 << 36), st.integers(1, 1 << 14))
def test_aggregate_kv_strictly_increases_with_nb(m_kv, g_pages):
    m_g = g_pages * PAGE
    assume(2 * m_g <= m_kv)
    node = _node(m_kv)
    agg = [nb * memory_budget(node, 0, nb, m_g, True).m_per_microbatch_offload
           for nb in range(1, 40)]
    assert all(a < b for a, b in zip(agg, agg[1:]))


def test_eq1_lower_bound_over_range():
    node = _node(24 * GiB)
    for nb in range(1, 1025):
        assert memory_budget(node, 16 * GiB, nb, 2 * GiB, True).m_per_microbatch_offload >= 2 * GiB


def test_max_batch_examples():
    m = llama70b_preset()
    assert max_batch_size(5 * GiB // 4, m, 1, 4096) == 1
    assert max_batch_size(0, m, 1, 4096) == 0
    assert max_batch_size(10 * GiB, m, 1, 4096) == 10 * GiB // (5 * GiB // 4) == 8
