"""Acceptance suite: one PASS/FAIL line per criterion, each at its stated tolerance.

Lines are printed even under output capture so ``pytest -v`` shows them.
"""
from __future__ import annotations

import random
import shutil
import sys
from dataclasses import replace
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import ring, toy_model
from ringpipe import cli
from ringpipe.config import load_config
from ringpipe.economics import load_preset, min_throughput
from ringpipe.perf import memory_budget, per_instance_time, stage_compute_time, table1
from ringpipe.planner import PipelinePlan, SchedulerPolicy, min_bubble_free_microbatches, plan
from ringpipe.sim import EventTrace, replay_check, run, steady_state_throughput
from ringpipe.types import GiB, NodeSpec, Topology, WorkloadSpec
from ringpipe.workload import generate


def _verdict(capsys, n: int, title: str, ok: bool, detail: str) -> None:
    with capsys.disabled():
        sys.stdout.write(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {title} :: {detail}\n")


# ---------------------------------------------------------------- 1

THRESHOLDS = {"gcp-8x-l4": "4283.33", "runpod-8x4090": "1703.70",
              "ionet-8x4090": "1138.89", "mining-8x4090": "108.02"}


def test_criterion_1_break_even_thresholds(capsys):
    got = {n: Decimal(min_throughput(load_preset(n)).numerator)
           / Decimal(min_throughput(load_preset(n)).denominator) for n in THRESHOLDS}
    rounded = {n: str(v.quantize(Decimal("0.01"), ROUND_HALF_UP)) for n, v in got.items()}
    bad = {n: (rounded[n], THRESHOLDS[n]) for n in THRESHOLDS if rounded[n] != THRESHOLDS[n]}
    detail = ", ".join(f"{n}={rounded[n]}" for n in THRESHOLDS)
    if bad:
        detail += " | mismatches (got, expected): " + repr(bad)
    _verdict(capsys, 1, "C/P thresholds to 2 dp", not bad, detail)
    assert not bad


# ---------------------------------------------------------------- 2

# (M_total, stage weights, N_B, M_G, M_B, M_B') computed by hand with exact floors
GRIDS = [
    (25769803776, 18522046464, 2, 0, 3623878656, 3623878656),
    (25769803776, 18522046464, 2, 268435456, 3623878656, 3623878656),
    (25769803776, 18253611008, 3, 1073741824, 2505397589, 2863311530),
    (25769803776, 18253611008, 8, 2684354560, 939524096, 2952790016),
    (25769803776, 17303325973, 15, 2558525440, 564431853, 2781820568),
    (42949672960, 18253611008, 15, 2147483648, 1646404130, 3507556625),
    (42949672960, 18253611008, 13, 7118782464, 1899697073, 7923282235),
    (85899345920, 37580963840, 4, 10737418240, 12079595520, 17448304640),
    (85899345920, 37580963840, 32, 23622320128, 1509949440, 23655874560),
    (17179869184, 9663676416, 5, 3221225479, 1503238553, 3435973841),
    (17179869184, 9663676416, 6, 0, 1252698794, 1252698794),
    (51539607552, 32212254720, 7, 9663676415, 2761050404, 9663676415),
    (51539607552, 32212254720, 11, 4294967296, 1757032075, 5271096226),
    (25769803776, 24696061952, 9, 104857600, 119304647, 200860558),
    (25769803776, 1073741824, 64, 11811160064, 385875968, 11827937280),
    (12884901888, 5368709120, 10, 1073742157, 751619276, 1610613002),
    (12884901888, 5368709120, 12, 3221225472, 626349397, 3310703957),
    (103079215104, 75161927680, 20, 13958643712, 1395864371, 13958643712),
    (25769803776, 21474836480, 2, 1073741824, 2147483648, 2147483648),
    (25769803776, 21474836480, 3, 2147483648, 1431655765, 2147483648),
    (34359738368, 12884901888, 17, 5368709125, 1263225675, 6000321962),
    (68719476736, 42949672960, 24, 12884901888, 1073741824, 12884901888),
]
PAGE = 256 * 327_680 // 80  # one 256-token page of a single 70B layer


def test_criterion_2_memory_budget(capsys):
    grid_bad = []
    for mt, w, nb, g, mb, mbp in GRIDS:
        b = memory_budget(NodeSpec("n", mt, 32_000_000_000), w, nb, g)
        if (b.m_per_microbatch_no_offload, b.m_per_microbatch_offload) != (mb, mbp):
            grid_bad.append((mt, w, nb, g))

    failures: list[str] = []

    @settings(max_examples=300, database=None)
    @given(kv_pages=st.integers(2, 200_000), nb=st.integers(2, 64), data=st.data())
    def props(kv_pages, nb, data):
        m_kv = kv_pages * PAGE + data.draw(st.integers(0, PAGE - 1))
        g = data.draw(st.integers(1, kv_pages // 2)) * PAGE
        node = NodeSpec("n", m_kv + GiB, 32_000_000_000)
        b = memory_budget(node, GiB, nb, g)
        nxt = memory_budget(node, GiB, nb + 1, g)
        msg = None
        if not b.m_per_microbatch_offload >= g:
            msg = "M_B' >= M_G"
        elif not b.m_per_microbatch_offload > b.m_per_microbatch_no_offload:
            msg = "M_B' > M_B"
        elif not (nb + 1) * nxt.m_per_microbatch_offload > nb * b.m_per_microbatch_offload:
            msg = "N_B*M_B' increasing"
        if msg:
            failures.append(f"{msg} fails at M_KV={m_kv}, N_B={nb}, M_G={g}: "
                            f"M_B={b.m_per_microbatch_no_offload}, "
                            f"M_B'={b.m_per_microbatch_offload}")
            raise AssertionError(failures[-1])

    prop_err = None
    try:
        props()
    except AssertionError as e:
        prop_err = failures[-1] if failures else str(e)
    ok = not grid_bad and prop_err is None
    detail = f"{len(GRIDS) - len(grid_bad)}/{len(GRIDS)} grids match"
    if prop_err:
        detail += f"; property counterexample: {prop_err}"
    _verdict(capsys, 2, "M_B / M_B' grids and properties", ok, detail)
    assert not grid_bad
    assert prop_err is None, prop_err


# ---------------------------------------------------------------- 3

TABLE = [(1, 66.6, "66.6"), (2, 68.9, "34.5"), (4, 69.1, "17.2"), (8, 69.5, "8.69"),
         (16, 70.3, "4.39"), (32, 76.5, "2.39"), (64, 80.2, "1.25"), (128, 89.1, "0.696"),
         (256, 137.5, "0.537")]


def _sig3(ms: Decimal) -> Decimal:
    exp = ms.adjusted() - 2
    return ms.quantize(Decimal(1).scaleb(exp), ROUND_HALF_UP)


def test_criterion_3_calibration(capsys):
    cal = table1()
    exact_bad = [b for b, ms, _ in TABLE if stage_compute_time(cal, b) != round(ms * 1000)]
    per_bad = []
    for b, _, pub in TABLE:
        got = _sig3(Decimal(per_instance_time(cal, b)) / 1000)
        if got != Decimal(pub):
            per_bad.append((b, str(got), pub))
    ok = not exact_bad and not per_bad
    detail = (f"{len(TABLE) - len(exact_bad)}/9 stage times exact, "
              f"{len(TABLE) - len(per_bad)}/9 per-instance at 3 s.f.")
    if per_bad:
        detail += f" | per-instance mismatches (batch, got, published): {per_bad}"
    _verdict(capsys, 3, "calibration table", ok, detail)
    assert not exact_bad
    assert not per_bad


# ---------------------------------------------------------------- 4

def test_criterion_4_bubble_fill(capsys):
    nb_star = min_bubble_free_microbatches(4, 70_000, 35_000)
    cfg = load_config("fig2c")
    bubbles = {}
    for nb in (6, 5):
        p = plan(cfg.model, cfg.topology, cfg.workload, replace(cfg.policy, nb_override=nb))
        rep, _ = run(p, cfg.topology, cfg.workload, cfg.model)
        bubbles[nb] = rep.bubble_fraction
    ok = nb_star == 6 and bubbles[6] < 0.01 and bubbles[5] > 0
    _verdict(capsys, 4, "bubble-free microbatch count", ok,
             f"N_B*={nb_star}, bubble(N_B=6)={bubbles[6]:.4f}, bubble(N_B=5)={bubbles[5]:.4f}")
    assert nb_star == 6
    assert bubbles[6] < 0.01
    assert bubbles[5] > 0


# ---------------------------------------------------------------- 5

def test_criterion_5_analytic_oracle(capsys):
    rng = random.Random(5)
    worst, worst_case = 0.0, None
    for i in range(50):
        S = rng.randint(2, 8)
        L = rng.randint(0, 256_000)
        nb = rng.randint(S, 4 * S)
        offload = rng.random() < 0.5
        model = toy_model(rng.choice([16, 40, 80]))
        topo = ring(S, L)
        pol = SchedulerPolicy(nb_override=nb, offload=offload)
        p = plan(model, topo, WorkloadSpec(0, 0, 64, 64, None, 1, 0, i), pol)
        expected = steady_state_throughput(p)
        period_s = nb * p.batch_size / expected
        spec = WorkloadSpec(0, 0, 64, 64, nb * p.batch_size, 200 * period_s, 20 * period_s, i)
        p = plan(model, topo, spec, pol)
        rep, _ = run(p, topo, spec, model)
        err = abs(rep.output_throughput - expected) / expected
        if err >= worst:
            worst, worst_case = err, (S, L, nb, offload)
    ok = worst < 0.02
    _verdict(capsys, 5, "run() vs closed form on 50 decode-only configs", ok,
             f"worst relative error {worst:.2e} at (S, L_us, N_B, offload)={worst_case}")
    assert ok


# ---------------------------------------------------------------- 7

def test_criterion_7_global_pool_tightness(capsys):
    cfg = load_config("reference").with_policy("opt")
    nodes = tuple(replace(n, gpu_mem_bytes=40 * GiB) for n in cfg.topology.nodes)
    topo = Topology(nodes, cfg.topology.links).with_latency(64_000)
    stall = {}
    pools = {}
    for factor in (1, 2):
        p = plan(cfg.model, topo, cfg.workload, replace(cfg.policy, global_pool_factor=factor))
        rep, _ = run(p, topo, cfg.workload, cfg.model)
        stall[factor] = rep.swap_stall_us
        pools[factor] = p.global_pool_bytes()
    ok = stall[1] == 0 and stall[2] > 0
    _verdict(capsys, 7, "global pool sized at W*T_S hides swaps", ok,
             f"M_G=W*T_S ({pools[1] / GiB:.2f} GiB): stall {stall[1]} us; "
             f"M_G=2*W*T_S ({pools[2] / GiB:.2f} GiB): stall {stall[2]} us")
    assert stall[1] == 0
    assert stall[2] > 0


# ---------------------------------------------------------------- 6 and 8

@pytest.fixture(scope="module")
def reference_sweeps(tmp_path_factory):
    root = tmp_path_factory.mktemp("sweep")
    a, b = root / "a", root / "b"
    assert cli.main(["sweep", "--config", "reference", "--out", str(a), "--trace"]) == 0
    assert cli.main(["sweep", "--config", "reference", "--out", str(b), "--trace",
                     "--parallel", "2"]) == 0
    yield a, b
    shutil.rmtree(root, ignore_errors=True)


def _read_sweep(path: Path) -> dict[str, dict[int, float]]:
    lines = path.read_text().splitlines()
    lats = [int(h.split("=")[1]) for h in lines[0].split(",")[1:]]
    return {row.split(",")[0]: dict(zip(lats, map(float, row.split(",")[1:])))
            for row in lines[1:]}


def test_criterion_6_latency_trend(reference_sweeps, capsys):
    tab = _read_sweep(reference_sweeps[0] / "sweep.csv")
    opt = [tab["opt"][L] for L in (16_000, 32_000, 64_000, 256_000)]
    spread = (max(opt) - min(opt)) / max(opt)
    loss = 1 - tab["baseline"][64_000] / tab["baseline"][0]
    ratio = tab["opt"][64_000] / tab["baseline"][64_000]
    checks = {"a": spread < 0.05, "b": loss > 0.45, "c": ratio > 3}
    detail = (f"(a) opt spread {spread:.1%} {'ok' if checks['a'] else 'NOT < 5%'}; "
              f"(b) baseline loss 0->64ms {loss:.1%} {'ok' if checks['b'] else 'NOT > 45%'}; "
              f"(c) opt/baseline at 64ms {ratio:.2f}x {'ok' if checks['c'] else 'NOT > 3x'}")
    _verdict(capsys, 6, "latency sweep trend on the reference ring", all(checks.values()), detail)
    assert checks["c"]
    assert checks["a"], detail
    assert checks["b"], detail


def test_criterion_8_determinism_and_replay(reference_sweeps, capsys):
    a, b = reference_sweeps
    same = (a / "sweep.csv").read_bytes() == (b / "sweep.csv").read_bytes()
    n_traces, violations = 0, []
    for tr in sorted(a.glob("trace.*.log")):
        cell = tr.name[len("trace."):-len(".log")]
        p = PipelinePlan.from_json((a / f"plan.{cell}.json").read_text())
        violations += [(cell, str(v)) for v in replay_check(EventTrace.read_jsonl(tr), p)]
        n_traces += 1
    ok = same and n_traces == 15 and not violations
    _verdict(capsys, 8, "byte-identical rerun and clean replay", ok,
             f"sweep.csv identical={same}, traces checked={n_traces}, "
             f"violations={len(violations)}")
    assert same
    assert n_traces == 15
    assert not violations, violations[:5]


# ---------------------------------------------------------------- 9

def test_criterion_9_workload_statistics(capsys):
    cfg = load_config("reference")
    mean = float(np.mean([r.prompt_len for r in generate(cfg.workload, 100_000)]))
    p = plan(cfg.model, cfg.topology, cfg.workload, cfg.policy)
    rep, _ = run(p, cfg.topology, cfg.workload, cfg.model)
    gap = abs(rep.input_throughput - rep.output_throughput) / rep.output_throughput
    ok = abs(mean - 256) <= 5 and gap < 0.10
    _verdict(capsys, 9, "prompt-length mean and input/output balance", ok,
             f"mean prompt {mean:.2f}; M_I={rep.input_throughput:.1f} "
             f"M_O={rep.output_throughput:.1f} gap {gap:.1%}")
    assert abs(mean - 256) <= 5
    assert gap < 0.10
