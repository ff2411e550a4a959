from __future__ import annotations

import io

import numpy as np
import pytest

from conftest import FLAT70, decode_only, ring, toy_model
from ringpipe.planner import SchedulerPolicy, plan
from ringpipe.sim import EventTrace, replay_check, run
from ringpipe.sim._kernel_py import COMPUTE_START, TRANSFER_ARRIVE
from ringpipe.types import GiB, WorkloadSpec


@pytest.fixture(scope="module")
def flat_run():
    topo = ring(3, 20_000, calibration=FLAT70)
    model = toy_model(6)
    spec = decode_only(12, concurrency=40, duration=10, warmup=2)
    p = plan(model, topo, spec, SchedulerPolicy(nb_override=4, offload=False,
                                                calibration_layers=2))
    _, tr = run(p, topo, spec, model)
    return p, tr


@pytest.fixture(scope="module")
def swap_run():
    topo = ring(3, 20_000, mem=int(2.5 * GiB))
    model = toy_model()
    spec = WorkloadSpec(0, 200, 1, 30, None, 8, 1, 3)
    p = plan(model, topo, spec, SchedulerPolicy(nb_override=5, calibration_layers=2,
                                                prefill_chunk=64))
    _, tr = run(p, topo, spec, model)
    return p, tr


def test_clean_traces_have_no_violations(flat_run, swap_run):
    for p, tr in (flat_run, swap_run):
        assert replay_check(tr, p) == []


def test_jsonl_roundtrip(flat_run, tmp_path):
    _, tr = flat_run
    path = tmp_path / "t.log"
    tr.write_jsonl(path)
    assert EventTrace.read_jsonl(path) == tr
    buf = io.StringIO()
    tr.write_jsonl(buf)
    first = buf.getvalue().splitlines()[0]
    assert first.startswith("{") and "time_us" in first


def test_double_compute_detected(flat_run):
    p, tr = flat_run
    ev = tr.events.copy()
    starts = np.flatnonzero((ev[:, 2] == COMPUTE_START) & (ev[:, 3] == 1))
    # stretch one compute so it runs past the next start on the same stage
    i, j = starts[5], starts[6]
    ev[i, 5] = ev[j, 0] - ev[i, 0] + 1
    kinds = {v.kind for v in replay_check(EventTrace(ev), p)}
    assert "double-compute" in kinds


def test_early_arrival_detected(flat_run):
    p, tr = flat_run
    ev = tr.events.copy()
    idx = np.flatnonzero((ev[:, 2] == TRANSFER_ARRIVE) & (ev[:, 5] >= 0))[10]
    ev[idx, 5] += 30_000  # claim a later send than the arrival allows
    kinds = {v.kind for v in replay_check(EventTrace(ev), p)}
    assert "causality" in kinds


def test_reordered_trace_detected(flat_run):
    p, tr = flat_run
    ev = tr.events.copy()
    ev[[20, 40]] = ev[[40, 20]]
    assert any(v.kind == "order" for v in replay_check(EventTrace(ev), p))


def test_swap_bandwidth_violation_detected(swap_run):
    p, tr = swap_run
    ev = tr.events.copy()
    idx = np.flatnonzero((ev[:, 2] == 3) & (ev[:, 6] > 0))[3]
    ev[idx, 6] *= 1000  # far more bytes than the PCIe link moves in that interval
    assert any(v.kind == "swap-bandwidth" for v in replay_check(EventTrace(ev), p))
