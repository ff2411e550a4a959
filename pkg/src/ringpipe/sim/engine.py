"""Discrete-event execution of a pipeline plan against the closed-loop workload."""
from __future__ import annotations

from collections import defaultdict, deque
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from ..perf import _div_round, resolve_calibration, stage_compute_time
from ..planner import PipelinePlan
from ..types import ModelSpec, Topology, WorkloadSpec
from ..workload import Request, RequestSource, windowed_stats
from ._kernel_py import (
    COMPUTE_START,
    REQUEST_ADMIT,
    REQUEST_COMPLETE,
    TRANSFER_ARRIVE,
)
from .kernel import KernelDeadlock, get_backend
from .trace import EventTrace


class SimulationError(RuntimeError):
    pass


class SimDeadlock(SimulationError):
    def __init__(self, inner: KernelDeadlock):
        self.time_us = inner.time_us
        self.blocked = inner.blocked
        super().__init__(str(inner))


@dataclass(frozen=True)
class SimReport:
    measured_window: tuple[int, int]
    input_tokens: int
    output_tokens: int
    wall_time_s: float
    input_throughput: float
    output_throughput: float
    total_throughput: float
    busy_fraction: tuple[float, ...]
    bubble_fraction_per_stage: tuple[float, ...]
    swap_wait_fraction: tuple[float, ...]
    bubble_fraction: float
    swap_stall_us: int
    completed_requests: int
    max_live_requests: int
    n_stages: int
    n_microbatches: int
    batch_size: int
    seed: int

    def to_flat(self) -> dict:
        flat = {}
        for k, v in asdict(self).items():
            if isinstance(v, (tuple, list)):
                if k == "measured_window":
                    flat["window_start_us"], flat["window_end_us"] = v
                else:
                    for i, x in enumerate(v):
                        flat[f"{k}.{i}"] = x
            else:
                flat[k] = v
        return flat

    def to_kv(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in self.to_flat().items())


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


class _Driver:
    """Request bookkeeping and per-circuit timing for each microbatch."""

    def __init__(self, plan: PipelinePlan, workload: WorkloadSpec, source: RequestSource):
        self.plan = plan
        self.S = plan.n_stages
        self.NB = plan.n_microbatches
        self.cap = plan.batch_size
        self.source = source
        self.chunk = plan.prefill_chunk
        self.hidden = plan.hidden_bytes_per_token
        self.cals = [resolve_calibration(s.calibration) for s in plan.stages]
        self.layers = [s.num_layers for s in plan.stages]
        self.k_ref = plan.calibration_layers
        self._tcache = [dict() for _ in range(self.S)]
        self.offload = plan.offload_enabled
        self.m_g = [s.budget.m_global_pool for s in plan.stages]
        self.local = [s.budget.local_pool for s in plan.stages]
        self.req_kv = [s.request_kv_bytes for s in plan.stages]

        self.live = [0] * self.NB
        self.n_dec = [0] * self.NB
        self.zero = [0] * self.NB  # decoders in their only circuit with target 0
        self.prefill: list[deque] = [deque() for _ in range(self.NB)]  # [request, passes left]
        self.finish = [defaultdict(list) for _ in range(self.NB)]
        self.circuit = [0] * self.NB
        self.pending: deque[Request] = deque()
        self.max_live = 0

    def stage_time(self, s: int, batch: int) -> int:
        c = self._tcache[s]
        t = c.get(batch)
        if t is None:
            t = _div_round(stage_compute_time(self.cals[s], batch) * self.layers[s], self.k_ref)
            c[batch] = t
        return t

    def _start_decoding(self, m: int, r: Request, first_circuit: int, remaining: int):
        """``r`` decodes from ``first_circuit`` and emits ``remaining`` more tokens."""
        self.n_dec[m] += 1
        if remaining == 0:
            self.zero[m] += 1
        self.finish[m][first_circuit + max(remaining, 1) - 1].append(r)

    def _admit(self, m: int, r: Request, first_circuit: int, t: int, records: list):
        r.admit_time_us = t
        self.live[m] += 1
        if r.prompt_len == 0:
            self._start_decoding(m, r, first_circuit, r.target_output_len)
        else:
            self.prefill[m].append([r, -(-r.prompt_len // self.chunk)])
        records.append((REQUEST_ADMIT, r.request_id, r.prompt_len))

    def _inputs(self, m: int):
        n = self.live[m]
        if n == 0:
            return [1] * self.S, 0, [0] * self.S
        # one decode step plus at most one prefill chunk pass per circuit
        dec = self.n_dec[m]
        chunk_tokens = 0
        if self.prefill[m]:
            r, left = self.prefill[m][0]
            chunk_tokens = r.prompt_len - (-(-r.prompt_len // self.chunk) - left) * self.chunk
            chunk_tokens = min(self.chunk, chunk_tokens)
        durs = []
        for s in range(self.S):
            d = self.stage_time(s, dec) if dec else 0
            if chunk_tokens:
                d += self.stage_time(s, self.chunk)
            durs.append(d)
        payload = self.hidden * (dec + chunk_tokens)
        if self.offload:
            swap = [min(self.m_g[s], max(0, n * self.req_kv[s] - self.local[s]))
                    for s in range(self.S)]
        else:
            swap = [0] * self.S
        return durs, payload, swap

    def initial(self):
        burst = self.source.initial_burst()
        records = [[] for _ in range(self.NB)]
        for i, r in enumerate(burst):
            m = i % self.NB
            if self.live[m] < self.cap:
                self._admit(m, r, 0, 0, records[m])
            else:
                self.pending.append(r)
        self.max_live = sum(self.live)
        out = []
        for m in range(self.NB):
            durs, payload, swap = self._inputs(m)
            out.append((durs, payload, swap, records[m]))
        return out

    def _complete(self, m: int, r: Request, t: int, records: list):
        r.complete_time_us = t
        self.live[m] -= 1
        records.append((REQUEST_COMPLETE, r.request_id, r.target_output_len))
        rep = self.source.on_complete(r)
        if rep is not None:
            self.pending.append(rep)

    def on_circuit(self, m: int, t: int):
        c = self.circuit[m]
        tokens = self.n_dec[m] - self.zero[m]
        records = []
        for r in self.finish[m].pop(c, ()):
            self.n_dec[m] -= 1
            self._complete(m, r, t, records)
        self.zero[m] = 0
        pq = self.prefill[m]
        if pq:
            head = pq[0]
            head[1] -= 1
            if head[1] == 0:
                pq.popleft()
                r = head[0]
                # the last chunk pass yields the first output token
                if r.target_output_len <= 1:
                    tokens += r.target_output_len
                    self._complete(m, r, t, records)
                else:
                    tokens += 1
                    self._start_decoding(m, r, c + 1, r.target_output_len - 1)
        self.circuit[m] = c + 1
        while self.live[m] < self.cap and self.pending:
            self._admit(m, self.pending.popleft(), c + 1, t, records)
        live = sum(self.live)
        if live > self.max_live:
            self.max_live = live
        durs, payload, swap = self._inputs(m)
        return tokens, durs, payload, swap, records


def check_plan(plan: PipelinePlan, topo: Topology, model: ModelSpec) -> None:
    if plan.num_layers != model.num_layers:
        raise SimulationError("plan/model mismatch: layer counts differ")
    ids = {n.node_id for n in topo.nodes}
    for s in plan.stages:
        if s.node_id not in ids:
            raise SimulationError(f"plan/topology mismatch: unknown node {s.node_id}")
    for lk in plan.ring_links:
        t = topo.link(lk.src, lk.dst)
        if t is None or t != lk:
            raise SimulationError(f"plan/topology mismatch on link {lk.src}->{lk.dst}")


def run(plan: PipelinePlan, topo: Topology, workload: WorkloadSpec, model: ModelSpec,
        backend: Optional[str] = None) -> tuple[SimReport, EventTrace]:
    """Simulate ``workload`` on ``plan`` for the benchmark duration."""
    check_plan(plan, topo, model)
    NB = plan.n_microbatches
    concurrency = workload.concurrency_target or NB * plan.batch_size
    if concurrency < NB:
        raise SimulationError(f"concurrency {concurrency} below N_B={NB} leaves microbatches empty")
    source = RequestSource(workload, concurrency=concurrency)
    drv = _Driver(plan, workload, source)
    initial = drv.initial()
    S = plan.n_stages
    if S > 1:
        lat = [lk.latency_us for lk in plan.ring_links]
        bw = [lk.bandwidth_bytes_per_s for lk in plan.ring_links]
    else:
        lat, bw = [0], [0]
    pcie = [s.pcie_bandwidth_bytes_per_s for s in plan.stages]
    swapping = plan.offload_enabled and NB > 2
    kernel = get_backend(backend)
    try:
        ev = kernel(S, NB, lat, bw, pcie, swapping, workload.duration_us,
                    drv.on_circuit, initial)
    except KernelDeadlock as e:
        raise SimDeadlock(e) from None
    trace = EventTrace(ev)
    report = build_report(trace, plan, (workload.warmup_us, workload.duration_us),
                          seed=workload.rng_seed, max_live=drv.max_live)
    return report, trace


def stage_occupancy(ev: np.ndarray, n_stages: int, n_mb: int, window: tuple[int, int]):
    """Per-stage (busy, swap-wait) microseconds inside ``window``."""
    w0, w1 = window
    busy = np.zeros(n_stages, dtype=np.int64)
    wait = np.zeros(n_stages, dtype=np.int64)
    kind, stage, mb = ev[:, 2], ev[:, 3], ev[:, 4]
    for s in range(n_stages):
        st = ev[(kind == COMPUTE_START) & (stage == s)]
        if not len(st):
            continue
        t0 = st[:, 0]
        t1 = t0 + st[:, 5]
        busy[s] = np.clip(np.minimum(t1, w1) - np.maximum(t0, w0), 0, None).sum()
        prev_end = np.concatenate(([0], t1[:-1]))
        arr_t = np.zeros(len(st), dtype=np.int64)
        ar = ev[(kind == TRANSFER_ARRIVE) & (stage == s)]
        for m in range(n_mb):
            sel = np.flatnonzero(st[:, 4] == m)
            a = ar[ar[:, 4] == m, 0]
            arr_t[sel] = a[:len(sel)]
        ready = np.maximum(arr_t, prev_end)
        wait[s] = np.clip(np.minimum(t0, w1) - np.maximum(ready, w0), 0, None).sum()
    return busy, wait


def build_report(trace: EventTrace, plan: PipelinePlan, window: tuple[int, int],
                 seed: int = 0, max_live: int = 0) -> SimReport:
    ev = trace.events
    stats = windowed_stats(trace, window)
    S = plan.n_stages
    span = window[1] - window[0]
    busy, wait = stage_occupancy(ev, S, plan.n_microbatches, window)
    busy_f = tuple(float(b) / span for b in busy)
    wait_f = tuple(float(w) / span for w in wait)
    bubble_f = tuple(1.0 - b - w for b, w in zip(busy_f, wait_f))
    T = stats.seconds
    m_i = stats.n_input / T
    m_o = stats.n_output / T
    return SimReport(
        measured_window=window,
        input_tokens=stats.n_input,
        output_tokens=stats.n_output,
        wall_time_s=T,
        input_throughput=m_i,
        output_throughput=m_o,
        total_throughput=m_i + m_o,
        busy_fraction=busy_f,
        bubble_fraction_per_stage=bubble_f,
        swap_wait_fraction=wait_f,
        bubble_fraction=sum(bubble_f) / S,
        swap_stall_us=int(wait.sum()),
        completed_requests=stats.completed,
        max_live_requests=max_live,
        n_stages=S,
        n_microbatches=plan.n_microbatches,
        batch_size=plan.batch_size,
        seed=seed,
    )


def steady_state_throughput(plan: PipelinePlan) -> float:
    """Closed-form decode-only output rate in tokens/s.

    Each microbatch emits B tokens per ring circuit; the circuit period is the
    larger of the busiest stage's occupancy (N_B slots, each the longer of
    compute and KV swap-in) and one microbatch's trip around the ring.
    """
    S, NB, B = plan.n_stages, plan.n_microbatches, plan.batch_size
    hops = plan.hop_time_us() if S > 1 else [0]
    swapping = plan.offload_enabled and NB > 2
    slot = []
    for st in plan.stages:
        t = st.compute_time_us
        if swapping:
            nbytes = min(st.budget.m_global_pool,
                         max(0, B * st.request_kv_bytes - st.budget.local_pool))
            sw = -(-nbytes * 1_000_000 // st.pcie_bandwidth_bytes_per_s)
            t = max(t, sw)
        slot.append(t)
    link_tx = [lk.transfer_us(B * plan.hidden_bytes_per_token) for lk in plan.ring_links]
    circuit = sum(st.compute_time_us for st in plan.stages) + sum(hops)
    period = max(NB * max(slot), circuit, NB * max(link_tx, default=0))
    return NB * B * 1e6 / period


__all__ = ["SimReport", "SimulationError", "SimDeadlock", "run", "build_report",
           "steady_state_throughput", "check_plan", "stage_occupancy"]
