"""Pipeline planning: layer partition, page-pool sizing and microbatch count."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Optional, Sequence, Union

from .perf import (
    InfeasibleMemory,
    MemoryBudget,
    _div_round,
    global_pool_size,
    kv_bytes,
    max_batch_size,
    memory_budget,
    page_bytes,
    resolve_calibration,
    stage_compute_time,
)
from .types import KiB, LinkSpec, ModelSpec, Topology, WorkloadSpec, validate_topology


class PlanError(ValueError):
    """No plan can be built for the given inputs."""


@dataclass(frozen=True)
class SchedulerPolicy:
    offload: bool = True
    nb_override: Optional[int] = None
    prefill_chunk: int = 256
    hidden_bytes_per_token: int = 16 * KiB
    # layer count of the stage the calibration table was measured on
    calibration_layers: int = 10
    kv_reserve_fraction: Fraction = Fraction(1, 4)
    ring_order: str = "config"  # or "nearest"
    global_pool_factor: Fraction = Fraction(1)
    # T_S used for M_G: compute-only, or compute plus mean hop ("slot")
    swap_time_basis: str = "compute"
    max_iterations: int = 32

    def __post_init__(self):
        object.__setattr__(self, "kv_reserve_fraction", Fraction(self.kv_reserve_fraction))
        object.__setattr__(self, "global_pool_factor", Fraction(self.global_pool_factor))
        if self.nb_override is not None and self.nb_override < 1:
            raise ValueError("nb_override must be >= 1")
        if self.prefill_chunk < 1:
            raise ValueError("prefill_chunk must be >= 1")
        if self.hidden_bytes_per_token < 0:
            raise ValueError("hidden_bytes_per_token must be >= 0")
        if self.calibration_layers < 1:
            raise ValueError("calibration_layers must be >= 1")
        if not 0 <= self.kv_reserve_fraction < 1:
            raise ValueError("kv_reserve_fraction must be in [0, 1)")
        if self.ring_order not in ("config", "nearest"):
            raise ValueError("ring_order must be 'config' or 'nearest'")
        if self.global_pool_factor <= 0:
            raise ValueError("global_pool_factor must be > 0")
        if self.swap_time_basis not in ("compute", "slot"):
            raise ValueError("swap_time_basis must be 'compute' or 'slot'")


@dataclass(frozen=True)
class StagePlan:
    node_id: str
    layer_start: int
    layer_end: int
    stage_weight_bytes: int
    budget: MemoryBudget
    batch_size_per_microbatch: int
    calibration: str
    pcie_bandwidth_bytes_per_s: int
    page_bytes: int
    request_kv_bytes: int
    compute_time_us: int

    @property
    def num_layers(self) -> int:
        return self.layer_end - self.layer_start

    @property
    def pool_bytes(self) -> int:
        """GPU bytes claimed by page pools (local pools plus both global pools)."""
        b = self.budget
        if b.offload:
            return b.n_microbatches * b.local_pool + 2 * b.m_global_pool
        return b.n_microbatches * b.m_per_microbatch_no_offload


@dataclass(frozen=True)
class PipelinePlan:
    stages: tuple[StagePlan, ...]
    n_microbatches: int
    batch_size: int
    ring_links: tuple[LinkSpec, ...]
    stage_time_us: int
    offload_enabled: bool
    num_layers: int
    prefill_chunk: int
    hidden_bytes_per_token: int
    calibration_layers: int
    converged: bool = True
    iterations: int = 1

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    def hop_latency_us(self) -> list[int]:
        return [lk.latency_us for lk in self.ring_links]

    def hop_time_us(self, batch: Optional[int] = None) -> list[int]:
        """Per-hop latency plus payload serialization for one microbatch step."""
        b = self.batch_size if batch is None else batch
        payload = b * self.hidden_bytes_per_token
        return [lk.latency_us + lk.transfer_us(payload) for lk in self.ring_links]

    def global_pool_bytes(self) -> int:
        return max(s.budget.m_global_pool for s in self.stages)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, default=str)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelinePlan":
        stages = tuple(
            StagePlan(**{**s, "budget": MemoryBudget(**s["budget"])}) for s in d["stages"])
        links = tuple(LinkSpec(**lk) for lk in d["ring_links"])
        return cls(**{**d, "stages": stages, "ring_links": links})

    @classmethod
    def from_json(cls, text: str) -> "PipelinePlan":
        return cls.from_dict(json.loads(text))

    def summary(self) -> str:
        lines = [
            f"stages={self.n_stages} N_B={self.n_microbatches} batch={self.batch_size} "
            f"T_S={self.stage_time_us}us offload={'on' if self.offload_enabled else 'off'} "
            f"converged={self.converged} iterations={self.iterations}",
        ]
        for i, s in enumerate(self.stages):
            b = s.budget
            lines.append(
                f"  stage {i}: node={s.node_id} layers=[{s.layer_start},{s.layer_end}) "
                f"weights={s.stage_weight_bytes} M_KV={b.m_kv} M_G={b.m_global_pool} "
                f"M_B={b.per_microbatch} cap={s.batch_size_per_microbatch} "
                f"t={s.compute_time_us}us")
        for lk in self.ring_links:
            lines.append(f"  hop {lk.src}->{lk.dst}: {lk.latency_us}us "
                         f"@ {lk.bandwidth_bytes_per_s} B/s")
        return "\n".join(lines)


def partition_layers(model: ModelSpec, topo: Topology, node_order: Sequence[str],
                     kv_reserve_fraction: Union[Fraction, float] = Fraction(1, 4)
                     ) -> list[tuple[int, int]]:
    """Contiguous layer ranges in ``node_order``, sized in proportion to each node's
    memory left after reserving ``kv_reserve_fraction`` for KV.

    Layers are handed out one at a time to the node whose load ratio
    (layers / usable memory) would stay lowest, which minimizes the maximum
    ratio over all nodes.
    """
    f = Fraction(kv_reserve_fraction)
    nodes = [topo.node(n) for n in node_order]
    if not nodes:
        raise PlanError("no nodes to partition over")
    if sum(n.gpu_mem_bytes for n in nodes) <= model.weight_bytes_total:
        raise PlanError("insufficient-total-memory: node memory does not exceed model weights")
    usable = [int(n.gpu_mem_bytes * (1 - f)) for n in nodes]
    lb = model.layer_bytes
    for n, u in zip(nodes, usable):
        if u < lb:
            raise PlanError(f"node {n.node_id} too small for even one layer "
                            f"({u} usable bytes < {lb})")
    if model.num_layers < len(nodes):
        raise PlanError("more nodes than layers")
    counts = [1] * len(nodes)
    for _ in range(model.num_layers - len(nodes)):
        best = 0
        for j in range(1, len(nodes)):
            # (counts[j]+1)/usable[j] < (counts[best]+1)/usable[best]
            if (counts[j] + 1) * usable[best] < (counts[best] + 1) * usable[j]:
                best = j
        counts[best] += 1
    ranges, start = [], 0
    for c in counts:
        ranges.append((start, start + c))
        start += c
    return ranges


def min_bubble_free_microbatches(n_stages: int, stage_time_us: int,
                                 hop_latency_us: Union[int, Sequence[int]]) -> int:
    """Smallest N_B with no steady-state idle time on a ring of ``n_stages``.

    ``hop_latency_us`` is one per-hop latency or a sequence of per-hop
    latencies; a sequence contributes its sum (S times the mean hop).
    """
    if stage_time_us <= 0:
        raise ValueError("stage_time_us must be > 0")
    if isinstance(hop_latency_us, int):
        ring_latency = n_stages * hop_latency_us
    else:
        ring_latency = sum(hop_latency_us)
    circuit = n_stages * stage_time_us + ring_latency
    nb = -(-circuit // stage_time_us)
    # ring bound: N_B microbatches must keep the slowest stage busy for a full circuit
    while nb * stage_time_us < circuit:
        nb += 1
    return max(nb, 1)


def ring_order(topo: Topology, mode: str = "config") -> list[str]:
    ids = [n.node_id for n in topo.nodes]
    if mode == "config" or len(ids) <= 2:
        return ids
    order, left = [ids[0]], ids[1:]
    while left:
        cur = order[-1]
        cands = [(topo.link(cur, n).latency_us, i, n) for i, n in enumerate(left)
                 if topo.link(cur, n) is not None]
        if not cands:
            raise PlanError(f"nearest-neighbour ring stuck at {cur}: no outgoing links")
        _, i, nxt = min(cands)
        order.append(nxt)
        left.pop(i)
    return order


def scaled_stage_time(calibration: str, batch: int, layers: int, calibration_layers: int) -> int:
    """Calibrated time for ``batch`` scaled to a stage holding ``layers`` layers."""
    t = stage_compute_time(resolve_calibration(calibration), batch)
    return _div_round(t * layers, calibration_layers)


def _ring_links(topo: Topology, order: Sequence[str]) -> tuple[LinkSpec, ...]:
    if len(order) == 1:
        return ()
    links = []
    for i, src in enumerate(order):
        dst = order[(i + 1) % len(order)]
        lk = topo.link(src, dst)
        if lk is None:
            raise PlanError(f"missing link {src}->{dst} required by the ring")
        links.append(lk)
    return tuple(links)


def plan(model: ModelSpec, topo: Topology, workload: WorkloadSpec,
         policy: SchedulerPolicy = SchedulerPolicy(),
         node_order: Optional[Sequence[str]] = None) -> PipelinePlan:
    """Build a pipeline plan by iterating batch size -> T_S -> M_G -> N_B -> budget
    until the batch size is stable."""
    problems = validate_topology(topo)
    if problems:
        raise PlanError("invalid topology: " + "; ".join(map(str, problems)))
    order = list(node_order) if node_order is not None else ring_order(topo, policy.ring_order)
    seq_budget = max(workload.max_request_tokens, 1)
    if seq_budget > model.max_seq_len:
        raise PlanError(f"requests of {seq_budget} tokens exceed max_seq_len {model.max_seq_len}")

    ranges = partition_layers(model, topo, order, policy.kv_reserve_fraction)
    links = _ring_links(topo, order)
    S = len(order)
    nodes = [topo.node(n) for n in order]
    layers = [b - a for a, b in ranges]
    fracs = [Fraction(k, model.num_layers) for k in layers]
    weights = []
    for i, k in enumerate(layers):
        w = k * model.layer_bytes
        if i == 0:
            w += model.embedding_bytes
        if i == S - 1:
            w += model.output_layer_bytes
        weights.append(w)
    pages = [page_bytes(model, f) for f in fracs]
    req_kv = [kv_bytes(model, seq_budget, f) for f in fracs]

    def evaluate(b: int):
        times = [scaled_stage_time(n.compute_calibration, b, k, policy.calibration_layers)
                 for n, k in zip(nodes, layers)]
        t_s = max(times)
        payload = b * policy.hidden_bytes_per_token
        hops = [lk.latency_us + lk.transfer_us(payload) for lk in links]
        if policy.nb_override is not None:
            nb = policy.nb_override
        else:
            nb = min_bubble_free_microbatches(S, t_s, hops)
        basis = t_s if policy.swap_time_basis == "compute" else t_s + -(-sum(hops) // S)
        budgets = []
        for i, node in enumerate(nodes):
            m_g = 0
            if policy.offload:
                raw = global_pool_size(node.pcie_bandwidth_bytes_per_s, basis)
                raw = int(raw * policy.global_pool_factor)
                cap = (node.gpu_mem_bytes - weights[i]) // 2
                m_g = max(min(raw, cap), 0) // pages[i] * pages[i]
            budgets.append(memory_budget(node, weights[i], nb, m_g, policy.offload))
        caps = [max_batch_size(bd.per_microbatch, model, f, seq_budget)
                for bd, f in zip(budgets, fracs)]
        b_new = min(caps)
        if workload.concurrency_target is not None:
            b_new = min(b_new, -(-workload.concurrency_target // nb))
        return times, t_s, nb, budgets, caps, b_new

    b = 1
    converged = False
    it = 0
    for it in range(1, policy.max_iterations + 1):
        times, t_s, nb, budgets, caps, b_new = evaluate(b)
        if b_new < 1:
            raise InfeasibleMemory(
                "a single request's KV does not fit in the per-microbatch budget "
                f"(N_B={nb}, budgets={[bd.per_microbatch for bd in budgets]}, "
                f"request KV={req_kv})")
        if b_new == b:
            converged = True
            break
        b = b_new
    if not converged:
        b = b_new
        times = [scaled_stage_time(n.compute_calibration, b, k, policy.calibration_layers)
                 for n, k in zip(nodes, layers)]
        t_s = max(times)

    stages = tuple(
        StagePlan(
            node_id=n.node_id, layer_start=r[0], layer_end=r[1],
            stage_weight_bytes=weights[i], budget=budgets[i],
            batch_size_per_microbatch=caps[i], calibration=n.compute_calibration,
            pcie_bandwidth_bytes_per_s=n.pcie_bandwidth_bytes_per_s,
            page_bytes=pages[i], request_kv_bytes=req_kv[i], compute_time_us=times[i])
        for i, (n, r) in enumerate(zip(nodes, ranges)))
    result = PipelinePlan(
        stages=stages, n_microbatches=nb, batch_size=b, ring_links=links,
        stage_time_us=t_s, offload_enabled=policy.offload, num_layers=model.num_layers,
        prefill_chunk=policy.prefill_chunk,
        hidden_bytes_per_token=policy.hidden_bytes_per_token,
        calibration_layers=policy.calibration_layers, converged=converged, iterations=it)
    for s in result.stages:
        if s.stage_weight_bytes + s.pool_bytes > topo.node(s.node_id).gpu_mem_bytes:
            raise InfeasibleMemory(f"stage on {s.node_id} over-commits GPU memory")
    return result


__all__ = [
    "PlanError", "SchedulerPolicy", "StagePlan", "PipelinePlan", "partition_layers",
    "min_bubble_free_microbatches", "ring_order", "plan", "scaled_stage_time",
]
