"""Shared domain vocabulary: model, hardware, topology, workload and pricing.

All byte quantities are integers and all times are integer microseconds.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

GiB = 1 << 30
MiB = 1 << 20
KiB = 1 << 10


@dataclass(frozen=True)
class ModelSpec:
    num_layers: int
    weight_bytes_total: int
    embedding_bytes: int
    output_layer_bytes: int
    kv_bytes_per_token: int
    max_seq_len: int
    name: str = "model"

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        for f in ("weight_bytes_total", "embedding_bytes", "output_layer_bytes",
                  "kv_bytes_per_token", "max_seq_len"):
            if getattr(self, f) <= 0:
                raise ValueError(f"{f} must be > 0")
        if self.embedding_bytes + self.output_layer_bytes >= self.weight_bytes_total:
            raise ValueError("embedding and output layers exceed total weights")

    @property
    def layer_bytes(self) -> int:
        """Bytes of one transformer layer (ceil, so stage sums never undercount)."""
        body = self.weight_bytes_total - self.embedding_bytes - self.output_layer_bytes
        return -(-body // self.num_layers)


@dataclass(frozen=True)
class NodeSpec:
    node_id: str
    gpu_mem_bytes: int
    pcie_bandwidth_bytes_per_s: int
    # "table1" for the bundled calibration, otherwise a CSV path
    compute_calibration: str = "table1"

    def __post_init__(self):
        if self.gpu_mem_bytes <= 0:
            raise ValueError(f"node {self.node_id}: gpu_mem_bytes must be > 0")
        if self.pcie_bandwidth_bytes_per_s <= 0:
            raise ValueError(f"node {self.node_id}: pcie_bandwidth_bytes_per_s must be > 0")


@dataclass(frozen=True)
class LinkSpec:
    """One-way directed link; latency is fixed and direction specific."""

    src: str
    dst: str
    latency_us: int
    bandwidth_bytes_per_s: int

    def transfer_us(self, payload_bytes: int) -> int:
        return -(-payload_bytes * 1_000_000 // self.bandwidth_bytes_per_s)


@dataclass(frozen=True)
class Topology:
    nodes: tuple[NodeSpec, ...]
    links: tuple[LinkSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "links", tuple(self.links))

    def node(self, node_id: str) -> NodeSpec:
        for n in self.nodes:
            if n.node_id == node_id:
                return n
        raise KeyError(node_id)

    def link(self, src: str, dst: str) -> Optional[LinkSpec]:
        for lk in self.links:
            if lk.src == src and lk.dst == dst:
                return lk
        return None

    def with_latency(self, latency_us: int) -> "Topology":
        """Copy of this topology with every link set to the same one-way latency."""
        links = tuple(LinkSpec(lk.src, lk.dst, latency_us, lk.bandwidth_bytes_per_s)
                      for lk in self.links)
        return Topology(self.nodes, links)


@dataclass(frozen=True)
class WorkloadSpec:
    prompt_len_min: int
    prompt_len_max: int
    output_len_min: int
    output_len_max: int
    # None: fill every planned batch slot
    concurrency_target: Optional[int]
    bench_duration_s: float
    warmup_s: float
    rng_seed: int = 0
    # optional request trace (prompt_len, output_len per line) replacing the generator
    request_trace: Optional[str] = None

    def __post_init__(self):
        if not 0 <= self.prompt_len_min <= self.prompt_len_max:
            raise ValueError("need 0 <= prompt_len_min <= prompt_len_max")
        if not 0 <= self.output_len_min <= self.output_len_max:
            raise ValueError("need 0 <= output_len_min <= output_len_max")
        if self.concurrency_target is not None and self.concurrency_target < 1:
            raise ValueError("concurrency_target must be >= 1")
        if not 0 <= self.warmup_s < self.bench_duration_s:
            raise ValueError("need 0 <= warmup_s < bench_duration_s")

    @property
    def duration_us(self) -> int:
        return round(self.bench_duration_s * 1_000_000)

    @property
    def warmup_us(self) -> int:
        return round(self.warmup_s * 1_000_000)

    @property
    def max_request_tokens(self) -> int:
        return self.prompt_len_max + self.output_len_max


@dataclass(frozen=True)
class PricingSpec:
    """Prices are kept as exact decimals (Fraction) to keep threshold comparisons exact.

    ``compute_cost_per_hour`` is in currency/hour, token prices in currency/token.
    """

    compute_cost_per_hour: Fraction
    price_in_per_token: Fraction
    price_out_per_token: Fraction
    name: str = ""

    def __post_init__(self):
        for f in ("compute_cost_per_hour", "price_in_per_token", "price_out_per_token"):
            v = _exact(getattr(self, f))
            if v < 0:
                raise ValueError(f"{f} must be >= 0")
            object.__setattr__(self, f, v)

    @classmethod
    def unified(cls, cost_per_hour, price_per_token, name: str = "") -> "PricingSpec":
        p = _exact(price_per_token)
        return cls(_exact(cost_per_hour), p, p, name)

    @classmethod
    def per_million(cls, cost_per_hour, price_per_million, name: str = "") -> "PricingSpec":
        return cls.unified(cost_per_hour, _exact(price_per_million) / 1_000_000, name)

    @property
    def is_unified(self) -> bool:
        return self.price_in_per_token == self.price_out_per_token

    @property
    def price_per_token(self) -> Fraction:
        if not self.is_unified:
            raise ValueError("pricing is not unified (P_I != P_O)")
        return self.price_in_per_token


def _exact(x) -> Fraction:
    # floats go through their shortest repr so 0.35 means 35/100, not the binary value
    if isinstance(x, float):
        return Fraction(repr(x))
    return Fraction(x)


@dataclass(frozen=True)
class Violation:
    kind: str
    entity: str
    message: str

    def __str__(self):
        return f"{self.kind}: {self.entity}: {self.message}"


def validate_topology(topo: Topology) -> list[Violation]:
    """Return every topology invariant violation; empty list when well-formed.

    The result is sorted so that permuting nodes or links yields the same list.
    """
    out: set[Violation] = set()
    seen: dict[str, int] = {}
    for n in topo.nodes:
        seen[n.node_id] = seen.get(n.node_id, 0) + 1
        if n.gpu_mem_bytes <= 0:
            out.add(Violation("bad-node", n.node_id, "gpu_mem_bytes must be > 0"))
        if n.pcie_bandwidth_bytes_per_s <= 0:
            out.add(Violation("bad-node", n.node_id, "pcie_bandwidth_bytes_per_s must be > 0"))
    for nid, count in seen.items():
        if count > 1:
            out.add(Violation("duplicate-id", nid, f"node id appears {count} times"))
    pairs: dict[tuple[str, str], int] = {}
    for lk in topo.links:
        name = f"{lk.src}->{lk.dst}"
        pairs[(lk.src, lk.dst)] = pairs.get((lk.src, lk.dst), 0) + 1
        for end in (lk.src, lk.dst):
            if end not in seen:
                out.add(Violation("unknown-endpoint", name, f"node {end!r} does not exist"))
        if lk.src == lk.dst:
            out.add(Violation("self-link", name, "src and dst are the same node"))
        if lk.latency_us < 0:
            out.add(Violation("bad-link", name, "latency_us must be >= 0"))
        if lk.bandwidth_bytes_per_s <= 0:
            out.add(Violation("bad-link", name, "bandwidth_bytes_per_s must be > 0"))
    for (s, d), count in pairs.items():
        if count > 1:
            out.add(Violation("duplicate-link", f"{s}->{d}", f"link appears {count} times"))
    return sorted(out, key=lambda v: (v.kind, v.entity, v.message))


# Llama 3 70B: vocab 128256 x hidden 8192 in 16-bit for embedding and output head.
_LLAMA70B_VOCAB_BYTES = 128256 * 8192 * 2


def llama70b_preset() -> ModelSpec:
    """Llama 3 70B as a three-class weight model.

    Total weights are the quoted 130 (GiB) rather than the ~141 GB a 16-bit
    70.6B-parameter model would take. KV is 1.25 GiB per 4096 tokens.
    """
    return ModelSpec(
        num_layers=80,
        weight_bytes_total=130 * GiB,
        embedding_bytes=_LLAMA70B_VOCAB_BYTES,
        output_layer_bytes=_LLAMA70B_VOCAB_BYTES,
        kv_bytes_per_token=(5 * GiB // 4) // 4096,
        max_seq_len=4096,
        name="llama3-70b",
    )


__all__ = [
    "GiB", "MiB", "KiB", "ModelSpec", "NodeSpec", "LinkSpec", "Topology",
    "WorkloadSpec", "PricingSpec", "Violation", "validate_topology", "llama70b_preset",
]
