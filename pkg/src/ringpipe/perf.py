"""Calibrated stage timing, KV-cache sizing and per-microbatch memory budgets."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Union

from .types import ModelSpec, NodeSpec

PAGE_TOKENS = 256

Ratio = Union[Fraction, float, int]


class CalibrationError(ValueError):
    pass


class InfeasibleMemory(ValueError):
    """Raised when weights or global pools do not fit on a node."""


@dataclass(frozen=True)
class CalibrationTable:
    """(batch_size, total_time_us) pairs for one stage running a decode step."""

    entries: tuple[tuple[int, int], ...]
    name: str = ""

    def __post_init__(self):
        entries = tuple((int(b), int(t)) for b, t in self.entries)
        object.__setattr__(self, "entries", entries)
        if len(entries) < 2:
            raise CalibrationError("calibration needs at least two entries")
        for (b0, t0), (b1, t1) in zip(entries, entries[1:]):
            if b1 <= b0:
                raise CalibrationError("batch sizes must be strictly increasing")
            if t1 < t0:
                raise CalibrationError("times must be non-decreasing in batch size")
        if entries[0][0] < 1:
            raise CalibrationError("batch sizes must be >= 1")


def _div_round(num: int, den: int) -> int:
    """Integer num/den rounded half-up (den > 0)."""
    return (2 * num + den) // (2 * den)


def stage_compute_time(cal: CalibrationTable, batch_size: int) -> int:
    """Stage time in µs: exact at table points, piecewise-linear between them,
    linear from the last segment above the table, flat below it."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    e = cal.entries
    if batch_size <= e[0][0]:
        return e[0][1]
    for (b0, t0), (b1, t1) in zip(e, e[1:]):
        if batch_size <= b1:
            return t0 + _div_round((t1 - t0) * (batch_size - b0), b1 - b0)
    (b0, t0), (b1, t1) = e[-2], e[-1]
    return t1 + _div_round((t1 - t0) * (batch_size - b1), b1 - b0)


def per_instance_time(cal: CalibrationTable, batch_size: int) -> int:
    return _div_round(stage_compute_time(cal, batch_size), batch_size)


def load_calibration_csv(path: Union[str, Path], name: str = "") -> CalibrationTable:
    """Read a ``batch_size,total_time_ms`` CSV (header optional)."""
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.reader(fh):
            if not rec or rec[0].strip().startswith("#"):
                continue
            try:
                b = int(rec[0])
            except ValueError:
                continue  # header
            ms = Fraction(rec[1].strip())
            rows.append((b, round(ms * 1000)))
    return CalibrationTable(tuple(rows), name=name or str(path))


@lru_cache(maxsize=None)
def table1() -> CalibrationTable:
    """The bundled decode-step calibration (batch 1..256)."""
    with resources.as_file(resources.files("ringpipe.data") / "table1.csv") as p:
        return load_calibration_csv(p, name="table1")


def resolve_calibration(ref: str) -> CalibrationTable:
    if ref == "table1":
        return table1()
    return _load_cached(str(ref))


@lru_cache(maxsize=None)
def _load_cached(path: str) -> CalibrationTable:
    return load_calibration_csv(path)


def _ratio(x: Ratio) -> Fraction:
    f = Fraction(x)
    if not 0 < f <= 1:
        raise ValueError("stage_layer_fraction must be in (0, 1]")
    return f


def page_bytes(model: ModelSpec, stage_layer_fraction: Ratio = 1) -> int:
    """Bytes of one KV page (PAGE_TOKENS tokens) for the given share of layers."""
    f = _ratio(stage_layer_fraction)
    v = PAGE_TOKENS * model.kv_bytes_per_token * f
    return -(-v.numerator // v.denominator)


def kv_bytes(model: ModelSpec, tokens: int, stage_layer_fraction: Ratio = 1) -> int:
    if tokens < 0:
        raise ValueError("tokens must be >= 0")
    pages = -(-tokens // PAGE_TOKENS)
    return pages * page_bytes(model, stage_layer_fraction)


def global_pool_size(pcie_bandwidth: int, stage_time_us: int, page: int = 1) -> int:
    """Bandwidth-time product W x T_S, floored to a whole number of pages."""
    if pcie_bandwidth <= 0 or stage_time_us <= 0:
        raise ValueError("pcie_bandwidth and stage_time_us must be > 0")
    raw = pcie_bandwidth * stage_time_us // 1_000_000
    return raw // page * page


@dataclass(frozen=True)
class MemoryBudget:
    m_total: int
    m_weights: int
    m_kv: int
    m_global_pool: int
    n_microbatches: int
    m_per_microbatch_no_offload: int
    m_per_microbatch_offload: int
    offload: bool

    @property
    def per_microbatch(self) -> int:
        """Memory one microbatch may fill under the active mode."""
        if self.offload:
            return self.m_per_microbatch_offload
        return self.m_per_microbatch_no_offload

    @property
    def local_pool(self) -> int:
        """Per-microbatch local page pool (never offloaded)."""
        return self.per_microbatch - self.m_global_pool


def memory_budget(node: NodeSpec, stage_weight_bytes: int, n_microbatches: int,
                  m_global_pool: int = 0, offload: bool = True) -> MemoryBudget:
    if n_microbatches < 1:
        raise ValueError("n_microbatches must be >= 1")
    m = node.gpu_mem_bytes
    if stage_weight_bytes > m:
        raise InfeasibleMemory(
            f"weights-exceed-memory: node {node.node_id} needs {stage_weight_bytes} B "
            f"for weights but has {m} B")
    m_kv = m - stage_weight_bytes
    no_off = m_kv // n_microbatches
    if not offload:
        return MemoryBudget(m, stage_weight_bytes, m_kv, 0, n_microbatches, no_off, no_off, False)
    if m_global_pool < 0 or 2 * m_global_pool > m_kv:
        raise InfeasibleMemory(
            f"global-pools-exceed-kv-memory: node {node.node_id} has {m_kv} B for KV, "
            f"two global pools need {2 * m_global_pool} B")
    off = (m_kv - 2 * m_global_pool) // n_microbatches + m_global_pool
    return MemoryBudget(m, stage_weight_bytes, m_kv, m_global_pool, n_microbatches,
                        no_off, off, True)


def max_batch_size(budget_bytes: int, model: ModelSpec, stage_layer_fraction: Ratio,
                   seq_len_budget: int) -> int:
    """Largest request count whose worst-case KV fits in ``budget_bytes`` (0 if none)."""
    if seq_len_budget < 1:
        raise ValueError("seq_len_budget must be >= 1")
    per_req = kv_bytes(model, seq_len_budget, stage_layer_fraction)
    return max(budget_bytes, 0) // per_req
