from __future__ import annotations

import os
from pathlib import Path

import pytest
from hypothesis import settings

from ringpipe.types import GiB, KiB, MiB, LinkSpec, ModelSpec, NodeSpec, Topology, WorkloadSpec

settings.register_profile("ci", deadline=None, max_examples=100, derandomize=True)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))

FIXTURES = Path(__file__).parent / "fixtures"
FLAT70 = str(Path(__file__).parents[1] / "src" / "ringpipe" / "data" / "flat70ms.csv")


def toy_model(num_layers: int = 8) -> ModelSpec:
    return ModelSpec(num_layers=num_layers, weight_bytes_total=4 * GiB,
                     embedding_bytes=256 * MiB, output_layer_bytes=256 * MiB,
                     kv_bytes_per_token=128 * KiB, max_seq_len=4096, name="toy")


def ring(n: int, latency_us: int = 0, mem: int = 24 * GiB, pcie: int = 32_000_000_000,
         bw: int = 1_250_000_000, calibration: str = "table1", prefix: str = "n") -> Topology:
    nodes = [NodeSpec(f"{prefix}{i}", mem, pcie, calibration) for i in range(n)]
    links = [LinkSpec(f"{prefix}{i}", f"{prefix}{(i + 1) % n}", latency_us, bw)
             for i in range(n)] if n > 1 else []
    return Topology(nodes, links)


def decode_only(output_len: int = 64, concurrency=None, duration: float = 60.0,
                warmup: float = 12.0, seed: int = 1) -> WorkloadSpec:
    return WorkloadSpec(0, 0, output_len, output_len, concurrency, duration, warmup, seed)


@pytest.fixture
def flat70() -> str:
    return FLAT70
