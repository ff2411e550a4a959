"""Planning and discrete-event simulation of pipeline-parallel LLM offline serving
over high-latency links."""
from .types import (
    LinkSpec, ModelSpec, NodeSpec, PricingSpec, Topology, WorkloadSpec, llama70b_preset,
    validate_topology,
)

__version__ = "0.1.0"
