"""Strict YAML run configuration.

Unknown keys are errors. Every diagnostic carries the source line and a dotted
field path such as ``nodes[2].gpu_mem_bytes``.
"""
from __future__ import annotations

import os
import re
from dataclasses import dataclass, replace
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Any, Optional

import yaml

from .economics import load_preset
from .planner import SchedulerPolicy
from .types import (
    GiB, KiB, MiB, LinkSpec, ModelSpec, NodeSpec, PricingSpec, Topology, WorkloadSpec,
    llama70b_preset,
)

CONFIG_DIR_ENV = "RINGPIPE_CONFIG_DIR"
POLICIES = ("baseline", "offload", "opt")

_UNITS = {
    "": 1, "B": 1,
    "KB": 10**3, "MB": 10**6, "GB": 10**9, "TB": 10**12,
    "KiB": KiB, "MiB": MiB, "GiB": GiB, "TiB": 1 << 40,
}
_QTY = re.compile(r"^\s*([0-9][0-9_]*(?:\.[0-9]+)?(?:[eE][+-]?[0-9]+)?)\s*([KMGT]i?B|B)?\s*(?:/s)?\s*$")
_TIME = re.compile(r"^\s*([0-9][0-9_]*(?:\.[0-9]+)?(?:[eE][+-]?[0-9]+)?)\s*(us|ms|s)\s*$")


class ConfigError(ValueError):
    def __init__(self, message: str, path: str = "", line: Optional[int] = None,
                 source: str = ""):
        self.path = path
        self.line = line
        self.source = source
        where = source or "<config>"
        if line is not None:
            where += f":{line}"
        if path:
            where += f": {path}"
        super().__init__(f"{where}: {message}")


@dataclass(frozen=True)
class SweepSpec:
    latencies_us: tuple[int, ...]
    policies: tuple[str, ...] = POLICIES


@dataclass(frozen=True)
class RunConfig:
    model: ModelSpec
    topology: Topology
    workload: WorkloadSpec
    policy: SchedulerPolicy
    pricing: Optional[PricingSpec] = None
    sweep: Optional[SweepSpec] = None
    source: str = ""

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, workload=replace(self.workload, rng_seed=seed))

    def with_policy(self, name: str, nb: Optional[int] = None) -> "RunConfig":
        return replace(self, policy=policy_variant(self.policy, name, self.topology, nb))


def policy_variant(base: SchedulerPolicy, name: str, topo: Topology,
                   nb: Optional[int] = None) -> SchedulerPolicy:
    """Named scheduler variants compared in latency sweeps.

    baseline: no offload, N_B fixed (``nb`` or the stage count);
    offload: offload on, N_B fixed the same way;
    opt: offload on, N_B from the planner unless ``nb`` is given.
    """
    fixed = nb if nb is not None else (base.nb_override or len(topo.nodes))
    if name == "baseline":
        return replace(base, offload=False, nb_override=fixed)
    if name == "offload":
        return replace(base, offload=True, nb_override=fixed)
    if name == "opt":
        return replace(base, offload=True, nb_override=nb)
    raise ValueError(f"unknown policy {name!r}; choose from {POLICIES}")


# ---------------------------------------------------------------- YAML plumbing

class _Node:
    """A parsed YAML value together with its source line."""

    __slots__ = ("value", "line")

    def __init__(self, value, line):
        self.value = value
        self.line = line


def _wrap(node: yaml.Node, source: str) -> _Node:
    line = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        out = {}
        for k, v in node.value:
            key = k.value
            if key in out:
                raise ConfigError(f"duplicate key {key!r}", line=k.start_mark.line + 1,
                                  source=source)
            out[key] = _wrap(v, source)
        return _Node(out, line)
    if isinstance(node, yaml.SequenceNode):
        return _Node([_wrap(v, source) for v in node.value], line)
    return _Node(yaml.safe_load(yaml.serialize(node)), line)


class _Reader:
    def __init__(self, source: str, base_dir: Path):
        self.source = source
        self.base_dir = base_dir

    def err(self, msg, path, node: Optional[_Node]) -> ConfigError:
        return ConfigError(msg, path, node.line if node is not None else None, self.source)

    def mapping(self, node: _Node, path: str, allowed: set[str],
                required: set[str] = frozenset()) -> dict[str, _Node]:
        if not isinstance(node.value, dict):
            raise self.err("expected a mapping", path, node)
        for k, v in node.value.items():
            if k not in allowed:
                raise self.err(f"unknown field (allowed: {', '.join(sorted(allowed))})",
                               _join(path, k), v)
        for k in sorted(required):
            if k not in node.value:
                raise self.err(f"missing required field {k!r}", path, node)
        return node.value

    def seq(self, node: _Node, path: str) -> list[_Node]:
        if not isinstance(node.value, list):
            raise self.err("expected a list", path, node)
        return node.value

    def integer(self, node: _Node, path: str, minimum: Optional[int] = None) -> int:
        v = node.value
        if isinstance(v, bool) or not isinstance(v, int):
            raise self.err(f"expected an integer, got {v!r}", path, node)
        if minimum is not None and v < minimum:
            raise self.err(f"must be >= {minimum}", path, node)
        return v

    def number(self, node: _Node, path: str) -> float:
        v = node.value
        if isinstance(v, str):
            try:
                v = float(v)
            except ValueError:
                raise self.err(f"expected a number, got {node.value!r}", path, node) from None
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise self.err(f"expected a number, got {v!r}", path, node)
        return v

    def exact(self, node: _Node, path: str) -> Fraction:
        v = node.value
        try:
            if isinstance(v, bool):
                raise ValueError
            if isinstance(v, float):
                return Fraction(repr(v))
            return Fraction(str(v).strip())
        except (ValueError, ZeroDivisionError):
            raise self.err(f"expected a decimal number, got {v!r}", path, node) from None

    def boolean(self, node: _Node, path: str) -> bool:
        if not isinstance(node.value, bool):
            raise self.err(f"expected true/false, got {node.value!r}", path, node)
        return node.value

    def string(self, node: _Node, path: str) -> str:
        if not isinstance(node.value, str):
            raise self.err(f"expected a string, got {node.value!r}", path, node)
        return node.value

    def quantity(self, node: _Node, path: str) -> int:
        """Bytes or bytes/s: an integer, or a string like ``24GiB`` / ``32e9`` / ``10GB/s``."""
        v = node.value
        if isinstance(v, bool):
            raise self.err(f"expected a byte quantity, got {v!r}", path, node)
        if isinstance(v, int):
            return v
        if isinstance(v, float) and v.is_integer():
            return int(v)
        if isinstance(v, str):
            m = _QTY.match(v)
            if m:
                n = Fraction(m.group(1).replace("_", "")) * _UNITS[m.group(2) or ""]
                if n.denominator == 1:
                    return int(n)
        raise self.err(f"expected a whole byte quantity, got {v!r}", path, node)

    def duration_us(self, node: _Node, path: str) -> int:
        """Microseconds: an integer, or a string like ``64ms`` / ``0.5s`` / ``250us``."""
        v = node.value
        if isinstance(v, int) and not isinstance(v, bool):
            return v
        if isinstance(v, str):
            m = _TIME.match(v)
            if m:
                scale = {"us": 1, "ms": 1000, "s": 1_000_000}[m.group(2)]
                n = Fraction(m.group(1).replace("_", "")) * scale
                if n.denominator == 1:
                    return int(n)
        raise self.err(f"expected whole microseconds (int, or '64ms'), got {v!r}", path, node)


def _join(path: str, key) -> str:
    if isinstance(key, int):
        return f"{path}[{key}]"
    return f"{path}.{key}" if path else str(key)


# ---------------------------------------------------------------- sections

_MODEL_FIELDS = {"preset", "name", "num_layers", "weight_bytes_total", "embedding_bytes",
                 "output_layer_bytes", "kv_bytes_per_token", "max_seq_len"}
_MODEL_PRESETS = {"llama3-70b": llama70b_preset}


def _model(r: _Reader, node: _Node) -> ModelSpec:
    d = r.mapping(node, "model", _MODEL_FIELDS)
    if "preset" in d:
        name = r.string(d["preset"], "model.preset")
        if name not in _MODEL_PRESETS:
            raise r.err(f"unknown model preset {name!r} (have {sorted(_MODEL_PRESETS)})",
                        "model.preset", d["preset"])
        base = _MODEL_PRESETS[name]()
        extra = set(d) - {"preset"}
        if extra:
            k = sorted(extra)[0]
            raise r.err("preset models take no other fields", _join("model", k), d[k])
        return base
    req = _MODEL_FIELDS - {"preset", "name"}
    r.mapping(node, "model", _MODEL_FIELDS, req)
    kw = {k: r.quantity(d[k], f"model.{k}") for k in
          ("weight_bytes_total", "embedding_bytes", "output_layer_bytes", "kv_bytes_per_token")}
    kw["num_layers"] = r.integer(d["num_layers"], "model.num_layers")
    kw["max_seq_len"] = r.integer(d["max_seq_len"], "model.max_seq_len")
    if "name" in d:
        kw["name"] = r.string(d["name"], "model.name")
    try:
        return ModelSpec(**kw)
    except ValueError as e:
        raise r.err(str(e), "model", node) from None


_NODE_FIELDS = {"node_id", "gpu_mem_bytes", "pcie_bandwidth_bytes_per_s", "compute_calibration"}


def _calibration_ref(r: _Reader, node: _Node, path: str) -> str:
    ref = r.string(node, path)
    if ref == "table1":
        return ref
    p = Path(ref)
    if not p.is_absolute():
        p = r.base_dir / p
    if not p.exists():
        raise r.err(f"calibration file not found: {p}", path, node)
    return str(p)


def _one_node(r: _Reader, node: _Node, path: str, node_id: Optional[str] = None) -> NodeSpec:
    allowed = _NODE_FIELDS if node_id is None else _NODE_FIELDS - {"node_id"}
    req = allowed - {"compute_calibration"}
    d = r.mapping(node, path, allowed, req)
    nid = node_id if node_id is not None else str(d["node_id"].value)
    cal = "table1"
    if "compute_calibration" in d:
        cal = _calibration_ref(r, d["compute_calibration"], _join(path, "compute_calibration"))
    mem = r.quantity(d["gpu_mem_bytes"], _join(path, "gpu_mem_bytes"))
    bw = r.quantity(d["pcie_bandwidth_bytes_per_s"], _join(path, "pcie_bandwidth_bytes_per_s"))
    try:
        return NodeSpec(nid, mem, bw, cal)
    except ValueError as e:
        raise r.err(str(e), path, node) from None


def _nodes(r: _Reader, node: _Node) -> tuple[NodeSpec, ...]:
    """Either an explicit list, or ``{count, id_prefix, template}`` for identical nodes."""
    if isinstance(node.value, dict):
        d = r.mapping(node, "nodes", {"count", "id_prefix", "template"}, {"count", "template"})
        count = r.integer(d["count"], "nodes.count", minimum=1)
        prefix = r.string(d["id_prefix"], "nodes.id_prefix") if "id_prefix" in d else "n"
        return tuple(_one_node(r, d["template"], "nodes.template", f"{prefix}{i}")
                     for i in range(count))
    items = r.seq(node, "nodes")
    if not items:
        raise r.err("at least one node is required", "nodes", node)
    return tuple(_one_node(r, n, f"nodes[{i}]") for i, n in enumerate(items))


_LINK_FIELDS = {"src", "dst", "latency_us", "bandwidth_bytes_per_s"}
_RING_FIELDS = {"latency_us", "bandwidth_bytes_per_s", "bidirectional"}


def _links(r: _Reader, node: _Node, nodes: tuple[NodeSpec, ...]) -> tuple[LinkSpec, ...]:
    """Either an explicit list, or ``{ring: {...}}`` linking nodes in listed order."""
    if isinstance(node.value, dict):
        d = r.mapping(node, "links", {"ring"}, {"ring"})
        rd = r.mapping(d["ring"], "links.ring", _RING_FIELDS,
                       {"latency_us", "bandwidth_bytes_per_s"})
        lat = r.duration_us(rd["latency_us"], "links.ring.latency_us")
        bw = r.quantity(rd["bandwidth_bytes_per_s"], "links.ring.bandwidth_bytes_per_s")
        both = r.boolean(rd["bidirectional"], "links.ring.bidirectional") \
            if "bidirectional" in rd else False
        ids = [n.node_id for n in nodes]
        out = []
        if len(ids) > 1:
            for i, a in enumerate(ids):
                b = ids[(i + 1) % len(ids)]
                out.append(LinkSpec(a, b, lat, bw))
                if both and len(ids) > 2:
                    out.append(LinkSpec(b, a, lat, bw))
        return tuple(out)
    out = []
    for i, item in enumerate(r.seq(node, "links")):
        path = f"links[{i}]"
        d = r.mapping(item, path, _LINK_FIELDS, _LINK_FIELDS)
        out.append(LinkSpec(str(d["src"].value), str(d["dst"].value),
                            r.duration_us(d["latency_us"], path + ".latency_us"),
                            r.quantity(d["bandwidth_bytes_per_s"], path + ".bandwidth_bytes_per_s")))
    return tuple(out)


_WORKLOAD_FIELDS = {"prompt_len_min", "prompt_len_max", "output_len_min", "output_len_max",
                    "concurrency_target", "bench_duration_s", "warmup_s", "rng_seed",
                    "request_trace"}


def _workload(r: _Reader, node: _Node) -> WorkloadSpec:
    req = {"prompt_len_min", "prompt_len_max", "output_len_min", "output_len_max",
           "bench_duration_s", "warmup_s"}
    d = r.mapping(node, "workload", _WORKLOAD_FIELDS, req)
    kw = {k: r.integer(d[k], f"workload.{k}", minimum=0) for k in
          ("prompt_len_min", "prompt_len_max", "output_len_min", "output_len_max")}
    ct = d.get("concurrency_target")
    if ct is None or ct.value in (None, "auto"):
        kw["concurrency_target"] = None
    else:
        kw["concurrency_target"] = r.integer(ct, "workload.concurrency_target", minimum=1)
    kw["bench_duration_s"] = r.number(d["bench_duration_s"], "workload.bench_duration_s")
    kw["warmup_s"] = r.number(d["warmup_s"], "workload.warmup_s")
    kw["rng_seed"] = r.integer(d["rng_seed"], "workload.rng_seed") if "rng_seed" in d else 0
    if "request_trace" in d and d["request_trace"].value is not None:
        p = Path(r.string(d["request_trace"], "workload.request_trace"))
        kw["request_trace"] = str(p if p.is_absolute() else r.base_dir / p)
    try:
        return WorkloadSpec(**kw)
    except ValueError as e:
        raise r.err(str(e), "workload", node) from None


_PRICING_FIELDS = {"preset", "compute_cost_per_hour", "price_per_million",
                   "price_in_per_million", "price_out_per_million"}


def _pricing(r: _Reader, node: _Node) -> PricingSpec:
    d = r.mapping(node, "pricing", _PRICING_FIELDS)
    if "preset" in d:
        if len(d) > 1:
            k = sorted(set(d) - {"preset"})[0]
            raise r.err("a pricing preset takes no other fields", _join("pricing", k), d[k])
        try:
            return load_preset(r.string(d["preset"], "pricing.preset"))
        except KeyError as e:
            raise r.err(e.args[0], "pricing.preset", d["preset"]) from None
    if "compute_cost_per_hour" not in d:
        raise r.err("missing required field 'compute_cost_per_hour'", "pricing", node)
    c = r.exact(d["compute_cost_per_hour"], "pricing.compute_cost_per_hour")
    split = {"price_in_per_million", "price_out_per_million"}
    if "price_per_million" in d:
        if split & set(d):
            raise r.err("give either price_per_million or the in/out pair", "pricing", node)
        return PricingSpec.per_million(c, r.exact(d["price_per_million"],
                                                  "pricing.price_per_million"))
    if not split <= set(d):
        raise r.err("missing price_per_million (or both price_in/out_per_million)",
                    "pricing", node)
    pin = r.exact(d["price_in_per_million"], "pricing.price_in_per_million") / 1_000_000
    pout = r.exact(d["price_out_per_million"], "pricing.price_out_per_million") / 1_000_000
    try:
        return PricingSpec(c, pin, pout)
    except ValueError as e:
        raise r.err(str(e), "pricing", node) from None


_SCHED_FIELDS = {"offload", "n_microbatches", "prefill_chunk", "hidden_bytes_per_token",
                 "calibration_layers", "kv_reserve_fraction", "ring_order",
                 "global_pool_factor", "swap_time_basis", "max_iterations"}


def _scheduler(r: _Reader, node: Optional[_Node]) -> SchedulerPolicy:
    if node is None:
        return SchedulerPolicy()
    d = r.mapping(node, "scheduler", _SCHED_FIELDS)
    kw: dict[str, Any] = {}
    if "offload" in d:
        kw["offload"] = r.boolean(d["offload"], "scheduler.offload")
    if "n_microbatches" in d:
        v = d["n_microbatches"]
        if v.value != "auto":
            kw["nb_override"] = r.integer(v, "scheduler.n_microbatches", minimum=1)
    for k in ("prefill_chunk", "calibration_layers", "max_iterations"):
        if k in d:
            kw[k] = r.integer(d[k], f"scheduler.{k}", minimum=1)
    if "hidden_bytes_per_token" in d:
        kw["hidden_bytes_per_token"] = r.quantity(d["hidden_bytes_per_token"],
                                                  "scheduler.hidden_bytes_per_token")
    for k in ("kv_reserve_fraction", "global_pool_factor"):
        if k in d:
            kw[k] = r.exact(d[k], f"scheduler.{k}")
    for k in ("ring_order", "swap_time_basis"):
        if k in d:
            kw[k] = r.string(d[k], f"scheduler.{k}")
    try:
        return SchedulerPolicy(**kw)
    except ValueError as e:
        raise r.err(str(e), "scheduler", node) from None



def _sweep(r: _Reader, node: _Node) -> SweepSpec:
    d = r.mapping(node, "sweep", {"latencies_us", "policies"}, {"latencies_us"})
    items = r.seq(d["latencies_us"], "sweep.latencies_us")
    if not items:
        raise r.err("sweep needs at least one latency", "sweep.latencies_us", d["latencies_us"])
    lats = tuple(r.duration_us(v, f"sweep.latencies_us[{i}]") for i, v in enumerate(items))
    pols = POLICIES
    if "policies" in d:
        pols = tuple(r.string(v, f"sweep.policies[{i}]")
                     for i, v in enumerate(r.seq(d["policies"], "sweep.policies")))
        for i, p in enumerate(pols):
            if p not in POLICIES:
                raise r.err(f"unknown policy {p!r} (have {', '.join(POLICIES)})",
                            f"sweep.policies[{i}]", d["policies"].value[i])
        if not pols:
            raise r.err("at least one policy", "sweep.policies", d["policies"])
    return SweepSpec(lats, pols)


_TOP = {"model", "nodes", "links", "workload", "pricing", "scheduler", "sweep"}


def parse_config(text: str, source: str = "<config>", base_dir: Optional[Path] = None) -> RunConfig:
    r = _Reader(source, base_dir or Path.cwd())
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ConfigError(f"YAML syntax error: {getattr(e, 'problem', e)}", line=line,
                          source=source) from None
    if root is None:
        raise ConfigError("empty config", source=source)
    top = _wrap(root, source)
    d = r.mapping(top, "", _TOP, {"model", "nodes", "links", "workload"})
    model = _model(r, d["model"])
    nodes = _nodes(r, d["nodes"])
    links = _links(r, d["links"], nodes)
    return RunConfig(
        model=model,
        topology=Topology(nodes, links),
        workload=_workload(r, d["workload"]),
        policy=_scheduler(r, d.get("scheduler")),
        pricing=_pricing(r, d["pricing"]) if "pricing" in d else None,
        sweep=_sweep(r, d["sweep"]) if "sweep" in d else None,
        source=source,
    )


def bundled_config_names() -> list[str]:
    root = resources.files("ringpipe.configs")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def resolve_config_path(ref: str) -> Path:
    """A path as given, else ``$RINGPIPE_CONFIG_DIR/<ref>[.yaml]``, else a bundled config."""
    p = Path(ref)
    if p.exists():
        return p
    names = [ref] if ref.endswith((".yaml", ".yml")) else [ref, ref + ".yaml"]
    env = os.environ.get(CONFIG_DIR_ENV)
    if env:
        for n in names:
            q = Path(env) / n
            if q.exists():
                return q
    for n in names:
        q = resources.files("ringpipe.configs") / n
        if q.is_file():
            return Path(str(q))
    raise FileNotFoundError(f"config {ref!r} not found (checked path, ${CONFIG_DIR_ENV}, "
                            f"bundled: {', '.join(bundled_config_names())})")


def load_config(ref: str) -> RunConfig:
    path = resolve_config_path(ref)
    return parse_config(path.read_text(), source=str(path), base_dir=path.parent)


__all__ = ["ConfigError", "RunConfig", "SweepSpec", "POLICIES", "policy_variant",
           "parse_config", "load_config", "resolve_config_path", "bundled_config_names",
           "CONFIG_DIR_ENV"]
