from __future__ import annotations

import shutil
from fractions import Fraction
from pathlib import Path

import pytest

from ringpipe.config import (
    ConfigError,
    bundled_config_names,
    load_config,
    parse_config,
    policy_variant,
    resolve_config_path,
)
from ringpipe.types import GiB, validate_topology

MINI = """\
model:
  preset: llama3-70b
nodes:
  - node_id: a
    gpu_mem_bytes: 24GiB
    pcie_bandwidth_bytes_per_s: 32GB/s
  - node_id: b
    gpu_mem_bytes: 25769803776
    pcie_bandwidth_bytes_per_s: 32000000000
links:
  - {src: a, dst: b, latency_us: 16ms, bandwidth_bytes_per_s: 1.25GB/s}
  - {src: b, dst: a, latency_us: 16000, bandwidth_bytes_per_s: 1250000000}
workload:
  prompt_len_min: 0
  prompt_len_max: 512
  output_len_min: 0
  output_len_max: 512
  bench_duration_s: 100
  warmup_s: 10
"""


def test_minimal_config_and_units():
    cfg = parse_config(MINI)
    a, b = cfg.topology.nodes
    assert a.gpu_mem_bytes == b.gpu_mem_bytes == 24 * GiB
    assert cfg.topology.links[0] == cfg.topology.links[1].__class__("a", "b", 16_000, 1_250_000_000)
    assert cfg.workload.concurrency_target is None and cfg.workload.rng_seed == 0
    assert cfg.pricing is None and cfg.sweep is None


def test_unknown_field_reports_line_and_path():
    text = MINI.replace("    pcie_bandwidth_bytes_per_s: 32GB/s\n",
                        "    pcie_bandwidth_bytes_per_s: 32GB/s\n    gpu_mem: 1\n")
    with pytest.raises(ConfigError) as ei:
        parse_config(text, source="x.yaml")
    e = ei.value
    assert e.line == 7 and e.path == "nodes[0].gpu_mem"
    assert str(e).startswith("x.yaml:7: nodes[0].gpu_mem")


def test_duplicate_key_rejected():
    with pytest.raises(ConfigError, match="duplicate key"):
        parse_config(MINI + "workload: {}\n")


def test_warmup_not_before_end_rejected():
    with pytest.raises(ConfigError, match="workload"):
        parse_config(MINI.replace("warmup_s: 10", "warmup_s: 100"))


def test_bad_quantity_rejected():
    with pytest.raises(ConfigError, match="nodes\\[0\\].gpu_mem_bytes"):
        parse_config(MINI.replace("24GiB", "lots"))


def test_yaml_syntax_error_has_line():
    with pytest.raises(ConfigError) as ei:
        parse_config("model: [\n")
    assert ei.value.line is not None


def test_unknown_endpoint_reported_by_validation():
    cfg = parse_config(MINI.replace("{src: b, dst: a", "{src: b, dst: z"))
    kinds = [v.kind for v in validate_topology(cfg.topology)]
    assert "unknown-endpoint" in kinds


def test_pricing_forms():
    base = MINI + "pricing:\n"
    cfg = parse_config(base + "  preset: mining-8x4090\n")
    assert cfg.pricing.compute_cost_per_hour == Fraction(35, 100)
    cfg = parse_config(base + "  compute_cost_per_hour: 1.5\n  price_per_million: 0.9\n")
    assert cfg.pricing.price_per_token == Fraction(9, 10**7)
    cfg = parse_config(base + "  compute_cost_per_hour: 1\n  price_in_per_million: 0.5\n"
                              "  price_out_per_million: 1.5\n")
    assert not cfg.pricing.is_unified
    with pytest.raises(ConfigError, match="either"):
        parse_config(base + "  compute_cost_per_hour: 1\n  price_per_million: 1\n"
                            "  price_in_per_million: 1\n")


def test_node_template_and_ring_shorthand():
    cfg = load_config("fig2c")
    assert [n.node_id for n in cfg.topology.nodes] == ["n0", "n1", "n2", "n3"]
    assert [(lk.src, lk.dst) for lk in cfg.topology.links] == \
        [("n0", "n1"), ("n1", "n2"), ("n2", "n3"), ("n3", "n0")]
    assert all(lk.latency_us == 35_000 for lk in cfg.topology.links)
    # relative calibration paths resolve against the config's directory
    assert Path(cfg.topology.nodes[0].compute_calibration).exists()


@pytest.mark.parametrize("name", bundled_config_names())
def test_bundled_configs_are_valid(name):
    cfg = load_config(name)
    assert validate_topology(cfg.topology) == []


def test_config_dir_env_lookup(tmp_path, monkeypatch):
    shutil.copy(resolve_config_path("fig2c"), tmp_path / "mine.yaml")
    (tmp_path / "mine.yaml").write_text(
        (tmp_path / "mine.yaml").read_text().replace("../data/flat70ms.csv", "table1"))
    monkeypatch.setenv("RINGPIPE_CONFIG_DIR", str(tmp_path))
    assert resolve_config_path("mine") == tmp_path / "mine.yaml"
    assert load_config("mine").topology.nodes[0].compute_calibration == "table1"
    monkeypatch.delenv("RINGPIPE_CONFIG_DIR")
    with pytest.raises(FileNotFoundError, match="not found"):
        resolve_config_path("mine")


def test_policy_variants():
    cfg = load_config("reference")
    base = policy_variant(cfg.policy, "baseline", cfg.topology)
    assert not base.offload and base.nb_override == 8
    off = policy_variant(cfg.policy, "offload", cfg.topology)
    assert off.offload and off.nb_override == 8
    opt = policy_variant(cfg.policy, "opt", cfg.topology)
    assert opt.offload and opt.nb_override is None
    assert policy_variant(cfg.policy, "opt", cfg.topology, nb=12).nb_override == 12
