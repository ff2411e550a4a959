"""Serving economics: revenue, break-even throughput and profitability."""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from importlib import resources
from typing import TYPE_CHECKING

import yaml

from .types import PricingSpec

if TYPE_CHECKING:
    from .sim.engine import SimReport

SECONDS_PER_HOUR = 3600


class ProfitInconsistency(ArithmeticError):
    """The revenue form and the throughput form of profitability disagree."""


def revenue(n_in: int, n_out: int, pricing: PricingSpec) -> Fraction:
    """R = N_I * P_I + N_O * P_O, exact."""
    if n_in < 0 or n_out < 0:
        raise ValueError("token counts must be >= 0")
    return n_in * pricing.price_in_per_token + n_out * pricing.price_out_per_token


def min_throughput(pricing: PricingSpec) -> Fraction:
    """Break-even throughput C / P in tokens per second (unified price)."""
    p = pricing.price_per_token
    if p == 0:
        raise ValueError("price per token must be > 0")
    return pricing.compute_cost_per_hour / p / SECONDS_PER_HOUR


@dataclass(frozen=True)
class ProfitAnalysis:
    revenue: Fraction
    cost: Fraction
    profit: Fraction
    min_throughput: Fraction
    achieved_throughput: Fraction
    profitable: bool

    def to_flat(self) -> dict:
        return {
            "revenue": float(self.revenue),
            "cost": float(self.cost),
            "profit": float(self.profit),
            "min_throughput": float(self.min_throughput),
            "achieved_throughput": float(self.achieved_throughput),
            "profitable": self.profitable,
        }


def analyze_counts(n_in: int, n_out: int, seconds: Fraction,
                   pricing: PricingSpec) -> ProfitAnalysis:
    seconds = Fraction(seconds)
    if seconds <= 0:
        raise ValueError("measurement window must be non-empty")
    r = revenue(n_in, n_out, pricing)
    cost = pricing.compute_cost_per_hour * seconds / SECONDS_PER_HOUR
    m = Fraction(n_in + n_out) / seconds
    by_revenue = r > cost
    if pricing.is_unified and pricing.price_per_token > 0:
        m_min = min_throughput(pricing)
        by_rate = m > m_min
    else:
        # dual prices: blended break-even at the observed input/output mix
        m_min = m * cost / r if r > 0 else Fraction(0)
        by_rate = r / seconds > pricing.compute_cost_per_hour / SECONDS_PER_HOUR
    if by_revenue != by_rate:
        raise ProfitInconsistency(
            f"R > C*T is {by_revenue} but M > C/P is {by_rate} (R={r}, C*T={cost}, M={m})")
    return ProfitAnalysis(r, cost, r - cost, m_min, m, by_revenue)


def analyze(report: "SimReport", pricing: PricingSpec) -> ProfitAnalysis:
    """Profitability of the report's measurement window under ``pricing``."""
    w0, w1 = report.measured_window
    return analyze_counts(report.input_tokens, report.output_tokens,
                          Fraction(w1 - w0, 1_000_000), pricing)


@lru_cache(maxsize=None)
def _presets_doc() -> dict:
    text = resources.files("ringpipe.data").joinpath("pricing_presets.yaml").read_text()
    return yaml.safe_load(text)


def preset_names() -> list[str]:
    return list(_presets_doc()["presets"])


def load_preset(name: str) -> PricingSpec:
    doc = _presets_doc()
    try:
        row = doc["presets"][name]
    except KeyError:
        raise KeyError(f"unknown pricing preset {name!r}; have {preset_names()}") from None
    return PricingSpec.per_million(Fraction(row["compute_cost_per_hour"]),
                                   Fraction(doc["price_per_million"]), name=name)


__all__ = ["ProfitAnalysis", "ProfitInconsistency", "revenue", "min_throughput",
           "analyze", "analyze_counts", "load_preset", "preset_names"]
