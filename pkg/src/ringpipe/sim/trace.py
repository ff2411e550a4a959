"""Event traces: storage, line-delimited export, and invariant replay."""
from __future__ import annotations

import io
import json
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Union

import numpy as np

from ..types import Violation
from ._kernel_py import (
    COMPUTE_END,
    COMPUTE_START,
    REQUEST_ADMIT,
    REQUEST_COMPLETE,
    SWAP_IN_DONE,
    SWAP_OUT_DONE,
    TRANSFER_ARRIVE,
)

if TYPE_CHECKING:
    from ..planner import PipelinePlan

KIND_NAMES = {
    COMPUTE_END: "ComputeEnd",
    REQUEST_COMPLETE: "RequestComplete",
    TRANSFER_ARRIVE: "TransferArrive",
    SWAP_IN_DONE: "SwapInDone",
    SWAP_OUT_DONE: "SwapOutDone",
    COMPUTE_START: "ComputeStart",
    REQUEST_ADMIT: "RequestAdmit",
}
KIND_CODES = {v: k for k, v in KIND_NAMES.items()}
COLUMNS = ("time_us", "seq", "kind", "stage", "microbatch", "a", "b")

# meaning of the two payload columns per kind
PAYLOAD_FIELDS = {
    COMPUTE_START: ("duration_us", "circuit"),
    COMPUTE_END: ("circuit", "tokens"),
    TRANSFER_ARRIVE: ("send_us", "bytes"),
    SWAP_IN_DONE: ("start_us", "bytes"),
    SWAP_OUT_DONE: ("start_us", "bytes"),
    REQUEST_ADMIT: ("request_id", "prompt_len"),
    REQUEST_COMPLETE: ("request_id", "tokens"),
}


@dataclass(frozen=True)
class EventTrace:
    events: np.ndarray  # (n, 7) int64, columns as in COLUMNS

    def __len__(self):
        return len(self.events)

    def __eq__(self, other):
        return isinstance(other, EventTrace) and np.array_equal(self.events, other.events)

    def of_kind(self, kind: int) -> np.ndarray:
        return self.events[self.events[:, 2] == kind]

    def iter_dicts(self):
        for row in self.events.tolist():
            t, sq, k, s, m, a, b = row
            fa, fb = PAYLOAD_FIELDS[k]
            yield {"time_us": t, "seq": sq, "kind": KIND_NAMES[k], "stage": s,
                   "microbatch": m, fa: a, fb: b}

    def write_jsonl(self, dest: Union[str, Path, io.TextIOBase]) -> None:
        if isinstance(dest, (str, Path)):
            with open(dest, "w") as fh:
                self.write_jsonl(fh)
            return
        for row in self.events.tolist():
            t, sq, k, s, m, a, b = row
            fa, fb = PAYLOAD_FIELDS[k]
            dest.write(f'{{"time_us": {t}, "seq": {sq}, "kind": "{KIND_NAMES[k]}", '
                       f'"stage": {s}, "microbatch": {m}, "{fa}": {a}, "{fb}": {b}}}\n')

    @classmethod
    def read_jsonl(cls, src: Union[str, Path, io.TextIOBase]) -> "EventTrace":
        if isinstance(src, (str, Path)):
            with open(src) as fh:
                return cls.read_jsonl(fh)
        rows = []
        for line in src:
            if not line.strip():
                continue
            d = json.loads(line)
            k = KIND_CODES[d["kind"]]
            fa, fb = PAYLOAD_FIELDS[k]
            rows.append((d["time_us"], d["seq"], k, d["stage"], d["microbatch"], d[fa], d[fb]))
        arr = np.asarray(rows, dtype=np.int64) if rows else np.zeros((0, 7), dtype=np.int64)
        return cls(arr)


def as_array(trace) -> np.ndarray:
    return trace.events if isinstance(trace, EventTrace) else np.asarray(trace, dtype=np.int64)


def _ceil_xfer(nbytes: int, bw: int) -> int:
    if bw <= 0 or nbytes <= 0:
        return 0
    return -(-nbytes * 1_000_000 // bw)


def replay_check(trace, plan: "PipelinePlan") -> list[Violation]:
    """Re-validate a trace against the plan's resource and causality rules."""
    ev = as_array(trace)
    S, NB = plan.n_stages, plan.n_microbatches
    out: list[Violation] = []

    def bad(kind, entity, msg):
        out.append(Violation(kind, entity, msg))

    # total order
    keys = ev[:, [0, 2, 3, 4, 1]]
    if len(ev) > 1:
        d = np.diff(keys, axis=0)
        first = np.argmax(d != 0, axis=1)
        lead = d[np.arange(len(d)), first]
        back = np.flatnonzero(lead < 0)
        if len(back):
            bad("order", f"event {int(back[0]) + 1}",
                "trace is not in (time, kind, stage, mb, seq) order")

    by_stage = defaultdict(list)
    for row in ev.tolist():
        by_stage[row[3]].append(row)

    swapping = plan.offload_enabled and NB > 2
    hop = plan.ring_links
    compute_end = defaultdict(list)  # (stage, mb) -> ComputeEnd times
    for s in range(S):
        rows = by_stage.get(s, [])
        # one active compute per stage
        busy_until = None
        active_mb = None
        res_intervals = defaultdict(list)  # mb -> [(from, to)]
        claims = []  # (time, +1/-1)
        res_from = {}
        if swapping:
            for m in (0, 1):
                if m < NB:
                    res_from[m] = 0
                    claims.append((0, 1))
        in_iv, out_iv = [], []
        W = plan.stages[s].pcie_bandwidth_bytes_per_s
        for t, sq, k, _, m, a, b in rows:
            if k == COMPUTE_START:
                if busy_until is not None and t < busy_until:
                    bad("double-compute", f"stage {s}",
                        f"microbatch {m} starts at {t} while {active_mb} runs until {busy_until}")
                busy_until = t + a
                active_mb = m
            elif k == COMPUTE_END:
                compute_end[(s, m)].append(t)
            elif k == SWAP_IN_DONE:
                in_iv.append((a, t, b, m))
                res_from[m] = t
                claims.append((a, 1))
            elif k == SWAP_OUT_DONE:
                out_iv.append((a, t, b, m))
                if m in res_from:
                    res_intervals[m].append((res_from.pop(m), a))
                claims.append((a, -1))
        for m, t0 in res_from.items():
            res_intervals[m].append((t0, None))

        if swapping:
            # releases first at equal timestamps
            level = 0
            for t, delta in sorted(claims, key=lambda c: (c[0], c[1])):
                level += delta
                if level > 2:
                    bad("global-pool-overflow", f"stage {s}",
                        f"{level} microbatches hold global pools at t={t}")
                    break
            for t, sq, k, _, m, a, b in rows:
                if k != COMPUTE_START:
                    continue
                ok = any(lo <= t and (hi is None or t + a <= hi) for lo, hi in res_intervals[m])
                if not ok:
                    bad("not-resident", f"stage {s} mb {m}",
                        f"compute at {t} without KV resident in a global pool")
        for name, ivs in (("in", in_iv), ("out", out_iv)):
            ivs.sort()
            for i, (a, t, b, m) in enumerate(ivs):
                if t - a < _ceil_xfer(b, W):
                    bad("swap-bandwidth", f"stage {s} swap-{name} mb {m}",
                        f"{b} B moved in {t - a}us exceeds {W} B/s")
                if i and a < ivs[i - 1][1]:
                    bad("swap-bandwidth", f"stage {s} swap-{name} mb {m}",
                        f"overlaps previous swap-{name} ending {ivs[i - 1][1]}")

    # transfers: causality against the sending compute and the hop link
    sends = defaultdict(list)  # src stage -> [(start, end)]
    arrivals_seen = defaultdict(int)
    for t, sq, k, s, m, a, b in ev[ev[:, 2] == TRANSFER_ARRIVE].tolist():
        if a < 0:
            continue  # initial injection at stage 0
        src = (s - 1) % S
        lk = hop[src] if hop else None
        lat = lk.latency_us if lk else 0
        tx = _ceil_xfer(b, lk.bandwidth_bytes_per_s) if lk else 0
        if t < a + tx + lat:
            bad("causality", f"hop {src}->{s} mb {m}",
                f"arrives at {t} before send {a} + {tx}us transfer + {lat}us latency")
        idx = arrivals_seen[(src, m)]
        arrivals_seen[(src, m)] += 1
        ends = compute_end.get((src, m), [])
        if idx >= len(ends) or ends[idx] > a:
            bad("causality", f"hop {src}->{s} mb {m}",
                f"sent at {a} before the sending stage finished computing")
        sends[src].append((a, a + tx))
    for src, ivs in sends.items():
        ivs.sort()
        for i in range(1, len(ivs)):
            if ivs[i][0] < ivs[i - 1][1]:
                bad("link-bandwidth", f"hop {src}",
                    f"transfer at {ivs[i][0]} overlaps one ending {ivs[i - 1][1]}")
                break
    return out
