"""Closed-loop benchmark workload and windowed token statistics."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .types import WorkloadSpec


@dataclass
class Request:
    request_id: int
    prompt_len: int
    target_output_len: int
    admit_time_us: Optional[int] = None
    complete_time_us: Optional[int] = None


class RequestSource:
    """Emits N_R requests up front and one replacement per completion.

    Prompt and output lengths come from two independent child streams of one
    seed, so changing one range never perturbs the other's draws.
    """

    def __init__(self, spec: WorkloadSpec, concurrency: Optional[int] = None,
                 trace: Optional[list[tuple[int, int]]] = None):
        self.spec = spec
        self.concurrency = concurrency if concurrency is not None else spec.concurrency_target
        if self.concurrency is None or self.concurrency < 1:
            raise ValueError("concurrency must be >= 1")
        ss = np.random.SeedSequence(spec.rng_seed)
        p_seq, o_seq = ss.spawn(2)
        self._prompt_rng = np.random.Generator(np.random.PCG64(p_seq))
        self._output_rng = np.random.Generator(np.random.PCG64(o_seq))
        if trace is None and spec.request_trace:
            trace = load_request_trace(spec.request_trace)
        self._trace: Optional[Iterator[tuple[int, int]]] = iter(trace) if trace is not None else None
        self._next_id = 0
        self._buf_p: deque[int] = deque()
        self._buf_o: deque[int] = deque()
        self.emitted = 0

    def _draw(self) -> Optional[tuple[int, int]]:
        if self._trace is not None:
            return next(self._trace, None)
        if not self._buf_p:
            s = self.spec
            self._buf_p.extend(self._prompt_rng.integers(
                s.prompt_len_min, s.prompt_len_max + 1, size=1024).tolist())
            self._buf_o.extend(self._output_rng.integers(
                s.output_len_min, s.output_len_max + 1, size=1024).tolist())
        return self._buf_p.popleft(), self._buf_o.popleft()

    def _make(self) -> Optional[Request]:
        d = self._draw()
        if d is None:
            return None
        r = Request(self._next_id, int(d[0]), int(d[1]))
        self._next_id += 1
        self.emitted += 1
        return r

    def initial_burst(self) -> list[Request]:
        out = []
        for _ in range(self.concurrency):
            r = self._make()
            if r is None:
                break
            out.append(r)
        return out

    def on_complete(self, req: Request) -> Optional[Request]:
        """Replacement for a completed request (None once a trace file runs dry)."""
        return self._make()


def generate(spec: WorkloadSpec, n: int) -> list[Request]:
    """First ``n`` requests the source would emit, in order."""
    src = RequestSource(spec, concurrency=1)
    out = []
    for _ in range(n):
        r = src._make()
        if r is None:
            break
        out.append(r)
    return out


def load_request_trace(path: str) -> list[tuple[int, int]]:
    """Read ``prompt_len, output_len`` lines; blank lines and ``#`` comments skipped."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = [p for p in line.replace(",", " ").split() if p]
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'prompt_len, output_len'")
            p, o = int(parts[0]), int(parts[1])
            if p < 0 or o < 0:
                raise ValueError(f"{path}:{lineno}: lengths must be >= 0")
            rows.append((p, o))
    return rows


@dataclass(frozen=True)
class WindowStats:
    n_input: int
    n_output: int
    seconds: float
    completed: int


def windowed_stats(trace, window: tuple[int, int], basis: str = "admitted") -> WindowStats:
    """Token counts over ``[start_us, end_us)``.

    N_I sums prompt tokens of requests admitted in the window (``basis="admitted"``)
    or of requests completed in it (``basis="completed"``); N_O sums tokens
    generated in the window.
    """
    from .sim.trace import as_array, COMPUTE_END, REQUEST_ADMIT, REQUEST_COMPLETE

    start, end = window
    if end <= start:
        raise ValueError("empty window")
    ev = as_array(trace)
    t = ev[:, 0]
    kind = ev[:, 2]
    inw = (t >= start) & (t < end)
    last_stage = ev[kind == COMPUTE_END, 3].max() if np.any(kind == COMPUTE_END) else -1
    out_mask = inw & (kind == COMPUTE_END) & (ev[:, 3] == last_stage)
    n_out = int(ev[out_mask, 6].sum())
    done_mask = inw & (kind == REQUEST_COMPLETE)
    if basis == "admitted":
        n_in = int(ev[inw & (kind == REQUEST_ADMIT), 6].sum())
    elif basis == "completed":
        adm = ev[kind == REQUEST_ADMIT]
        prompt = dict(zip(adm[:, 5].tolist(), adm[:, 6].tolist()))
        n_in = sum(prompt.get(rid, 0) for rid in ev[done_mask, 5].tolist())
    else:
        raise ValueError("basis must be 'admitted' or 'completed'")
    return WindowStats(n_in, n_out, (end - start) / 1e6, int(done_mask.sum()))
