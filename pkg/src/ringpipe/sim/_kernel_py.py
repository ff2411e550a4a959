"""Pure-Python ring event loop. Reference semantics for the compiled kernel.

Event kinds double as tie-break priority at equal timestamps.
"""
from __future__ import annotations

import heapq

import numpy as np

COMPUTE_END = 0
REQUEST_COMPLETE = 1
TRANSFER_ARRIVE = 2
SWAP_IN_DONE = 3
SWAP_OUT_DONE = 4
COMPUTE_START = 5
REQUEST_ADMIT = 6


class KernelDeadlock(RuntimeError):
    def __init__(self, time_us, blocked):
        self.time_us = time_us
        self.blocked = blocked
        super().__init__(f"event queue drained at t={time_us}us; blocked: {blocked}")


def _xfer(nbytes, bw):
    if bw <= 0 or nbytes <= 0:
        return 0
    return -(-nbytes * 1_000_000 // bw)


def run_ring(n_stages, n_mb, hop_latency, hop_bw, pcie_bw, swapping, end_us,
             on_circuit, initial):
    """Run the ring until ``end_us`` and return the trace as an (n, 7) int64 array
    with columns (time, seq, kind, stage, mb, a, b).

    ``initial[m]`` is ``(durations, payload, swap_bytes, records)`` for the first
    circuit of microbatch m; ``on_circuit(m, t)`` is called when m leaves the
    last stage and returns ``(tokens, durations, payload, swap_bytes, records)``
    for its next circuit. ``records`` are ``(kind, a, b)`` tuples logged at the
    call time.
    """
    S, NB = n_stages, n_mb
    dur = [list(initial[m][0]) for m in range(NB)]
    payload = [initial[m][1] for m in range(NB)]
    swap = [list(initial[m][2]) for m in range(NB)]
    circuit = [0] * NB

    busy = [False] * S
    starting = [False] * S
    order = [0] * S
    last = [-1] * S
    link_free = [0] * S
    in_free = [0] * S
    out_free = [0] * S
    arrived = [[False] * NB for _ in range(S)]
    resident = [[(not swapping) or m < 2 for m in range(NB)] for _ in range(S)]
    swapping_in = [[False] * NB for _ in range(S)]
    host_ready = [[0] * NB for _ in range(S)]

    heap = []
    seq = 0
    trace = []
    push = heapq.heappush

    for m in range(NB):
        for kind, a, b in initial[m][3]:
            push(heap, (0, kind, -1, m, seq, a, b))
            seq += 1
    for m in range(NB):
        push(heap, (0, TRANSFER_ARRIVE, 0, m, seq, -1, 0))
        seq += 1

    def try_start(s, t):
        nonlocal seq
        if busy[s] or starting[s]:
            return
        m = order[s]
        if arrived[s][m] and resident[s][m]:
            starting[s] = True
            push(heap, (t, COMPUTE_START, s, m, seq, 0, 0))
            seq += 1

    pop = heapq.heappop
    while heap and heap[0][0] < end_us:
        t, kind, s, m, sq, a, b = pop(heap)
        if kind == COMPUTE_START:
            starting[s] = False
            busy[s] = True
            arrived[s][m] = False
            d = dur[m][s]
            trace.append((t, sq, kind, s, m, d, circuit[m]))
            if swapping:
                prev = last[s]
                release = t
                if prev >= 0 and prev != m and resident[s][prev]:
                    ob = swap[prev][s]
                    o0 = max(t, out_free[s])
                    o1 = o0 + _xfer(ob, pcie_bw[s])
                    out_free[s] = o1
                    resident[s][prev] = False
                    host_ready[s][prev] = o1
                    release = o0
                    push(heap, (o1, SWAP_OUT_DONE, s, prev, seq, o0, ob))
                    seq += 1
                nxt = (m + 1) % NB
                if nxt != m and not resident[s][nxt] and not swapping_in[s][nxt]:
                    ib = swap[nxt][s]
                    i0 = max(t, in_free[s], release, host_ready[s][nxt])
                    i1 = i0 + _xfer(ib, pcie_bw[s])
                    in_free[s] = i1
                    swapping_in[s][nxt] = True
                    push(heap, (i1, SWAP_IN_DONE, s, nxt, seq, i0, ib))
                    seq += 1
                last[s] = m
            push(heap, (t + d, COMPUTE_END, s, m, seq, 0, 0))
            seq += 1
        elif kind == COMPUTE_END:
            busy[s] = False
            order[s] = (m + 1) % NB
            pay = payload[m]
            tokens = 0
            c = circuit[m]
            if s == S - 1:
                tokens, d_row, pay_next, swap_row, records = on_circuit(m, t)
                dur[m] = list(d_row)
                payload[m] = pay_next
                swap[m] = list(swap_row)
                circuit[m] = c + 1
                for rk, ra, rb in records:
                    push(heap, (t, rk, -1, m, seq, ra, rb))
                    seq += 1
            trace.append((t, sq, kind, s, m, c, tokens))
            dst = (s + 1) % S
            x0 = max(t, link_free[s])
            x1 = x0 + _xfer(pay, hop_bw[s])
            link_free[s] = x1
            push(heap, (x1 + hop_latency[s], TRANSFER_ARRIVE, dst, m, seq, x0, pay))
            seq += 1
            try_start(s, t)
        elif kind == TRANSFER_ARRIVE:
            arrived[s][m] = True
            trace.append((t, sq, kind, s, m, a, b))
            try_start(s, t)
        elif kind == SWAP_IN_DONE:
            resident[s][m] = True
            swapping_in[s][m] = False
            trace.append((t, sq, kind, s, m, a, b))
            try_start(s, t)
        else:
            trace.append((t, sq, kind, s, m, a, b))

    if not heap:
        blocked = []
        for s in range(S):
            m = order[s]
            blocked.append({"stage": s, "waiting_for": m, "arrived": arrived[s][m],
                            "resident": resident[s][m], "busy": busy[s]})
        raise KernelDeadlock(trace[-1][0] if trace else 0, blocked)

    if not trace:
        return np.zeros((0, 7), dtype=np.int64)
    return np.asarray(trace, dtype=np.int64)
