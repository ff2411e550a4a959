# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled ring event loop. Same semantics and output as ``_kernel_py.run_ring``."""
from libc.stdlib cimport malloc, realloc, free
from libc.stdint cimport int64_t

import numpy as np

from ._kernel_py import KernelDeadlock

cdef enum:
    COMPUTE_END = 0
    REQUEST_COMPLETE = 1
    TRANSFER_ARRIVE = 2
    SWAP_IN_DONE = 3
    SWAP_OUT_DONE = 4
    COMPUTE_START = 5
    REQUEST_ADMIT = 6

ctypedef struct Ev:
    int64_t t
    int64_t kind
    int64_t stage
    int64_t mb
    int64_t seq
    int64_t a
    int64_t b


cdef inline bint ev_lt(Ev* x, Ev* y) nogil:
    if x.t != y.t:
        return x.t < y.t
    if x.kind != y.kind:
        return x.kind < y.kind
    if x.stage != y.stage:
        return x.stage < y.stage
    if x.mb != y.mb:
        return x.mb < y.mb
    return x.seq < y.seq


cdef class _Heap:
    cdef Ev* data
    cdef Py_ssize_t n, cap

    def __cinit__(self):
        self.cap = 1024
        self.n = 0
        self.data = <Ev*>malloc(self.cap * sizeof(Ev))
        if self.data == NULL:
            raise MemoryError()

    def __dealloc__(self):
        free(self.data)

    cdef void push(self, int64_t t, int64_t kind, int64_t stage, int64_t mb,
                   int64_t seq, int64_t a, int64_t b) except *:
        cdef Ev* grown
        cdef Py_ssize_t i, parent
        cdef Ev e
        if self.n == self.cap:
            grown = <Ev*>realloc(self.data, 2 * self.cap * sizeof(Ev))
            if grown == NULL:
                raise MemoryError()
            self.data = grown
            self.cap *= 2
        e.t = t; e.kind = kind; e.stage = stage; e.mb = mb; e.seq = seq; e.a = a; e.b = b
        i = self.n
        self.n += 1
        while i > 0:
            parent = (i - 1) >> 1
            if ev_lt(&e, &self.data[parent]):
                self.data[i] = self.data[parent]
                i = parent
            else:
                break
        self.data[i] = e

    cdef Ev pop(self):
        cdef Ev top = self.data[0]
        cdef Ev last
        cdef Py_ssize_t i = 0, c
        self.n -= 1
        if self.n > 0:
            last = self.data[self.n]
            while True:
                c = 2 * i + 1
                if c >= self.n:
                    break
                if c + 1 < self.n and ev_lt(&self.data[c + 1], &self.data[c]):
                    c += 1
                if ev_lt(&self.data[c], &last):
                    self.data[i] = self.data[c]
                    i = c
                else:
                    break
            self.data[i] = last
        return top


cdef class _Rows:
    cdef int64_t* data
    cdef Py_ssize_t n, cap

    def __cinit__(self):
        self.cap = 4096
        self.n = 0
        self.data = <int64_t*>malloc(self.cap * 7 * sizeof(int64_t))
        if self.data == NULL:
            raise MemoryError()

    def __dealloc__(self):
        free(self.data)

    cdef void add(self, int64_t t, int64_t seq, int64_t kind, int64_t stage, int64_t mb,
                  int64_t a, int64_t b) except *:
        cdef int64_t* grown
        cdef int64_t* r
        if self.n == self.cap:
            grown = <int64_t*>realloc(self.data, 2 * self.cap * 7 * sizeof(int64_t))
            if grown == NULL:
                raise MemoryError()
            self.data = grown
            self.cap *= 2
        r = self.data + 7 * self.n
        r[0] = t; r[1] = seq; r[2] = kind; r[3] = stage; r[4] = mb; r[5] = a; r[6] = b
        self.n += 1

    cdef object to_array(self):
        out = np.empty((self.n, 7), dtype=np.int64)
        cdef int64_t[:, ::1] view = out
        cdef Py_ssize_t i, j
        for i in range(self.n):
            for j in range(7):
                view[i, j] = self.data[7 * i + j]
        return out


cdef inline int64_t _xfer(int64_t nbytes, int64_t bw):
    if bw <= 0 or nbytes <= 0:
        return 0
    if nbytes < 9_000_000_000_000:
        return (nbytes * 1_000_000 + bw - 1) // bw
    return -((-(<object>nbytes) * 1_000_000) // bw)  # beyond int64 range


def run_ring(n_stages, n_mb, hop_latency, hop_bw, pcie_bw, swapping, end_us,
             on_circuit, initial):
    cdef Py_ssize_t S = n_stages, NB = n_mb
    cdef int64_t end = end_us
    cdef bint swp = bool(swapping)
    cdef Py_ssize_t s, m, prev, nxt, dst, j
    cdef int64_t t, kind, a, b, sq, d, pay, c, tokens, ob, ib, o0, o1, i0, i1, x0, x1, release
    cdef int64_t seq = 0
    cdef Ev e

    cdef int64_t[:, ::1] dur = np.zeros((NB, S), dtype=np.int64)
    cdef int64_t[:, ::1] swap = np.zeros((NB, S), dtype=np.int64)
    cdef int64_t[::1] payload = np.zeros(NB, dtype=np.int64)
    cdef int64_t[::1] circuit = np.zeros(NB, dtype=np.int64)
    cdef int64_t[::1] lat = np.asarray(hop_latency, dtype=np.int64)
    cdef int64_t[::1] hbw = np.asarray(hop_bw, dtype=np.int64)
    cdef int64_t[::1] pbw = np.asarray(pcie_bw, dtype=np.int64)

    cdef unsigned char[::1] busy = np.zeros(S, dtype=np.uint8)
    cdef unsigned char[::1] starting = np.zeros(S, dtype=np.uint8)
    cdef int64_t[::1] order = np.zeros(S, dtype=np.int64)
    cdef int64_t[::1] last = np.full(S, -1, dtype=np.int64)
    cdef int64_t[::1] link_free = np.zeros(S, dtype=np.int64)
    cdef int64_t[::1] in_free = np.zeros(S, dtype=np.int64)
    cdef int64_t[::1] out_free = np.zeros(S, dtype=np.int64)
    cdef unsigned char[:, ::1] arrived = np.zeros((S, NB), dtype=np.uint8)
    cdef unsigned char[:, ::1] resident = np.zeros((S, NB), dtype=np.uint8)
    cdef unsigned char[:, ::1] swapping_in = np.zeros((S, NB), dtype=np.uint8)
    cdef int64_t[:, ::1] host_ready = np.zeros((S, NB), dtype=np.int64)

    for s in range(S):
        for m in range(NB):
            resident[s, m] = (not swp) or m < 2
    for m in range(NB):
        row = initial[m]
        for s in range(S):
            dur[m, s] = row[0][s]
            swap[m, s] = row[2][s]
        payload[m] = row[1]

    cdef _Heap heap = _Heap()
    cdef _Rows trace = _Rows()

    for m in range(NB):
        for rk, ra, rb in initial[m][3]:
            heap.push(0, rk, -1, m, seq, ra, rb)
            seq += 1
    for m in range(NB):
        heap.push(0, TRANSFER_ARRIVE, 0, m, seq, -1, 0)
        seq += 1

    while heap.n > 0 and heap.data[0].t < end:
        e = heap.pop()
        t = e.t; kind = e.kind; s = e.stage; m = e.mb; sq = e.seq; a = e.a; b = e.b
        if kind == COMPUTE_START:
            starting[s] = 0
            busy[s] = 1
            arrived[s, m] = 0
            d = dur[m, s]
            trace.add(t, sq, kind, s, m, d, circuit[m])
            if swp:
                prev = last[s]
                release = t
                if prev >= 0 and prev != m and resident[s, prev]:
                    ob = swap[prev, s]
                    o0 = t if t > out_free[s] else out_free[s]
                    o1 = o0 + _xfer(ob, pbw[s])
                    out_free[s] = o1
                    resident[s, prev] = 0
                    host_ready[s, prev] = o1
                    release = o0
                    heap.push(o1, SWAP_OUT_DONE, s, prev, seq, o0, ob)
                    seq += 1
                nxt = (m + 1) % NB
                if nxt != m and not resident[s, nxt] and not swapping_in[s, nxt]:
                    ib = swap[nxt, s]
                    i0 = t
                    if in_free[s] > i0:
                        i0 = in_free[s]
                    if release > i0:
                        i0 = release
                    if host_ready[s, nxt] > i0:
                        i0 = host_ready[s, nxt]
                    i1 = i0 + _xfer(ib, pbw[s])
                    in_free[s] = i1
                    swapping_in[s, nxt] = 1
                    heap.push(i1, SWAP_IN_DONE, s, nxt, seq, i0, ib)
                    seq += 1
                last[s] = m
            heap.push(t + d, COMPUTE_END, s, m, seq, 0, 0)
            seq += 1
        elif kind == COMPUTE_END:
            busy[s] = 0
            order[s] = (m + 1) % NB
            pay = payload[m]
            tokens = 0
            c = circuit[m]
            if s == S - 1:
                tokens, d_row, pay_next, swap_row, records = on_circuit(m, t)
                for j in range(S):
                    dur[m, j] = d_row[j]
                    swap[m, j] = swap_row[j]
                payload[m] = pay_next
                circuit[m] = c + 1
                for rk, ra, rb in records:
                    heap.push(t, rk, -1, m, seq, ra, rb)
                    seq += 1
            trace.add(t, sq, kind, s, m, c, tokens)
            dst = (s + 1) % S
            x0 = t if t > link_free[s] else link_free[s]
            x1 = x0 + _xfer(pay, hbw[s])
            link_free[s] = x1
            heap.push(x1 + lat[s], TRANSFER_ARRIVE, dst, m, seq, x0, pay)
            seq += 1
            if not busy[s] and not starting[s] and arrived[s, order[s]] and resident[s, order[s]]:
                starting[s] = 1
                heap.push(t, COMPUTE_START, s, order[s], seq, 0, 0)
                seq += 1
        else:
            if kind == TRANSFER_ARRIVE:
                arrived[s, m] = 1
            elif kind == SWAP_IN_DONE:
                resident[s, m] = 1
                swapping_in[s, m] = 0
            trace.add(t, sq, kind, s, m, a, b)
            if (kind == TRANSFER_ARRIVE or kind == SWAP_IN_DONE) and not busy[s] \
                    and not starting[s] and arrived[s, order[s]] and resident[s, order[s]]:
                starting[s] = 1
                heap.push(t, COMPUTE_START, s, order[s], seq, 0, 0)
                seq += 1

    if heap.n == 0:
        blocked = []
        for s in range(S):
            m = order[s]
            blocked.append({"stage": s, "waiting_for": m, "arrived": bool(arrived[s, m]),
                            "resident": bool(resident[s, m]), "busy": bool(busy[s])})
        raise KernelDeadlock(trace.data[7 * (trace.n - 1)] if trace.n else 0, blocked)

    return trace.to_array()
