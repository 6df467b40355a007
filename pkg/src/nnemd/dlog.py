"""Bounded discrete logarithms: recover a small signed f from g^f.

Two table layouts are supported.  ``full-table`` stores every g^f for
|f| <= bound and answers with one dictionary lookup.  ``bsgs`` stores
ceil(sqrt(2*bound + 1)) baby steps and walks giant steps outward from zero,
so small results (the common case during training) are found first.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import gmpy2
from gmpy2 import mpz

from .group import GroupParams

FULL_TABLE = "full-table"
BSGS = "bsgs"
DEFAULT_MEMORY_CAP = 10**8


class NotInRange(ValueError):
    """No exponent within the solver bound maps to the queried element."""


class TableTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class DlogSolver:
    params: GroupParams
    bound_fb: int
    mode: str
    table: dict = field(repr=False)
    giant_stride: int = 0
    # g^-m and g^m for the giant-step walk
    _steps: tuple = field(default=(), repr=False, compare=False)

    def solve(self, h) -> int:
        return solve(self, h)


def build_solver(
    params: GroupParams, bound_fb: int, mode: str = BSGS, memory_cap: int = DEFAULT_MEMORY_CAP
) -> DlogSolver:
    if bound_fb < 1:
        raise ValueError("bound_fb must be >= 1")
    span = 2 * bound_fb + 1
    if span >= params.order_p:
        raise ValueError("2*bound_fb + 1 must be below the group order to keep results unique")
    P, g = params.P, params.g

    if mode == FULL_TABLE:
        if span > memory_cap:
            raise TableTooLarge(
                f"full table needs {span} entries (cap {memory_cap}); use mode='bsgs'"
            )
        table = {mpz(1): 0}
        up = down = mpz(1)
        g_inv = gmpy2.invert(g, P)
        for f in range(1, bound_fb + 1):
            up = up * g % P
            down = down * g_inv % P
            table[up] = f
            table[down] = -f
        return DlogSolver(params, bound_fb, FULL_TABLE, table)

    if mode != BSGS:
        raise ValueError(f"unknown dlog mode {mode!r}")
    m = math.isqrt(span)
    if m * m < span:
        m += 1
    if m > memory_cap:
        raise TableTooLarge(f"baby-step table of {m} entries exceeds cap {memory_cap}")
    table = {}
    cur = mpz(1)
    for j in range(m):
        table.setdefault(cur, j)
        cur = cur * g % P
    steps = (gmpy2.powmod(g, params.p - m, P), gmpy2.powmod(g, m, P))
    return DlogSolver(params, bound_fb, BSGS, table, giant_stride=m, _steps=steps)


def solve(solver: DlogSolver, h) -> int:
    table = solver.table
    h = mpz(h)
    if solver.mode == FULL_TABLE:
        try:
            return table[h]
        except KeyError:
            raise NotInRange(f"no |f| <= {solver.bound_fb} with g^f = h") from None

    # f = i*m + j with 0 <= j < m; try i = 0, -1, 1, -2, 2, ...
    m, fb, P = solver.giant_stride, solver.bound_fb, solver.params.P
    step_up, step_down = solver._steps
    i_max = fb // m + 1
    up = h  # h * g^(-i m), i >= 0
    down = h * step_down % P  # h * g^(k m) for i = -k, k >= 1
    for k in range(i_max + 1):
        j = table.get(up)
        if j is not None:
            f = k * m + j
            if f <= fb:
                return f
        j = table.get(down)
        if j is not None:
            f = -(k + 1) * m + j
            if f >= -fb:
                return f
        up = up * step_up % P
        down = down * step_down % P
    raise NotInRange(f"no |f| <= {fb} with g^f = h")
