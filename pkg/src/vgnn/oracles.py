"""Deliberately naive reference implementations used to cross-check the
vectorized code paths. Nothing here shares code with :mod:`vgnn.graphgen`.
"""
from __future__ import annotations

import math


def pearson_two_pass(a, b) -> float:
    """Textbook two-pass Pearson with plain Python floats; 0.0 for constant input."""
    a = [float(x) for x in a]
    b = [float(x) for x in b]
    n = len(a)
    ma = math.fsum(a) / n
    mb = math.fsum(b) / n
    sab = math.fsum((x - ma) * (y - mb) for x, y in zip(a, b))
    saa = math.fsum((x - ma) ** 2 for x in a)
    sbb = math.fsum((y - mb) ** 2 for y in b)
    if saa == 0.0 or sbb == 0.0:
        return 0.0
    return sab / (math.sqrt(saa) * math.sqrt(sbb))


def naive_aggregate(cells, series_by_cell, cols: int, epsilon: float) -> list[tuple[int, ...]]:
    """Walk the aggregation pseudocode line by line.

    ``cells`` are retained row-major grid indices, ``series_by_cell`` maps a
    cell to its demand list, ``cols`` is the grid width. Returns sorted member
    tuples ordered by their smallest cell.
    """
    s_new = sorted(cells)
    label = {x: 0 for x in s_new}

    def r(a, b):
        return pearson_two_pass(series_by_cell[a], series_by_cell[b])

    def touching(a, b):
        ra, ca = divmod(a, cols)
        rb, cb = divmod(b, cols)
        return a != b and abs(ra - rb) <= 1 and abs(ca - cb) <= 1

    def st_neighbors(x):
        return [y for y in s_new if touching(x, y) and r(x, y) > epsilon]

    aggregated = []
    for xi in s_new:
        if label[xi] != 0:
            continue
        Ni = [xj for xj in st_neighbors(xi) if label[xj] == 0]
        if not Ni:
            continue
        for xj in list(Ni):
            Nj = st_neighbors(xj)
            Rj = [r(xk, xj) for xk in Nj]
            if Rj and max(Rj) > r(xi, xj):
                Ni.remove(xj)
        if Ni:
            for xj in Ni:
                label[xj] = 1
            label[xi] = 1
        else:
            label[xi] = 1
        aggregated.append([xi] + Ni)

    covered = {x for group in aggregated for x in group}
    for x in s_new:
        if x not in covered:
            aggregated.append([x])
    out = [tuple(sorted(g)) for g in aggregated]
    out.sort(key=lambda g: g[0])
    return out
