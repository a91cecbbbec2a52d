"""Half-open integer interval sets as sorted, disjoint (start, end) lists."""

from __future__ import annotations

from typing import Iterable


def normalize(spans: Iterable[tuple[int, int]]) -> list[tuple[int, int]]:
    out: list[list[int]] = []
    for a, b in sorted(s for s in spans if s[1] > s[0]):
        if out and a <= out[-1][1]:
            if b > out[-1][1]:
                out[-1][1] = b
        else:
            out.append([a, b])
    return [(a, b) for a, b in out]


def union(x, y) -> list[tuple[int, int]]:
    return normalize(list(x) + list(y))


def subtract(x, y) -> list[tuple[int, int]]:
    """Parts of ``x`` not covered by ``y`` (both normalized)."""
    out = []
    j = 0
    y = list(y)
    for a, b in x:
        cur = a
        while j < len(y) and y[j][1] <= cur:
            j += 1
        k = j
        while k < len(y) and y[k][0] < b:
            ya, yb = y[k]
            if ya > cur:
                out.append((cur, ya))
            cur = max(cur, yb)
            if cur >= b:
                break
            k += 1
        if cur < b:
            out.append((cur, b))
    return out


def total(x) -> int:
    return sum(b - a for a, b in x)


def overlaps(x, a: int, b: int) -> bool:
    for s, e in x:
        if s < b and a < e:
            return True
        if s >= b:
            break
    return False
