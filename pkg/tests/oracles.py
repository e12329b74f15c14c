"""Slow, independent reference implementations used only by the tests.

Nothing here imports from the package so the oracles cannot share a bug
with the code under test.
"""

from __future__ import annotations

import math
from collections import deque


def flood_fill_components(mask, connectivity: int = 8) -> int:
    """Count foreground components of a 2-D boolean array by BFS."""
    h, w = len(mask), len(mask[0])
    if connectivity == 8:
        nbrs = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)]
    else:
        nbrs = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    seen = [[False] * w for _ in range(h)]
    count = 0
    for y in range(h):
        for x in range(w):
            if not mask[y][x] or seen[y][x]:
                continue
            count += 1
            seen[y][x] = True
            q = deque([(y, x)])
            while q:
                cy, cx = q.popleft()
                for dy, dx in nbrs:
                    ny, nx = cy + dy, cx + dx
                    if 0 <= ny < h and 0 <= nx < w and mask[ny][nx] and not seen[ny][nx]:
                        seen[ny][nx] = True
                        q.append((ny, nx))
    return count


def _cells(mask):
    return {(y, x) for y, row in enumerate(mask) for x, v in enumerate(row) if v}


def dice_bruteforce(a, b) -> float:
    sa, sb = _cells(a), _cells(b)
    if not sa and not sb:
        return 1.0
    return 2 * len(sa & sb) / (len(sa) + len(sb))


def iou_bruteforce(a, b) -> float:
    sa, sb = _cells(a), _cells(b)
    if not sa and not sb:
        return 1.0
    return len(sa & sb) / len(sa | sb)


def hausdorff_bruteforce(a, b) -> float:
    """All-pairs max-min Euclidean distance; diagonal sentinel for one empty set."""
    sa, sb = _cells(a), _cells(b)
    if not sa and not sb:
        return 0.0
    if not sa or not sb:
        return math.hypot(len(a), len(a[0]))

    def directed(p, q):
        return max(min(math.hypot(y1 - y2, x1 - x2) for y2, x2 in q) for y1, x1 in p)

    return max(directed(sa, sb), directed(sb, sa))


def _unit(v):
    n = math.sqrt(sum(x * x for x in v))
    return [x / n for x in v]


def _det3(m):
    return (m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]))


def hdab_concentrations(rgb, h=(0.650, 0.704, 0.286), d=(0.269, 0.568, 0.778)):
    """Stain amounts of one RGB pixel via Cramer's rule on rows [H, HxD, D]."""
    h, d = _unit(h), _unit(d)
    c = [h[1] * d[2] - h[2] * d[1], h[2] * d[0] - h[0] * d[2], h[0] * d[1] - h[1] * d[0]]
    rows = [h, _unit(c), d]
    a = [[rows[j][i] for j in range(3)] for i in range(3)]
    od = [-math.log10((v + 1) / 256) for v in rgb]
    det = _det3(a)
    out = []
    for k in range(3):
        ak = [r[:] for r in a]
        for i in range(3):
            ak[i][k] = od[i]
        out.append(_det3(ak) / det)
    return out


def frechet_mean_shift(d) -> float:
    """Closed form when both Gaussians share a covariance: |d|^2."""
    return sum(x * x for x in d)
