"""Slow, obviously-correct reference implementations used only by the tests."""
import math

import numpy as np


def oracle_depth(n, capacity):
    depth = 0
    while capacity * 2**depth < n:
        depth += 1
    return depth


def oracle_partition(coords, capacity):
    """Recursive median partition on plain Python lists; returns leaves left to right."""
    pts = [tuple(map(float, row)) for row in coords]
    depth = oracle_depth(len(pts), capacity)

    def rec(members, level):
        axis = level % 2
        ordered = sorted(members, key=lambda i: (pts[i][axis], pts[i][1 - axis], i))
        if level == depth:
            return [ordered]
        half = len(ordered) // 2
        return rec(ordered[:half], level + 1) + rec(ordered[half:], level + 1)

    return rec(list(range(len(pts))), 0)


def cosine(a, b):
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(x * x for x in b))
    if na == 0 or nb == 0:
        return 0.0
    return sum(x * y for x, y in zip(a, b)) / (na * nb)


def oracle_pads(leaves, series, capacity, leaves_per_patch=1):
    """Exhaustive mean-cosine argmax per unfull leaf, greedy in leaf order.

    Candidates exclude every point already in the same patch; empty leaves
    use their nearest non-empty ancestor's members as reference.
    """
    cols = [list(map(float, series[:, j])) for j in range(series.shape[1])]
    n = len(cols)
    out = []
    depth = int(round(math.log2(len(leaves))))
    for first in range(0, len(leaves), leaves_per_patch):
        used = set()
        for leaf in leaves[first : first + leaves_per_patch]:
            used.update(leaf)
        for li in range(first, first + leaves_per_patch):
            members = list(leaves[li])
            ref, level, pos = members, depth, li
            while not ref:
                level -= 1
                pos //= 2
                span = 2 ** (depth - level)
                ref = [i for leaf in leaves[pos * span : (pos + 1) * span] for i in leaf]
            chosen = []
            for _ in range(capacity - len(members)):
                best, best_score = None, -math.inf
                for c in range(n):
                    if c in used:
                        continue
                    score = sum(cosine(cols[c], cols[m]) for m in ref) / len(ref)
                    if score > best_score:
                        best, best_score = c, score
                used.add(best)
                chosen.append(best)
            out.append(chosen)
    return out


def naive_attention(x, wq, wk, wv, wo, heads, scaled=True):
    """Loop-based multi-head attention over the rows of a (T, d) matrix."""
    t, d = x.shape
    dh = d // heads
    out = np.zeros((t, d))
    concat = np.zeros((t, d))
    for h in range(heads):
        cols = slice(h * dh, (h + 1) * dh)
        q = x @ wq[:, cols]
        k = x @ wk[:, cols]
        v = x @ wv[:, cols]
        for i in range(t):
            logits = [sum(q[i, a] * k[j, a] for a in range(dh)) for j in range(t)]
            if scaled:
                logits = [z / math.sqrt(dh) for z in logits]
            top = max(logits)
            w = [math.exp(z - top) for z in logits]
            s = sum(w)
            for j in range(t):
                concat[i, cols] += (w[j] / s) * v[j]
    out[:] = concat @ wo
    return out
