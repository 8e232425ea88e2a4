"""Independent reference implementations used as test oracles.

Plain Python loops over lists, deliberately sharing no code with the package.
"""

import math
from fractions import Fraction


def naive_glcm(seg, dx, dy, symmetric, levels):
    h, w = len(seg), len(seg[0])
    P = [[0.0] * levels for _ in range(levels)]
    for y in range(h):
        for x in range(w):
            yy, xx = y + dy, x + dx
            if 0 <= yy < h and 0 <= xx < w:
                P[seg[y][x]][seg[yy][xx]] += 1
                if symmetric:
                    P[seg[yy][xx]][seg[y][x]] += 1
    total = sum(map(sum, P))
    return [[v / total for v in row] for row in P]


def naive_features(P):
    """mean, variance, homogeneity, contrast, dissimilarity, entropy, ASM, correlation."""
    G = len(P)
    mu_i = sum(i * P[i][j] for i in range(G) for j in range(G))
    mu_j = sum(j * P[i][j] for i in range(G) for j in range(G))
    var_i = sum((i - mu_i) ** 2 * P[i][j] for i in range(G) for j in range(G))
    var_j = sum((j - mu_j) ** 2 * P[i][j] for i in range(G) for j in range(G))
    hom = con = dis = ent = asm = cov = 0.0
    for i in range(G):
        for j in range(G):
            p = P[i][j]
            hom += p / (1 + (i - j) ** 2)
            con += (i - j) ** 2 * p
            dis += abs(i - j) * p
            if p > 0:
                ent -= p * math.log(p)
            asm += p * p
            cov += (i - mu_i) * (j - mu_j) * p
    sd = math.sqrt(var_i * var_j)
    corr = 0.0 if sd < 1e-12 else cov / sd
    return [mu_i, var_i, hom, con, dis, ent, asm, corr]


def mann_whitney(labels, scores):
    """Exact pairwise AUC with half credit for ties."""
    pos = [s for l, s in zip(labels, scores) if l == 1]
    neg = [s for l, s in zip(labels, scores) if l == 0]
    total = Fraction(0)
    for p in pos:
        for n in neg:
            total += 1 if p > n else Fraction(1, 2) if p == n else 0
    return total / (len(pos) * len(neg))


def grid_count(w, h, p, s):
    """Patch count by walking origins one stride at a time."""
    count = 0
    y = 0
    while y + p <= h:
        x = 0
        while x + p <= w:
            count += 1
            x += s
        y += s
    return count
