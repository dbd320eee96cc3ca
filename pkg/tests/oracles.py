"""Independent brute-force reference implementations used to verify the
stats module. These deliberately use different formulations (pair counting,
direct loops, enumeration) than the library code paths."""

import itertools
import math

import numpy as np


def ari_pair_counting(labels_true, labels_pred):
    """ARI from explicit agreement counts over all point pairs."""
    n = len(labels_true)
    n11 = n00 = n10 = n01 = 0
    for i in range(n):
        for j in range(i + 1, n):
            same_t = labels_true[i] == labels_true[j]
            same_p = labels_pred[i] == labels_pred[j]
            if same_t and same_p:
                n11 += 1
            elif not same_t and not same_p:
                n00 += 1
            elif same_t:
                n10 += 1
            else:
                n01 += 1
    num = 2.0 * (n11 * n00 - n10 * n01)
    den = (n11 + n10) * (n10 + n00) + (n11 + n01) * (n01 + n00)
    if den == 0:
        return 1.0
    return num / den


def silhouette_direct(points, labels):
    points = np.asarray(points, float)
    labels = list(labels)
    n = len(labels)
    scores = []
    for i in range(n):
        own = [j for j in range(n) if labels[j] == labels[i] and j != i]
        if not own:
            scores.append(0.0)
            continue
        a = sum(math.dist(points[i], points[j]) for j in own) / len(own)
        b = math.inf
        for c in set(labels):
            if c == labels[i]:
                continue
            members = [j for j in range(n) if labels[j] == c]
            b = min(b, sum(math.dist(points[i], points[j])
                           for j in members) / len(members))
        scores.append((b - a) / max(a, b) if max(a, b) > 0 else 0.0)
    return sum(scores) / n


def dbi_direct(points, labels):
    points = np.asarray(points, float)
    labels = list(labels)
    clusters = sorted(set(labels))
    centroids = {}
    scatter = {}
    for c in clusters:
        members = np.array([points[j] for j in range(len(labels))
                            if labels[j] == c])
        centroids[c] = members.mean(axis=0)
        scatter[c] = float(np.mean([math.dist(m, centroids[c])
                                    for m in members]))
    total = 0.0
    for c in clusters:
        worst = 0.0
        for d in clusters:
            if d == c:
                continue
            sep = math.dist(centroids[c], centroids[d])
            if sep > 0:
                worst = max(worst, (scatter[c] + scatter[d]) / sep)
        total += worst
    return total / len(clusters)


def mannwhitney_u_counting(a, b):
    """U for group a by direct pair comparison (ties count half)."""
    u = 0.0
    for x in a:
        for y in b:
            if x > y:
                u += 1.0
            elif x == y:
                u += 0.5
    return u


def bh_stepup_direct(pvalues):
    """BH by an explicit backwards step-up pass."""
    m = len(pvalues)
    order = sorted(range(m), key=lambda i: pvalues[i])
    adjusted = [0.0] * m
    running = 1.0
    for rank in range(m, 0, -1):
        i = order[rank - 1]
        running = min(running, pvalues[i] * m / rank)
        adjusted[i] = running
    return adjusted


def welch_direct(a, b):
    """(t, df) via the textbook Welch formulas."""
    a, b = list(map(float, a)), list(map(float, b))
    na, nb = len(a), len(b)
    ma, mb = sum(a) / na, sum(b) / nb
    va = sum((x - ma) ** 2 for x in a) / (na - 1)
    vb = sum((x - mb) ** 2 for x in b) / (nb - 1)
    se2 = va / na + vb / nb
    t = (ma - mb) / math.sqrt(se2)
    df = se2 ** 2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    return t, df


def pearson_direct(x, y):
    x, y = list(map(float, x)), list(map(float, y))
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def all_partitions(n):
    """Every partition of range(n) as a label tuple (restricted growth)."""
    def grow(prefix, maxlab):
        if len(prefix) == n:
            yield tuple(prefix)
            return
        for lab in range(maxlab + 2):
            yield from grow(prefix + [lab], max(maxlab, lab))
    yield from grow([0], 0)


def knn_brute(xy, rowcol, center, k):
    """k nearest neighbors of one spot by scanning all others, ties broken by
    (array_row, array_col)."""
    cands = []
    for j in range(len(xy)):
        if j == center:
            continue
        d = math.dist(xy[center], xy[j])
        cands.append((d, int(rowcol[j][0]), int(rowcol[j][1]), j))
    cands.sort()
    return [j for _, _, _, j in cands[:k]]
