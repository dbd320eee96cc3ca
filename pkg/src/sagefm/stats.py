"""Statistical and clustering-metric primitives shared by the evaluation modules.

Everything here is a pure function on numpy arrays. p-values use scipy.special
CDFs (Student t, normal); the formulas themselves are implemented locally.
"""

from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import DegenerateInput, InvalidP, TooFewObservations


@dataclass(frozen=True)
class CorrelationResult:
    r: float
    n: int
    p: float


@dataclass(frozen=True)
class ClusterScores:
    ari: float
    dbi: float
    silhouette: float


def _t_sf(t, df):
    """Student-t survival function via the regularized incomplete beta."""
    x = df / (df + t * t)
    p = 0.5 * special.betainc(df / 2.0, 0.5, x)
    return p if t >= 0 else 1.0 - p


def pearson_with_p(x, y) -> CorrelationResult:
    """Product-moment correlation with a two-tailed t-test p-value.

    p uses t = r*sqrt((n-2)/(1-r^2)) against Student t with n-2 df; |r| = 1
    maps to p = 0.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise DegenerateInput("pearson_with_p expects equal-length 1-D vectors")
    n = x.size
    if n < 3:
        raise TooFewObservations(f"need n >= 3, got {n}")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt((xc * xc).sum())
    sy = np.sqrt((yc * yc).sum())
    if sx == 0.0 or sy == 0.0:
        raise DegenerateInput("zero variance input")
    r = float((xc * yc).sum() / (sx * sy))
    r = min(1.0, max(-1.0, r))
    if 1.0 - abs(r) < 1e-12:  # exact dependence up to rounding
        r = 1.0 if r > 0 else -1.0
    return CorrelationResult(r=r, n=n, p=pearson_p_from_r(r, n))


def pearson_p_from_r(r: float, n: int) -> float:
    """Two-tailed p for a precomputed correlation via the t transform."""
    if n < 3:
        raise TooFewObservations(f"need n >= 3, got {n}")
    r = min(1.0, max(-1.0, float(r)))
    if abs(r) >= 1.0:
        return 0.0
    t = abs(r) * np.sqrt((n - 2) / (1.0 - r * r))
    return min(1.0, float(2.0 * _t_sf(t, n - 2)))


def r2(pred, truth) -> float:
    """Coefficient of determination, 1 - SS_res/SS_tot."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    tc = truth - truth.mean()
    ss_tot = float((tc * tc).sum())
    if ss_tot == 0.0:
        raise DegenerateInput("truth has zero variance")
    res = truth - pred
    return 1.0 - float((res * res).sum()) / ss_tot


def adjusted_rand_index(labels_true, labels_pred) -> float:
    """Permutation-adjusted pair-counting agreement between two partitions."""
    labels_true = np.asarray(labels_true)
    labels_pred = np.asarray(labels_pred)
    n = labels_true.size
    _, ti = np.unique(labels_true, return_inverse=True)
    _, pi = np.unique(labels_pred, return_inverse=True)
    # contingency table
    cont = np.zeros((ti.max() + 1, pi.max() + 1), dtype=np.int64)
    np.add.at(cont, (ti, pi), 1)

    def comb2(v):
        v = v.astype(np.float64)
        return v * (v - 1) / 2.0

    sum_ij = comb2(cont).sum()
    a = comb2(cont.sum(axis=1)).sum()
    b = comb2(cont.sum(axis=0)).sum()
    total = n * (n - 1) / 2.0
    expected = a * b / total if total > 0 else 0.0
    max_index = (a + b) / 2.0
    if max_index == expected:
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))


def silhouette_mean(points, labels) -> float:
    """Mean silhouette over points, Euclidean distances, full pairwise."""
    points = np.asarray(points, dtype=float)
    labels = np.asarray(labels)
    n = points.shape[0]
    uniq = np.unique(labels)
    if uniq.size < 2:
        raise DegenerateInput("silhouette needs >= 2 clusters")
    d2 = ((points[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
    dist = np.sqrt(np.maximum(d2, 0.0))
    members = {c: np.where(labels == c)[0] for c in uniq}
    s = np.zeros(n)
    for i in range(n):
        own = members[labels[i]]
        if own.size == 1:
            s[i] = 0.0  # singleton convention
            continue
        a = dist[i, own].sum() / (own.size - 1)
        b = min(dist[i, members[c]].mean() for c in uniq if c != labels[i])
        s[i] = (b - a) / max(a, b) if max(a, b) > 0 else 0.0
    return float(s.mean())


def davies_bouldin(points, labels) -> float:
    """Davies-Bouldin index with centroid Euclidean distances."""
    points = np.asarray(points, dtype=float)
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    k = uniq.size
    if k < 2:
        raise DegenerateInput("DBI needs >= 2 clusters")
    centroids = np.stack([points[labels == c].mean(axis=0) for c in uniq])
    scatter = np.array(
        [np.linalg.norm(points[labels == c] - centroids[i], axis=1).mean()
         for i, c in enumerate(uniq)]
    )
    cd = np.linalg.norm(centroids[:, None, :] - centroids[None, :, :], axis=2)
    worst = np.zeros(k)
    for i in range(k):
        ratios = [(scatter[i] + scatter[j]) / cd[i, j]
                  for j in range(k) if j != i and cd[i, j] > 0]
        worst[i] = max(ratios) if ratios else 0.0
    return float(worst.mean())


_UNDEFINED = float("nan")


def clustering_scores(points, labels_pred, labels_true) -> ClusterScores:
    """ARI against labels_true plus internal silhouette / DBI of labels_pred.

    A single predicted cluster still yields an ARI; silhouette and DBI are
    reported as NaN sentinels in that case.
    """
    points = np.asarray(points, dtype=float)
    if points.shape[0] < 2:
        raise DegenerateInput("need n >= 2 points")
    ari = adjusted_rand_index(labels_true, labels_pred)
    if np.unique(np.asarray(labels_pred)).size < 2:
        return ClusterScores(ari=ari, dbi=_UNDEFINED, silhouette=_UNDEFINED)
    return ClusterScores(
        ari=ari,
        dbi=davies_bouldin(points, labels_pred),
        silhouette=silhouette_mean(points, labels_pred),
    )


def _rank_with_ties(values):
    """Average ranks (1-based) with ties sharing the mean rank."""
    values = np.asarray(values, dtype=float)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=float)
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def wilcoxon_rank_sum(a, b):
    """Mann-Whitney U with two-tailed normal-approximation p (tie-corrected,
    continuity-corrected). Returns (U_a, p)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n1, n2 = a.size, b.size
    if n1 < 1 or n2 < 1:
        raise DegenerateInput("both groups must be non-empty")
    pooled = np.concatenate([a, b])
    ranks = _rank_with_ties(pooled)
    r1 = ranks[:n1].sum()
    u1 = r1 - n1 * (n1 + 1) / 2.0
    mu = n1 * n2 / 2.0
    # tie correction on the variance
    _, counts = np.unique(pooled, return_counts=True)
    n = n1 + n2
    tie_term = ((counts ** 3 - counts).sum()) / (n * (n - 1)) if n > 1 else 0.0
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term)
    if var <= 0:
        return float(u1), 1.0  # all values identical
    z = (abs(u1 - mu) - 0.5) / np.sqrt(var)
    z = max(z, 0.0)
    p = float(2.0 * special.ndtr(-z))
    return float(u1), min(1.0, p)


def bh_fdr(pvalues):
    """Benjamini-Hochberg step-up adjustment, order-preserving with input."""
    p = np.asarray(pvalues, dtype=float)
    if p.size == 0:
        return p.copy()
    if np.any(p < 0) or np.any(p > 1) or np.any(np.isnan(p)):
        raise InvalidP("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    adjusted = p[order] * m / np.arange(1, m + 1)
    adjusted = np.minimum.accumulate(adjusted[::-1])[::-1]
    adjusted = np.minimum(adjusted, 1.0)
    out = np.empty(m, dtype=float)
    out[order] = adjusted
    return out


def two_sample_t(a, b):
    """Welch two-sample t statistic with Welch-Satterthwaite df.

    Returns (t, p). Zero variance in both groups with equal means gives
    (0, 1); unequal means with zero variance gives an infinite-t convention
    with p = 0.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise TooFewObservations("need >= 2 observations per group")
    ma, mb = a.mean(), b.mean()
    va, vb = a.var(ddof=1), b.var(ddof=1)
    sa, sb = va / a.size, vb / b.size
    denom = sa + sb
    if denom == 0.0:
        if ma == mb:
            return 0.0, 1.0
        return float(np.sign(ma - mb)) * float("inf"), 0.0
    t = (ma - mb) / np.sqrt(denom)
    if sa == 0.0 or sb == 0.0:
        # Satterthwaite still defined as long as one variance is positive
        df = denom ** 2 / (
            (sa ** 2 / (a.size - 1)) + (sb ** 2 / (b.size - 1))
        )
    else:
        df = denom ** 2 / (sa ** 2 / (a.size - 1) + sb ** 2 / (b.size - 1))
    p = float(2.0 * _t_sf(abs(float(t)), df))
    return float(t), min(1.0, p)


def cosine_distance(u, v) -> float:
    """1 - cos(u, v); lies in [0, 2]. Identical vectors give exactly 0."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateInput("cosine distance undefined for zero vectors")
    if np.array_equal(u, v):
        return 0.0
    c = float(np.dot(u, v) / (nu * nv))
    c = min(1.0, max(-1.0, c))
    return 1.0 - c
