"""Hidden-layer embeddings and the clustering / heterogeneity / DEG / probe
analyses built on them.

Embeddings are the center-node activation after a chosen graph-conv layer
(1-based; layer 3 of the five-layer default is the 512-unit middle layer),
computed with no genes masked.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import model as gcn
from . import stats
from .errors import (DegenerateCentroid, DegenerateInput, InvalidComponents,
                     InvalidK, InvalidLayer, LabelMismatch, MissingClass,
                     NoComparableTissues)
from .training import SubgraphSet

EMBED_MAGIC = b"SAGEEM01"


@dataclass
class EmbeddingMatrix:
    vectors: np.ndarray  # (n_spots, d) float32
    keys: list           # (sample_id, spot_index) per row
    layer_index: int


@dataclass
class CentroidDistances:
    labels: list          # sorted label order
    dist: np.ndarray      # (L, L) symmetric, zero diagonal
    normalized: bool = False

    def normalize(self) -> "CentroidDistances":
        off = self.dist[~np.eye(len(self.labels), dtype=bool)]
        peak = off.max() if off.size else 0.0
        scaled = self.dist / peak if peak > 0 else self.dist.copy()
        return CentroidDistances(labels=list(self.labels), dist=scaled,
                                 normalized=True)


def extract_embeddings(checkpoint, samples, sample_ids, vocab,
                       layer_index: int = 3, sigma=None,
                       batch: int = 256) -> EmbeddingMatrix:
    """Center activations after conv layer `layer_index`, no masking."""
    n_layers = checkpoint.arch.n_layers
    if not (1 <= layer_index <= n_layers):
        raise InvalidLayer(
            f"layer_index {layer_index} outside 1..{n_layers}")
    sets = SubgraphSet(samples, sample_ids, sigma)
    checkpoint.check_compatible(vocab.sha256(), sets.scheme)
    rows = []
    keys = []
    for start in range(0, len(sets), batch):
        idx = np.arange(start, min(start + batch, len(sets)))
        a_hats, xs, _ = sets.gather(idx)
        rows.append(gcn.hidden_batch(checkpoint.params, a_hats, xs, layer_index))
        keys.extend((sets.entries[i][0], int(sets.entries[i][1][0]))
                    for i in idx)
    vectors = (np.concatenate(rows) if rows
               else np.zeros((0, checkpoint.arch.hidden_widths[layer_index - 1])))
    return EmbeddingMatrix(vectors=vectors.astype(np.float32), keys=keys,
                           layer_index=layer_index)


def save_embeddings(emb: EmbeddingMatrix, path):
    """Binary: magic, u32 n_rows, u32 dim, u32 layer_index, key table
    (u32 id length + bytes + u32 spot index per row), then f32 rows."""
    with open(path, "wb") as fh:
        fh.write(EMBED_MAGIC)
        fh.write(struct.pack("<III", emb.vectors.shape[0],
                             emb.vectors.shape[1], emb.layer_index))
        for sid, spot in emb.keys:
            enc = sid.encode()
            fh.write(struct.pack("<I", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<I", spot))
        fh.write(np.ascontiguousarray(emb.vectors, dtype="<f4").tobytes())


def load_embeddings(path) -> EmbeddingMatrix:
    blob = open(path, "rb").read()
    if blob[:8] != EMBED_MAGIC:
        raise DegenerateInput(f"{path}: bad embeddings magic")
    n, d, layer = struct.unpack_from("<III", blob, 8)
    off = 20
    keys = []
    for _ in range(n):
        (ln,) = struct.unpack_from("<I", blob, off)
        off += 4
        sid = blob[off:off + ln].decode()
        off += ln
        (spot,) = struct.unpack_from("<I", blob, off)
        off += 4
        keys.append((sid, spot))
    vectors = np.frombuffer(blob, dtype="<f4", count=n * d,
                            offset=off).reshape(n, d).copy()
    return EmbeddingMatrix(vectors=vectors, keys=keys, layer_index=layer)


def pca_reduce(x, components: int = 200):
    """Column-center and project onto the top right-singular vectors.

    Pass-through when there are no more features than components (mirrors
    exempting already-low-dimensional embeddings). Component signs are fixed
    so each one's largest-magnitude loading is positive.
    """
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if n < 2:
        raise DegenerateInput("pca needs n >= 2 rows")
    if d <= components:
        return x.copy()
    if components > min(n, d):
        raise InvalidComponents(
            f"components {components} > min(n, d) = {min(n, d)}")
    centered = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    vt = vt[:components]
    flip = np.sign(vt[np.arange(vt.shape[0]),
                      np.abs(vt).argmax(axis=1)])
    flip[flip == 0] = 1.0
    vt = vt * flip[:, None]
    return centered @ vt.T


def _kmeans_once(x, k, rng, max_iter, tol):
    n = x.shape[0]
    # k-means++ seeding
    centroids = np.empty((k, x.shape[1]))
    first = rng.integers(n)
    centroids[0] = x[first]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[j] = x[rng.integers(n)]
            continue
        probs = d2 / total
        centroids[j] = x[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, ((x - centroids[j]) ** 2).sum(axis=1))

    prev_inertia = np.inf
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        d2all = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        labels = d2all.argmin(axis=1)
        inertia = float(d2all[np.arange(n), labels].sum())
        for j in range(k):
            members = labels == j
            if members.any():
                centroids[j] = x[members].mean(axis=0)
            else:
                # re-seed an empty cluster from the farthest point
                far = d2all[np.arange(n), labels].argmax()
                centroids[j] = x[far]
        if abs(prev_inertia - inertia) <= tol:
            break
        prev_inertia = inertia
    d2all = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    labels = d2all.argmin(axis=1)
    inertia = float(d2all[np.arange(n), labels].sum())
    return labels, inertia


def kmeans(x, k: int, seed: int = 0, restarts: int = 10, max_iter: int = 300,
           tol: float = 1e-6):
    """Lloyd iterations from k-means++ seeding, best of `restarts` by inertia."""
    x = np.asarray(x, dtype=np.float64)
    if k > x.shape[0]:
        raise InvalidK(f"k={k} exceeds n={x.shape[0]}")
    if k < 1:
        raise InvalidK("k must be >= 1")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        labels, inertia = _kmeans_once(x, k, rng, max_iter, tol)
        if best is None or inertia < best[1]:
            best = (labels, inertia)
    return best


def _best_scored_k(scores: dict) -> int:
    """Highest score wins; exact ties resolve to the smaller k."""
    return max(sorted(scores), key=lambda k: (scores[k], -k))


def select_k_by_silhouette(x, k_range=range(4, 11), seed: int = 0):
    """Silhouette-maximizing k over k_range; ties resolve to the smaller k."""
    x = np.asarray(x, dtype=np.float64)
    scores = {}
    for k in k_range:
        labels, _ = kmeans(x, k, seed=seed)
        if np.unique(labels).size < 2:
            scores[k] = float("-inf")
        else:
            scores[k] = stats.silhouette_mean(x, labels)
    return _best_scored_k(scores), scores


def centroid_distance_analysis(x, labels) -> CentroidDistances:
    """Pairwise cosine distances between per-label mean vectors."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    uniq = sorted(set(labels.tolist()))
    centroids = []
    for lab in uniq:
        c = x[labels == lab].mean(axis=0)
        if np.linalg.norm(c) == 0:
            raise DegenerateCentroid(f"label {lab!r} has a zero centroid")
        centroids.append(c)
    k = len(uniq)
    dist = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            dist[i, j] = dist[j, i] = stats.cosine_distance(centroids[i],
                                                            centroids[j])
    return CentroidDistances(labels=list(uniq), dist=dist)


def matrix_preservation_error(candidate: CentroidDistances,
                              reference: CentroidDistances):
    """Absolute entry-wise errors over the normalized upper triangles.

    Returns (errors, mean_error); matrices are re-aligned by label first.
    """
    if set(candidate.labels) != set(reference.labels):
        raise LabelMismatch(
            f"label sets differ: {sorted(candidate.labels)} vs "
            f"{sorted(reference.labels)}")
    cn = candidate if candidate.normalized else candidate.normalize()
    rn = reference if reference.normalized else reference.normalize()
    perm = [cn.labels.index(lab) for lab in rn.labels]
    aligned = cn.dist[np.ix_(perm, perm)]
    iu = np.triu_indices(len(rn.labels), k=1)
    errors = np.abs(aligned[iu] - rn.dist[iu])
    return errors, float(errors.mean())


def neighborhood_rank(distances: CentroidDistances, tissue_of: dict):
    """Mean rank position of same-tissue samples, per sample and globally.

    Other samples are ranked ascending by distance with average ranks for
    ties; samples whose tissue has no second member are skipped.
    """
    labels = distances.labels
    if len(labels) < 2:
        raise NoComparableTissues("need >= 2 samples")
    counts = {}
    for sid in labels:
        counts[tissue_of[sid]] = counts.get(tissue_of[sid], 0) + 1
    if not any(v >= 2 for v in counts.values()):
        raise NoComparableTissues("no tissue has >= 2 samples")
    per_sample = {}
    for i, sid in enumerate(labels):
        if counts[tissue_of[sid]] < 2:
            continue
        others = [j for j in range(len(labels)) if j != i]
        ranks = stats._rank_with_ties(distances.dist[i, others])
        same = [k for k, j in enumerate(others)
                if tissue_of[labels[j]] == tissue_of[sid]]
        per_sample[sid] = float(ranks[same].mean())
    overall = float(np.mean(list(per_sample.values())))
    return per_sample, overall


@dataclass
class MarkerRow:
    gene: str
    direction: int   # +1 up in cluster, -1 down
    p: float
    p_adj: float
    significant: bool


def deg_one_vs_rest(values, labels, gene_names, fdr: float = 0.05):
    """One-vs-rest Wilcoxon rank-sum markers per cluster with BH adjustment.

    Returns (tables, n_constant) where tables maps cluster -> [MarkerRow]
    sorted by adjusted p; genes constant across all spots are excluded.
    """
    values = np.asarray(values, dtype=np.float64)
    labels = np.asarray(labels)
    clusters = sorted(set(labels.tolist()))
    if len(clusters) < 2:
        raise DegenerateInput("differential testing needs >= 2 clusters")
    keep = [g for g in range(values.shape[1])
            if values[:, g].max() > values[:, g].min()]
    n_constant = values.shape[1] - len(keep)
    tables = {}
    for cl in clusters:
        inside = labels == cl
        rows = []
        pvals = np.empty(len(keep))
        dirs = np.empty(len(keep), dtype=np.int64)
        for gi, g in enumerate(keep):
            col = values[:, g]
            _, p = stats.wilcoxon_rank_sum(col[inside], col[~inside])
            pvals[gi] = p
            diff = col[inside].mean() - col[~inside].mean()
            dirs[gi] = 1 if diff >= 0 else -1
        adj = stats.bh_fdr(pvals)
        for gi, g in enumerate(keep):
            rows.append(MarkerRow(
                gene=gene_names[g], direction=int(dirs[gi]),
                p=float(pvals[gi]), p_adj=float(adj[gi]),
                significant=bool(adj[gi] < fdr)))
        rows.sort(key=lambda r: (r.p_adj, r.p, r.gene))
        tables[cl] = rows
    return tables, n_constant


def _macro_f1(y_true, y_pred, classes):
    f1s = []
    for c in classes:
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom > 0 else 0.0)
    return float(np.mean(f1s))


def linear_probe(x, labels, train_idx, test_idx, seed: int = 0,
                 iters: int = 300, lr: float = 0.5):
    """Multinomial logistic probe fit by full-batch gradient descent.

    Features are standardized on the train split. Returns (accuracy,
    macro_f1) on the held-out split.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    train_idx = np.asarray(train_idx)
    test_idx = np.asarray(test_idx)
    classes = sorted(set(labels[train_idx].tolist()))
    if len(classes) < 2:
        raise MissingClass("train split must contain >= 2 classes")
    missing = set(labels[test_idx].tolist()) - set(classes)
    if missing:
        raise MissingClass(f"classes absent from train: {sorted(missing)}")
    cindex = {c: i for i, c in enumerate(classes)}
    y = np.array([cindex[c] for c in labels[train_idx]])

    mu = x[train_idx].mean(axis=0)
    sd = x[train_idx].std(axis=0)
    sd[sd == 0] = 1.0
    xtr = (x[train_idx] - mu) / sd
    xte = (x[test_idx] - mu) / sd

    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, 0.01, (x.shape[1], len(classes)))
    b = np.zeros(len(classes))
    onehot = np.eye(len(classes))[y]
    n = xtr.shape[0]
    for _ in range(iters):
        logits = xtr @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=1, keepdims=True)
        g = (probs - onehot) / n
        w -= lr * (xtr.T @ g + 1e-4 * w)
        b -= lr * g.sum(axis=0)
    pred_idx = (xte @ w + b).argmax(axis=1)
    preds = np.array([classes[i] for i in pred_idx])
    truth = labels[test_idx]
    accuracy = float((preds == truth).mean())
    return accuracy, _macro_f1(truth, preds, classes)
