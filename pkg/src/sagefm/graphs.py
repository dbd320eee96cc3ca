"""Local subgraph construction: 15-spot neighborhoods and their
distance-weighted normalized adjacencies.

A subgraph is one center spot plus its 14 nearest in-sample neighbors by
Euclidean distance on (x_um, y_um), ties broken by (array_row, array_col)
ascending. Edge weights use a Gaussian kernel; the center connects to every
neighbor, neighbors connect mutually when closer than 1.5x the sample's
lattice pitch (median nearest-neighbor distance).
"""

import logging
import struct
from dataclasses import dataclass

import numpy as np

from .data import SampleRecord
from .errors import CorruptData, InvalidBandwidth

logger = logging.getLogger(__name__)

SUBGRAPH_SIZE = 15
CACHE_MAGIC = b"SAGESG01"


@dataclass
class Subgraph:
    sample_id: str
    nodes: np.ndarray      # (15,) spot indices into the sample, center first
    distances: np.ndarray  # (14,) center-to-neighbor distances, um
    pairwise: np.ndarray   # (15, 15) symmetric distance matrix, um
    pitch: float           # sample lattice pitch estimate, um

    @property
    def center(self) -> int:
        return int(self.nodes[0])


@dataclass
class NormalizedAdjacency:
    a_hat: np.ndarray  # (15, 15) symmetric, nonnegative
    sigma: float


def pairwise_distances(xy: np.ndarray) -> np.ndarray:
    diff = xy[:, None, :] - xy[None, :, :]
    return np.sqrt((diff ** 2).sum(axis=2))


def estimate_pitch(xy: np.ndarray) -> float:
    """Median nearest-neighbor distance; robust to dropped spots."""
    d = pairwise_distances(xy)
    np.fill_diagonal(d, np.inf)
    return float(np.median(d.min(axis=1)))


def knn_indices(xy: np.ndarray, rowcol: np.ndarray, k: int) -> np.ndarray:
    """k nearest neighbors per spot by Euclidean distance, ties broken by
    (array_row, array_col) ascending. Returns (n, k) indices."""
    dist = pairwise_distances(xy)
    np.fill_diagonal(dist, np.inf)
    n = xy.shape[0]
    out = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        order = np.lexsort((rowcol[:, 1], rowcol[:, 0], dist[i]))
        out[i] = order[:k]
    return out


def build_subgraphs(sample: SampleRecord, k: int = 14):
    """One subgraph per center with nonzero counts; empty when the sample has
    fewer than k+1 spots."""
    n = sample.n_spots
    if n < k + 1:
        logger.warning("sample %s has %d spots (< %d), skipped",
                       sample.sample_id, n, k + 1)
        return []
    xy = sample.spot_xy
    pitch = estimate_pitch(xy)
    neighbors = knn_indices(xy, sample.spot_rowcol, k)
    nonzero = np.asarray(sample.counts.sum(axis=1)).ravel() > 0

    subgraphs = []
    for center in range(n):
        if not nonzero[center]:
            continue
        nodes = np.concatenate(([center], neighbors[center])).astype(np.int64)
        pw = pairwise_distances(xy[nodes])
        subgraphs.append(Subgraph(
            sample_id=sample.sample_id,
            nodes=nodes,
            distances=pw[0, 1:].copy(),
            pairwise=pw,
            pitch=pitch,
        ))
    return subgraphs


def _kernel_weights(sg: Subgraph, sigma: float) -> np.ndarray:
    """Raw Gaussian edge weights before degree normalization."""
    n = sg.pairwise.shape[0]
    w = np.zeros((n, n))
    kern = np.exp(-(sg.pairwise ** 2) / (2.0 * sigma * sigma))
    # center edges are unconditional
    w[0, 1:] = kern[0, 1:]
    w[1:, 0] = kern[1:, 0]
    # neighbor-neighbor edges within 1.5x pitch
    cutoff = 1.5 * sg.pitch
    for i in range(1, n):
        for j in range(i + 1, n):
            if sg.pairwise[i, j] <= cutoff:
                w[i, j] = w[j, i] = kern[i, j]
    np.fill_diagonal(w, 1.0)
    return w


def compute_adjacency(sg: Subgraph, sigma: float) -> NormalizedAdjacency:
    """Symmetric degree-normalized adjacency A_hat = D^-1/2 W D^-1/2."""
    if sigma <= 0:
        raise InvalidBandwidth(f"sigma must be positive, got {sigma}")
    w = _kernel_weights(sg, sigma)
    d = w.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(d)
    a_hat = w * inv_sqrt[:, None] * inv_sqrt[None, :]
    return NormalizedAdjacency(a_hat=a_hat, sigma=float(sigma))


def adjacency_stack(subgraphs, sigma: float | None = None) -> np.ndarray:
    """Stacked A_hat matrices, (n_subgraphs, 15, 15); sigma defaults to each
    subgraph's pitch estimate."""
    mats = [compute_adjacency(sg, sigma if sigma is not None else sg.pitch).a_hat
            for sg in subgraphs]
    return np.stack(mats) if mats else np.zeros((0, SUBGRAPH_SIZE, SUBGRAPH_SIZE))


_TRIU = np.triu_indices(SUBGRAPH_SIZE, k=1)


def save_subgraph_cache(path, subgraphs, sample_ids):
    """Binary cache: magic, then fixed 484-byte records of
    (sample index u32, 15 x u32 node ids, 105 x f32 upper-triangle distances)."""
    index_of = {sid: i for i, sid in enumerate(sample_ids)}
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        for sg in subgraphs:
            fh.write(struct.pack("<I", index_of[sg.sample_id]))
            fh.write(sg.nodes.astype("<u4").tobytes())
            fh.write(sg.pairwise[_TRIU].astype("<f4").tobytes())


def load_subgraph_cache(path, sample_ids, pitch_by_sample):
    """Inverse of save_subgraph_cache; pitch values are supplied by the caller
    (they are sample-level quantities, not stored in the record format)."""
    record = struct.Struct("<I" + "I" * SUBGRAPH_SIZE + "f" * len(_TRIU[0]))
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CACHE_MAGIC:
        raise CorruptData(f"{path}: bad subgraph cache magic")
    body = blob[8:]
    if len(body) % record.size != 0:
        raise CorruptData(f"{path}: truncated subgraph cache")
    subgraphs = []
    for off in range(0, len(body), record.size):
        fields = record.unpack_from(body, off)
        sid = sample_ids[fields[0]]
        nodes = np.array(fields[1:1 + SUBGRAPH_SIZE], dtype=np.int64)
        pw = np.zeros((SUBGRAPH_SIZE, SUBGRAPH_SIZE))
        pw[_TRIU] = fields[1 + SUBGRAPH_SIZE:]
        pw = pw + pw.T
        subgraphs.append(Subgraph(
            sample_id=sid,
            nodes=nodes,
            distances=pw[0, 1:].copy(),
            pairwise=pw,
            pitch=float(pitch_by_sample[sid]),
        ))
    return subgraphs
