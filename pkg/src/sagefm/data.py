"""Native dataset layout: loading, validation, normalization, sample splits.

Layout on disk (all paths relative to the dataset root):
  manifest.json   {"genes": "genes.tsv", "samples": [{"id", "tissue", "dir"}, ...]}
  genes.tsv       one gene symbol per line; line order defines gene indices
  <sample dir>/spots.tsv   tab-separated, header: barcode x_um y_um array_row array_col
  <sample dir>/matrix.mtx  MatrixMarket coordinate integer, rows = spots in
                           spots.tsv order, columns = genes, 1-based indices

The MatrixMarket reader/writer is local so integer counts and entry order
round-trip bit-exactly.
"""

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse

from .errors import CorruptData, LoadError, TooFewSamples, VocabularyMismatch

SCHEME_CP10K_LOG1P = "cp10k_log1p"

SPOTS_HEADER = ["barcode", "x_um", "y_um", "array_row", "array_col"]


class GeneVocabulary:
    """Ordered gene symbols with an inverse symbol -> index lookup."""

    def __init__(self, names):
        self.names = list(names)
        self.index = {name: i for i, name in enumerate(self.names)}
        if len(self.index) != len(self.names):
            raise CorruptData("duplicate gene symbols in vocabulary")

    def __len__(self):
        return len(self.names)

    def __getitem__(self, i):
        return self.names[i]

    def sha256(self) -> str:
        return hashlib.sha256("\n".join(self.names).encode()).hexdigest()

    def __eq__(self, other):
        return isinstance(other, GeneVocabulary) and self.names == other.names


@dataclass
class SampleRecord:
    sample_id: str
    tissue: str
    barcodes: list
    spot_xy: np.ndarray       # (n_spots, 2) float64, micrometers
    spot_rowcol: np.ndarray   # (n_spots, 2) int64, array row/col
    counts: sparse.csr_matrix  # (n_spots, n_genes) nonnegative integers

    @property
    def n_spots(self) -> int:
        return self.counts.shape[0]

    def validate(self, n_genes: int):
        n = self.counts.shape[0]
        if n < 1:
            raise CorruptData(f"{self.sample_id}: sample has no spots")
        if self.counts.shape[1] != n_genes:
            raise VocabularyMismatch(
                f"{self.sample_id}: matrix has {self.counts.shape[1]} genes, "
                f"vocabulary has {n_genes}"
            )
        if self.spot_xy.shape != (n, 2) or self.spot_rowcol.shape != (n, 2):
            raise CorruptData(
                f"{self.sample_id}: spots table has {self.spot_xy.shape[0]} rows, "
                f"matrix has {n}"
            )
        if len(self.barcodes) != n:
            raise CorruptData(f"{self.sample_id}: barcode count mismatch")
        if self.counts.nnz and self.counts.data.min() < 0:
            raise CorruptData(f"{self.sample_id}: negative count entry")


@dataclass
class NormalizedMatrix:
    values: np.ndarray  # (n_spots, n_genes) dense float64
    scheme: str


@dataclass(frozen=True)
class SplitAssignment:
    train: tuple
    validation: tuple
    test: tuple
    seed: int

    def all_ids(self):
        return list(self.train) + list(self.validation) + list(self.test)


def read_mtx(path: Path) -> sparse.csr_matrix:
    """Read a MatrixMarket coordinate integer matrix (1-based indices)."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except FileNotFoundError:
        raise LoadError(f"missing matrix file: {path}")
    if not lines or not lines[0].startswith("%%MatrixMarket"):
        raise CorruptData(f"{path}: missing MatrixMarket header")
    header = lines[0].split()
    if header[1:4] != ["matrix", "coordinate", "integer"]:
        raise CorruptData(f"{path}: unsupported MatrixMarket flavor {header[1:]}")
    body = [ln for ln in lines[1:] if ln and not ln.startswith("%")]
    if not body:
        raise CorruptData(f"{path}: missing size line")
    try:
        n_rows, n_cols, nnz = (int(tok) for tok in body[0].split())
    except ValueError:
        raise CorruptData(f"{path}: malformed size line {body[0]!r}")
    if len(body) - 1 != nnz:
        raise CorruptData(f"{path}: declared {nnz} entries, found {len(body) - 1}")
    rows = np.empty(nnz, dtype=np.int64)
    cols = np.empty(nnz, dtype=np.int64)
    vals = np.empty(nnz, dtype=np.int64)
    for k, ln in enumerate(body[1:]):
        parts = ln.split()
        if len(parts) != 3:
            raise CorruptData(f"{path}: malformed entry {ln!r}")
        r, c, v = int(parts[0]), int(parts[1]), int(parts[2])
        if not (1 <= r <= n_rows and 1 <= c <= n_cols):
            raise CorruptData(f"{path}: index out of range in {ln!r}")
        rows[k], cols[k], vals[k] = r - 1, c - 1, v
    mat = sparse.coo_matrix((vals, (rows, cols)), shape=(n_rows, n_cols))
    return mat.tocsr()


def write_mtx(path: Path, counts):
    """Write integer counts in MatrixMarket coordinate format, row-major order."""
    coo = sparse.coo_matrix(counts)
    order = np.lexsort((coo.col, coo.row))
    rows = coo.row[order] + 1
    cols = coo.col[order] + 1
    vals = coo.data[order]
    body = "\n".join(f"{r} {c} {v}" for r, c, v in zip(rows, cols, vals))
    with open(path, "w") as fh:
        fh.write("%%MatrixMarket matrix coordinate integer general\n")
        fh.write(f"{coo.shape[0]} {coo.shape[1]} {coo.nnz}\n")
        if body:
            fh.write(body + "\n")


def _read_spots(path: Path):
    try:
        lines = path.read_text().splitlines()
    except FileNotFoundError:
        raise LoadError(f"missing spots file: {path}")
    if not lines or lines[0].split("\t") != SPOTS_HEADER:
        raise CorruptData(f"{path}: bad spots.tsv header")
    barcodes, xy, rowcol = [], [], []
    for ln in lines[1:]:
        parts = ln.split("\t")
        if len(parts) != 5:
            raise CorruptData(f"{path}: malformed spots row {ln!r}")
        barcodes.append(parts[0])
        xy.append((float(parts[1]), float(parts[2])))
        rowcol.append((int(parts[3]), int(parts[4])))
    return barcodes, np.array(xy, dtype=np.float64), np.array(rowcol, dtype=np.int64)


def _write_spots(path: Path, record: SampleRecord):
    with open(path, "w") as fh:
        fh.write("\t".join(SPOTS_HEADER) + "\n")
        for bc, (x, y), (r, c) in zip(record.barcodes, record.spot_xy,
                                      record.spot_rowcol):
            fh.write(f"{bc}\t{float(x)!r}\t{float(y)!r}\t{int(r)}\t{int(c)}\n")


def _load_sample(root: Path, entry, n_genes: int) -> SampleRecord:
    sample_dir = root / entry["dir"]
    barcodes, xy, rowcol = _read_spots(sample_dir / "spots.tsv")
    counts = read_mtx(sample_dir / "matrix.mtx")
    rec = SampleRecord(
        sample_id=entry["id"],
        tissue=entry["tissue"],
        barcodes=barcodes,
        spot_xy=xy,
        spot_rowcol=rowcol,
        counts=counts,
    )
    rec.validate(n_genes)
    return rec


def load_dataset(path, max_workers: int = 1):
    """Load a native dataset directory.

    Returns (records, vocabulary) where records is a dict sample_id ->
    SampleRecord in manifest order.
    """
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise LoadError(f"missing manifest: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    genes_path = root / manifest["genes"]
    if not genes_path.exists():
        raise LoadError(f"missing gene list: {genes_path}")
    vocab = GeneVocabulary(genes_path.read_text().splitlines())
    entries = manifest["samples"]
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            loaded = list(pool.map(
                lambda e: _load_sample(root, e, len(vocab)), entries))
    else:
        loaded = [_load_sample(root, e, len(vocab)) for e in entries]
    records = {rec.sample_id: rec for rec in loaded}
    if len(records) != len(loaded):
        raise CorruptData("duplicate sample ids in manifest")
    return records, vocab


def write_dataset(path, records, vocab: GeneVocabulary):
    """Write records in the native layout; inverse of load_dataset."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    (root / "genes.tsv").write_text("\n".join(vocab.names) + "\n")
    entries = []
    for rec in records:
        entries.append({"id": rec.sample_id, "tissue": rec.tissue,
                        "dir": rec.sample_id})
        sample_dir = root / rec.sample_id
        sample_dir.mkdir(exist_ok=True)
        _write_spots(sample_dir / "spots.tsv", rec)
        write_mtx(sample_dir / "matrix.mtx", rec.counts)
    manifest = {"genes": "genes.tsv", "samples": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")


def normalize_cp10k_log1p(counts) -> NormalizedMatrix:
    """ln(1 + 10000 * c / row_total); all-zero rows stay all-zero."""
    if sparse.issparse(counts):
        dense = np.asarray(counts.todense(), dtype=np.float64)
    else:
        dense = np.asarray(counts, dtype=np.float64)
    totals = dense.sum(axis=1, keepdims=True)
    safe = np.where(totals > 0, totals, 1.0)
    values = np.log1p(dense * (10000.0 / safe))
    return NormalizedMatrix(values=values, scheme=SCHEME_CP10K_LOG1P)


def split_by_sample(sample_ids, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> SplitAssignment:
    """Shuffle sample ids with a seeded RNG and slice at cumulative-floor
    boundaries; reproduces (332, 42, 42) for 416 samples at (0.8, 0.1, 0.1)."""
    ids = list(sample_ids)
    if len(ids) < 3:
        raise TooFewSamples(f"need >= 3 samples to split, got {len(ids)}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    shuffled = [ids[i] for i in rng.permutation(len(ids))]
    n = len(ids)
    c1 = math.floor(n * ratios[0])
    c2 = math.floor(n * (ratios[0] + ratios[1]))
    return SplitAssignment(
        train=tuple(shuffled[:c1]),
        validation=tuple(shuffled[c1:c2]),
        test=tuple(shuffled[c2:]),
        seed=seed,
    )
