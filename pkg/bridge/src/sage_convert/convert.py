"""Conversion of h5ad inputs into the native dataset layout:

  manifest.json, genes.tsv, and per sample spots.tsv + matrix.mtx
  (MatrixMarket coordinate integer, 1-based, rows in spots.tsv order).

One input file becomes one sample directory. Gene lists are reconciled to
the intersection across inputs, ordered by the first file; genes outside it
are dropped with a logged count. Non-integer counts are rounded half-even
with a warning.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from . import ConversionError
from .h5ad import H5adFile

logger = logging.getLogger(__name__)

SPOTS_HEADER = "barcode\tx_um\ty_um\tarray_row\tarray_col"


@dataclass
class ConversionSpec:
    inputs: list
    out_dir: str
    tissue: str | None = None        # fixed tissue label ...
    tissue_col: str | None = None    # ... or per-obs column name
    sample_id: str | None = None     # fixed id (single input only)
    coord_key: str = "spatial"
    layer: str | None = None

    def validate(self):
        if not self.inputs:
            raise ConversionError("no input files given")
        if (self.tissue is None) == (self.tissue_col is None):
            raise ConversionError("give exactly one of tissue / tissue_col")
        if self.sample_id and len(self.inputs) > 1:
            raise ConversionError("fixed sample_id needs a single input")


@dataclass
class ConversionReport:
    samples: list = field(default_factory=list)
    n_genes: int = 0
    genes_dropped: dict = field(default_factory=dict)  # sample -> count
    rounded: list = field(default_factory=list)        # samples with non-int


def _tissue_for(spec, parsed):
    if spec.tissue is not None:
        return spec.tissue
    col = spec.tissue_col
    if col not in parsed.obs:
        raise ConversionError(
            f"{parsed.path}: no obs column {col!r} "
            f"(available: {sorted(parsed.obs)})")
    values = [str(v) for v in parsed.obs[col]]
    uniq = sorted(set(values))
    if len(uniq) > 1:
        logger.warning("%s: multiple tissue values %s, using the most common",
                       parsed.path, uniq)
        return max(uniq, key=values.count)
    return uniq[0]


def _array_rowcol(parsed, coords):
    obs = parsed.obs
    if "array_row" in obs and "array_col" in obs:
        return (np.asarray(obs["array_row"], dtype=np.int64),
                np.asarray(obs["array_col"], dtype=np.int64))
    # fall back to dense coordinate ranks
    row = np.unique(coords[:, 1], return_inverse=True)[1]
    col = np.unique(coords[:, 0], return_inverse=True)[1]
    return row.astype(np.int64), col.astype(np.int64)


def _integer_counts(x, path, report, sample_id):
    dense = x.toarray() if sparse.issparse(x) else np.asarray(x)
    rounded = np.rint(dense)  # half-even
    if not np.allclose(dense, rounded, atol=0, rtol=0):
        logger.warning("%s: non-integer counts rounded half-even", path)
        report.rounded.append(sample_id)
    if rounded.min() < 0:
        raise ConversionError(f"{path}: negative counts")
    return rounded.astype(np.int64)


def _write_mtx(path, counts):
    coo = sparse.coo_matrix(counts)
    order = np.lexsort((coo.col, coo.row))
    body = "\n".join(
        f"{r} {c} {v}" for r, c, v in
        zip(coo.row[order] + 1, coo.col[order] + 1, coo.data[order]))
    with open(path, "w") as fh:
        fh.write("%%MatrixMarket matrix coordinate integer general\n")
        fh.write(f"{coo.shape[0]} {coo.shape[1]} {coo.nnz}\n")
        if body:
            fh.write(body + "\n")


def convert(spec: ConversionSpec) -> ConversionReport:
    """Run the conversion; emits the native layout into spec.out_dir."""
    spec.validate()
    parsed = [H5adFile(p, layer=spec.layer) for p in spec.inputs]

    # shared vocabulary: intersection, ordered by the first file
    shared = set(parsed[0].var_names)
    for p in parsed[1:]:
        shared &= set(p.var_names)
    if not shared:
        raise ConversionError("inputs share no genes")
    genes = [g for g in parsed[0].var_names if g in shared]

    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "genes.tsv").write_text("\n".join(genes) + "\n")

    report = ConversionReport(n_genes=len(genes))
    entries = []
    used_ids = set()
    for p in parsed:
        sample_id = spec.sample_id or Path(p.path).stem
        if sample_id in used_ids:
            raise ConversionError(f"duplicate sample id {sample_id!r}")
        used_ids.add(sample_id)
        coords = p.coordinates(spec.coord_key)
        tissue = _tissue_for(spec, p)

        index_of = {g: i for i, g in enumerate(p.var_names)}
        cols = [index_of[g] for g in genes]
        dropped = len(p.var_names) - len(cols)
        if dropped:
            logger.info("%s: dropped %d genes outside the shared vocabulary",
                        p.path, dropped)
        report.genes_dropped[sample_id] = dropped

        x = p.x.tocsr()[:, cols] if sparse.issparse(p.x) else p.x[:, cols]
        counts = _integer_counts(x, p.path, report, sample_id)
        row, col = _array_rowcol(p, coords)

        sample_dir = out / sample_id
        sample_dir.mkdir(exist_ok=True)
        with open(sample_dir / "spots.tsv", "w") as fh:
            fh.write(SPOTS_HEADER + "\n")
            for bc, (x_um, y_um), r, c in zip(p.obs_names, coords, row, col):
                fh.write(f"{bc}\t{float(x_um)!r}\t{float(y_um)!r}\t"
                         f"{int(r)}\t{int(c)}\n")
        _write_mtx(sample_dir / "matrix.mtx", counts)
        entries.append({"id": sample_id, "tissue": tissue, "dir": sample_id})
        report.samples.append(sample_id)

    (out / "manifest.json").write_text(
        json.dumps({"genes": "genes.tsv", "samples": entries}, indent=1) + "\n")
    return report
