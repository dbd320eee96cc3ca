"""Masked-gene recovery scoring and the missingness sweep.

evaluate_masked mirrors the pretraining objective: per-center random masks on
the center row only. The sweep instead draws one gene set per fraction and
masks it in every row of the subgraph (center and neighbors), simulating
platform dropout where a gene is unmeasured everywhere. The zero-imputation
baseline is the all-zero predictor scored on identical masks.
"""

from dataclasses import dataclass

import numpy as np

from . import model as gcn
from . import stats
from .errors import DegenerateInput, EmptyCurve
from .training import SubgraphSet, make_mask

SWEEP_FRACTIONS = tuple(round(0.1 * i, 1) for i in range(1, 10))
_MIN_OBS = 3
_VAR_EPS = 1e-12


@dataclass
class MetricsReport:
    missing_fraction: float
    rmse: float
    baseline_rmse: float
    mean_r2: float
    median_r2: float
    pearson_mean: float
    pearson_median: float
    frac_significant: float
    genes_evaluated: int
    genes_excluded: int

    CSV_FIELDS = ("missing_fraction", "rmse", "baseline_rmse", "mean_r2",
                  "median_r2", "pearson_mean", "pearson_median",
                  "frac_significant", "genes_evaluated", "genes_excluded")

    def csv_row(self):
        return [getattr(self, f) for f in self.CSV_FIELDS]


@dataclass
class SweepCurve:
    points: list  # ordered (fraction, MetricsReport), fractions increasing

    def __post_init__(self):
        fracs = [f for f, _ in self.points]
        if any(b <= a for a, b in zip(fracs, fracs[1:])):
            raise ValueError("sweep fractions must be strictly increasing")

    def mean_r2_series(self):
        return [(f, rep.mean_r2) for f, rep in self.points]


class _GeneAccumulator:
    """Streaming per-gene Pearson moments over masked (pred, truth) pairs."""

    def __init__(self, n_genes):
        self.n = np.zeros(n_genes, dtype=np.int64)
        self.sx = np.zeros(n_genes)
        self.sy = np.zeros(n_genes)
        self.sxx = np.zeros(n_genes)
        self.syy = np.zeros(n_genes)
        self.sxy = np.zeros(n_genes)

    def add(self, mask_bool, preds, truths):
        x = np.where(mask_bool, preds, 0.0)
        y = np.where(mask_bool, truths, 0.0)
        self.n += mask_bool.sum(axis=0)
        self.sx += x.sum(axis=0)
        self.sy += y.sum(axis=0)
        self.sxx += (x * x).sum(axis=0)
        self.syy += (y * y).sum(axis=0)
        self.sxy += (x * y).sum(axis=0)

    def summarize(self):
        """(r values of evaluated genes, their p values, n_evaluated)."""
        n = self.n.astype(np.float64)
        with np.errstate(invalid="ignore", divide="ignore"):
            vx = self.sxx - self.sx * self.sx / np.where(n > 0, n, 1)
            vy = self.syy - self.sy * self.sy / np.where(n > 0, n, 1)
            cov = self.sxy - self.sx * self.sy / np.where(n > 0, n, 1)
        ok = (self.n >= _MIN_OBS) & (vx > _VAR_EPS) & (vy > _VAR_EPS)
        r = np.clip(cov[ok] / np.sqrt(vx[ok] * vy[ok]), -1.0, 1.0)
        p = np.array([stats.pearson_p_from_r(ri, ni)
                      for ri, ni in zip(r, self.n[ok])])
        return r, p, int(ok.sum())


def _predictor(checkpoint, vocab, scheme):
    """Accept a Checkpoint or a raw callable(a_hats, xs) -> preds stub."""
    if hasattr(checkpoint, "params"):
        checkpoint.check_compatible(vocab.sha256(), scheme)
        return lambda a_hats, xs: gcn.predict_batch(checkpoint.params, a_hats, xs)
    return checkpoint


def evaluate_masked(checkpoint, samples, sample_ids, vocab, mask_fraction,
                    seed=0, shared_mask=False, sigma=None,
                    batch=256) -> MetricsReport:
    """Score masked-gene recovery over the given samples.

    shared_mask=False draws a fresh seeded mask per center (center row only);
    shared_mask=True draws one gene set and masks it in all 15 rows.
    """
    gene_dim = len(vocab)
    sets = SubgraphSet(samples, sample_ids, sigma)
    predict = _predictor(checkpoint, vocab, sets.scheme)
    rng = np.random.default_rng(np.random.SeedSequence(
        [seed, int(round(mask_fraction * 1000))]))
    shared = None
    if shared_mask:
        shared = np.zeros(gene_dim, dtype=bool)
        shared[make_mask(gene_dim, mask_fraction, rng)] = True

    sq_err = 0.0
    sq_base = 0.0
    n_masked = 0
    per_sample = {sid: ([], []) for sid in sample_ids}
    genes = _GeneAccumulator(gene_dim)

    order = np.arange(len(sets))
    for start in range(0, len(order), batch):
        idx = order[start:start + batch]
        a_hats, xs, truths = sets.gather(idx)
        if shared_mask:
            mb = np.broadcast_to(shared, (len(idx), gene_dim)).copy()
            xs = np.where(shared[None, None, :], 0.0, xs)
        else:
            mb = np.zeros((len(idx), gene_dim), dtype=bool)
            for j in range(len(idx)):
                mb[j, make_mask(gene_dim, mask_fraction, rng)] = True
            xs[:, 0, :] = np.where(mb, 0.0, xs[:, 0, :])
        preds = np.asarray(predict(a_hats, xs), dtype=np.float64)
        truths = truths.astype(np.float64)
        resid = (preds - truths) * mb
        sq_err += float((resid * resid).sum())
        sq_base += float(((truths * mb) ** 2).sum())
        n_masked += int(mb.sum())
        genes.add(mb, preds, truths)
        for j, i in enumerate(idx):
            sid = sets.entries[i][0]
            sel = mb[j]
            per_sample[sid][0].append(preds[j, sel])
            per_sample[sid][1].append(truths[j, sel])

    r2s = []
    for sid, (ps, ts) in per_sample.items():
        if not ps:
            continue
        truth = np.concatenate(ts)
        if truth.var() <= _VAR_EPS:
            continue
        r2s.append(stats.r2(np.concatenate(ps), truth))
    r, p, n_eval = genes.summarize()
    frac_sig = float((p < 0.05).mean()) if n_eval else 0.0

    return MetricsReport(
        missing_fraction=float(mask_fraction),
        rmse=float(np.sqrt(sq_err / n_masked)),
        baseline_rmse=float(np.sqrt(sq_base / n_masked)),
        mean_r2=float(np.mean(r2s)) if r2s else float("nan"),
        median_r2=float(np.median(r2s)) if r2s else float("nan"),
        pearson_mean=float(r.mean()) if n_eval else float("nan"),
        pearson_median=float(np.median(r)) if n_eval else float("nan"),
        frac_significant=frac_sig,
        genes_evaluated=n_eval,
        genes_excluded=gene_dim - n_eval,
    )


def missingness_sweep(checkpoint, samples, sample_ids, vocab,
                      fractions=SWEEP_FRACTIONS, seed=0, sigma=None) -> SweepCurve:
    """One shared-mask evaluation per missingness fraction."""
    points = []
    for frac in fractions:
        rep = evaluate_masked(checkpoint, samples, sample_ids, vocab, frac,
                              seed=seed, shared_mask=True, sigma=sigma)
        points.append((float(frac), rep))
    return SweepCurve(points=points)


def critical_threshold(curve: SweepCurve, reference_r2: float):
    """Smallest fraction whose mean R^2 drops below 80% of the reference;
    None when the curve never crosses."""
    if not curve.points:
        raise EmptyCurve("sweep curve has no points")
    if reference_r2 <= 0:
        raise DegenerateInput("reference_r2 must be positive")
    cutoff = 0.8 * reference_r2
    for frac, rep in curve.points:
        if rep.mean_r2 < cutoff:
            return frac
    return None


def write_metrics_csv(reports, path):
    with open(path, "w") as fh:
        fh.write(",".join(MetricsReport.CSV_FIELDS) + "\n")
        for rep in reports:
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v)
                              for v in rep.csv_row()) + "\n")


def write_sweep_csv(curve: SweepCurve, path):
    write_metrics_csv([rep for _, rep in curve.points], path)
