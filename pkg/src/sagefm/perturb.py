"""In-silico perturbation: ligand-receptor clamping and upstream->downstream
effect-size analysis with randomized baselines.

Clamp extrema are the per-gene min/max of normalized expression pooled over
the validation and test splits only. The receptor/target genes are always
masked (zeroed) in the center row before prediction, so the center's own
value cannot leak into its prediction.
"""

import logging
from dataclasses import dataclass

import numpy as np

from . import model as gcn
from . import stats
from .data import GeneVocabulary
from .errors import DegenerateInput, TooFewGenes, UnknownGene
from .training import SubgraphSet

logger = logging.getLogger(__name__)

DETECTION_THRESHOLD = 1e-8

VERDICT_POSITIVE = "positive"
VERDICT_NEGATIVE = "negative"
VERDICT_UNDETERMINED = "undetermined"
VERDICT_UNCHANGED = "unchanged"


@dataclass(frozen=True)
class GenePair:
    ligand: str
    receptor: str


@dataclass
class ReferenceCall:
    pair: GenePair
    r_val: float
    p_val: float
    r_test: float
    p_test: float
    verdict: str
    reason: str = ""


@dataclass
class PerturbationOutcome:
    pair: GenePair
    split: str
    condition: str  # "min-clamp" or "max-clamp"
    n_up: int
    n_down: int
    n_unchanged: int
    n_total: int

    @property
    def effect_ratio(self) -> float:
        return (self.n_up - self.n_down) / self.n_total


def classify_change(delta: float, threshold: float = DETECTION_THRESHOLD) -> str:
    """up / down / unchanged under the detection threshold."""
    if delta > threshold:
        return "up"
    if delta < -threshold:
        return "down"
    return "unchanged"


def _count_changes(deltas: np.ndarray, threshold: float):
    up = int((deltas > threshold).sum())
    down = int((deltas < -threshold).sum())
    return up, down, deltas.size - up - down


def load_pairs_tsv(path):
    pairs = []
    for ln in open(path).read().splitlines():
        if not ln.strip():
            continue
        lig, rec = ln.split("\t")
        pairs.append(GenePair(ligand=lig, receptor=rec))
    return pairs


def load_targets_tsv(path):
    out = []
    for ln in open(path).read().splitlines():
        if not ln.strip():
            continue
        inp, targets = ln.split("\t")
        out.append((inp, targets.split(",")))
    return out


class PerturbContext:
    """Shared state for the perturbation experiments: subgraph sets per split
    and the pooled val+test clamp extrema."""

    def __init__(self, checkpoint, samples, val_ids, test_ids,
                 vocab: GeneVocabulary, sigma=None,
                 threshold: float = DETECTION_THRESHOLD):
        self.checkpoint = checkpoint
        self.vocab = vocab
        self.threshold = threshold
        self.sets = {
            "validation": SubgraphSet(samples, val_ids, sigma),
            "test": SubgraphSet(samples, test_ids, sigma),
        }
        checkpoint.check_compatible(vocab.sha256(),
                                    self.sets["validation"].scheme)
        pooled = [vals for s in self.sets.values() for vals in s.values.values()]
        stacked_min = np.min([v.min(axis=0) for v in pooled], axis=0)
        stacked_max = np.max([v.max(axis=0) for v in pooled], axis=0)
        self.gmin = stacked_min.astype(np.float64)
        self.gmax = stacked_max.astype(np.float64)

    def gene_index(self, name: str) -> int:
        try:
            return self.vocab.index[name]
        except KeyError:
            raise UnknownGene(f"gene {name!r} not in vocabulary")

    def predict_masked(self, split: str, masked_idx, overrides=None,
                       batch: int = 512) -> np.ndarray:
        """Predictions for masked_idx over every subgraph of the split.

        overrides maps gene index -> value substituted into all 14 neighbor
        rows; the masked genes are zeroed in the center row.
        """
        sset = self.sets[split]
        masked_idx = np.asarray(masked_idx, dtype=np.int64)
        out = np.empty((len(sset), masked_idx.size), dtype=np.float64)
        for start in range(0, len(sset), batch):
            idx = np.arange(start, min(start + batch, len(sset)))
            a_hats, xs, _ = sset.gather(idx)
            xs[:, 0, masked_idx] = 0.0
            if overrides:
                for g, val in overrides.items():
                    xs[:, 1:, g] = val
            preds = gcn.predict_batch(self.checkpoint.params, a_hats, xs)
            out[idx] = preds[:, masked_idx]
        return out


def impute_with_overrides(ctx: PerturbContext, split: str, subgraph_pos: int,
                          masked_genes, neighbor_overrides):
    """Single-subgraph imputation with neighbor substitutions.

    masked_genes: gene symbols to zero in the center and predict;
    neighbor_overrides: symbol -> value applied to all 14 neighbor rows.
    Returns {symbol: prediction}.
    """
    masked_idx = np.array([ctx.gene_index(g) for g in masked_genes])
    if masked_idx.size == 0:
        raise UnknownGene("masked_genes must be non-empty")
    overrides = {ctx.gene_index(g): float(v)
                 for g, v in (neighbor_overrides or {}).items()}
    for v in overrides.values():
        if not np.isfinite(v):
            raise ValueError("override values must be finite")
    sset = ctx.sets[split]
    a_hats, xs, _ = sset.gather(np.array([subgraph_pos]))
    xs[:, 0, masked_idx] = 0.0
    for g, val in overrides.items():
        xs[:, 1:, g] = val
    preds = gcn.predict_batch(ctx.checkpoint.params, a_hats, xs)[0]
    return {g: float(preds[i]) for g, i in zip(masked_genes, masked_idx)}


def reference_correlations(ctx: PerturbContext, pairs):
    """Ground-truth calls: Pearson between the 14-neighbor mean of the ligand
    and the center receptor value, gated on significance and consistent sign
    across validation and test."""
    calls = []
    for pair in pairs:
        lig = ctx.gene_index(pair.ligand)
        rec = ctx.gene_index(pair.receptor)
        results = {}
        degenerate = ""
        for split, sset in ctx.sets.items():
            xs, ys = [], []
            for sid, nodes in sset.entries:
                vals = sset.values[sid]
                xs.append(float(vals[nodes[1:], lig].mean()))
                ys.append(float(vals[nodes[0], rec]))
            try:
                results[split] = stats.pearson_with_p(xs, ys)
            except DegenerateInput:
                degenerate = f"zero variance on {split}"
                break
        if degenerate:
            calls.append(ReferenceCall(pair=pair, r_val=float("nan"),
                                       p_val=1.0, r_test=float("nan"),
                                       p_test=1.0,
                                       verdict=VERDICT_UNDETERMINED,
                                       reason=degenerate))
            continue
        rv, rt = results["validation"], results["test"]
        significant = rv.p < 0.05 and rt.p < 0.05
        if significant and rv.r > 0 and rt.r > 0:
            verdict = VERDICT_POSITIVE
        elif significant and rv.r < 0 and rt.r < 0:
            verdict = VERDICT_NEGATIVE
        else:
            verdict = VERDICT_UNDETERMINED
        calls.append(ReferenceCall(pair=pair, r_val=rv.r, p_val=rv.p,
                                   r_test=rt.r, p_test=rt.p, verdict=verdict))
    return calls


@dataclass
class LigandReceptorResult:
    outcomes: list              # PerturbationOutcome for both clamps and splits
    model_verdicts: dict        # GenePair -> verdict from max-clamp E signs
    reference: list             # ReferenceCall per pair
    n_agree: int
    n_scored: int               # reference pairs with a determined verdict

    @property
    def agreement(self) -> float:
        return self.n_agree / self.n_scored if self.n_scored else float("nan")


def ligand_receptor_experiment(ctx: PerturbContext, pairs) -> LigandReceptorResult:
    """Clamp each ligand in all neighbors to the observed extrema, impute the
    masked receptor, and score E against the unperturbed baseline.

    The max-clamp condition defines the model verdict (consistent E sign on
    both splits); min-clamp outcomes are reported alongside.
    """
    reference = reference_correlations(ctx, pairs)
    outcomes = []
    verdicts = {}
    for pair in pairs:
        lig = ctx.gene_index(pair.ligand)
        rec = ctx.gene_index(pair.receptor)
        e_max = {}
        for split in ("validation", "test"):
            base = ctx.predict_masked(split, [rec])
            for cond, clamp in (("min-clamp", ctx.gmin[lig]),
                                ("max-clamp", ctx.gmax[lig])):
                pert = ctx.predict_masked(split, [rec], {lig: clamp})
                up, down, same = _count_changes((pert - base).ravel(),
                                                ctx.threshold)
                out = PerturbationOutcome(pair=pair, split=split,
                                          condition=cond, n_up=up,
                                          n_down=down, n_unchanged=same,
                                          n_total=up + down + same)
                outcomes.append(out)
                if cond == "max-clamp":
                    e_max[split] = out.effect_ratio
        ev, et = e_max["validation"], e_max["test"]
        if ev > 0 and et > 0:
            verdicts[pair] = VERDICT_POSITIVE
        elif ev < 0 and et < 0:
            verdicts[pair] = VERDICT_NEGATIVE
        else:
            verdicts[pair] = VERDICT_UNCHANGED
    scored = [c for c in reference if c.verdict != VERDICT_UNDETERMINED]
    agree = sum(verdicts[c.pair] == c.verdict for c in scored)
    return LigandReceptorResult(outcomes=outcomes, model_verdicts=verdicts,
                                reference=reference, n_agree=agree,
                                n_scored=len(scored))


@dataclass
class DownstreamResult:
    input_gene: str
    targets: list
    per_target_e: dict   # split -> np.ndarray aligned with targets
    mean_e: dict         # split -> float

    def paired_es(self):
        """(validation E, test E) per target, for concordance checks."""
        return list(zip(self.per_target_e["validation"],
                        self.per_target_e["test"]))


def downstream_experiment(ctx: PerturbContext, input_gene: str,
                          targets) -> DownstreamResult:
    """Min-clamp vs max-clamp the input gene in all neighbors and score the
    per-target effect ratio E of the masked target predictions."""
    if not targets:
        raise TooFewGenes("targets must be non-empty")
    inp = ctx.gene_index(input_gene)
    tidx = [ctx.gene_index(t) for t in targets]
    per_target = {}
    mean_e = {}
    for split in ("validation", "test"):
        low = ctx.predict_masked(split, tidx, {inp: ctx.gmin[inp]})
        high = ctx.predict_masked(split, tidx, {inp: ctx.gmax[inp]})
        deltas = high - low
        es = np.empty(len(tidx))
        for j in range(len(tidx)):
            up, down, same = _count_changes(deltas[:, j], ctx.threshold)
            es[j] = (up - down) / deltas.shape[0]
        per_target[split] = es
        mean_e[split] = float(es.mean())
    return DownstreamResult(input_gene=input_gene, targets=list(targets),
                            per_target_e=per_target, mean_e=mean_e)


@dataclass
class BaselineReplicate:
    seed: int
    genes: list
    per_target_e: dict  # split -> np.ndarray
    mean_e: dict        # split -> float


def baseline_replicates(ctx: PerturbContext, input_gene: str, n_targets: int,
                        excluded, seeds) -> list:
    """Random control-gene replicates for the downstream experiment.

    Per seed, n_targets genes are sampled uniformly from the vocabulary minus
    `excluded` (ordered by gene index, so sampling is process-independent).
    """
    banned = {input_gene} | set(excluded)
    allowed = [g for g in ctx.vocab.names if g not in banned]
    if len(allowed) < n_targets:
        raise TooFewGenes(
            f"{len(allowed)} genes available, {n_targets} requested")
    replicates = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        chosen = [allowed[i] for i in
                  rng.choice(len(allowed), size=n_targets, replace=False)]
        res = downstream_experiment(ctx, input_gene, chosen)
        replicates.append(BaselineReplicate(
            seed=int(seed), genes=chosen,
            per_target_e=res.per_target_e, mean_e=res.mean_e))
    return replicates


@dataclass
class EffectComparison:
    pooled_t: float
    pooled_p: float
    per_replicate: list  # (seed, t, p) or (seed, None, None) when skipped
    n_tested: int
    n_pass: int          # replicates with p < 0.05

    @property
    def skipped(self):
        return [seed for seed, t, _ in self.per_replicate if t is None]


def effect_comparison(target_es, replicate_es, alpha: float = 0.05) -> EffectComparison:
    """Welch tests of target E values against control E values, pooled across
    replicates and per replicate. replicate_es: list of (seed, values)."""
    target_es = np.asarray(target_es, dtype=np.float64)
    pooled = np.concatenate([np.asarray(v, dtype=np.float64)
                             for _, v in replicate_es])
    pooled_t, pooled_p = stats.two_sample_t(target_es, pooled)
    per_rep = []
    n_pass = 0
    n_tested = 0
    for seed, values in replicate_es:
        values = np.asarray(values, dtype=np.float64)
        if values.size < 2 or target_es.size < 2:
            logger.warning("replicate %s skipped (too few values)", seed)
            per_rep.append((seed, None, None))
            continue
        t, p = stats.two_sample_t(target_es, values)
        per_rep.append((seed, float(t), float(p)))
        n_tested += 1
        if p < alpha:
            n_pass += 1
    return EffectComparison(pooled_t=float(pooled_t), pooled_p=float(pooled_p),
                            per_replicate=per_rep, n_tested=n_tested,
                            n_pass=n_pass)


# CSV emission -------------------------------------------------------------

def write_reference_calls_csv(calls, path):
    with open(path, "w") as fh:
        fh.write("ligand,receptor,r_val,p_val,r_test,p_test,verdict,reason\n")
        for c in calls:
            fh.write(f"{c.pair.ligand},{c.pair.receptor},{c.r_val!r},"
                     f"{c.p_val!r},{c.r_test!r},{c.p_test!r},{c.verdict},"
                     f"{c.reason}\n")


def write_lr_csv(result: LigandReceptorResult, path):
    with open(path, "w") as fh:
        fh.write("ligand,receptor,split,condition,n_up,n_down,n_unchanged,"
                 "n_total,effect_ratio,model_verdict\n")
        for o in result.outcomes:
            fh.write(f"{o.pair.ligand},{o.pair.receptor},{o.split},"
                     f"{o.condition},{o.n_up},{o.n_down},{o.n_unchanged},"
                     f"{o.n_total},{o.effect_ratio!r},"
                     f"{result.model_verdicts[o.pair]}\n")


def write_downstream_csv(results, path):
    with open(path, "w") as fh:
        fh.write("input,target,split,effect_ratio,input_mean_e\n")
        for res in results:
            for split in ("validation", "test"):
                for target, e in zip(res.targets, res.per_target_e[split]):
                    fh.write(f"{res.input_gene},{target},{split},{float(e)!r},"
                             f"{res.mean_e[split]!r}\n")


def write_baseline_csv(input_gene, replicates, path):
    with open(path, "w") as fh:
        fh.write("input,replicate_seed,split,mean_e\n")
        for rep in replicates:
            for split in ("validation", "test"):
                fh.write(f"{input_gene},{rep.seed},{split},"
                         f"{rep.mean_e[split]!r}\n")
