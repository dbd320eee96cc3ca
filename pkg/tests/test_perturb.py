import numpy as np
import pytest

from sagefm import perturb, training
from sagefm.errors import TooFewGenes, UnknownGene
from sagefm import model as gcn

from test_training import AuditDict


@pytest.fixture(scope="module")
def tiny_ctx(tiny_dataset):
    """Context over an untrained (but real) model; cheap and deterministic."""
    d = tiny_dataset
    config = training.TrainConfig(max_epochs=2, patience=2,
                                  hidden_widths=(24, 12, 24), batch_size=16,
                                  seed=1)
    ckpt, _ = training.train(d["records"], d["split"], d["vocab"], config)
    ctx = perturb.PerturbContext(ckpt, d["records"],
                                 list(d["split"].validation),
                                 list(d["split"].test), d["vocab"])
    return d, ctx


def test_classify_change_fixtures():
    assert perturb.classify_change(5e-9) == "unchanged"
    assert perturb.classify_change(0.1) == "up"
    assert perturb.classify_change(-0.1) == "down"
    assert perturb.classify_change(1e-8) == "unchanged"  # strict threshold
    assert perturb.classify_change(1.0000001e-8) == "up"


def test_extrema_use_only_val_and_test(tiny_dataset):
    d = tiny_dataset
    config = training.TrainConfig(max_epochs=1, patience=1,
                                  hidden_widths=(24, 12, 24), batch_size=16,
                                  seed=1)
    ckpt, _ = training.train(d["records"], d["split"], d["vocab"], config)
    audit = AuditDict(d["records"])
    perturb.PerturbContext(ckpt, audit, list(d["split"].validation),
                           list(d["split"].test), d["vocab"])
    want = set(d["split"].validation) | set(d["split"].test)
    assert audit.accessed == want
    assert not audit.accessed & set(d["split"].train)


def test_outcome_accounting_and_antisymmetry(tiny_ctx):
    d, ctx = tiny_ctx
    manifest = d["manifest"]
    inp = manifest.gene_names[manifest.couplings[0].ligand]
    targets = [manifest.gene_names[c.target] for c in manifest.couplings]
    res = perturb.downstream_experiment(ctx, inp, targets)
    for split in ("validation", "test"):
        n = len(ctx.sets[split])
        assert np.all(np.abs(res.per_target_e[split]) <= 1.0)

    # swapping the clamp conditions negates E exactly
    gi = ctx.gene_index(inp)
    ti = [ctx.gene_index(t) for t in targets]
    low = ctx.predict_masked("validation", ti, {gi: ctx.gmin[gi]})
    high = ctx.predict_masked("validation", ti, {gi: ctx.gmax[gi]})
    for j in range(len(ti)):
        up1, down1, same1 = perturb._count_changes(
            (high - low)[:, j], ctx.threshold)
        up2, down2, same2 = perturb._count_changes(
            (low - high)[:, j], ctx.threshold)
        assert (up1, down1) == (down2, up2)
        assert same1 == same2
        assert up1 + down1 + same1 == low.shape[0]


def test_lr_outcome_counts_sum(tiny_ctx):
    d, ctx = tiny_ctx
    manifest = d["manifest"]
    pairs = [perturb.GenePair(manifest.gene_names[c.ligand],
                              manifest.gene_names[c.target])
             for c in manifest.couplings]
    res = perturb.ligand_receptor_experiment(ctx, pairs)
    assert len(res.outcomes) == len(pairs) * 2 * 2  # split x condition
    for o in res.outcomes:
        assert o.n_up + o.n_down + o.n_unchanged == o.n_total
        assert o.n_total == len(ctx.sets[o.split])
        assert -1.0 <= o.effect_ratio <= 1.0


def test_masked_center_cannot_leak(tiny_ctx):
    d, ctx = tiny_ctx
    gene = d["vocab"].names[5]
    base = perturb.impute_with_overrides(ctx, "validation", 7, [gene], {})
    sset = ctx.sets["validation"]
    sid, nodes = sset.entries[7]
    original = sset.values[sid][nodes[0], 5]
    sset.values[sid][nodes[0], 5] = 123.0  # garbage in the masked center slot
    try:
        poisoned = perturb.impute_with_overrides(ctx, "validation", 7,
                                                 [gene], {})
    finally:
        sset.values[sid][nodes[0], 5] = original
    assert poisoned[gene] == base[gene]  # bit-identical


def test_override_to_current_value_is_identity(tiny_ctx):
    d, ctx = tiny_ctx
    gene = d["vocab"].names[9]
    sset = ctx.sets["validation"]
    sid, _ = sset.entries[3]
    original = sset.values[sid][:, 9].copy()
    sset.values[sid][:, 9] = 0.75  # make the gene constant across spots
    try:
        plain = perturb.impute_with_overrides(ctx, "validation", 3,
                                              [d["vocab"].names[0]], {})
        overridden = perturb.impute_with_overrides(
            ctx, "validation", 3, [d["vocab"].names[0]], {gene: 0.75})
    finally:
        sset.values[sid][:, 9] = original
    assert plain == overridden


def test_unknown_gene_rejected(tiny_ctx):
    _, ctx = tiny_ctx
    with pytest.raises(UnknownGene):
        perturb.impute_with_overrides(ctx, "validation", 0, ["NOPE"], {})
    with pytest.raises(UnknownGene):
        perturb.downstream_experiment(ctx, "NOPE", ["G0001"])
    with pytest.raises(TooFewGenes):
        perturb.downstream_experiment(ctx, "G0001", [])


def test_reference_correlations_verdicts(tiny_ctx):
    d, ctx = tiny_ctx
    manifest = d["manifest"]
    pairs = [perturb.GenePair(manifest.gene_names[c.ligand],
                              manifest.gene_names[c.target])
             for c in manifest.couplings]
    # uncoupled background pair: no relationship, must be undetermined
    pairs.append(perturb.GenePair("G0035", "G0036"))
    calls = perturb.reference_correlations(ctx, pairs)
    assert calls[0].verdict == "positive"      # planted beta = +1.8
    assert calls[1].verdict == "negative"      # planted beta = -1.8
    assert calls[2].verdict == "undetermined"
    for c in calls[:2]:
        assert c.p_val < 0.05 and c.p_test < 0.05


def test_baseline_replicates_deterministic(tiny_ctx):
    d, ctx = tiny_ctx
    inp = d["manifest"].gene_names[d["manifest"].couplings[0].ligand]
    excluded = [d["manifest"].gene_names[c.target]
                for c in d["manifest"].couplings]
    seeds = [100, 101, 102]
    a = perturb.baseline_replicates(ctx, inp, 3, excluded, seeds)
    b = perturb.baseline_replicates(ctx, inp, 3, excluded, seeds)
    assert [r.genes for r in a] == [r.genes for r in b]
    assert [r.mean_e for r in a] == [r.mean_e for r in b]
    assert len({tuple(r.genes) for r in a}) >= 2
    for rep in a:
        assert inp not in rep.genes
        assert not set(rep.genes) & set(excluded)
    with pytest.raises(TooFewGenes):
        perturb.baseline_replicates(ctx, inp, 10_000, excluded, seeds)


def test_effect_comparison_behaviors():
    rng = np.random.default_rng(17)
    base = [(s, rng.normal(0, 0.1, size=8)) for s in range(10)]
    self_cmp = perturb.effect_comparison(base[0][1], [base[0]])
    assert self_cmp.pooled_p == pytest.approx(1.0)

    shifted = base[0][1] + 3 * np.std(np.concatenate([v for _, v in base]))
    cmp2 = perturb.effect_comparison(shifted, base)
    assert cmp2.pooled_p < 0.01
    assert cmp2.n_pass >= 8

    with_single = base + [(99, np.array([0.5]))]
    cmp3 = perturb.effect_comparison(shifted, with_single)
    assert 99 in cmp3.skipped
    assert cmp3.n_tested == 10


def test_clamp_at_observed_max_everywhere_is_identity(tiny_ctx):
    d, ctx = tiny_ctx
    lig = 12
    originals = {}
    for split in ("validation", "test"):
        for sid in ctx.sets[split].values:
            originals[(split, sid)] = ctx.sets[split].values[sid][:, lig].copy()
            ctx.sets[split].values[sid][:, lig] = 1.25
    old_max, old_min = ctx.gmax[lig], ctx.gmin[lig]
    ctx.gmax[lig] = ctx.gmin[lig] = 1.25
    try:
        pair = perturb.GenePair(d["vocab"].names[lig], d["vocab"].names[30])
        res = perturb.ligand_receptor_experiment(ctx, [pair])
        for o in res.outcomes:
            assert o.effect_ratio == 0.0
            assert o.n_unchanged == o.n_total
        assert res.model_verdicts[pair] == "unchanged"
    finally:
        ctx.gmax[lig], ctx.gmin[lig] = old_max, old_min
        for (split, sid), vals in originals.items():
            ctx.sets[split].values[sid][:, lig] = vals


def test_undetermined_pairs_excluded_from_agreement(tiny_ctx):
    d, ctx = tiny_ctx
    manifest = d["manifest"]
    pairs = [perturb.GenePair(manifest.gene_names[c.ligand],
                              manifest.gene_names[c.target])
             for c in manifest.couplings]
    pairs.append(perturb.GenePair("G0035", "G0036"))  # uncoupled
    res = perturb.ligand_receptor_experiment(ctx, pairs)
    assert res.reference[-1].verdict == "undetermined"
    assert res.n_scored == 2  # only the two planted pairs count


def test_tsv_loaders(tiny_dataset):
    d = tiny_dataset
    pairs = perturb.load_pairs_tsv(d["root"] / "pairs.tsv")
    assert pairs == [perturb.GenePair("G0025", "G0030"),
                     perturb.GenePair("G0026", "G0031")]
    targets = perturb.load_targets_tsv(d["root"] / "targets.tsv")
    assert targets == [("G0025", ["G0030"]), ("G0026", ["G0031"])]
