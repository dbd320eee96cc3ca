"""Command-line entry point: one subcommand per pipeline stage, JSON config
with flat flag overrides, and a run.json audit record per invocation.

Exit codes: 0 success, 1 domain error (message on stderr), 2 usage error.
"""

import argparse
import datetime
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, analysis, imputation, perturb, synth, training
from . import model as gcn
from .data import load_dataset, normalize_cp10k_log1p, split_by_sample
from .errors import SageError
from .graphs import build_subgraphs, save_subgraph_cache
from .stats import clustering_scores


def _utcnow():
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _write_run_json(out_dir: Path, command: str, args: argparse.Namespace,
                    started: str, outputs):
    record = {
        "command": command,
        "config": {k: (str(v) if isinstance(v, Path) else v)
                   for k, v in vars(args).items() if k != "func"},
        "seed": getattr(args, "seed", None),
        "versions": {"sagefm": __version__, "numpy": np.__version__},
        "started": started,
        "finished": _utcnow(),
        "outputs": [str(p) for p in outputs],
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run.json").write_text(json.dumps(record, indent=1) + "\n")


def _parse_ratios(text):
    return tuple(float(r) for r in text.split(","))


def _resolve_split(records, args, checkpoint=None):
    """Sample-id split, preferring the one recorded in the checkpoint."""
    if checkpoint is not None:
        t = checkpoint.training
        if {"train_samples", "validation_samples", "test_samples"} <= t.keys():
            from .data import SplitAssignment
            return SplitAssignment(train=tuple(t["train_samples"]),
                                   validation=tuple(t["validation_samples"]),
                                   test=tuple(t["test_samples"]),
                                   seed=checkpoint.seed)
    return split_by_sample(list(records), ratios=_parse_ratios(args.ratios),
                           seed=args.split_seed)


def _split_ids(split, which):
    if which == "all":
        return split.all_ids()
    return list(getattr(split, which))


# ---------------------------------------------------------------- commands

def cmd_synth(args):
    if args.preset:
        cfg = {"default": synth.default_preset,
               "high-noise": synth.high_noise_preset,
               "tiny": synth.tiny_preset}[args.preset](seed=args.seed)
    else:
        cfg = synth.SynthConfig.from_json(json.loads(Path(args.config).read_text()))
        if args.seed is not None:
            cfg.seed = args.seed
    out = Path(args.out)
    synth.generate(cfg, out)
    outputs = [out / "manifest.json", out / "truth.json"]
    for extra in ("pairs.tsv", "targets.tsv"):
        if (out / extra).exists():
            outputs.append(out / extra)
    return outputs


def cmd_build_graphs(args):
    records, _ = load_dataset(args.dataset, max_workers=args.threads)
    sample_ids = list(records)
    subgraphs = []
    for sid in sample_ids:
        subgraphs.extend(build_subgraphs(records[sid]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cache = out / "subgraphs.bin"
    save_subgraph_cache(cache, subgraphs, sample_ids)
    return [cache]


def _parse_widths(text):
    return tuple(int(w) for w in text.split(","))


def cmd_pretrain(args):
    records, vocab = load_dataset(args.dataset, max_workers=args.threads)
    split = split_by_sample(list(records), ratios=_parse_ratios(args.ratios),
                            seed=args.split_seed)
    config = training.TrainConfig(
        mask_fraction=args.mask_fraction,
        batch_size=args.batch_size,
        max_epochs=args.max_epochs,
        patience=args.patience,
        lr=args.lr,
        sigma=args.sigma,
        seed=args.seed,
        deterministic=args.deterministic,
        hidden_widths=_parse_widths(args.hidden),
    )
    checkpoint, history = training.train(records, split, vocab, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out / "checkpoint"
    gcn.save_checkpoint(checkpoint.params, checkpoint.arch,
                        checkpoint.vocab_sha256,
                        checkpoint.normalization_scheme, ckpt_dir,
                        training=checkpoint.training)
    history_csv = out / "history.csv"
    training.write_history_csv(history, history_csv,
                               zero_seconds=args.deterministic)
    return [ckpt_dir / "model.json", ckpt_dir / "weights.bin", history_csv]


def cmd_evaluate(args):
    records, vocab = load_dataset(args.dataset, max_workers=args.threads)
    checkpoint = gcn.load_checkpoint(args.checkpoint)
    split = _resolve_split(records, args, checkpoint)
    report = imputation.evaluate_masked(
        checkpoint, records, _split_ids(split, args.split), vocab,
        args.fraction, seed=args.seed, sigma=args.sigma)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics_csv = out / "metrics.csv"
    imputation.write_metrics_csv([report], metrics_csv)
    return [metrics_csv]


def cmd_sweep(args):
    records, vocab = load_dataset(args.dataset, max_workers=args.threads)
    checkpoint = gcn.load_checkpoint(args.checkpoint)
    split = _resolve_split(records, args, checkpoint)
    curve = imputation.missingness_sweep(
        checkpoint, records, _split_ids(split, args.split), vocab,
        seed=args.seed, sigma=args.sigma)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sweep_csv = out / "sweep.csv"
    imputation.write_sweep_csv(curve, sweep_csv)
    return [sweep_csv]


def cmd_embed(args):
    records, vocab = load_dataset(args.dataset, max_workers=args.threads)
    checkpoint = gcn.load_checkpoint(args.checkpoint)
    split = _resolve_split(records, args, checkpoint)
    emb = analysis.extract_embeddings(
        checkpoint, records, _split_ids(split, args.split), vocab,
        layer_index=args.layer, sigma=args.sigma)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    emb_path = out / "embeddings.bin"
    analysis.save_embeddings(emb, emb_path)
    return [emb_path]


def _truth_labels_for(emb, truth_path):
    manifest = synth.TruthManifest.load(truth_path)
    return np.array([manifest.spot_programs[sid][spot]
                     for sid, spot in emb.keys])


def cmd_cluster(args):
    emb = analysis.load_embeddings(args.embeddings)
    x = analysis.pca_reduce(emb.vectors, args.pca)
    if args.k:
        k = args.k
        labels, _ = analysis.kmeans(x, k, seed=args.seed)
    else:
        k, _ = analysis.select_k_by_silhouette(x, seed=args.seed)
        labels, _ = analysis.kmeans(x, k, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    clusters_csv = out / "clusters.csv"
    with open(clusters_csv, "w") as fh:
        fh.write("sample_id,spot_index,cluster\n")
        for (sid, spot), lab in zip(emb.keys, labels):
            fh.write(f"{sid},{spot},{lab}\n")
    outputs = [clusters_csv]
    if args.truth:
        truth = _truth_labels_for(emb, args.truth)
        scores = clustering_scores(x, labels, truth)
        scores_csv = out / "cluster_scores.csv"
        with open(scores_csv, "w") as fh:
            fh.write("k,ari,dbi,silhouette\n")
            fh.write(f"{k},{scores.ari!r},{scores.dbi!r},{scores.silhouette!r}\n")
        outputs.append(scores_csv)
    return outputs


def cmd_heterogeneity(args):
    records, _ = load_dataset(args.dataset, max_workers=args.threads)
    emb = analysis.load_embeddings(args.embeddings)
    # sample-level centroids: embeddings vs raw log1p reference
    sample_of_row = [sid for sid, _ in emb.keys]
    emb_dist = analysis.centroid_distance_analysis(emb.vectors, sample_of_row)
    ref_rows = []
    ref_labels = []
    for sid in sorted({sid for sid, _ in emb.keys}):
        values = normalize_cp10k_log1p(records[sid].counts).values
        ref_rows.append(values)
        ref_labels.extend([sid] * values.shape[0])
    ref_dist = analysis.centroid_distance_analysis(np.vstack(ref_rows), ref_labels)
    errors, mean_err = analysis.matrix_preservation_error(emb_dist, ref_dist)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dist_csv = out / "centroid_dist.csv"
    emb_norm = emb_dist.normalize()
    ref_norm = ref_dist.normalize()
    labels = ref_norm.labels
    perm = [emb_norm.labels.index(lab) for lab in labels]
    with open(dist_csv, "w") as fh:
        fh.write("label_a,label_b,ref_norm_dist,emb_norm_dist,abs_error\n")
        for i in range(len(labels)):
            for j in range(i + 1, len(labels)):
                rd = float(ref_norm.dist[i, j])
                ed = float(emb_norm.dist[perm[i], perm[j]])
                fh.write(f"{labels[i]},{labels[j]},{rd!r},{ed!r},{abs(ed - rd)!r}\n")
        fh.write(f"__mean__,,,,{mean_err!r}\n")

    tissue_of = {sid: records[sid].tissue for sid in records}
    ranks_csv = out / "neighbor_ranks.csv"
    with open(ranks_csv, "w") as fh:
        fh.write("representation,sample,mean_same_tissue_rank\n")
        for name, dist in (("embeddings", emb_dist), ("reference", ref_dist)):
            per_sample, overall = analysis.neighborhood_rank(dist, tissue_of)
            for sid in sorted(per_sample):
                fh.write(f"{name},{sid},{per_sample[sid]!r}\n")
            fh.write(f"{name},__mean__,{overall!r}\n")
    return [dist_csv, ranks_csv]


def cmd_deg(args):
    records, vocab = load_dataset(args.dataset, max_workers=args.threads)
    assignments = {}
    with open(args.clusters) as fh:
        header = fh.readline()
        for ln in fh:
            sid, spot, cluster = ln.strip().split(",")
            assignments[(sid, int(spot))] = int(cluster)
    rows = []
    labels = []
    for sid in sorted({sid for sid, _ in assignments}):
        values = normalize_cp10k_log1p(records[sid].counts).values
        for (s, spot), cl in assignments.items():
            if s != sid:
                continue
            rows.append(values[spot])
            labels.append(cl)
    tables, n_constant = analysis.deg_one_vs_rest(
        np.vstack(rows), labels, vocab.names, fdr=args.fdr)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for cl, table in tables.items():
        path = out / f"deg_cluster_{cl}.csv"
        with open(path, "w") as fh:
            fh.write("gene,direction,p,p_adj,significant\n")
            for row in table:
                fh.write(f"{row.gene},{row.direction},{row.p!r},{row.p_adj!r},"
                         f"{int(row.significant)}\n")
        outputs.append(path)
    return outputs


def _perturb_context(args):
    records, vocab = load_dataset(args.dataset, max_workers=args.threads)
    checkpoint = gcn.load_checkpoint(args.checkpoint)
    split = _resolve_split(records, args, checkpoint)
    ctx = perturb.PerturbContext(checkpoint, records, list(split.validation),
                                 list(split.test), vocab, sigma=args.sigma)
    return ctx


def cmd_perturb_lr(args):
    ctx = _perturb_context(args)
    pairs = perturb.load_pairs_tsv(args.pairs)
    result = perturb.ligand_receptor_experiment(ctx, pairs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lr_csv = out / "perturb_lr.csv"
    calls_csv = out / "reference_calls.csv"
    perturb.write_lr_csv(result, lr_csv)
    perturb.write_reference_calls_csv(result.reference, calls_csv)
    return [lr_csv, calls_csv]


def cmd_perturb_downstream(args):
    ctx = _perturb_context(args)
    target_sets = perturb.load_targets_tsv(args.targets)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = []
    outputs = []
    replicate_rows = []
    for input_gene, targets in target_sets:
        res = perturb.downstream_experiment(ctx, input_gene, targets)
        results.append(res)
        if args.baseline_replicates > 0:
            seeds = [args.baseline_seed + i
                     for i in range(args.baseline_replicates)]
            reps = perturb.baseline_replicates(
                ctx, input_gene, len(targets),
                excluded=targets, seeds=seeds)
            replicate_rows.append((input_gene, reps))
    ds_csv = out / "perturb_downstream.csv"
    perturb.write_downstream_csv(results, ds_csv)
    outputs.append(ds_csv)
    if replicate_rows:
        base_csv = out / "baseline_replicates.csv"
        with open(base_csv, "w") as fh:
            fh.write("input,replicate_seed,split,mean_e\n")
            for input_gene, reps in replicate_rows:
                for rep in reps:
                    for split_name in ("validation", "test"):
                        fh.write(f"{input_gene},{rep.seed},{split_name},"
                                 f"{rep.mean_e[split_name]!r}\n")
        outputs.append(base_csv)
    return outputs


def cmd_probe(args):
    emb = analysis.load_embeddings(args.embeddings)
    labels = _truth_labels_for(emb, args.truth)
    sample_ids = sorted({sid for sid, _ in emb.keys})
    split = split_by_sample(sample_ids, ratios=_parse_ratios(args.ratios),
                            seed=args.split_seed)
    train_samples = set(split.train) | set(split.validation)
    train_idx = [i for i, (sid, _) in enumerate(emb.keys)
                 if sid in train_samples]
    test_idx = [i for i, (sid, _) in enumerate(emb.keys)
                if sid in split.test]
    accuracy, macro_f1 = analysis.linear_probe(
        emb.vectors, labels, train_idx, test_idx, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    probe_csv = out / "probe.csv"
    with open(probe_csv, "w") as fh:
        fh.write("accuracy,macro_f1\n")
        fh.write(f"{accuracy!r},{macro_f1!r}\n")
    return [probe_csv]


# ------------------------------------------------------------------ parser

def _add_common(p, dataset=False, checkpoint=False, split=False):
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--deterministic", action="store_true",
                   help="fixed iteration order; zero wall times in CSVs")
    p.add_argument("--threads", type=int, default=1,
                   help="parallel sample loading cap")
    p.add_argument("--sigma", type=float, default=None,
                   help="adjacency kernel bandwidth (um); default lattice pitch")
    if dataset:
        p.add_argument("--dataset", required=True)
    if checkpoint:
        p.add_argument("--checkpoint", required=True)
    if split:
        p.add_argument("--split", default="test",
                       choices=["train", "validation", "test", "all"])
    p.add_argument("--split-seed", type=int, default=0,
                   help="seed for the by-sample split when not in a checkpoint")
    p.add_argument("--ratios", default="0.8,0.1,0.1",
                   help="train,validation,test split ratios")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sage",
        description="Spatial expression GCN pipeline: synthetic data, "
                    "pretraining, imputation and perturbation evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic lattice dataset")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", help="SynthConfig JSON file")
    src.add_argument("--preset", choices=["default", "high-noise", "tiny"])
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-graphs", help="write the subgraph cache")
    _add_common(p, dataset=True)
    p.set_defaults(func=cmd_build_graphs)

    p = sub.add_parser("pretrain", help="masked-central-spot pretraining")
    _add_common(p, dataset=True)
    p.add_argument("--mask-fraction", type=float, default=0.3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--max-epochs", type=int, default=50)
    p.add_argument("--patience", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--hidden", default="1024,512,512,512,1024",
                   help="comma-separated conv layer widths")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("evaluate", help="masked-recovery metrics for one split")
    _add_common(p, dataset=True, checkpoint=True, split=True)
    p.add_argument("--fraction", type=float, default=0.3)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="missingness sweep 10%%..90%%")
    _add_common(p, dataset=True, checkpoint=True, split=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("embed", help="write hidden-layer embeddings")
    _add_common(p, dataset=True, checkpoint=True, split=True)
    p.add_argument("--layer", type=int, default=3)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("cluster", help="k-means over embeddings")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--k", type=int, default=0,
                   help="cluster count; 0 selects by silhouette over 4..10")
    p.add_argument("--pca", type=int, default=200)
    p.add_argument("--truth", help="truth.json for ARI scoring")
    _add_common(p)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("heterogeneity",
                       help="centroid-distance preservation + neighbor ranks")
    _add_common(p, dataset=True)
    p.add_argument("--embeddings", required=True)
    p.set_defaults(func=cmd_heterogeneity)

    p = sub.add_parser("deg", help="one-vs-rest cluster markers")
    _add_common(p, dataset=True)
    p.add_argument("--clusters", required=True, help="clusters.csv path")
    p.add_argument("--fdr", type=float, default=0.05)
    p.set_defaults(func=cmd_deg)

    p = sub.add_parser("perturb-lr", help="ligand-receptor clamping experiment")
    _add_common(p, dataset=True, checkpoint=True)
    p.add_argument("--pairs", required=True, help="pairs.tsv (ligand\\treceptor)")
    p.set_defaults(func=cmd_perturb_lr)

    p = sub.add_parser("perturb-downstream",
                       help="upstream->downstream clamping experiment")
    _add_common(p, dataset=True, checkpoint=True)
    p.add_argument("--targets", required=True,
                   help="targets.tsv (input\\ttarget1,target2,...)")
    p.add_argument("--baseline-replicates", type=int, default=10)
    p.add_argument("--baseline-seed", type=int, default=1000)
    p.set_defaults(func=cmd_perturb_downstream)

    p = sub.add_parser("probe", help="linear probe on embeddings")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--truth", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_probe)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    started = _utcnow()
    try:
        outputs = args.func(args)
    except SageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    _write_run_json(Path(args.out), args.command, args, started, outputs)
    return 0


if __name__ == "__main__":
    sys.exit(main())
