"""Synthetic hex-lattice expression datasets with planted tissue programs and
directional neighbor couplings.

Each sample is a rows x cols lattice (rows spaced by `pitch`, alternating rows
offset by half a column step) whose spots carry log-space expression
  v = archetype[program(spot)] + Normal(0, noise_sd),
after which each coupling adds beta * mean(ligand over the spot's 14 nearest
neighbors) to the target gene. Couplings are applied from the post-noise base
values, so the planted statistic is exactly what the perturbation reference
measures. Counts written to disk are rint(scale * expm1(v)) clipped at zero;
count_mode uses scale 1 (realistic coarse counts), the default continuous
mode uses scale 100 (fine quantization; CP10K normalization cancels the
scale).
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from . import stats
from .data import (GeneVocabulary, SampleRecord, normalize_cp10k_log1p,
                   write_dataset)
from .errors import ConfigError
from .graphs import knn_indices

BASE_LEVEL = 0.6
PROGRAM_LEVEL = 2.6
LIGAND_BASE = 1.6    # ligand genes ride their own spatial field around this
LIGAND_AMP = 1.0
CONTINUOUS_SCALE = 100.0


@dataclass(frozen=True)
class Coupling:
    ligand: int
    target: int
    beta: float


@dataclass
class SynthConfig:
    n_samples: int = 6
    rows: int = 30
    cols: int = 30
    pitch: float = 100.0
    n_genes: int = 600
    n_programs: int = 4
    noise_sd: float = 0.3
    couplings: list = field(default_factory=list)
    count_mode: bool = False
    seed: int = 0

    def validate(self):
        if self.n_programs < 2:
            raise ConfigError("need at least 2 programs")
        if self.rows * self.cols < 15:
            raise ConfigError("lattice too small for 15-spot subgraphs")
        for c in self.couplings:
            if not (0 <= c.ligand < self.n_genes and 0 <= c.target < self.n_genes):
                raise ConfigError(
                    f"coupling ({c.ligand}, {c.target}) outside gene range")
            if c.ligand == c.target:
                raise ConfigError("coupling ligand and target must differ")
            if c.beta == 0:
                raise ConfigError("coupling beta must be nonzero")

    def to_json(self) -> dict:
        d = {k: getattr(self, k) for k in
             ("n_samples", "rows", "cols", "pitch", "n_genes", "n_programs",
              "noise_sd", "count_mode", "seed")}
        d["couplings"] = [[c.ligand, c.target, c.beta] for c in self.couplings]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        d["couplings"] = [Coupling(*c) for c in d.get("couplings", [])]
        return cls(**d)


@dataclass
class TruthManifest:
    seed: int
    n_programs: int
    sample_tissues: dict       # sample_id -> tissue name
    dominant_programs: dict    # sample_id -> program index
    spot_programs: dict        # sample_id -> list of per-spot program indices
    couplings: list            # list of Coupling
    gene_names: list

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "n_programs": self.n_programs,
            "samples": [
                {"id": sid,
                 "tissue": self.sample_tissues[sid],
                 "dominant_program": self.dominant_programs[sid],
                 "spot_programs": [int(p) for p in self.spot_programs[sid]]}
                for sid in self.sample_tissues
            ],
            "couplings": [
                {"ligand": c.ligand, "target": c.target, "beta": c.beta,
                 "ligand_name": self.gene_names[c.ligand],
                 "target_name": self.gene_names[c.target]}
                for c in self.couplings
            ],
        }

    @classmethod
    def from_json(cls, d: dict) -> "TruthManifest":
        genes = d.get("gene_names")
        couplings = [Coupling(c["ligand"], c["target"], c["beta"])
                     for c in d["couplings"]]
        if genes is None:
            # reconstruct enough names for lookups in the couplings
            n = 1 + max((max(c.ligand, c.target) for c in couplings), default=0)
            genes = [f"G{i:04d}" for i in range(n)]
        return cls(
            seed=d["seed"],
            n_programs=d["n_programs"],
            sample_tissues={s["id"]: s["tissue"] for s in d["samples"]},
            dominant_programs={s["id"]: s["dominant_program"] for s in d["samples"]},
            spot_programs={s["id"]: s["spot_programs"] for s in d["samples"]},
            couplings=couplings,
            gene_names=genes,
        )

    @classmethod
    def load(cls, path) -> "TruthManifest":
        return cls.from_json(json.loads(Path(path).read_text()))


def lattice_coords(rows: int, cols: int, pitch: float):
    """Spot positions and integer row/col for the offset lattice."""
    xy = np.empty((rows * cols, 2), dtype=np.float64)
    rowcol = np.empty((rows * cols, 2), dtype=np.int64)
    i = 0
    for r in range(rows):
        for c in range(cols):
            xy[i] = ((c + 0.5 * (r % 2)) * pitch, r * pitch)
            rowcol[i] = (r, c)
            i += 1
    return xy, rowcol


def _program_blocks(n_genes: int, n_programs: int):
    """Gene index blocks elevated per program; the tail genes stay background."""
    block = n_genes // (n_programs + 2)
    return [np.arange(k * block, (k + 1) * block) for k in range(n_programs)]


def _spot_programs(rows: int, cols: int, n_programs: int, dominant: int):
    """Per-spot program labels: the first half of the rows carry the dominant
    program; remaining rows split into contiguous bands of the others."""
    labels = np.empty(rows * cols, dtype=np.int64)
    half = math.ceil(rows / 2)
    others = [(dominant + 1 + j) % n_programs for j in range(n_programs - 1)]
    rest = rows - half
    for r in range(rows):
        if r < half:
            prog = dominant
        else:
            band = min((r - half) * len(others) // max(rest, 1), len(others) - 1)
            prog = others[band]
        labels[r * cols:(r + 1) * cols] = prog
    return labels


def generate(config: SynthConfig, out_dir) -> TruthManifest:
    """Write a native dataset plus truth.json into out_dir; returns the manifest."""
    config.validate()
    out_dir = Path(out_dir)
    gene_names = [f"G{i:04d}" for i in range(config.n_genes)]
    vocab = GeneVocabulary(gene_names)
    blocks = _program_blocks(config.n_genes, config.n_programs)
    archetypes = np.full((config.n_programs, config.n_genes), BASE_LEVEL)
    for k, idx in enumerate(blocks):
        archetypes[k, idx] = PROGRAM_LEVEL
    # negatively-coupled targets need base-level headroom, otherwise the
    # subtraction clips them to zero counts and erases the planted sign
    for c in config.couplings:
        if c.beta < 0:
            archetypes[:, c.target] += -c.beta * (LIGAND_BASE + LIGAND_AMP)

    xy, rowcol = lattice_coords(config.rows, config.cols, config.pitch)
    nbr = knn_indices(xy, rowcol, k=14)

    children = np.random.SeedSequence(config.seed).spawn(config.n_samples)
    records = []
    tissues, dominants, programs = {}, {}, {}
    scale = 1.0 if config.count_mode else CONTINUOUS_SCALE
    for s in range(config.n_samples):
        rng = np.random.default_rng(children[s])
        sid = f"sample_{s:02d}"
        dominant = s % config.n_programs
        labels = _spot_programs(config.rows, config.cols, config.n_programs,
                                dominant)
        v = archetypes[labels] + rng.normal(0.0, config.noise_sd,
                                            (xy.shape[0], config.n_genes))
        if config.couplings:
            # each ligand varies on its own smooth spatial field so the
            # ligand->target dependence is not confounded with the programs
            for lig in sorted({c.ligand for c in config.couplings}):
                field = rng.normal(0.0, 1.0, xy.shape[0])
                for _ in range(2):
                    field = field[nbr].mean(axis=1)
                field = (field - field.mean()) / field.std()
                v[:, lig] += (LIGAND_BASE - BASE_LEVEL) + LIGAND_AMP * field
            base = v.copy()
            for c in config.couplings:
                nm = base[nbr, c.ligand].mean(axis=1)
                v[:, c.target] = v[:, c.target] + c.beta * nm
        # cap log values so expm1 * scale stays far inside int64 range
        counts = np.rint(scale * np.clip(np.expm1(np.minimum(v, 30.0)),
                                         0.0, None)).astype(np.int64)
        records.append(SampleRecord(
            sample_id=sid,
            tissue=f"tissue_{dominant}",
            barcodes=[f"BC{r:03d}C{c:03d}" for r, c in rowcol],
            spot_xy=xy.copy(),
            spot_rowcol=rowcol.copy(),
            counts=sparse.csr_matrix(counts),
        ))
        tissues[sid] = f"tissue_{dominant}"
        dominants[sid] = dominant
        programs[sid] = labels.tolist()

    write_dataset(out_dir, records, vocab)
    manifest = TruthManifest(
        seed=config.seed,
        n_programs=config.n_programs,
        sample_tissues=tissues,
        dominant_programs=dominants,
        spot_programs=programs,
        couplings=list(config.couplings),
        gene_names=gene_names,
    )
    payload = manifest.to_json()
    payload["config"] = config.to_json()
    (out_dir / "truth.json").write_text(json.dumps(payload, indent=1) + "\n")
    write_pair_files(manifest, out_dir)
    return manifest


def write_pair_files(manifest: TruthManifest, out_dir):
    """Emit pairs.tsv (ligand, receptor) and targets.tsv (input, targets)
    for the perturbation CLI, derived from the planted couplings."""
    out_dir = Path(out_dir)
    if not manifest.couplings:
        return
    lines = [f"{manifest.gene_names[c.ligand]}\t{manifest.gene_names[c.target]}"
             for c in manifest.couplings]
    (out_dir / "pairs.tsv").write_text("\n".join(lines) + "\n")
    by_input = {}
    for c in manifest.couplings:
        by_input.setdefault(c.ligand, []).append(c.target)
    rows = [f"{manifest.gene_names[lig]}\t"
            + ",".join(manifest.gene_names[t] for t in targets)
            for lig, targets in by_input.items()]
    (out_dir / "targets.tsv").write_text("\n".join(rows) + "\n")


@dataclass
class CouplingCheck:
    ligand: int
    target: int
    beta: float
    empirical_r: float
    p: float
    match: bool
    weak: bool


@dataclass
class ManifestReport:
    checks: list
    agreement: float
    n_weak: int

    @property
    def mismatches(self):
        return [c for c in self.checks if not c.match]


def verify_manifest(records, manifest: TruthManifest) -> ManifestReport:
    """Compare empirical neighbor-mean coupling signs against planted signs.

    The empirical statistic is the pooled Pearson correlation between the
    14-NN mean of the ligand and the spot's target value, both in CP10K+log1p
    space. `weak` flags couplings whose correlation is not significant, for
    degenerate noise regimes.
    """
    checks = []
    if not manifest.couplings:
        return ManifestReport(checks=[], agreement=1.0, n_weak=0)
    per_sample = []
    for rec in records.values():
        values = normalize_cp10k_log1p(rec.counts).values
        nbr = knn_indices(rec.spot_xy, rec.spot_rowcol, k=14)
        per_sample.append((values, nbr))
    for c in manifest.couplings:
        xs, ys = [], []
        for values, nbr in per_sample:
            xs.append(values[nbr, c.ligand].mean(axis=1))
            ys.append(values[:, c.target])
        res = stats.pearson_with_p(np.concatenate(xs), np.concatenate(ys))
        match = bool(np.sign(res.r) == np.sign(c.beta))
        checks.append(CouplingCheck(
            ligand=c.ligand, target=c.target, beta=c.beta,
            empirical_r=res.r, p=res.p, match=match,
            weak=bool(res.p >= 0.05 or abs(res.r) < 0.1),
        ))
    agreement = sum(c.match for c in checks) / len(checks)
    return ManifestReport(checks=checks, agreement=agreement,
                          n_weak=sum(c.weak for c in checks))


def default_couplings(n_genes: int = 600, n_programs: int = 4):
    """12 planted couplings: three input genes with four targets each,
    two inputs all-positive, one all-negative (8 positive, 4 negative).
    Ligands and targets both live in the background gene range."""
    block = n_genes // (n_programs + 2)
    background = n_programs * block
    inputs = [background + 50, background + 51, background + 52]
    betas = [(1.6, 2.0, 1.5, 1.8), (1.8, 1.5, 2.0, 1.7),
             (-1.6, -2.0, -1.5, -1.8)]
    couplings = []
    t = background + 10
    for inp, beta_group in zip(inputs, betas):
        for beta in beta_group:
            couplings.append(Coupling(ligand=inp, target=t, beta=beta))
            t += 1
    return couplings


def default_preset(seed: int = 0) -> SynthConfig:
    """Desk-scale preset: 6 samples, 30x30 grid, 600 genes, 4 programs,
    12 couplings (8 positive, 4 negative), noise_sd 0.3."""
    return SynthConfig(
        n_samples=6, rows=30, cols=30, pitch=100.0, n_genes=600,
        n_programs=4, noise_sd=0.3, couplings=default_couplings(600, 4),
        count_mode=False, seed=seed,
    )


def high_noise_preset(seed: int = 0) -> SynthConfig:
    """Same layout as the default preset with noise heavy enough that raw
    per-spot clustering degrades while neighborhood-averaged signal survives."""
    cfg = default_preset(seed)
    cfg.noise_sd = 3.5
    return cfg


def tiny_preset(seed: int = 0) -> SynthConfig:
    """Minimal fixture for fast CLI / round-trip tests."""
    return SynthConfig(
        n_samples=4, rows=8, cols=8, pitch=100.0, n_genes=40,
        n_programs=2, noise_sd=0.3,
        couplings=[Coupling(25, 30, 1.8), Coupling(26, 31, -1.8)],
        count_mode=False, seed=seed,
    )
