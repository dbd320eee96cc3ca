"""Masked-central-spot pretraining with validation-driven model selection.

Each epoch shuffles the training subgraphs, draws a fresh mask per center,
and takes Adam steps on the batch-mean masked MSE. Validation RMSE uses one
fixed set of masks (seeded once) so the early-stopping signal is comparable
across epochs; the checkpoint returned is the best-validation-epoch copy.
"""

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import model as gcn
from .data import normalize_cp10k_log1p
from .errors import DivergenceError, EmptyTrainingSet, InvalidFraction
from .graphs import adjacency_stack, build_subgraphs

logger = logging.getLogger(__name__)

VAL_MASK_STREAM = 0x56414C  # distinct RNG stream for the fixed validation masks


@dataclass
class TrainConfig:
    mask_fraction: float = 0.3
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 8
    lr: float = 1e-3
    sigma: float | None = None  # adjacency bandwidth; None = per-sample pitch
    seed: int = 0
    deterministic: bool = True
    hidden_widths: tuple = gcn.DEFAULT_HIDDEN_WIDTHS

    def validate(self):
        if not (0.0 < self.mask_fraction < 1.0):
            raise InvalidFraction(
                f"mask_fraction must lie in (0, 1), got {self.mask_fraction}")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_rmse: float
    seconds: float


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    val_baseline_rmse: float = float("nan")

    def best_val_rmse(self) -> float:
        if not self.epochs:
            return float("nan")
        return min(e.val_rmse for e in self.epochs)

    def rows(self, zero_seconds: bool = False):
        for e in self.epochs:
            yield (e.epoch, e.train_loss, e.val_rmse,
                   0.0 if zero_seconds else e.seconds)


def make_mask(gene_count: int, fraction: float, rng) -> np.ndarray:
    """floor(fraction * gene_count) distinct gene indices, sorted."""
    if not (0.0 < fraction < 1.0):
        raise InvalidFraction(f"fraction must lie in (0, 1), got {fraction}")
    m = int(np.floor(fraction * gene_count))
    if m < 1:
        raise InvalidFraction(
            f"fraction {fraction} masks zero of {gene_count} genes")
    return np.sort(rng.choice(gene_count, size=m, replace=False))


class SubgraphSet:
    """Subgraphs of one split with their features and stacked adjacencies."""

    def __init__(self, samples, sample_ids, sigma, dtype=np.float32):
        self.entries = []    # (values_ref, node array) per subgraph
        self.a_hats = []
        self.values = {}
        for sid in sample_ids:
            rec = samples[sid]
            norm = normalize_cp10k_log1p(rec.counts)
            vals = norm.values.astype(dtype)
            self.values[sid] = vals
            sgs = build_subgraphs(rec)
            if not sgs:
                continue
            self.a_hats.append(adjacency_stack(sgs, sigma).astype(dtype))
            self.entries.extend((sid, sg.nodes) for sg in sgs)
        self.a_hats = (np.concatenate(self.a_hats) if self.a_hats
                       else np.zeros((0, 15, 15), dtype=dtype))
        self.scheme = "cp10k_log1p"

    def __len__(self):
        return len(self.entries)

    def gather(self, idx):
        """(a_hats, xs, centers) for the subgraphs at positions idx; xs rows
        are the unmasked normalized features."""
        xs = np.stack([self.values[self.entries[i][0]][self.entries[i][1]]
                       for i in idx])
        return self.a_hats[idx], xs, xs[:, 0, :].copy()


def _fixed_masks(n: int, gene_count: int, fraction: float, seed: int):
    rng = np.random.default_rng(np.random.SeedSequence([seed, VAL_MASK_STREAM]))
    masks = np.zeros((n, gene_count), dtype=bool)
    for i in range(n):
        masks[i, make_mask(gene_count, fraction, rng)] = True
    return masks


def _validation_rmse(params, val_set: SubgraphSet, masks, batch: int = 256):
    """Pooled RMSE over masked center entries, plus the zero-imputation
    baseline on the identical masks."""
    sq_err = 0.0
    sq_base = 0.0
    count = 0
    for start in range(0, len(val_set), batch):
        idx = np.arange(start, min(start + batch, len(val_set)))
        a_hats, xs, targets = val_set.gather(idx)
        mb = masks[idx]
        xs[:, 0, :] = np.where(mb, 0.0, xs[:, 0, :])
        preds = gcn.predict_batch(params, a_hats, xs)
        resid = (preds.astype(np.float64) - targets) * mb
        sq_err += float((resid * resid).sum())
        sq_base += float(((targets * mb) ** 2).sum())
        count += int(mb.sum())
    return np.sqrt(sq_err / count), np.sqrt(sq_base / count)


def train(samples, split, vocab, config: TrainConfig):
    """Pretrain on the split's train samples, select by validation RMSE.

    samples: mapping sample_id -> SampleRecord (only train/validation ids are
    read). Returns (Checkpoint, TrainHistory).
    """
    config.validate()
    gene_dim = len(vocab)
    train_set = SubgraphSet(samples, split.train, config.sigma)
    val_set = SubgraphSet(samples, split.validation, config.sigma)
    if len(train_set) == 0 or len(val_set) == 0:
        raise EmptyTrainingSet(
            f"{len(train_set)} train / {len(val_set)} validation subgraphs")

    arch = gcn.ArchitectureSpec(gene_dim=gene_dim,
                                hidden_widths=config.hidden_widths)
    params = gcn.init_params(arch, seed=config.seed)
    history = TrainHistory()

    val_masks = _fixed_masks(len(val_set), gene_dim, config.mask_fraction,
                             config.seed)
    if config.max_epochs > 0:
        _, baseline = _validation_rmse(params, val_set, val_masks)
        history.val_baseline_rmse = float(baseline)

    best_params = params.copy()
    best_rmse = np.inf
    best_epoch = 0
    state = gcn.AdamState.zeros_like(params)
    t = 0
    since_best = 0

    for epoch in range(1, config.max_epochs + 1):
        tic = time.perf_counter()
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, epoch]))
        order = rng.permutation(len(train_set))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            a_hats, xs, targets = train_set.gather(idx)
            mb = np.zeros((len(idx), gene_dim), dtype=bool)
            for j in range(len(idx)):
                mb[j, make_mask(gene_dim, config.mask_fraction, rng)] = True
            xs[:, 0, :] = np.where(mb, 0.0, xs[:, 0, :])
            grads, loss = gcn.backward_batch(params, a_hats, xs, mb, targets)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            t += 1
            params, state = gcn.adam_step(params, grads, state, config.lr, t=t)
            losses.append(loss)
        val_rmse, _ = _validation_rmse(params, val_set, val_masks)
        seconds = time.perf_counter() - tic
        history.epochs.append(EpochStats(
            epoch=epoch, train_loss=float(np.mean(losses)),
            val_rmse=float(val_rmse), seconds=seconds))
        if val_rmse < best_rmse:
            best_rmse = val_rmse
            best_params = params.copy()
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                logger.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                break

    history.best_epoch = best_epoch
    checkpoint = gcn.Checkpoint(
        params=best_params,
        arch=arch,
        vocab_sha256=vocab.sha256(),
        normalization_scheme=train_set.scheme,
        seed=config.seed,
        training={
            "mask_fraction": config.mask_fraction,
            "batch_size": config.batch_size,
            "lr": config.lr,
            "epochs_run": len(history.epochs),
            "best_epoch": best_epoch,
            "best_val_rmse": None if not history.epochs else float(best_rmse),
            "val_baseline_rmse": history.val_baseline_rmse
            if np.isfinite(history.val_baseline_rmse) else None,
            "train_samples": list(split.train),
            "validation_samples": list(split.validation),
            "test_samples": list(split.test),  # ids only, never loaded here
        },
    )
    return checkpoint, history


def write_history_csv(history: TrainHistory, path, zero_seconds: bool = False):
    with open(path, "w") as fh:
        fh.write("epoch,train_loss,val_rmse,seconds\n")
        for epoch, loss, rmse, secs in history.rows(zero_seconds):
            fh.write(f"{epoch},{loss!r},{rmse!r},{secs!r}\n")
