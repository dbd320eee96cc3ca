"""Graph convolutional network: forward pass, analytic gradients, Adam, and
checkpoint persistence.

Layer rule: H^0 = X, H^l = ReLU(A_hat @ H^(l-1) @ W_l + b_l); the prediction
is a linear readout of the center node's final activation. The ReLU
subgradient at exactly 0 is 0. All math is plain numpy; a batch dimension is
threaded through so minibatches run as single GEMMs.

Checkpoint layout: a directory with model.json (architecture, vocabulary
SHA-256, normalization scheme, seeds, training fractions) and weights.bin
(magic SAGEFM01, little-endian, a length-prefixed tensor directory followed
by raw f32 tensor data in directory order).
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (CorruptCheckpoint, EmptyMask, IncompatibleCheckpoint,
                     NumericError, ShapeError)

WEIGHTS_MAGIC = b"SAGEFM01"

DEFAULT_HIDDEN_WIDTHS = (1024, 512, 512, 512, 1024)


@dataclass(frozen=True)
class ArchitectureSpec:
    gene_dim: int
    hidden_widths: tuple = DEFAULT_HIDDEN_WIDTHS

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.gene_dim < 1 or any(w < 1 for w in self.hidden_widths):
            raise ShapeError("all layer widths must be >= 1")

    @property
    def n_layers(self) -> int:
        return len(self.hidden_widths)

    def layer_dims(self):
        """(in, out) width pairs for the graph-conv layers."""
        widths = (self.gene_dim,) + self.hidden_widths
        return list(zip(widths[:-1], widths[1:]))


@dataclass
class ModelParams:
    conv_weights: list          # per layer, (in, out)
    conv_biases: list           # per layer, (out,)
    readout_weight: np.ndarray  # (hidden_last, gene_dim)
    readout_bias: np.ndarray    # (gene_dim,)
    seed: int = 0

    def tensors(self):
        """Ordered (name, array) pairs; the checkpoint manifest order."""
        out = []
        for i, (w, b) in enumerate(zip(self.conv_weights, self.conv_biases)):
            out.append((f"conv{i}.weight", w))
            out.append((f"conv{i}.bias", b))
        out.append(("readout.weight", self.readout_weight))
        out.append(("readout.bias", self.readout_bias))
        return out

    def astype(self, dtype):
        return ModelParams(
            conv_weights=[w.astype(dtype) for w in self.conv_weights],
            conv_biases=[b.astype(dtype) for b in self.conv_biases],
            readout_weight=self.readout_weight.astype(dtype),
            readout_bias=self.readout_bias.astype(dtype),
            seed=self.seed,
        )

    def copy(self):
        return ModelParams(
            conv_weights=[w.copy() for w in self.conv_weights],
            conv_biases=[b.copy() for b in self.conv_biases],
            readout_weight=self.readout_weight.copy(),
            readout_bias=self.readout_bias.copy(),
            seed=self.seed,
        )

    @property
    def gene_dim(self) -> int:
        return self.readout_bias.shape[0]

    def architecture(self) -> ArchitectureSpec:
        return ArchitectureSpec(
            gene_dim=self.gene_dim,
            hidden_widths=tuple(w.shape[1] for w in self.conv_weights),
        )


# GradientSet: same container as ModelParams, one tensor per parameter tensor
GradientSet = ModelParams


def init_params(arch: ArchitectureSpec, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    conv_w, conv_b = [], []
    for fan_in, fan_out in arch.layer_dims():
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        conv_w.append(rng.uniform(-limit, limit, (fan_in, fan_out)).astype(dtype))
        conv_b.append(np.zeros(fan_out, dtype=dtype))
    h_last = arch.hidden_widths[-1]
    limit = np.sqrt(6.0 / (h_last + arch.gene_dim))
    return ModelParams(
        conv_weights=conv_w,
        conv_biases=conv_b,
        readout_weight=rng.uniform(-limit, limit, (h_last, arch.gene_dim)).astype(dtype),
        readout_bias=np.zeros(arch.gene_dim, dtype=dtype),
        seed=seed,
    )


def _check_inputs(params: ModelParams, a_hat, x):
    if x.ndim != 2 or a_hat.ndim != 2:
        raise ShapeError("forward expects 2-D A_hat and X")
    n = a_hat.shape[0]
    if a_hat.shape != (n, n) or x.shape[0] != n:
        raise ShapeError(f"A_hat {a_hat.shape} incompatible with X {x.shape}")
    if x.shape[1] != params.conv_weights[0].shape[0]:
        raise ShapeError(
            f"X gene dim {x.shape[1]} != model input dim "
            f"{params.conv_weights[0].shape[0]}")
    if not (np.isfinite(x).all() and np.isfinite(a_hat).all()):
        raise NumericError("non-finite forward input")


def forward_batch(params: ModelParams, a_hats, xs, want_cache: bool = False):
    """Batched forward: a_hats (B, n, n), xs (B, n, G) -> predictions (B, G).

    Returns (activations, preds[, cache]); activations[l] is the post-ReLU
    (B, n, width) tensor of conv layer l.
    """
    h = xs
    acts = []
    cache = [] if want_cache else None
    for w, b in zip(params.conv_weights, params.conv_biases):
        ah = np.matmul(a_hats, h)
        z = ah @ w + b
        h = np.maximum(z, 0.0)
        acts.append(h)
        if want_cache:
            cache.append(ah)
    preds = h[:, 0, :] @ params.readout_weight + params.readout_bias
    if want_cache:
        return acts, preds, cache
    return acts, preds


def forward(params: ModelParams, a_hat, x):
    """Single-subgraph forward; returns (per-layer activations, center
    prediction)."""
    _check_inputs(params, a_hat, x)
    acts, preds = forward_batch(params, a_hat[None], x[None])
    return [a[0] for a in acts], preds[0]


def masked_mse(pred_center, target_center, mask) -> float:
    """Mean squared error over the masked gene indices only."""
    mask = np.asarray(mask)
    if mask.dtype == bool:
        mask = np.where(mask)[0]
    if mask.size == 0:
        raise EmptyMask("mask must contain at least one gene")
    resid = np.asarray(pred_center)[mask] - np.asarray(target_center)[mask]
    return float((resid * resid).mean())


def backward_batch(params: ModelParams, a_hats, xs, mask_bool, targets):
    """Analytic gradients of the batch-mean masked MSE.

    mask_bool is (B, G) boolean; each example's loss is averaged over its own
    masked genes, the batch loss is the mean over examples. Returns
    (GradientSet, loss).
    """
    b = xs.shape[0]
    mask_counts = mask_bool.sum(axis=1)
    if np.any(mask_counts == 0):
        raise EmptyMask("every example needs a non-empty mask")
    acts, preds, cache = forward_batch(params, a_hats, xs, want_cache=True)

    resid = (preds - targets) * mask_bool
    loss = float(((resid * resid).sum(axis=1) / mask_counts).mean())
    g_pred = resid * (2.0 / (b * mask_counts))[:, None]

    h_last_center = acts[-1][:, 0, :]
    d_readout_w = h_last_center.T @ g_pred
    d_readout_b = g_pred.sum(axis=0)

    g_h = np.zeros_like(acts[-1])
    g_h[:, 0, :] = g_pred @ params.readout_weight.T

    d_conv_w = [None] * len(params.conv_weights)
    d_conv_b = [None] * len(params.conv_weights)
    for l in range(len(params.conv_weights) - 1, -1, -1):
        g_z = g_h * (acts[l] > 0)
        ah = cache[l]
        in_dim = ah.shape[2]
        out_dim = g_z.shape[2]
        d_conv_w[l] = ah.reshape(-1, in_dim).T @ g_z.reshape(-1, out_dim)
        d_conv_b[l] = g_z.sum(axis=(0, 1))
        if l > 0:
            g_h = np.matmul(a_hats.transpose(0, 2, 1), g_z @ params.conv_weights[l].T)

    grads = GradientSet(
        conv_weights=d_conv_w,
        conv_biases=d_conv_b,
        readout_weight=d_readout_w,
        readout_bias=d_readout_b,
        seed=params.seed,
    )
    return grads, loss


def backward(params: ModelParams, a_hat, x, mask, target):
    """Single-subgraph gradients of masked_mse; returns (GradientSet, loss)."""
    _check_inputs(params, a_hat, x)
    mask = np.asarray(mask)
    if mask.dtype != bool:
        mb = np.zeros(params.gene_dim, dtype=bool)
        mb[mask] = True
    else:
        mb = mask
    return backward_batch(params, a_hat[None], x[None], mb[None],
                          np.asarray(target)[None])


def predict_batch(params: ModelParams, a_hats, xs):
    """Forward-only center predictions, (B, G)."""
    _, preds = forward_batch(params, a_hats, xs)
    return preds


def hidden_batch(params: ModelParams, a_hats, xs, layer_index: int):
    """Center-node activation after conv layer `layer_index` (1-based)."""
    h = xs
    for l, (w, bias) in enumerate(zip(params.conv_weights, params.conv_biases), start=1):
        h = np.maximum(np.matmul(a_hats, h) @ w + bias, 0.0)
        if l == layer_index:
            return h[:, 0, :]
    raise ShapeError(f"layer_index {layer_index} out of range")


@dataclass
class AdamState:
    m: list = field(default_factory=list)  # same tensor layout as the params
    v: list = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params: ModelParams):
        tensors = [t for _, t in params.tensors()]
        return cls(m=[np.zeros_like(t) for t in tensors],
                   v=[np.zeros_like(t) for t in tensors])


def adam_step(params: ModelParams, grads: GradientSet, state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, t: int = 1):
    """One bias-corrected Adam update; returns (new_params, new_state)."""
    if t < 1:
        raise ValueError("Adam step index t must be >= 1")
    g_tensors = [g for _, g in grads.tensors()]
    p_tensors = [p for _, p in params.tensors()]
    for g in g_tensors:
        if not np.isfinite(g).all():
            raise NumericError("non-finite gradient")
    new_p, new_m, new_v = [], [], []
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(p_tensors, g_tensors, state.m, state.v):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        step = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_p.append((p - step).astype(p.dtype))
        new_m.append(m)
        new_v.append(v)
    k = len(params.conv_weights)
    updated = ModelParams(
        conv_weights=new_p[0:2 * k:2],
        conv_biases=new_p[1:2 * k:2],
        readout_weight=new_p[2 * k],
        readout_bias=new_p[2 * k + 1],
        seed=params.seed,
    )
    return updated, AdamState(m=new_m, v=new_v)


@dataclass
class Checkpoint:
    params: ModelParams
    arch: ArchitectureSpec
    vocab_sha256: str
    normalization_scheme: str
    seed: int
    training: dict

    def check_compatible(self, vocab_sha256: str, scheme: str):
        if vocab_sha256 != self.vocab_sha256:
            raise IncompatibleCheckpoint(
                "checkpoint gene vocabulary does not match the dataset")
        if scheme != self.normalization_scheme:
            raise IncompatibleCheckpoint(
                f"checkpoint normalization scheme {self.normalization_scheme!r} "
                f"does not match data scheme {scheme!r}")


def save_checkpoint(params: ModelParams, arch: ArchitectureSpec,
                    vocab_sha256: str, normalization_scheme: str, path,
                    training: dict | None = None):
    """Write model.json + weights.bin into the directory `path`."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "architecture": {"gene_dim": arch.gene_dim,
                         "hidden_widths": list(arch.hidden_widths)},
        "vocab_sha256": vocab_sha256,
        "normalization_scheme": normalization_scheme,
        "seed": params.seed,
        "training": training or {},
    }
    (path / "model.json").write_text(json.dumps(meta, indent=1) + "\n")
    tensors = params.tensors()
    with open(path / "weights.bin", "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            enc = name.encode()
            fh.write(struct.pack("<I", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    """Read a checkpoint directory; raises CorruptCheckpoint on bad magic or
    truncation."""
    path = Path(path)
    meta_path = path / "model.json"
    weights_path = path / "weights.bin"
    if not meta_path.exists() or not weights_path.exists():
        raise CorruptCheckpoint(f"{path}: missing model.json or weights.bin")
    meta = json.loads(meta_path.read_text())
    blob = weights_path.read_bytes()
    if blob[:8] != WEIGHTS_MAGIC:
        raise CorruptCheckpoint(f"{weights_path}: bad magic")
    try:
        off = 8
        (n_tensors,) = struct.unpack_from("<I", blob, off)
        off += 4
        directory = []
        for _ in range(n_tensors):
            (name_len,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + name_len].decode()
            off += name_len
            (ndim,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            directory.append((name, shape))
        tensors = {}
        for name, shape in directory:
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
            if arr.size != count:
                raise CorruptCheckpoint(f"{weights_path}: truncated tensor {name}")
            off += 4 * count
            tensors[name] = arr.reshape(shape).copy()
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise CorruptCheckpoint(f"{weights_path}: truncated or malformed ({exc})")

    arch = ArchitectureSpec(
        gene_dim=int(meta["architecture"]["gene_dim"]),
        hidden_widths=tuple(meta["architecture"]["hidden_widths"]),
    )
    n_layers = arch.n_layers
    try:
        params = ModelParams(
            conv_weights=[tensors[f"conv{i}.weight"] for i in range(n_layers)],
            conv_biases=[tensors[f"conv{i}.bias"] for i in range(n_layers)],
            readout_weight=tensors["readout.weight"],
            readout_bias=tensors["readout.bias"],
            seed=int(meta.get("seed", 0)),
        )
    except KeyError as exc:
        raise CorruptCheckpoint(f"{weights_path}: missing tensor {exc}")
    return Checkpoint(
        params=params,
        arch=arch,
        vocab_sha256=meta["vocab_sha256"],
        normalization_scheme=meta["normalization_scheme"],
        seed=int(meta.get("seed", 0)),
        training=meta.get("training", {}),
    )
