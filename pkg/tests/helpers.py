"""Gradient-check machinery shared by the model tests and the acceptance
suite: central finite differences against the analytic backward pass."""

import numpy as np

from sagefm import model as gcn


def pack(params):
    return np.concatenate([t.ravel() for _, t in params.tensors()])


def unpack_into(params, theta):
    out = params.copy()
    off = 0
    tensors = [t for _, t in out.tensors()]
    for t in tensors:
        t[...] = theta[off:off + t.size].reshape(t.shape)
        off += t.size
    return out


def numeric_gradient(params, a_hat, x, mask, target, h=1e-5):
    theta = pack(params)
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        plus = theta.copy()
        plus[i] += h
        minus = theta.copy()
        minus[i] -= h
        lp = gcn.masked_mse(
            gcn.forward(unpack_into(params, plus), a_hat, x)[1], target, mask)
        lm = gcn.masked_mse(
            gcn.forward(unpack_into(params, minus), a_hat, x)[1], target, mask)
        grad[i] = (lp - lm) / (2 * h)
    return grad


def random_tiny_draw(rng, gene_dim=6, widths=(4, 3), n_nodes=5):
    """A random 64-bit model + (A_hat, X, mask, target) draw."""
    arch = gcn.ArchitectureSpec(gene_dim=gene_dim, hidden_widths=widths)
    params = gcn.init_params(arch, seed=int(rng.integers(2 ** 31)),
                             dtype=np.float64)
    w = rng.uniform(0.1, 1.0, (n_nodes, n_nodes))
    w = (w + w.T) / 2
    np.fill_diagonal(w, 1.0)
    d = w.sum(axis=1)
    a_hat = w / np.sqrt(np.outer(d, d))
    x = rng.normal(size=(n_nodes, gene_dim))
    m = rng.integers(1, gene_dim)
    mask = np.sort(rng.choice(gene_dim, size=m, replace=False))
    target = rng.normal(size=gene_dim)
    return params, a_hat, x, mask, target


def gradient_check(n_draws=10, rel_tol=1e-4, seed=99):
    """Max normalized gradient discrepancy over n_draws random draws.

    Returns (worst_rel_err, n_entries_checked); the caller asserts the bound.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = 0
    for _ in range(n_draws):
        params, a_hat, x, mask, target = random_tiny_draw(rng)
        grads, _ = gcn.backward(params, a_hat, x, mask, target)
        analytic = pack(grads)
        numeric = numeric_gradient(params, a_hat, x, mask, target)
        scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-6)
        worst = max(worst, float(np.abs(analytic - numeric).max() / scale))
        checked += analytic.size
    return worst, checked
