"""Shared test utilities: the central finite-difference gradient oracle."""

import numpy as np

from varformer import autodiff as ad


def fd_gradients(f, leaves, h=1e-5):
    """Central-difference gradients of the scalar ``f()`` w.r.t. each leaf.

    ``f`` must rebuild its graph from the leaves' current ``data`` on every
    call; leaf data is perturbed in place and restored.
    """
    grads = []
    for leaf in leaves:
        g = np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f().item()
            flat[i] = orig - h
            f_minus = f().item()
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * h)
        grads.append(g)
    return grads


def max_relative_error(a, b, floor=1e-8):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def check_gradients(f, leaves, tol=1e-4, h=1e-5, floor=1e-8):
    """Assert reverse-mode gradients of ``f()`` match finite differences."""
    loss = f()
    ad.zero_grads(leaves)
    ad.backward(loss)
    numeric = fd_gradients(f, leaves, h=h)
    worst = 0.0
    for leaf, g_fd in zip(leaves, numeric):
        g_ad = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        worst = max(worst, max_relative_error(g_ad, g_fd, floor=floor))
    assert worst <= tol, f"gradient mismatch: max relative error {worst:.3e} > {tol}"
    return worst
