"""Shared helpers for the test suite: gradient checking against central
finite differences, and random tensor construction kept away from the
kinks of relu/maxpool so the differences stay meaningful."""

import numpy as np

from bfpcnn.tensor import Tensor, finite_diff_grad

FD_STEP = 1e-3


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Elementwise |a-b| / max(|a|, |b|, 1), reduced to the worst case."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1.0)
    return float(np.max(np.abs(a - b) / denom))


def smooth_values(rng: np.random.Generator, shape, margin: float = 5e-3,
                  scale: float = 1.0) -> np.ndarray:
    """Uniform values in [-scale, scale] pushed at least ``margin`` from 0
    so a +-FD_STEP probe cannot cross a relu kink."""
    vals = rng.uniform(-scale, scale, size=shape)
    vals = np.where(np.abs(vals) < margin, np.sign(vals + 1e-12) * margin, vals)
    return vals.astype(np.float32)


def distinct_values(rng: np.random.Generator, shape, gap: float = 5e-2) -> np.ndarray:
    """Values with pairwise gaps > 2*FD_STEP, so maxpool argmaxes are stable
    under probing."""
    n = int(np.prod(shape))
    base = np.arange(n, dtype=np.float32) * gap
    return (base[rng.permutation(n)] - 0.5 * gap * n).reshape(shape)


def check_grad(f, x: Tensor, tol: float = 1e-3, h: float = FD_STEP) -> float:
    """Assert autodiff and finite differences agree for d f / d x.

    ``f`` maps a tensor to a scalar Tensor; ``x`` must not be reused across
    calls (a fresh tracked tensor is built from its data).
    """
    probe = Tensor(list(x.shape), x.data.reshape(-1).copy(), requires_grad=True)
    out = f(probe)
    out.backward()
    auto = probe.grad.copy()
    numeric = finite_diff_grad(f, Tensor(list(x.shape), x.data.reshape(-1).copy()), h)
    err = rel_err(auto, numeric.data)
    assert err <= tol, f"gradient mismatch: rel err {err:.3e} > {tol:.0e}"
    return err


def check_param_grad(loss_fn, param: Tensor, tol: float, h: float = FD_STEP,
                     indices=None) -> float:
    """Finite-difference check of d loss / d param for a live parameter.

    ``loss_fn`` re-evaluates the loss reading ``param.data`` in place;
    ``indices`` restricts the sweep to a subset of flat positions.
    """
    param.grad = None
    loss_fn().backward()
    auto = param.grad.reshape(-1).copy()
    flat = param.data.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in positions:
        orig = flat[i]
        flat[i] = np.float32(orig + np.float32(h))
        hi = float(flat[i])
        fp = loss_fn().item()
        flat[i] = np.float32(orig - np.float32(h))
        lo = float(flat[i])
        fm = loss_fn().item()
        flat[i] = orig
        fd = (fp - fm) / (hi - lo)
        denom = max(abs(fd), abs(auto[i]), 1.0)
        worst = max(worst, abs(fd - auto[i]) / denom)
    assert worst <= tol, f"param gradient mismatch: rel err {worst:.3e} > {tol:.0e}"
    return worst
