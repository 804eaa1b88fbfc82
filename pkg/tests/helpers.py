"""Shared oracles for the test suite.

The finite-difference checker below is the independent gradient oracle:
it perturbs leaf arrays in place and re-runs the forward closure, so it
never touches the backward machinery it is checking.
"""

import numpy as np

from srnerv import tensor as tc


def fd_grad(forward, leaf: np.ndarray, h: float) -> np.ndarray:
    """Central-difference gradient of ``forward()`` w.r.t. ``leaf`` (in place)."""
    grad = np.zeros(leaf.shape, dtype=np.float64)
    flat = leaf.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = forward()
        flat[i] = orig - h
        fm = forward()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    num = np.linalg.norm((a - b).reshape(-1))
    den = max(np.linalg.norm(a.reshape(-1)), np.linalg.norm(b.reshape(-1)), 1e-12)
    return num / den


def gradcheck(build_loss, leaves: dict[str, tc.Tensor], h: float, tol: float) -> float:
    """Analytic vs central-difference gradients for every leaf; returns worst error.

    ``build_loss`` re-runs the forward from the current leaf values and
    returns a scalar Tensor.
    """
    loss = build_loss()
    tc.backward(loss)
    worst = 0.0
    for name, leaf in leaves.items():
        assert leaf.grad is not None, f"no gradient reached {name}"
        numeric = fd_grad(lambda: build_loss().item(), leaf.values, h)
        err = rel_error(leaf.grad.astype(np.float64), numeric)
        assert err < tol, f"{name}: gradient mismatch rel err {err:.3g} >= {tol}"
        worst = max(worst, err)
    return worst


def projection_loss(out: tc.Tensor, rng: np.random.Generator) -> tc.Tensor:
    """Random fixed projection to a scalar; stricter than a plain sum."""
    return (out * tc.constant(rng.standard_normal(out.shape))).sum()
