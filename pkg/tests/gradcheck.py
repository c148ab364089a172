"""Central finite-difference gradient oracle shared by the test modules.

The analytic side runs the engine's backward on a randomly-weighted scalar
reduction of the op output; the numeric side recomputes the same float32
forward under +/-h element perturbations, accumulating the weighted reduction
in float64. Error metric: max |g_a - g_n| over max(|g_a|_inf, |g_n|_inf).
"""

from __future__ import annotations

import numpy as np

from flowpatch.tensor import Tensor, backward, no_grad, tsum


def _weighted_scalar(out_data: np.ndarray, weights: np.ndarray) -> float:
    return float((out_data.astype(np.float64) * weights).sum())


def gradcheck(op, arrays, wrt, h=1e-2, seed=0):
    """Return the FD-vs-analytic error for input index ``wrt`` of ``op``.

    op: callable taking Tensors and returning a Tensor.
    arrays: list of float32 ndarrays (op inputs, positional).
    """
    rng = np.random.default_rng(seed + 991)
    tensors = [Tensor(a.copy(), requires_grad=(i == wrt)) for i, a in enumerate(arrays)]
    out = op(*tensors)
    weights = rng.standard_normal(out.data.shape).astype(np.float32)

    loss = tsum(out * Tensor(weights))
    backward(loss)
    ga = tensors[wrt].grad.astype(np.float64)

    work = [a.copy() for a in arrays]
    target = work[wrt].reshape(-1)
    gn = np.zeros(target.size, dtype=np.float64)
    for i in range(target.size):
        orig = target[i]
        target[i] = orig + h
        with no_grad():
            fp = _weighted_scalar(op(*[Tensor(a) for a in work]).data, weights)
        target[i] = orig - h
        with no_grad():
            fm = _weighted_scalar(op(*[Tensor(a) for a in work]).data, weights)
        target[i] = orig
        gn[i] = (fp - fm) / (2.0 * h)
    gn = gn.reshape(arrays[wrt].shape)

    scale = max(np.abs(ga).max(), np.abs(gn).max(), 1e-12)
    return np.abs(ga - gn).max() / scale


def assert_gradcheck(op, arrays, wrt, tol, h=1e-2, seed=0):
    err = gradcheck(op, arrays, wrt, h=h, seed=seed)
    assert err <= tol, f"gradient mismatch for input {wrt}: rel err {err:.3e} > {tol:.1e}"
