"""Finite-difference gradient oracle shared by the test modules.

Central differences with step 1e-5 on float64.  Written independently of the
autodiff engine: the function under test is treated as a black box from flat
parameter values to a scalar.
"""

import numpy as np

STEP = 1e-5


def numeric_grad(f, x, step=STEP):
    """Central-difference gradient of scalar f at ndarray x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return g


def max_relative_error(analytic, numeric, floor=1e-3):
    """Worst elementwise |a - n| / max(|a|, |n|, floor).

    The floor keeps near-zero gradients from dividing by finite-difference
    noise; a genuinely wrong zero-vs-large disagreement still fails.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def check_op_grads(build_loss, arrays, tol, floor=1e-3):
    """Compare autodiff gradients of `build_loss(*tensors)` against central
    differences for every entry of every array in `arrays`.

    build_loss receives detrisk Tensors wrapping the arrays and must return a
    scalar Tensor.  Returns the worst relative error seen.
    """
    from detrisk import autodiff as ad

    tensors = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build_loss(*tensors)
    loss.backward()
    worst = 0.0
    for ti, arr in enumerate(arrays):
        def f(x, ti=ti):
            vals = [a.copy() for a in arrays]
            vals[ti] = x
            ts = [ad.Tensor(v) for v in vals]
            return float(build_loss(*ts).data)

        num = numeric_grad(f, arr.copy())
        ana = tensors[ti].grad
        assert ana is not None, f"no gradient reached input {ti}"
        err = max_relative_error(ana, num, floor=floor)
        worst = max(worst, err)
        assert err < tol, f"input {ti}: relative error {err:.3e} >= {tol}"
    return worst
