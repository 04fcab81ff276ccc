"""Shared test utilities: finite-difference gradient checking."""

import numpy as np

from octgen import autodiff as ad


def numeric_grad(func, x, h=1e-6):
    """Central-difference gradient of scalar func(x) w.r.t. ndarray x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = func(x)
        flat[i] = orig - h
        fm = func(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return np.abs(a - b).max() / denom


def gradcheck(op, shapes, seed=0, tol=1e-6, h=1e-6, make_inputs=None):
    """Check tape gradients of ``op(*tensors) -> Tensor`` against central
    differences in float64.  Loss is a random projection of the output."""
    rng = np.random.default_rng(seed)
    with ad.use_dtype(np.float64):
        if make_inputs is not None:
            arrays = make_inputs(rng)
        else:
            arrays = [rng.standard_normal(s) for s in shapes]
        tensors = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
        out = op(*tensors)
        proj = rng.standard_normal(out.data.shape)
        loss = ad.sum_(ad.mul(out, proj))
        loss.backward()
        errs = []
        for i, (arr, t) in enumerate(zip(arrays, tensors)):

            def f(x, i=i):
                args = [ad.Tensor(a) for a in arrays]
                args[i] = ad.Tensor(x)
                o = op(*args)
                return float(np.sum(o.data * proj))

            num = numeric_grad(f, arr.copy(), h=h)
            got = t.grad if t.grad is not None else np.zeros_like(arr)
            errs.append(rel_err(got, num))
        return max(errs)
