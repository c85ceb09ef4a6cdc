"""Central finite-difference check of analytic gradients."""

from __future__ import annotations

import numpy as np

from . import engine


class NonFiniteError(ArithmeticError):
    pass


def finite_diff_check(f, params, h=1e-5, n_samples=64, rng=None, paths=None, floor=1e-6):
    """Max relative error between backprop and central differences.

    ``f`` is called with no arguments and must return a scalar
    :class:`~radarodom.engine.Value` built from the Values in ``params``
    (a ParamStore or a ``{path: Value}`` dict). ``n_samples`` coordinates are
    drawn uniformly from the selected parameters; pass ``n_samples=None`` to
    check every coordinate. The error of one coordinate is
    ``|analytic - numeric| / max(floor, |numeric|)``. The floor sits above the
    round-off of a central difference on an O(1) loss (about ``eps / h``), so
    near-zero coordinates are judged on absolute error.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    rng = np.random.default_rng(0) if rng is None else rng
    items = [(p, v) for p, v in params.items() if paths is None or p in paths]
    items = [(p, v) for p, v in items if v.requires_grad]
    if not items:
        raise ValueError("no trainable parameters to check")

    root = f()
    if not np.all(np.isfinite(root.data)):
        raise NonFiniteError("f is not finite at the base point")
    engine.backward(root)
    analytic = {p: v.grad.copy() for p, v in items}

    sizes = np.array([v.data.size for _, v in items])
    total = int(sizes.sum())
    if n_samples is None or n_samples >= total:
        flat = np.arange(total)
    else:
        flat = np.sort(rng.choice(total, size=n_samples, replace=False))
    bounds = np.cumsum(sizes)

    worst = 0.0
    with engine.no_grad():
        for k in flat:
            which = int(np.searchsorted(bounds, k, side="right"))
            local = int(k - (bounds[which - 1] if which else 0))
            path, v = items[which]
            idx = np.unravel_index(local, v.data.shape)
            orig = v.data[idx]
            v.data[idx] = orig + h
            fp = float(f().data)
            v.data[idx] = orig - h
            fm = float(f().data)
            v.data[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"f is not finite when perturbing {path}{idx}")
            num = (fp - fm) / (2.0 * h)
            err = abs(analytic[path][idx] - num) / max(floor, abs(num))
            worst = max(worst, err)
    return worst
