"""Central finite-difference gradient checking.

The checker only ever calls the forward path, so it stays independent of
the backward rules it is used to verify.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(f: Callable[[], Tensor], leaf: Tensor, h: float = 1e-5,
                   entries: np.ndarray | None = None) -> np.ndarray:
    """Central differences of a scalar-valued closure w.r.t. one leaf.

    `entries` selects flat indices to probe (all, if None); unprobed
    entries are returned as NaN so callers can mask them out.
    """
    flat = leaf.data.reshape(-1)
    if entries is None:
        entries = np.arange(flat.size)
    out = np.full(flat.size, np.nan)
    for i in entries:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f().data)
        flat[i] = orig - h
        fm = float(f().data)
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(leaf.data.shape)


def check_gradients(f: Callable[[], Tensor], leaves: Sequence[Tensor], h: float = 1e-5,
                    rel_tol: float = 1e-5, abs_tol: float = 1e-8,
                    max_entries: int | None = None,
                    rng: np.random.Generator | None = None) -> float:
    """Compare analytic gradients of `f` against central differences.

    Runs one backward pass, then probes each leaf (optionally a random
    subset of entries for large tensors). An entry passes if the
    absolute difference is below `abs_tol` (finite-difference noise on
    true zeros) or the relative error is below `rel_tol`. Raises
    AssertionError with the worst offender; returns the worst relative
    error among entries exceeding `abs_tol`.
    """
    for p in leaves:
        p.grad = None
    loss = f()
    loss.backward()
    worst = 0.0
    for leaf in leaves:
        n = leaf.data.size
        if max_entries is not None and n > max_entries:
            if rng is None:
                rng = np.random.default_rng(0)
            entries = rng.choice(n, size=max_entries, replace=False)
        else:
            entries = np.arange(n)
        num = numerical_grad(f, leaf, h=h, entries=entries).reshape(-1)
        ana = (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)).reshape(-1)
        for i in entries:
            diff = abs(num[i] - ana[i])
            if diff <= abs_tol:
                continue
            rel = diff / max(abs(num[i]), abs(ana[i]))
            worst = max(worst, rel)
            if rel > rel_tol:
                raise AssertionError(
                    f"gradient mismatch on {leaf.name or 'tensor'}[{i}]: "
                    f"analytic {ana[i]:.10g} vs numerical {num[i]:.10g} (rel err {rel:.3g})"
                )
    return worst
