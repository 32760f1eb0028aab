"""Independent reference implementations used as test oracles."""
from __future__ import annotations

import math
from collections import Counter

import numpy as np

from prefixmt import tensor as T


def numeric_grad(f, x: np.ndarray, eps: float = 1e-6, index=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x`` (modified in place)."""
    flat = x.reshape(-1)
    idx = range(flat.size) if index is None else index
    out = np.zeros(flat.size)
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        out[i] = (hi - lo) / (2 * eps)
    return out.reshape(x.shape)


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|, floor)."""
    a, n = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_op(op, arrays, seed: int = 0, eps: float = 1e-6, const_kwargs=None) -> float:
    """Max relative error between tape gradients and finite differences of
    ``sum(op(*inputs) * R)`` for a fixed random projection ``R``."""
    const_kwargs = const_kwargs or {}
    rng = np.random.default_rng(seed)
    with T.precision(np.float64):
        tensors = [T.Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
        out = op(*tensors, **const_kwargs)
        R = rng.standard_normal(out.shape)
        T.reset_tape()
        loss = T.sum(T.mul(op(*tensors, **const_kwargs), T.Tensor(R)))
        T.backward(loss)
        worst = 0.0
        for t in tensors:
            def f():
                with T.no_grad():
                    return float(np.sum(op(*tensors, **const_kwargs).data * R))
            num = numeric_grad(f, t.data, eps)
            worst = max(worst, rel_error(t.grad, num))
    return worst


def brute_bleu(hyps, refs, max_n: int = 4) -> float:
    """Corpus BLEU counted the slow way: enumerate every n-gram window explicitly."""
    match = [0] * max_n
    total = [0] * max_n
    hl = rl = 0
    for h, r in zip(hyps, refs):
        h, r = list(h), list(r)
        hl += len(h)
        rl += len(r)
        for n in range(1, max_n + 1):
            hgrams = [tuple(h[i:i + n]) for i in range(len(h) - n + 1)]
            rgrams = [tuple(r[i:i + n]) for i in range(len(r) - n + 1)]
            seen = Counter()
            for g in hgrams:
                seen[g] += 1
                if seen[g] <= rgrams.count(g):
                    match[n - 1] += 1
            total[n - 1] += len(hgrams)
    if hl == 0 or any(m == 0 for m in match):
        return 0.0
    prec = 1.0
    for m, t in zip(match, total):
        prec *= m / t
    bp = 1.0 if hl > rl else math.exp(1 - rl / hl)
    return 100.0 * bp * prec ** (1.0 / max_n)


def model_gradcheck(model, batch_fn, per_param: int = 6, seed: int = 0, eps: float = 1e-6) -> dict:
    """Finite-difference check of the full model loss w.r.t. sampled entries of every parameter.

    ``batch_fn(model)`` must return a scalar loss Tensor. The model is switched to
    float64 for the duration. Returns {param name: max relative error}.
    """
    rng = np.random.default_rng(seed)
    out = {}
    with T.precision(np.float64):
        model.astype(np.float64)
        try:
            params = model.parameters()
            for p in params.values():
                p.requires_grad = True
                p.grad = None
            T.reset_tape()
            T.backward(batch_fn(model))
            grads = {n: p.grad.copy() for n, p in params.items()}

            def f():
                with T.no_grad():
                    return float(batch_fn(model).data)

            for name, p in sorted(params.items()):
                idx = rng.choice(p.data.size, size=min(per_param, p.data.size), replace=False)
                num = numeric_grad(f, p.data, eps, idx)
                out[name] = rel_error(grads[name].reshape(-1)[idx], num.reshape(-1)[idx])
        finally:
            model.astype(np.float32)
            for p in model.parameters().values():
                p.grad = None
    return out
