import numpy as np
import pytest

from crackfuse.tensor import Tensor


def leaf(rng, shape, scale=1.0, shift=0.0):
    """Float64 leaf tensor with gradients enabled."""
    return Tensor(rng.normal(size=shape) * scale + shift, requires_grad=True)


def numeric_grad(fn, t, h=1e-5):
    """Central-difference gradient of the scalar fn() with respect to t.data."""
    flat = t.data.reshape(-1)
    out = np.zeros(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn().data.item()
        flat[i] = orig - h
        dn = fn().data.item()
        flat[i] = orig
        out[i] = (up - dn) / (2 * h)
    return out.reshape(t.data.shape)


def check_grads(fn, tensors, h=1e-5, rel_tol=1e-4, abs_tol=1e-3, small=1e-6):
    """Assert analytic gradients of the scalar fn() match central differences.

    fn must rebuild the graph from `tensors` on every call. Entries whose
    magnitude stays under `small` are compared absolutely, the rest
    relatively against max(|analytic|, |numeric|).
    """
    for t in tensors:
        t.grad = None
    loss = fn()
    loss.backward()
    for t in tensors:
        an = t.grad if t.grad is not None else np.zeros_like(t.data)
        fd = numeric_grad(fn, t, h)
        diff = np.abs(an - fd)
        denom = np.maximum(np.abs(an), np.abs(fd))
        tiny = denom < small
        bad = np.where(tiny, diff > abs_tol, diff / np.maximum(denom, small) > rel_tol)
        if bad.any():
            idx = np.unravel_index(int(np.argmax(diff)), diff.shape)
            pytest.fail(f"gradient mismatch at {idx}: analytic={an[idx]!r} "
                        f"numeric={fd[idx]!r} (max abs diff {diff.max():.3e})")


def seeds(n=20, base=0):
    return [np.random.default_rng(base + i) for i in range(n)]
