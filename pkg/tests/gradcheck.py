"""Finite-difference gradient-check helpers.

Checks run in float64 so central differences at h=1e-3 resolve well below
the tolerances. Analytic gradients come from one backward pass; numeric
gradients perturb the same leaf arrays in place and re-run the forward.

Composed graphs contain relu units; a coordinate whose perturbation pushes
some pre-activation across zero has no valid central difference. Such
coordinates are detected by comparing estimates at two step sizes (they
agree to O(h^2) on smooth paths) and excluded, with a cap on how many may
be excluded.
"""

import numpy as np

from mvreport import autodiff as ad


def to_f64_params(params):
    """Copy a name->Tensor dict into float64 trainable tensors."""
    return {
        name: ad.parameter(np.asarray(t.data, dtype=np.float64), dtype=np.float64)
        for name, t in params.items()
    }


def analytic_grads(loss_fn, tensors):
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    loss.backward()
    return [None if t.grad is None else t.grad.copy() for t in tensors]


def _central(loss_fn, flat, i, h):
    orig = flat[i]
    flat[i] = orig + h
    fp = float(loss_fn().data)
    flat[i] = orig - h
    fm = float(loss_fn().data)
    flat[i] = orig
    return (fp - fm) / (2.0 * h)


def numeric_grad(loss_fn, tensor, h=1e-3):
    """Numeric gradient plus a per-coordinate reliability mask."""
    flat = tensor.data.reshape(-1)
    out = np.zeros_like(flat)
    reliable = np.ones(flat.size, dtype=bool)
    for i in range(flat.size):
        coarse = _central(loss_fn, flat, i, h)
        fine = _central(loss_fn, flat, i, h / 8.0)
        out[i] = fine
        if abs(coarse - fine) > 1e-5 + 1e-3 * abs(fine):
            reliable[i] = False
    return out.reshape(tensor.shape), reliable.reshape(tensor.shape)


def check_grads(loss_fn, tensors, h=1e-3, rtol=1e-4, atol=1e-6, max_kink_fraction=0.02):
    """Assert analytic == numeric on every kink-free entry of every leaf.

    Returns the worst relative error for reporting.
    """
    grads = analytic_grads(loss_fn, tensors)
    worst = 0.0
    total = kinks = 0
    for t, a in zip(tensors, grads):
        n, reliable = numeric_grad(loss_fn, t, h=h)
        total += reliable.size
        kinks += int((~reliable).sum())
        if a is None:
            a = np.zeros_like(n)
        diff = np.where(reliable, np.abs(a - n), 0.0)
        bound = atol + rtol * np.abs(n)
        if np.any(diff > bound):
            idx = np.unravel_index(np.argmax(diff - bound), diff.shape)
            raise AssertionError(
                f"gradient mismatch at {idx}: analytic={a[idx]!r} numeric={n[idx]!r} "
                f"(shape {t.shape}, h={h})"
            )
        rel = diff / np.maximum(np.abs(n), atol / rtol)
        worst = max(worst, float(rel.max()))
    assert kinks <= max(1, int(max_kink_fraction * total)), (
        f"too many kink-crossing coordinates: {kinks}/{total}"
    )
    return worst


def directional_check(loss_fn, tensors, rng, h=1e-3, rtol=1e-3, atol=1e-5, retries=5):
    """Central finite difference along a random unit direction through the
    full composed graph; directions that cross a relu kink (step-size
    inconsistency) are resampled. Returns the relative error."""
    grads = analytic_grads(loss_fn, tensors)
    originals = [t.data.copy() for t in tensors]

    def along(dirs, step):
        for t, d, orig in zip(tensors, dirs, originals):
            t.data[...] = orig + step * d
        value = float(loss_fn().data)
        for t, orig in zip(tensors, originals):
            t.data[...] = orig
        return value

    last_error = None
    for _ in range(retries):
        dirs = [np.asarray(rng.normal(t.shape), dtype=np.float64) for t in tensors]
        scale = np.sqrt(sum(float((d * d).sum()) for d in dirs))
        dirs = [d / scale for d in dirs]
        analytic = sum(float((g * d).sum()) for g, d in zip(grads, dirs) if g is not None)
        coarse = (along(dirs, h) - along(dirs, -h)) / (2.0 * h)
        fine = (along(dirs, h / 8.0) - along(dirs, -h / 8.0)) / (2.0 * h / 8.0)
        if abs(coarse - fine) > 1e-5 + 1e-3 * abs(fine):
            continue  # direction crosses a kink; try another
        diff = abs(analytic - fine)
        if diff <= atol + rtol * abs(fine):
            return diff / max(abs(fine), atol / rtol)
        last_error = (analytic, fine)
    raise AssertionError(f"directional derivative mismatch: {last_error}")
