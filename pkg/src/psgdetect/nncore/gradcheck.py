"""Central finite-difference gradient verification.

Used by both the test suite and the package self-test.  The comparison is a
guarded relative error |a - n| / max(1, |a|, |n|): for O(1) gradients this
is the ordinary relative error, while for near-zero gradients it degrades
to an absolute comparison so finite-difference noise (~1e-10 at h = 1e-5 in
double precision) cannot inflate the ratio.
"""

from __future__ import annotations

import numpy as np


def max_relative_error(
    f, tensors, h: float = 1e-5, samples_per_tensor: int | None = None, seed: int = 0
) -> float:
    """Worst guarded relative error between analytic and numeric gradients.

    ``f`` must rebuild the forward graph from the current contents of each
    tensor's ``data`` and return a scalar Tensor.  ``tensors`` are the leaves
    to check; they must be float64 and have requires_grad set.

    ``samples_per_tensor`` caps how many coordinates of each tensor are
    perturbed (a seeded random subset); None sweeps every coordinate.
    """
    tensors = list(tensors)
    for t in tensors:
        if t.data.dtype != np.float64:
            raise ValueError("gradient checks must run in float64")
        t.grad = None
    loss = f()
    loss.backward()
    analytic = [
        np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors
    ]
    picker = np.random.default_rng(seed)
    worst = 0.0
    for t, a in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        aflat = a.reshape(-1)
        coords = np.arange(flat.size)
        if samples_per_tensor is not None and flat.size > samples_per_tensor:
            coords = picker.choice(flat.size, size=samples_per_tensor, replace=False)
        for i in coords:
            saved = flat[i]
            flat[i] = saved + h
            f_plus = float(f().data)
            flat[i] = saved - h
            f_minus = float(f().data)
            flat[i] = saved
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = abs(aflat[i] - numeric) / max(1.0, abs(aflat[i]), abs(numeric))
            worst = max(worst, err)
    return worst
