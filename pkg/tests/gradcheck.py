"""Central-finite-difference gradient checking in float64.

Analytic gradients come from autograd on the double-precision model; each
check probes 10 random parameter entries per tensor with eps = 1e-4.
"""

from __future__ import annotations

import numpy as np
import torch

EPS = 1e-4
REL_TOL = 1e-4


def rel_err(a: float, b: float) -> float:
    denom = max(abs(a), abs(b))
    if denom < 1e-8:
        return 0.0
    return abs(a - b) / denom


def check_gradients(
    loss_fn,
    params: dict[str, torch.Tensor],
    n_probe: int = 10,
    seed: int = 0,
) -> float:
    """Compares autograd gradients of loss_fn() against central differences
    on `n_probe` random entries of every tensor in `params`. Returns the
    worst relative error. loss_fn must be deterministic."""
    for p in params.values():
        assert p.dtype == torch.float64, "gradient checks run in float64"
        p.requires_grad_(True)
        if p.grad is not None:
            p.grad = None
    loss = loss_fn()
    loss.backward()
    grads = {name: p.grad.detach().clone() for name, p in params.items()}

    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            gflat = grads[name].view(-1)
            idx = rng.choice(len(flat), size=min(n_probe, len(flat)), replace=False)
            for i in idx:
                orig = float(flat[i])
                flat[i] = orig + EPS
                up = float(loss_fn())
                flat[i] = orig - EPS
                down = float(loss_fn())
                flat[i] = orig
                fd = (up - down) / (2 * EPS)
                worst = max(worst, rel_err(fd, float(gflat[i])))
    return worst
