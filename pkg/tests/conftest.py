"""Shared test helpers: finite-difference oracle and gradient comparison."""
from __future__ import annotations

import numpy as np


def numerical_gradient(f, x: np.ndarray) -> np.ndarray:
    """Central-difference gradient of scalar f() w.r.t. array x (mutated in place).

    Step h = 1e-6 * (1 + |x|) per element. x must be float64.
    """
    assert x.dtype == np.float64
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        h = 1e-6 * (1.0 + abs(orig))
        flat_x[i] = orig + h
        fp = f()
        flat_x[i] = orig - h
        fm = f()
        flat_x[i] = orig
        flat_g[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-based relative disagreement of two gradient arrays."""
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(num / den)


def unet_gradcheck_worst_error(depth=2, base=4, size=16, seed=77) -> float:
    """Worst per-tensor relative error of the full-network analytic gradient
    against central finite differences (double precision throughout)."""
    from ldct import nnops, unet

    cfg = unet.UNetConfig(depth=depth, base_channels=base, input_size=size)
    params = unet.build(cfg, nnops.make_rng(seed), dtype=np.float64)
    rng = nnops.make_rng(seed + 1)
    x = rng.standard_normal((1, 1, size, size))
    target = rng.standard_normal((1, 1, size, size))

    def loss():
        y, _ = unet.forward(params, x)
        return nnops.mse_loss(y, target)[0]

    y, cache = unet.forward(params, x)
    _, grad_y = nnops.mse_loss(y, target)
    grads = unet.backward(params, cache, grad_y)

    worst = 0.0
    for name, tensor in params.tensors.items():
        numeric = numerical_gradient(loss, tensor)
        worst = max(worst, relative_error(grads[name], numeric))
    # the input gradient path is exercised via nnops layer checks; parameters
    # cover every layer of the assembled network here
    return worst
