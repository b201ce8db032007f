"""Check a Bi-LSTM's analytic gradients against central finite differences.

    python3 demos/gradient_check.py

Runs the check twice: in float32 (the training dtype) and in the float64
shadow mode, where finite differences are accurate enough to expose even
small mistakes in a backward pass.

Two error measures are printed.  "per tensor" divides each weight tensor's
worst error by that tensor's own largest gradient; "layer" divides by the
largest gradient in the whole layer.  In float32 the per-tensor figure is
dominated by rounding in the forward pass for tensors with tiny gradients,
so the test suite uses the layer-scale measure there and the stricter
per-tensor one in float64.
"""

import contextlib

import numpy as np

from meltfusion import layers as L
from meltfusion import tensor as T


def loss_fn(x, params):
    out = L.lstm(x, params[:3], params[3:], return_sequences=True)
    return T.sum(T.mul(out, out))


def check(dtype_ctx, h=1e-3, seed=0):
    """Worst relative error over all LSTM weights, per tensor and layer-wide."""
    rng = np.random.default_rng(seed)
    with dtype_ctx():
        dt = T.default_dtype()
        F, H = 2, 3
        shapes = [(F, 4 * H), (H, 4 * H), (4 * H,)] * 2
        x = T.Tensor(rng.standard_normal((2, 3, F)).astype(dt))
        params = [T.Tensor((0.5 * rng.standard_normal(s)).astype(dt), requires_grad=True) for s in shapes]
        T.backward(loss_fn(x, params))
        errors, grad_max = [], max(float(np.abs(p.grad).max()) for p in params)
        for p in params:
            numeric = np.zeros_like(p.data, dtype=np.float64)
            for i in np.ndindex(p.data.shape):
                keep = p.data[i]
                p.data[i] = keep + h
                up, x_up = loss_fn(x, params).item(), p.data[i]
                p.data[i] = keep - h
                down, x_down = loss_fn(x, params).item(), p.data[i]
                p.data[i] = keep
                numeric[i] = (up - down) / (float(x_up) - float(x_down))
            err = float(np.abs(numeric - p.grad).max())
            errors.append((err / max(np.abs(p.grad).max(), np.abs(numeric).max(), 1e-8), err / grad_max))
        return dt, max(e[0] for e in errors), max(e[1] for e in errors)


if __name__ == "__main__":
    for ctx, limit in ((contextlib.nullcontext, 1e-3), (T.shadow_float64, 1e-5)):
        dt, per_tensor, layer = check(ctx)
        print(f"{np.dtype(dt).name:8s} per tensor {per_tensor:.2e}   layer {layer:.2e}   (limit {limit:g})")
