"""Differentiable building blocks used by every model: affine maps, the GRU
cell, softmax and the two supervised losses."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .errors import LabelError, ShapeError
from .tensor import (
    Tensor,
    _sigmoid_np,
    as_tensor,
    log,
    log_softmax,
    pick,
    softmax,
    softmax_np,
)

PROB_FLOOR = 1e-12

__all__ = [
    "PROB_FLOOR",
    "affine",
    "gru_step",
    "softmax",
    "log_softmax",
    "softmax_np",
    "cross_entropy",
    "binary_cross_entropy",
]


def affine(inp, weights: Tensor, bias: Tensor) -> Tensor:
    """``weights @ inp + bias`` for a vector, or row-wise for a batch ``[B, n]``."""
    inp = as_tensor(inp)
    W, b = weights.data, bias.data
    if W.ndim != 2 or b.shape != (W.shape[0],) or inp.shape[-1] != W.shape[1] or inp.ndim > 2:
        raise ShapeError(
            f"affine: input {inp.shape}, weights {weights.shape}, bias {bias.shape} do not conform"
        )
    x = inp.data
    out = x @ W.T + b

    def _bw(g):
        g2 = g.reshape(-1, W.shape[0])
        x2 = x.reshape(-1, W.shape[1])
        return (g @ W, g2.T @ x2, g2.sum(axis=0))

    return Tensor.from_op(out, (inp, weights, bias), _bw)


def gru_step(x_t, h_prev, params: Mapping[str, Tensor], mask=None) -> Tensor:
    """One GRU transition (Cho et al. form, reset gate applied before ``U_c``).

    ``params`` needs ``W_x [3h, e]`` (rows: update, reset, candidate),
    ``U_zr [2h, h]``, ``U_c [h, h]`` and ``b [3h]``. The new state is
    ``(1 - z) * h_prev + z * c``. A 0/1 ``mask`` of shape ``[B]`` freezes the
    state of finished rows, which is how padded batches are handled.
    """
    x_t, h_prev = as_tensor(x_t), as_tensor(h_prev)
    W_x, U_zr, U_c, b = params["W_x"], params["U_zr"], params["U_c"], params["b"]
    H = U_c.shape[0]
    E = W_x.shape[1]
    if (
        W_x.shape != (3 * H, E)
        or U_zr.shape != (2 * H, H)
        or b.shape != (3 * H,)
        or x_t.shape[-1] != E
        or h_prev.shape[-1] != H
    ):
        raise ShapeError(f"gru_step: x {x_t.shape}, h {h_prev.shape} do not match params (e={E}, h={H})")

    x = x_t.data.reshape(-1, E)
    h = h_prev.data.reshape(-1, H)
    gx = x @ W_x.data.T + b.data
    gzr = h @ U_zr.data.T
    z = _sigmoid_np(gx[:, :H] + gzr[:, :H])
    r = _sigmoid_np(gx[:, H : 2 * H] + gzr[:, H:])
    rh = r * h
    c = np.tanh(gx[:, 2 * H :] + rh @ U_c.data.T)
    hn = h + z * (c - h)
    if mask is not None:
        m = np.asarray(mask, dtype=np.float64).reshape(-1, 1)
        out = m * hn + (1.0 - m) * h
    else:
        m = None
        out = hn
    if x_t.ndim != h_prev.ndim or x.shape[0] != h.shape[0]:
        raise ShapeError(f"gru_step: batch layout of x {x_t.shape} and h {h_prev.shape} differ")
    out_shape = h_prev.shape

    def _bw(g):
        g = g.reshape(-1, H)
        if m is not None:
            g_hn = g * m
            dh = g * (1.0 - m)
        else:
            g_hn = g
            dh = np.zeros_like(h)
        dz = g_hn * (c - h)
        dc = g_hn * z
        dh = dh + g_hn * (1.0 - z)
        dac = dc * (1.0 - c * c)
        d_rh = dac @ U_c.data
        dU_c = dac.T @ rh
        dr = d_rh * h
        dh = dh + d_rh * r
        daz = dz * z * (1.0 - z)
        dar = dr * r * (1.0 - r)
        dzr = np.concatenate([daz, dar], axis=1)
        dgx = np.concatenate([daz, dar, dac], axis=1)
        dh = dh + dzr @ U_zr.data
        dx = dgx @ W_x.data
        return (
            dx.reshape(x_t.shape),
            dh.reshape(h_prev.shape),
            dgx.T @ x,
            dzr.T @ h,
            dU_c,
            dgx.sum(axis=0),
        )

    return Tensor.from_op(out.reshape(out_shape), (x_t, h_prev, W_x, U_zr, U_c, b), _bw)


def cross_entropy(pred_dist: Tensor, target) -> Tensor:
    """``-log pred_dist[target]`` with the probability floored at 1e-12.

    A 1-D distribution with an int target gives a scalar; a ``[B, v]`` batch
    with ``B`` targets gives a length-``B`` vector.
    """
    pred_dist = as_tensor(pred_dist)
    v = pred_dist.shape[-1]
    idx = np.atleast_1d(np.asarray(target))
    if idx.dtype.kind not in "iu" or np.any(idx < 0) or np.any(idx >= v):
        raise LabelError(f"target index {target!r} outside vocabulary of size {v}")
    if pred_dist.ndim == 1:
        p = pick(pred_dist.reshape(1, v), idx)
        return -log(p, floor=PROB_FLOOR).reshape(())
    return -log(pick(pred_dist, idx), floor=PROB_FLOOR)


def binary_cross_entropy(pred: Tensor, target, reduction: str = "mean") -> Tensor:
    """Mean Bernoulli negative log-likelihood with log arguments floored at 1e-12.

    ``reduction='rows'`` returns the per-row mean for a ``[B, D]`` batch.
    """
    pred = as_tensor(pred)
    t = np.asarray(target, dtype=np.float64)
    if t.shape != pred.shape:
        raise ShapeError(f"binary_cross_entropy: pred {pred.shape} vs target {t.shape}")
    if not np.all((t == 0.0) | (t == 1.0)):
        raise LabelError("binary_cross_entropy targets must be 0 or 1")
    ll = log(pred, floor=PROB_FLOOR) * t + log(1.0 - pred, floor=PROB_FLOOR) * (1.0 - t)
    if reduction == "rows":
        return -ll.mean(axis=-1)
    return -ll.mean()
