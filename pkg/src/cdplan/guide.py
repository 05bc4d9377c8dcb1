"""Return predictor: regresses the scaled start-state return of a noisy window
and supplies its input gradient for guided sampling."""
from __future__ import annotations

import numpy as np

from .diffusion import model_input
from .nn import MlpParams, check_finite, init_mlp, mlp_backward, mlp_forward


def init_predictor(window_dim: int, embed_dim: int, hidden, rng) -> MlpParams:
    return init_mlp([window_dim + embed_dim, *hidden, 1], rng)


def predict(pred: MlpParams, x_i, i) -> np.ndarray:
    """Predicted return, one scalar per window (trailing unit axis dropped)."""
    out, _ = mlp_forward(pred, model_input(x_i, i, pred))
    return out[..., 0]


def input_gradient(pred: MlpParams, x_i, i) -> np.ndarray:
    x_i = np.asarray(x_i, dtype=np.float64)
    out, tape = mlp_forward(pred, model_input(x_i, i, pred))
    _, g = mlp_backward(tape, np.ones_like(out))
    return check_finite(g[..., :x_i.shape[-1]], "return-predictor input gradient")


def loss_v(pred: MlpParams, x_i, i, v_t):
    """Mean squared error against the scaled returns; returns (loss, param_grads)."""
    out, tape = mlp_forward(pred, model_input(x_i, i, pred))
    resid = out[..., 0] - np.asarray(v_t, dtype=np.float64)
    n = resid.size
    loss = float(np.sum(resid * resid) / n)
    grads, _ = mlp_backward(tape, (2.0 * resid / n)[..., None])
    return loss, grads
