"""LSTM cell and linear projection with hand-derived backward passes.

The model zoo is fixed (one LSTM cell plus one output projection), so
gradients are written out analytically instead of pulling in an autodiff
framework; the finite-difference tests are the safety net.

Gate rows in the stacked weight matrices are ordered (i, f, g, o):
input gate, forget gate, candidate, output gate. The cell is the
standard one without peepholes:

    c' = f * c + i * g
    h' = o * tanh(c')

All step functions accept activations of shape [F] or [B, F]; states
and gradients keep the rank of their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .rng import RngState
from .tensor import randn, sigmoid, tanh


@dataclass
class LstmParams:
    w_x: np.ndarray  # [4C, F_in]
    w_h: np.ndarray  # [4C, C]
    b: np.ndarray  # [4C]

    @property
    def hidden(self) -> int:
        return self.w_h.shape[1]

    @property
    def f_in(self) -> int:
        return self.w_x.shape[1]


@dataclass
class LstmState:
    h: np.ndarray
    c: np.ndarray


@dataclass
class LinearParams:
    w: np.ndarray  # [F_out, C]
    b: np.ndarray  # [F_out]


@dataclass
class StepCache:
    """Everything the matching backward call needs, nothing recomputed."""

    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    c_new: np.ndarray
    tanh_c_new: np.ndarray


def init_lstm(hidden: int, f_in: int, rng: RngState, scale: float = 0.1) -> LstmParams:
    """Weights ~ scale * N(0,1), biases zero."""
    return LstmParams(
        w_x=randn((4 * hidden, f_in), scale, rng),
        w_h=randn((4 * hidden, hidden), scale, rng),
        b=np.zeros(4 * hidden),
    )


def init_linear(f_out: int, hidden: int, rng: RngState, scale: float = 0.1) -> LinearParams:
    return LinearParams(w=randn((f_out, hidden), scale, rng), b=np.zeros(f_out))


def zero_state(hidden: int, batch: int | None = None) -> LstmState:
    shape = (hidden,) if batch is None else (batch, hidden)
    return LstmState(h=np.zeros(shape), c=np.zeros(shape))


def _check_vec(x: np.ndarray, width: int, what: str):
    if x.ndim not in (1, 2) or x.shape[-1] != width:
        raise DimensionError(
            f"{what} must have trailing extent {width}, got shape {list(x.shape)}"
        )


def lstm_step(x: np.ndarray, state: LstmState, p: LstmParams):
    """One forward step; returns (next_state, cache)."""
    hidden = p.hidden
    _check_vec(x, p.f_in, "lstm input")
    _check_vec(state.h, hidden, "hidden state")
    if state.h.shape != state.c.shape:
        raise DimensionError(
            f"state shapes differ: h {list(state.h.shape)} vs c {list(state.c.shape)}"
        )
    pre = x @ p.w_x.T + state.h @ p.w_h.T + p.b
    i = sigmoid(pre[..., 0 * hidden:1 * hidden])
    f = sigmoid(pre[..., 1 * hidden:2 * hidden])
    g = tanh(pre[..., 2 * hidden:3 * hidden])
    o = sigmoid(pre[..., 3 * hidden:4 * hidden])
    c_new = f * state.c + i * g
    t = np.tanh(c_new)
    cache = StepCache(x=x, h_prev=state.h, c_prev=state.c,
                      i=i, f=f, g=g, o=o, c_new=c_new, tanh_c_new=t)
    return LstmState(h=o * t, c=c_new), cache


def lstm_step_backward(grad_h: np.ndarray, grad_c: np.ndarray,
                       cache: StepCache, p: LstmParams):
    """Exact gradients of one step.

    Returns (grad_x, grad_state, grad_params) where grad_state is the
    gradient flowing into the previous step's (h, c).
    """
    hidden = p.hidden
    if cache.i.shape[-1] != hidden or cache.x.shape[-1] != p.f_in:
        raise DimensionError(
            f"cache built for hidden={cache.i.shape[-1]}, f_in={cache.x.shape[-1]}; "
            f"params expect hidden={hidden}, f_in={p.f_in}"
        )
    t = cache.tanh_c_new
    d_o = grad_h * t
    dc = grad_c + grad_h * cache.o * (1.0 - t * t)
    d_f = dc * cache.c_prev
    d_i = dc * cache.g
    d_g = dc * cache.i
    dc_prev = dc * cache.f

    da = np.concatenate([
        d_i * cache.i * (1.0 - cache.i),
        d_f * cache.f * (1.0 - cache.f),
        d_g * (1.0 - cache.g * cache.g),
        d_o * cache.o * (1.0 - cache.o),
    ], axis=-1)

    grad_x = da @ p.w_x
    dh_prev = da @ p.w_h
    da2 = da.reshape(-1, 4 * hidden)
    grad_params = LstmParams(
        w_x=da2.T @ cache.x.reshape(-1, p.f_in),
        w_h=da2.T @ cache.h_prev.reshape(-1, hidden),
        b=da2.sum(axis=0),
    )
    return grad_x, LstmState(h=dh_prev, c=dc_prev), grad_params


def linear_forward(x: np.ndarray, p: LinearParams):
    """y = W x + b; returns (y, cache)."""
    _check_vec(x, p.w.shape[1], "linear input")
    return x @ p.w.T + p.b, x


def linear_backward(grad_y: np.ndarray, cache: np.ndarray, p: LinearParams):
    x = cache
    _check_vec(grad_y, p.w.shape[0], "linear upstream gradient")
    grad_x = grad_y @ p.w
    gy2 = grad_y.reshape(-1, p.w.shape[0])
    grad_params = LinearParams(w=gy2.T @ x.reshape(-1, p.w.shape[1]),
                               b=gy2.sum(axis=0))
    return grad_x, grad_params
