"""Attentive convolutional LSTM that iteratively refines a feature stack.

At each step an attention map is computed from the fixed input stack ``X``
and the previous hidden state, the input is reweighted by it, and a
convolutional LSTM cell updates (H, C).  After ``t_steps`` iterations the
hidden state is the refined stack.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Iterator

import numpy as np

from . import tensor as T

DEFAULT_T_STEPS = 4
GATES = ("i", "f", "o", "c")


@dataclass(frozen=True)
class AttentiveLSTMParams:
    W_i: np.ndarray
    W_f: np.ndarray
    W_o: np.ndarray
    W_c: np.ndarray
    U_i: np.ndarray
    U_f: np.ndarray
    U_o: np.ndarray
    U_c: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_o: np.ndarray
    b_c: np.ndarray
    W_a: np.ndarray
    U_a: np.ndarray
    V_a: np.ndarray
    b_a: np.ndarray

    def __post_init__(self):
        c, _, k, k2 = self.W_i.shape
        if k != k2 or k % 2 == 0:
            raise T.ShapeError(f"kernels must be square with odd size, got {k}x{k2}")
        square = (c, c, k, k)
        for name in ("W_i", "W_f", "W_o", "W_c", "U_i", "U_f", "U_o", "U_c", "W_a", "U_a"):
            if getattr(self, name).shape != square:
                raise T.ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {square}")
        for name in ("b_i", "b_f", "b_o", "b_c", "b_a"):
            if getattr(self, name).shape != (c,):
                raise T.ShapeError(f"{name} must have shape ({c},)")
        if self.V_a.shape != (1, c, k, k):
            raise T.ShapeError(f"V_a has shape {self.V_a.shape}, expected {(1, c, k, k)}")

    @property
    def channels(self) -> int:
        return self.W_i.shape[0]

    @property
    def kernel(self) -> int:
        return self.W_i.shape[2]

    @classmethod
    def zeros(cls, channels: int, kernel: int = 3) -> "AttentiveLSTMParams":
        sq = (channels, channels, kernel, kernel)
        kw = {f.name: np.zeros(channels) for f in fields(cls) if f.name.startswith("b_")}
        kw.update({f.name: np.zeros(sq) for f in fields(cls) if f.name[0] in "WU"})
        kw["V_a"] = np.zeros((1, channels, kernel, kernel))
        return cls(**kw)

    @classmethod
    def random(cls, channels: int, kernel: int = 3, scale: float = 0.1, seed: int = 0):
        rng = np.random.default_rng(seed)
        z = cls.zeros(channels, kernel)
        return cls(**{f.name: rng.normal(0.0, scale, getattr(z, f.name).shape) for f in fields(cls)})

    def as_dict(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class LSTMState:
    H: np.ndarray
    C_cell: np.ndarray

    @classmethod
    def zeros(cls, shape) -> "LSTMState":
        return cls(np.zeros(shape), np.zeros(shape))


def _same(x, w, b=None):
    return T.conv2d(x, w, b, stride=1, dilation=1, padding="same")


def attention_map(x, h_prev, params: AttentiveLSTMParams):
    """Return ``(z, a)``: the 1 x H x W attention logits and their spatial softmax."""
    x = np.asarray(x, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    if x.shape != h_prev.shape:
        raise T.ShapeError(f"input {x.shape} and hidden state {h_prev.shape} differ")
    pre = _same(x, params.W_a) + _same(h_prev, params.U_a) + params.b_a[:, None, None]
    z = _same(np.tanh(pre), params.V_a)
    return z, T.softmax_spatial(z)


def apply_attention(x, a):
    """Scale every channel of ``x`` cellwise by the attention map ``a``."""
    x = np.asarray(x, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 3 or a.shape[0] != 1 or a.shape[1:] != x.shape[1:]:
        raise T.ShapeError(f"attention map {a.shape} does not match input {x.shape}")
    return T.elementwise(x, a, "mul")


def lstm_step(x_tilde, state: LSTMState, params: AttentiveLSTMParams) -> LSTMState:
    x_tilde = np.asarray(x_tilde, dtype=np.float64)
    if x_tilde.shape != state.H.shape or state.H.shape != state.C_cell.shape:
        raise T.ShapeError(
            f"shape mismatch: input {x_tilde.shape}, H {state.H.shape}, C {state.C_cell.shape}"
        )
    if x_tilde.shape[0] != params.channels:
        raise T.ShapeError(f"input has {x_tilde.shape[0]} channels, params expect {params.channels}")

    def gate(g):
        return (_same(x_tilde, getattr(params, f"W_{g}"))
                + _same(state.H, getattr(params, f"U_{g}"))
                + getattr(params, f"b_{g}")[:, None, None])

    i = T.sigmoid(gate("i"))
    f = T.sigmoid(gate("f"))
    o = T.sigmoid(gate("o"))
    g = np.tanh(gate("c"))
    c = f * state.C_cell + i * g
    return LSTMState(o * np.tanh(c), c)


def iterate_refinement(x, params: AttentiveLSTMParams, t_steps: int = DEFAULT_T_STEPS
                       ) -> Iterator[tuple[np.ndarray, LSTMState]]:
    """Yield ``(attention_map, state)`` after each of ``t_steps`` iterations."""
    if t_steps < 1:
        raise ValueError(f"t_steps must be >= 1, got {t_steps}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise T.ShapeError(f"expected C x H x W input, got {x.shape}")
    state = LSTMState.zeros(x.shape)
    for _ in range(t_steps):
        # attention always reads the original stack, not the reweighted one
        _, a = attention_map(x, state.H, params)
        state = lstm_step(apply_attention(x, a), state, params)
        yield a, state


def refine(x, params: AttentiveLSTMParams, t_steps: int = DEFAULT_T_STEPS):
    """Run the attentive recurrence; returns ``(H_T, [H_1, ..., H_T])``."""
    hidden = [state.H for _, state in iterate_refinement(x, params, t_steps)]
    return hidden[-1], hidden
