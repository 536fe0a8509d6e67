"""LSTM cells and sequence layers with hand-derived backpropagation.

Gate layout in every 4H-wide preactivation: [input | forget | candidate |
output]. Sequences record a single fused tape node per direction so the tape
stays short; the per-step loop and its reverse live here, not on the tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tape import (
    DEFAULT_DTYPE,
    Parameter,
    ShapeError,
    Tensor,
    _record,
    affine,
    concat,
    gather_rows_batch,
    init_uniform,
    take_row,
    zeros_param,
)


@dataclass
class LstmParams:
    wx: Parameter  # [D, 4H]
    wh: Parameter  # [H, 4H]
    b: Parameter   # [4H]

    @property
    def hidden_width(self) -> int:
        return self.wh.data.shape[0]


@dataclass
class BiLstmLayerParams:
    fwd: LstmParams
    bwd: LstmParams


@dataclass
class RecurrentCellState:
    hidden: Tensor
    cell: Tensor


def init_lstm(name: str, input_width: int, hidden_width: int,
              rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> LstmParams:
    return LstmParams(
        wx=init_uniform(f"{name}.wx", (input_width, 4 * hidden_width), input_width, rng, dtype),
        wh=init_uniform(f"{name}.wh", (hidden_width, 4 * hidden_width), hidden_width, rng, dtype),
        b=zeros_param(f"{name}.b", (4 * hidden_width,), dtype),
    )


def init_bilstm(name: str, input_width: int, hidden_width: int,
                rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> BiLstmLayerParams:
    return BiLstmLayerParams(
        fwd=init_lstm(f"{name}.fwd", input_width, hidden_width, rng, dtype),
        bwd=init_lstm(f"{name}.bwd", input_width, hidden_width, rng, dtype),
    )


def zero_state(hidden_width: int, dtype=DEFAULT_DTYPE) -> RecurrentCellState:
    return RecurrentCellState(
        hidden=Tensor(np.zeros(hidden_width, dtype=dtype)),
        cell=Tensor(np.zeros(hidden_width, dtype=dtype)),
    )


def _step_forward(z: np.ndarray, c_prev: np.ndarray, hidden_width: int):
    """One gated update from preactivation z = x@wx + h@wh + b."""
    h = hidden_width
    i = _sigmoid(z[..., 0 * h:1 * h])
    f = _sigmoid(z[..., 1 * h:2 * h])
    g = np.tanh(z[..., 2 * h:3 * h])
    o = _sigmoid(z[..., 3 * h:4 * h])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    hid = o * tc
    return hid, c, (i, f, g, o, tc)


def _step_backward(cache, c_prev: np.ndarray, dh: np.ndarray, dc_carry: np.ndarray):
    """Invert one gated update: returns (dz, dc_prev)."""
    i, f, g, o, tc = cache
    do = dh * tc
    dc = dc_carry + dh * o * (1.0 - tc * tc)
    di = dc * g
    df = dc * c_prev
    dg = dc * i
    dc_prev = dc * f
    dz = np.concatenate(
        [
            di * i * (1.0 - i),
            df * f * (1.0 - f),
            dg * (1.0 - g * g),
            do * o * (1.0 - o),
        ],
        axis=-1,
    )
    return dz, dc_prev


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def lstm_cell(x: Tensor, state: RecurrentCellState, params: LstmParams) -> RecurrentCellState:
    """Single gated step. Works on [D] inputs or [B, D] batches."""
    hw = params.hidden_width
    if x.data.shape[-1] != params.wx.data.shape[0]:
        raise ShapeError(
            f"lstm_cell input width {x.data.shape[-1]} does not match "
            f"wx {params.wx.data.shape}"
        )
    if state.hidden.data.shape != state.cell.data.shape:
        raise ShapeError("hidden and cell state shapes differ")

    z = x.data @ params.wx.data + state.hidden.data @ params.wh.data + params.b.data
    hid, c, cache = _step_forward(z, state.cell.data, hw)
    packed_data = np.stack([hid, c], axis=0)
    c_prev = state.cell.data

    def backward_fn(g):
        dz, dc_prev = _step_backward(cache, c_prev, g[0], g[1])
        dz2 = dz.reshape(-1, 4 * hw)
        x2 = x.data.reshape(-1, x.data.shape[-1])
        h2 = state.hidden.data.reshape(-1, hw)
        dx = (dz2 @ params.wx.data.T).reshape(x.data.shape)
        dh_prev = (dz2 @ params.wh.data.T).reshape(state.hidden.data.shape)
        dwx = x2.T @ dz2
        dwh = h2.T @ dz2
        db = dz2.sum(axis=0)
        return dx, dh_prev, dc_prev, dwx, dwh, db

    packed = _record(
        packed_data,
        (x, state.hidden, state.cell, params.wx, params.wh, params.b),
        backward_fn,
    )
    return RecurrentCellState(hidden=take_row(packed, 0), cell=take_row(packed, 1))


def lstm_sequence(xproj: Tensor, wh: Parameter, reverse: bool = False) -> Tensor:
    """Run a whole sequence through one LSTM direction as a fused tape node.

    ``xproj`` is the precomputed input projection x @ wx + b, shape [T, 4H];
    computing it as one affine outside keeps the big matmul vectorized. Initial
    state is zero. Output row t always corresponds to input row t; with
    ``reverse`` the recurrence consumes rows T-1..0.
    """
    T = xproj.data.shape[0]
    if T < 1:
        raise ShapeError("lstm_sequence needs at least one frame")
    hw = wh.data.shape[0]
    if xproj.data.shape[-1] != 4 * hw:
        raise ShapeError(
            f"xproj width {xproj.data.shape[-1]} does not match 4H for wh {wh.data.shape}"
        )

    order = range(T - 1, -1, -1) if reverse else range(T)
    hs = np.empty((T, hw), dtype=xproj.data.dtype)
    cs = np.empty((T, hw), dtype=xproj.data.dtype)
    caches: list[tuple] = [None] * T
    h = np.zeros(hw, dtype=xproj.data.dtype)
    c = np.zeros(hw, dtype=xproj.data.dtype)
    for t in order:
        z = xproj.data[t] + h @ wh.data
        h, c, cache = _step_forward(z, c, hw)
        hs[t] = h
        cs[t] = c
        caches[t] = cache

    steps = list(order)
    h_prev_of: dict[int, np.ndarray] = {}
    c_prev_of: dict[int, np.ndarray] = {}
    zero = np.zeros(hw, dtype=xproj.data.dtype)
    prev = None
    for t in steps:
        h_prev_of[t] = hs[prev] if prev is not None else zero
        c_prev_of[t] = cs[prev] if prev is not None else zero
        prev = t

    def backward_fn(g):
        dxproj = np.zeros_like(xproj.data)
        dwh = np.zeros_like(wh.data)
        dh_carry = np.zeros(hw, dtype=xproj.data.dtype)
        dc_carry = np.zeros(hw, dtype=xproj.data.dtype)
        for t in reversed(steps):
            dh = g[t] + dh_carry
            dz, dc_prev = _step_backward(caches[t], c_prev_of[t], dh, dc_carry)
            dxproj[t] = dz
            dwh += np.outer(h_prev_of[t], dz)
            dh_carry = dz @ wh.data.T
            dc_carry = dc_prev
        return dxproj, dwh

    return _record(hs, (xproj, wh), backward_fn)


def bidirectional_sequence(x: Tensor, layer: BiLstmLayerParams) -> Tensor:
    """Frame t of the output is [forward state at t | backward state at t]."""
    if x.data.ndim != 2 or x.data.shape[0] < 1:
        raise ShapeError(f"bidirectional_sequence needs a [T, D] input with T >= 1, "
                         f"got shape {x.data.shape}")
    xp_f = affine(x, layer.fwd.wx, layer.fwd.b)
    xp_b = affine(x, layer.bwd.wx, layer.bwd.b)
    hs_f = lstm_sequence(xp_f, layer.fwd.wh, reverse=False)
    hs_b = lstm_sequence(xp_b, layer.bwd.wh, reverse=True)
    return concat([hs_f, hs_b], axis=-1)


def lstm_sequence_batch(xproj: Tensor, wh: Parameter) -> Tensor:
    """Batched fused direction: [B, T, 4H] -> [B, T, H], zero initial state.

    Always runs the forward direction; callers express reversal by permuting
    rows with ``gather_rows_batch`` before and after. Rows past an item's true
    length hold unusable values and must not be consumed downstream; zero
    output gradients there stay exactly zero through the reverse recurrence,
    so padding never leaks into real gradients.
    """
    if xproj.data.ndim != 3:
        raise ShapeError(f"lstm_sequence_batch needs [B, T, 4H], got {xproj.data.shape}")
    B, T, _ = xproj.data.shape
    if T < 1:
        raise ShapeError("lstm_sequence_batch needs at least one frame")
    hw = wh.data.shape[0]
    if xproj.data.shape[-1] != 4 * hw:
        raise ShapeError(
            f"xproj width {xproj.data.shape[-1]} does not match 4H for wh {wh.data.shape}"
        )

    hs = np.empty((B, T, hw), dtype=xproj.data.dtype)
    cs = np.empty((B, T, hw), dtype=xproj.data.dtype)
    caches: list[tuple] = [None] * T
    h = np.zeros((B, hw), dtype=xproj.data.dtype)
    c = np.zeros((B, hw), dtype=xproj.data.dtype)
    for t in range(T):
        z = xproj.data[:, t] + h @ wh.data
        h, c, cache = _step_forward(z, c, hw)
        hs[:, t] = h
        cs[:, t] = c
        caches[t] = cache

    zero = np.zeros((B, hw), dtype=xproj.data.dtype)

    def backward_fn(g):
        dxproj = np.zeros_like(xproj.data)
        dwh = np.zeros_like(wh.data)
        dh_carry = np.zeros((B, hw), dtype=xproj.data.dtype)
        dc_carry = np.zeros((B, hw), dtype=xproj.data.dtype)
        for t in range(T - 1, -1, -1):
            c_prev = cs[:, t - 1] if t > 0 else zero
            h_prev = hs[:, t - 1] if t > 0 else zero
            dh = g[:, t] + dh_carry
            dz, dc_prev = _step_backward(caches[t], c_prev, dh, dc_carry)
            dxproj[:, t] = dz
            dwh += h_prev.T @ dz
            dh_carry = dz @ wh.data.T
            dc_carry = dc_prev
        return dxproj, dwh

    return _record(hs, (xproj, wh), backward_fn)


def reversal_index(lengths: list[int], padded_len: int) -> np.ndarray:
    """Row permutation that mirrors each item's valid prefix and fixes padding."""
    if padded_len < 1 or any(n < 1 or n > padded_len for n in lengths):
        raise ShapeError(f"lengths {lengths} do not fit padded length {padded_len}")
    idx = np.tile(np.arange(padded_len), (len(lengths), 1))
    for b, n in enumerate(lengths):
        idx[b, :n] = np.arange(n - 1, -1, -1)
    return idx


def bidirectional_sequence_batch(x: Tensor, lengths: list[int],
                                 layer: BiLstmLayerParams) -> Tensor:
    """Batched ``bidirectional_sequence`` over a zero-padded [B, Tmax, D] block.

    Output rows at or past an item's length are padding artifacts; slice them
    off with ``slice_rows`` before use.
    """
    if x.data.ndim != 3:
        raise ShapeError(f"expected [B, Tmax, D], got shape {x.data.shape}")
    if x.data.shape[0] != len(lengths):
        raise ShapeError(f"{x.data.shape[0]} items but {len(lengths)} lengths")
    rev = reversal_index(lengths, x.data.shape[1])
    xp_f = affine(x, layer.fwd.wx, layer.fwd.b)
    hs_f = lstm_sequence_batch(xp_f, layer.fwd.wh)
    xp_b = gather_rows_batch(affine(x, layer.bwd.wx, layer.bwd.b), rev)
    hs_b = gather_rows_batch(lstm_sequence_batch(xp_b, layer.bwd.wh), rev)
    return concat([hs_f, hs_b], axis=-1)


def lstm_params_list(params: LstmParams) -> list[Parameter]:
    return [params.wx, params.wh, params.b]


def bilstm_params_list(layer: BiLstmLayerParams) -> list[Parameter]:
    return lstm_params_list(layer.fwd) + lstm_params_list(layer.bwd)
