"""層ごとの順伝播と逆伝播。

テンソルはすべてチャネル末尾です。畳み込みは (B, T, F, C)、LSTMは (B, T, D)。
``mask`` は (B, T) で、パディングしたフレームが0です。
"""

from dataclasses import dataclass

import numpy as np


def sigmoid(x: np.ndarray) -> np.ndarray:
    # exp のオーバーフローを避けるため tanh で書きます。
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _same_padding(k: int) -> tuple[int, int]:
    before = (k - 1) // 2
    return before, k - 1 - before


@dataclass(slots=True)
class ConvCache:
    cols: np.ndarray
    out: np.ndarray
    in_shape: tuple[int, ...]
    kernel: tuple[int, int]


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, ConvCache]:
    """SAMEパディング、ストライド1の2次元畳み込み + ReLU。``w`` は (kh, kw, Cin, Cout)。"""
    batch, frames, bins, cin = x.shape
    kh, kw, _, cout = w.shape
    pt, pb = _same_padding(kh)
    pl, pr = _same_padding(kw)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    # (B, T, F, Cin, kh, kw) -> (B, T, F, kh, kw, Cin)
    cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(batch, frames, bins, kh * kw * cin)
    z = cols @ w.reshape(kh * kw * cin, cout) + b
    out = np.maximum(z, 0.0) * mask[:, :, None, None]
    return out, ConvCache(cols, out, x.shape, (kh, kw))


def conv2d_backward(
    dout: np.ndarray, w: np.ndarray, cache: ConvCache, need_params: bool, need_dx: bool
) -> tuple[np.ndarray | None, np.ndarray | None, np.ndarray | None]:
    batch, frames, bins, cin = cache.in_shape
    kh, kw = cache.kernel
    cout = w.shape[-1]
    # out は ReLU 後かつマスク済みなので、out > 0 がそのまま通過条件です。
    dz = np.where(cache.out > 0.0, dout, 0.0).astype(dout.dtype, copy=False)
    dz2 = dz.reshape(-1, cout)

    dw = db = dx = None
    if need_params:
        dw = (cache.cols.reshape(-1, kh * kw * cin).T @ dz2).reshape(w.shape)
        db = dz2.sum(axis=0)
    if need_dx:
        dcols = (dz2 @ w.reshape(kh * kw * cin, cout).T).reshape(batch, frames, bins, kh, kw, cin)
        pt, pb = _same_padding(kh)
        pl, pr = _same_padding(kw)
        dxp = np.zeros((batch, frames + pt + pb, bins + pl + pr, cin), dtype=dout.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + frames, j : j + bins, :] += dcols[:, :, :, i, j, :]
        dx = dxp[:, pt : pt + frames, pl : pl + bins, :]
    return dw, db, dx


@dataclass(slots=True)
class LstmCache:
    x: np.ndarray
    gates: np.ndarray
    c: np.ndarray
    tanh_c: np.ndarray
    h: np.ndarray


def lstm_forward(
    x: np.ndarray, wx: np.ndarray, wh: np.ndarray, b: np.ndarray, mask: np.ndarray
) -> tuple[np.ndarray, LstmCache]:
    """ゲート順は (i, f, g, o)。パディング位置の出力は0にします。"""
    batch, frames, _ = x.shape
    units = wh.shape[0]
    dtype = x.dtype
    xw = x @ wx + b
    gates = np.empty((batch, frames, 4 * units), dtype=dtype)
    c = np.empty((batch, frames, units), dtype=dtype)
    tanh_c = np.empty_like(c)
    h = np.empty_like(c)
    h_prev = np.zeros((batch, units), dtype=dtype)
    c_prev = np.zeros((batch, units), dtype=dtype)
    for t in range(frames):
        z = xw[:, t] + h_prev @ wh
        ifo = sigmoid(z[:, np.r_[0 : 2 * units, 3 * units : 4 * units]])
        i, f, o = ifo[:, :units], ifo[:, units : 2 * units], ifo[:, 2 * units :]
        g = np.tanh(z[:, 2 * units : 3 * units])
        c_t = f * c_prev + i * g
        tc = np.tanh(c_t)
        h_t = o * tc
        gates[:, t, :units] = i
        gates[:, t, units : 2 * units] = f
        gates[:, t, 2 * units : 3 * units] = g
        gates[:, t, 3 * units :] = o
        c[:, t] = c_t
        tanh_c[:, t] = tc
        h[:, t] = h_t
        h_prev, c_prev = h_t, c_t
    return h * mask[:, :, None], LstmCache(x, gates, c, tanh_c, h)


def lstm_backward(
    dout: np.ndarray, wx: np.ndarray, wh: np.ndarray, cache: LstmCache, mask: np.ndarray, need_params: bool, need_dx: bool
) -> tuple[dict[str, np.ndarray], np.ndarray | None]:
    batch, frames, units = cache.h.shape
    dtype = dout.dtype
    dh_out = dout * mask[:, :, None]
    dz = np.empty((batch, frames, 4 * units), dtype=dtype)
    dh_next = np.zeros((batch, units), dtype=dtype)
    dc_next = np.zeros((batch, units), dtype=dtype)
    zero = np.zeros((batch, units), dtype=dtype)
    for t in range(frames - 1, -1, -1):
        gates = cache.gates[:, t]
        i, f, g, o = gates[:, :units], gates[:, units : 2 * units], gates[:, 2 * units : 3 * units], gates[:, 3 * units :]
        tc = cache.tanh_c[:, t]
        c_prev = cache.c[:, t - 1] if t > 0 else zero
        dh = dh_out[:, t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dz[:, t, :units] = dc * g * i * (1.0 - i)
        dz[:, t, units : 2 * units] = dc * c_prev * f * (1.0 - f)
        dz[:, t, 2 * units : 3 * units] = dc * i * (1.0 - g * g)
        dz[:, t, 3 * units :] = dh * tc * o * (1.0 - o)
        dh_next = dz[:, t] @ wh.T
        dc_next = dc * f

    grads: dict[str, np.ndarray] = {}
    dz2 = dz.reshape(-1, 4 * units)
    if need_params:
        h_prev = np.zeros_like(cache.h)
        h_prev[:, 1:] = cache.h[:, :-1]
        grads["wx"] = cache.x.reshape(-1, cache.x.shape[-1]).T @ dz2
        grads["wh"] = h_prev.reshape(-1, units).T @ dz2
        grads["b"] = dz2.sum(axis=0)
    dx = (dz @ wx.T) if need_dx else None
    return grads, dx


def reverse_index(lengths: np.ndarray, frames: int) -> np.ndarray:
    """各系列を自身の長さの範囲内で反転する (B, T) のインデックス。自己逆写像です。"""
    t = np.arange(frames)[None, :]
    lengths = np.asarray(lengths)[:, None]
    return np.where(t < lengths, lengths - 1 - t, t)


def take_frames(x: np.ndarray, index: np.ndarray) -> np.ndarray:
    return np.take_along_axis(x, index[:, :, None], axis=1)
