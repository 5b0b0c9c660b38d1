"""Primitive differentiable operations.

Each op is a ``DifferentiableOp`` (forward + hand-derived VJP) over float64
Tensors. Ops that need static parameters (slice bounds, window geometry,
loss targets) are produced by factory functions closing over them; the
closed-over values are constants, never differentiated.

Shape conventions: feature maps are ``[C, H, W]`` (x = column index,
y = row index, origin at the center of pixel (0, 0)); token matrices are
``[N, C]`` with tokens in row-major spatial order.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import ConfigError, ShapeError
from .autodiff import DifferentiableOp, Var, apply_op
from .tensor import Tensor

_W = Tensor._wrap


def _same_shape(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# arithmetic


def _add_fwd(a, b):
    _same_shape(a, b, "add")
    return _W(a.data + b.data)


add_op = DifferentiableOp("add", _add_fwd, lambda xs, y, c: (c, c))


def _mul_fwd(a, b):
    _same_shape(a, b, "mul")
    return _W(a.data * b.data)


mul_op = DifferentiableOp(
    "mul",
    _mul_fwd,
    lambda xs, y, c: (_W(c.data * xs[1].data), _W(c.data * xs[0].data)),
)


def scale_op(factor: float) -> DifferentiableOp:
    f = float(factor)
    return DifferentiableOp(
        f"scale[{f!r}]",
        lambda x: _W(x.data * f),
        lambda xs, y, c: (_W(c.data * f),),
    )


def _add_bias_rows_fwd(x, b):
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias_rows: shapes {x.shape} and {b.shape} incompatible")
    return _W(x.data + b.data[None, :])


add_bias_rows_op = DifferentiableOp(
    "add_bias_rows",
    _add_bias_rows_fwd,
    lambda xs, y, c: (c, _W(c.data.sum(axis=0))),
)


def _matmul_fwd(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} incompatible")
    return _W(a.data @ b.data)


matmul_op = DifferentiableOp(
    "matmul",
    _matmul_fwd,
    lambda xs, y, c: (_W(c.data @ xs[1].data.T), _W(xs[0].data.T @ c.data)),
)

transpose2d_op = DifferentiableOp(
    "transpose2d",
    lambda x: _W(np.ascontiguousarray(x.data.T)),
    lambda xs, y, c: (_W(np.ascontiguousarray(c.data.T)),),
)


def reshape_op(shape: tuple[int, ...]) -> DifferentiableOp:
    return DifferentiableOp(
        f"reshape{shape}",
        lambda x: _W(np.ascontiguousarray(x.data.reshape(shape))),
        lambda xs, y, c: (_W(np.ascontiguousarray(c.data.reshape(xs[0].shape))),),
    )


# ---------------------------------------------------------------------------
# slicing / concatenation / layout


def slice_cols_op(lo: int, hi: int) -> DifferentiableOp:
    def fwd(x):
        return _W(np.ascontiguousarray(x.data[:, lo:hi]))

    def vjp(xs, y, c):
        g = np.zeros(xs[0].shape, dtype=np.float64)
        g[:, lo:hi] = c.data
        return (_W(g),)

    return DifferentiableOp(f"slice_cols[{lo}:{hi}]", fwd, vjp)


def slice_vec_op(lo: int, hi: int) -> DifferentiableOp:
    def fwd(x):
        return _W(np.ascontiguousarray(x.data[lo:hi]))

    def vjp(xs, y, c):
        g = np.zeros(xs[0].shape, dtype=np.float64)
        g[lo:hi] = c.data
        return (_W(g),)

    return DifferentiableOp(f"slice_vec[{lo}:{hi}]", fwd, vjp)


def slice_channels_op(lo: int, hi: int) -> DifferentiableOp:
    def fwd(x):
        return _W(np.ascontiguousarray(x.data[lo:hi]))

    def vjp(xs, y, c):
        g = np.zeros(xs[0].shape, dtype=np.float64)
        g[lo:hi] = c.data
        return (_W(g),)

    return DifferentiableOp(f"slice_channels[{lo}:{hi}]", fwd, vjp)


def concat_cols_op(n_inputs: int) -> DifferentiableOp:
    def fwd(*xs):
        return _W(np.ascontiguousarray(np.concatenate([x.data for x in xs], axis=1)))

    def vjp(xs, y, c):
        outs = []
        at = 0
        for x in xs:
            w = x.shape[1]
            outs.append(_W(np.ascontiguousarray(c.data[:, at : at + w])))
            at += w
        return tuple(outs)

    return DifferentiableOp(f"concat_cols[{n_inputs}]", fwd, vjp)


def gather_rows_op(indices: np.ndarray) -> DifferentiableOp:
    idx = np.asarray(indices, dtype=np.int64)

    def fwd(x):
        return _W(np.ascontiguousarray(x.data[idx]))

    def vjp(xs, y, c):
        g = np.zeros(xs[0].shape, dtype=np.float64)
        np.add.at(g, idx, c.data)
        return (_W(g),)

    return DifferentiableOp(f"gather_rows[{len(idx)}]", fwd, vjp)


def extract_window_op(r0: int, c0: int, s: int) -> DifferentiableOp:
    def fwd(x):
        return _W(np.ascontiguousarray(x.data[:, r0 : r0 + s, c0 : c0 + s]))

    def vjp(xs, y, c):
        g = np.zeros(xs[0].shape, dtype=np.float64)
        g[:, r0 : r0 + s, c0 : c0 + s] = c.data
        return (_W(g),)

    return DifferentiableOp(f"extract_window[{r0},{c0},{s}]", fwd, vjp)


def merge_windows_op(rows: int, cols: int, s: int) -> DifferentiableOp:
    """Variadic: rows*cols window tensors [C,s,s], row-major, -> [C,H,W]."""

    def fwd(*windows):
        C = windows[0].shape[0]
        out = np.empty((C, rows * s, cols * s), dtype=np.float64)
        for i, w in enumerate(windows):
            r, c = divmod(i, cols)
            out[:, r * s : (r + 1) * s, c * s : (c + 1) * s] = w.data
        return _W(out)

    def vjp(xs, y, c):
        outs = []
        for i in range(rows * cols):
            r, cc = divmod(i, cols)
            outs.append(
                _W(np.ascontiguousarray(c.data[:, r * s : (r + 1) * s, cc * s : (cc + 1) * s]))
            )
        return tuple(outs)

    return DifferentiableOp(f"merge_windows[{rows}x{cols},{s}]", fwd, vjp)


def _chw_to_tokens_fwd(x):
    C = x.shape[0]
    return _W(np.ascontiguousarray(x.data.reshape(C, -1).T))


def _chw_to_tokens_vjp(xs, y, c):
    C = xs[0].shape[0]
    return (_W(np.ascontiguousarray(c.data.T.reshape(xs[0].shape))),)


chw_to_tokens_op = DifferentiableOp("chw_to_tokens", _chw_to_tokens_fwd, _chw_to_tokens_vjp)


def tokens_to_chw_op(h: int, w: int) -> DifferentiableOp:
    def fwd(x):
        C = x.shape[1]
        return _W(np.ascontiguousarray(x.data.T.reshape(C, h, w)))

    def vjp(xs, y, c):
        C = xs[0].shape[1]
        return (_W(np.ascontiguousarray(c.data.reshape(C, h * w).T)),)

    return DifferentiableOp(f"tokens_to_chw[{h}x{w}]", fwd, vjp)


def patchify_op(p: int) -> DifferentiableOp:
    """[C,H,W] -> [(H/p)*(W/p), C*p*p]; patch vector index = ch*p*p + dy*p + dx."""

    def fwd(x):
        C, H, W = x.shape
        if H % p or W % p:
            raise ShapeError(f"patchify: {H}x{W} not divisible by {p}")
        hp, wp = H // p, W // p
        v = x.data.reshape(C, hp, p, wp, p).transpose(1, 3, 0, 2, 4)
        return _W(np.ascontiguousarray(v.reshape(hp * wp, C * p * p)))

    def vjp(xs, y, c):
        C, H, W = xs[0].shape
        hp, wp = H // p, W // p
        g = c.data.reshape(hp, wp, C, p, p).transpose(2, 0, 3, 1, 4)
        return (_W(np.ascontiguousarray(g.reshape(C, H, W))),)

    return DifferentiableOp(f"patchify[{p}]", fwd, vjp)


def upsample_bilinear_op(out_h: int, out_w: int) -> DifferentiableOp:
    """[K,h,w] -> [K,out_h,out_w]; src = (dst+0.5)*in/out - 0.5, border-clamped."""

    def _axis(n_in: int, n_out: int):
        pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1.0)
        i0 = np.floor(pos).astype(np.int64)
        i0 = np.minimum(i0, n_in - 1)
        i1 = np.minimum(i0 + 1, n_in - 1)
        frac = pos - i0
        return i0, i1, frac

    def fwd(x):
        K, h, w = x.shape
        y0, y1, fy = _axis(h, out_h)
        x0, x1, fx = _axis(w, out_w)
        d = x.data
        wy = fy[:, None]
        wx = fx[None, :]
        out = (
            d[:, y0[:, None], x0[None, :]] * (1 - wy) * (1 - wx)
            + d[:, y0[:, None], x1[None, :]] * (1 - wy) * wx
            + d[:, y1[:, None], x0[None, :]] * wy * (1 - wx)
            + d[:, y1[:, None], x1[None, :]] * wy * wx
        )
        return _W(np.ascontiguousarray(out))

    def vjp(xs, y, c):
        K, h, w = xs[0].shape
        y0, y1, fy = _axis(h, out_h)
        x0, x1, fx = _axis(w, out_w)
        wy = fy[:, None]
        wx = fx[None, :]
        g = np.zeros((K, h, w), dtype=np.float64)
        cd = c.data
        for yy, xx, ww in (
            (y0, x0, (1 - wy) * (1 - wx)),
            (y0, x1, (1 - wy) * wx),
            (y1, x0, wy * (1 - wx)),
            (y1, x1, wy * wx),
        ):
            np.add.at(g, (slice(None), yy[:, None], xx[None, :]), cd * ww)
        return (_W(g),)

    return DifferentiableOp(f"upsample_bilinear[{out_h}x{out_w}]", fwd, vjp)


# ---------------------------------------------------------------------------
# nonlinearities / normalization / pooling


def leaky_relu_op(slope: float) -> DifferentiableOp:
    if not (0.0 < slope < 1.0):
        raise ConfigError(f"leaky_relu slope must lie in (0, 1), got {slope}")

    def fwd(x):
        d = x.data
        return _W(np.where(d >= 0.0, d, slope * d))

    def vjp(xs, y, c):
        d = xs[0].data
        return (_W(c.data * np.where(d >= 0.0, 1.0, slope)),)

    return DifferentiableOp(f"leaky_relu[{slope}]", fwd, vjp)


_GELU_A = math.sqrt(2.0 / math.pi)
_GELU_B = 0.044715


def _gelu_fwd(x):
    d = x.data
    d2 = d * d
    u = _GELU_A * (d + _GELU_B * (d2 * d))
    return _W(0.5 * d * (1.0 + np.tanh(u)))


def _gelu_vjp(xs, y, c):
    d = xs[0].data
    d2 = d * d
    u = _GELU_A * (d + _GELU_B * (d2 * d))
    t = np.tanh(u)
    du = _GELU_A * (1.0 + 3.0 * _GELU_B * d2)
    return (_W(c.data * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * du)),)


gelu_op = DifferentiableOp("gelu", _gelu_fwd, _gelu_vjp)


def _softmax_rows_fwd(x):
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows: need a 2-d tensor, got shape {x.shape}")
    d = x.data
    shifted = d - d.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return _W(e / e.sum(axis=1, keepdims=True))


def _softmax_rows_vjp(xs, y, c):
    yd = y.data
    dot = (c.data * yd).sum(axis=1, keepdims=True)
    return (_W(yd * (c.data - dot)),)


softmax_rows_op = DifferentiableOp("softmax_rows", _softmax_rows_fwd, _softmax_rows_vjp)


def _softmax2(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _attention_fwd(q, k, v):
    if q.data.ndim != 2 or q.shape[1] != k.shape[1] or k.shape != v.shape:
        raise ShapeError(
            f"attention: incompatible shapes q={q.shape} k={k.shape} v={v.shape}"
        )
    alpha = 1.0 / math.sqrt(q.shape[1])
    p = _softmax2(alpha * (q.data @ k.data.T))
    return _W(p @ v.data)


def _attention_vjp(xs, y, c):
    q, k, v = (x.data for x in xs)
    alpha = 1.0 / math.sqrt(q.shape[1])
    p = _softmax2(alpha * (q @ k.T))
    dv = p.T @ c.data
    dp = c.data @ v.T
    ds = p * (dp - (dp * p).sum(axis=1, keepdims=True))
    dq = alpha * (ds @ k)
    dk = alpha * (ds.T @ q)
    return (_W(dq), _W(dk), _W(dv))


attention_op = DifferentiableOp("attention", _attention_fwd, _attention_vjp)


def layer_norm_rows_op(eps: float = 1e-6) -> DifferentiableOp:
    """(x[m,n], gain[n], bias[n]) -> [m,n], normalized per row."""

    def fwd(x, g, b):
        d = x.data
        mu = d.mean(axis=1, keepdims=True)
        var = ((d - mu) ** 2).mean(axis=1, keepdims=True)
        xhat = (d - mu) / np.sqrt(var + eps)
        return _W(xhat * g.data[None, :] + b.data[None, :])

    def vjp(xs, y, c):
        d = xs[0].data
        g = xs[1].data
        n = d.shape[1]
        mu = d.mean(axis=1, keepdims=True)
        var = ((d - mu) ** 2).mean(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (d - mu) * inv
        dxhat = c.data * g[None, :]
        dx = (
            dxhat - dxhat.mean(axis=1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        ) * inv
        dg = (c.data * xhat).sum(axis=0)
        db = c.data.sum(axis=0)
        return (_W(dx), _W(dg), _W(db))

    return DifferentiableOp(f"layer_norm_rows[eps={eps}]", fwd, vjp)


def _gap_fwd(x):
    if x.data.ndim != 3:
        raise ShapeError(f"gap: need a [C,H,W] tensor, got shape {x.shape}")
    return _W(np.ascontiguousarray(x.data.mean(axis=(1, 2))))


def _gap_vjp(xs, y, c):
    C, H, W = xs[0].shape
    g = np.broadcast_to(c.data[:, None, None] / (H * W), (C, H, W))
    return (_W(np.ascontiguousarray(g)),)


gap_op = DifferentiableOp("gap", _gap_fwd, _gap_vjp)


def _mean_all_fwd(x):
    return _W(np.asarray(x.data.mean(), dtype=np.float64))


def _mean_all_vjp(xs, y, c):
    n = xs[0].size
    g = np.broadcast_to(c.data / n, xs[0].shape)
    return (_W(np.ascontiguousarray(g)),)


mean_all_op = DifferentiableOp("mean_all", _mean_all_fwd, _mean_all_vjp)


# ---------------------------------------------------------------------------
# affine window sampling


def sample_window_points_op(
    x_c: float, y_c: float, rx: np.ndarray, ry: np.ndarray
) -> DifferentiableOp:
    """Bilinear resampling of a transformed window.

    Inputs: feature map [C,Hf,Wf] and params [5] = (ds_x, ds_y, o_x, o_y, theta)
    with effective scales (1+ds_x, 1+ds_y). Sample point for lattice residual
    (rx, ry):

        x = x_c + o_x + cos(t)*(rx*s_x) + sin(t)*(ry*s_y)
        y = y_c + o_y - sin(t)*(rx*s_x) + cos(t)*(ry*s_y)

    Reads outside the map return 0. Differentiable in the feature values and
    in all five params.
    """
    rx = np.asarray(rx, dtype=np.float64)
    ry = np.asarray(ry, dtype=np.float64)
    out_shape = rx.shape

    def _points(params: np.ndarray):
        ds_x, ds_y, o_x, o_y, th = params
        sx, sy = 1.0 + ds_x, 1.0 + ds_y
        ct, st = math.cos(th), math.sin(th)
        px = x_c + o_x + ct * (rx * sx) + st * (ry * sy)
        py = y_c + o_y - st * (rx * sx) + ct * (ry * sy)
        return px, py, sx, sy, ct, st

    def _gather(feat: np.ndarray, px, py):
        Hf, Wf = feat.shape[1], feat.shape[2]
        x0 = np.floor(px).astype(np.int64)
        y0 = np.floor(py).astype(np.int64)
        wx = px - x0
        wy = py - y0
        vals = []
        masks = []
        coords = []
        for dy, dx, w in (
            (0, 0, (1 - wx) * (1 - wy)),
            (0, 1, wx * (1 - wy)),
            (1, 0, (1 - wx) * wy),
            (1, 1, wx * wy),
        ):
            yy = y0 + dy
            xx = x0 + dx
            ok = (yy >= 0) & (yy < Hf) & (xx >= 0) & (xx < Wf)
            yc = np.clip(yy, 0, Hf - 1)
            xc = np.clip(xx, 0, Wf - 1)
            v = feat[:, yc, xc] * ok
            vals.append((v, w))
            masks.append(ok)
            coords.append((yc, xc, w, ok))
        return vals, coords, wx, wy

    def fwd(feat, params):
        px, py, *_ = _points(params.data.reshape(5))
        vals, _, _, _ = _gather(feat.data, px, py)
        out = sum(v * w for v, w in vals)
        return _W(np.ascontiguousarray(out))

    def vjp(xs, y, c):
        feat = xs[0].data
        params = xs[1].data.reshape(5)
        px, py, sx, sy, ct, st = _points(params)
        Hf, Wf = feat.shape[1], feat.shape[2]
        x0 = np.floor(px).astype(np.int64)
        y0 = np.floor(py).astype(np.int64)
        wx = px - x0
        wy = py - y0
        cd = c.data
        dfeat = np.zeros_like(feat)
        # value gradients per corner + point-coordinate gradients
        gpx = np.zeros(out_shape, dtype=np.float64)
        gpy = np.zeros(out_shape, dtype=np.float64)
        for dy, dx, w, dw_dx, dw_dy in (
            (0, 0, (1 - wx) * (1 - wy), -(1 - wy), -(1 - wx)),
            (0, 1, wx * (1 - wy), (1 - wy), -wx),
            (1, 0, (1 - wx) * wy, -wy, (1 - wx)),
            (1, 1, wx * wy, wy, wx),
        ):
            yy = y0 + dy
            xx = x0 + dx
            ok = (yy >= 0) & (yy < Hf) & (xx >= 0) & (xx < Wf)
            yc = np.clip(yy, 0, Hf - 1)
            xc = np.clip(xx, 0, Wf - 1)
            contrib = cd * (w * ok)
            np.add.at(dfeat, (slice(None), yc, xc), contrib)
            fvals = feat[:, yc, xc] * ok
            cf = (cd * fvals).sum(axis=0)
            gpx += cf * dw_dx
            gpy += cf * dw_dy
        # chain px, py back to the five params
        d_dsx = (gpx * (ct * rx) + gpy * (-st * rx)).sum()
        d_dsy = (gpx * (st * ry) + gpy * (ct * ry)).sum()
        d_ox = gpx.sum()
        d_oy = gpy.sum()
        d_th = (
            gpx * (-st * rx * sx + ct * ry * sy) + gpy * (-ct * rx * sx - st * ry * sy)
        ).sum()
        dparams = np.array([d_dsx, d_dsy, d_ox, d_oy, d_th], dtype=np.float64)
        return (_W(dfeat), _W(dparams.reshape(xs[1].shape)))

    return DifferentiableOp("sample_window", fwd, vjp)


def window_kv_sample_op(
    x_c: float, y_c: float, rx: np.ndarray, ry: np.ndarray, heads: int
) -> DifferentiableOp:
    """Fused per-window key/value resampling over all heads.

    Inputs: k_map [C,H,W], v_map [C,H,W], raw params [5*heads] laid out per
    head as (ds_x, ds_y, o_x, o_y, theta). Head h's channel slice of both
    maps is sampled at that head's transformed lattice (same point math as
    ``sample_window_points_op``). Output [2C, s, s]: k channels then v
    channels, per-head sampled.
    """
    rx = np.asarray(rx, dtype=np.float64)
    ry = np.asarray(ry, dtype=np.float64)
    npts = rx.size
    rxf = rx.reshape(-1)
    ryf = ry.reshape(-1)

    def _head_points(raw: np.ndarray, h: int):
        ds_x, ds_y, o_x, o_y, th = raw[5 * h : 5 * h + 5]
        sx, sy = 1.0 + ds_x, 1.0 + ds_y
        ct, st = math.cos(th), math.sin(th)
        px = x_c + o_x + ct * (rxf * sx) + st * (ryf * sy)
        py = y_c + o_y - st * (rxf * sx) + ct * (ryf * sy)
        return px, py, sx, sy, ct, st

    def _corners(px, py, Hf, Wf):
        x0 = np.floor(px).astype(np.int64)
        y0 = np.floor(py).astype(np.int64)
        wx = px - x0
        wy = py - y0
        out = []
        for dy, dx, w in (
            (0, 0, (1 - wx) * (1 - wy)),
            (0, 1, wx * (1 - wy)),
            (1, 0, (1 - wx) * wy),
            (1, 1, wx * wy),
        ):
            yy = y0 + dy
            xx = x0 + dx
            ok = (yy >= 0) & (yy < Hf) & (xx >= 0) & (xx < Wf)
            idx = np.where(ok, yy * Wf + xx, 0)
            out.append((idx, ok, w))
        return out, wx, wy

    def fwd(k_map, v_map, params):
        C, Hf, Wf = k_map.shape
        cp = C // heads
        raw = params.data.reshape(5 * heads)
        kf = k_map.data.reshape(C, -1)
        vf = v_map.data.reshape(C, -1)
        out = np.empty((2 * C, npts), dtype=np.float64)
        for h in range(heads):
            px, py, *_ = _head_points(raw, h)
            corners, _, _ = _corners(px, py, Hf, Wf)
            lo, hi = h * cp, (h + 1) * cp
            acck = np.zeros((cp, npts), dtype=np.float64)
            accv = np.zeros((cp, npts), dtype=np.float64)
            for idx, ok, w in corners:
                wm = w * ok
                acck += kf[lo:hi, idx] * wm
                accv += vf[lo:hi, idx] * wm
            out[lo:hi] = acck
            out[C + lo : C + hi] = accv
        return _W(np.ascontiguousarray(out.reshape((2 * C,) + rx.shape)))

    def vjp(xs, y, c):
        k_map, v_map, params = xs
        C, Hf, Wf = k_map.shape
        cp = C // heads
        raw = params.data.reshape(5 * heads)
        kf = k_map.data.reshape(C, -1)
        vf = v_map.data.reshape(C, -1)
        cd = c.data.reshape(2 * C, npts)
        dk = np.zeros((C, Hf * Wf), dtype=np.float64)
        dv = np.zeros((C, Hf * Wf), dtype=np.float64)
        dparams = np.zeros(5 * heads, dtype=np.float64)
        for h in range(heads):
            px, py, sx, sy, ct, st = _head_points(raw, h)
            corners, wx, wy = _corners(px, py, Hf, Wf)
            lo, hi = h * cp, (h + 1) * cp
            ck = cd[lo:hi]
            cv = cd[C + lo : C + hi]
            gpx = np.zeros(npts, dtype=np.float64)
            gpy = np.zeros(npts, dtype=np.float64)
            weight_grads = (
                (-(1 - wy), -(1 - wx)),
                ((1 - wy), -wx),
                (-wy, (1 - wx)),
                (wy, wx),
            )
            for (idx, ok, w), (dw_dx, dw_dy) in zip(corners, weight_grads):
                wm = w * ok
                np.add.at(dk[lo:hi], (slice(None), idx), ck * wm)
                np.add.at(dv[lo:hi], (slice(None), idx), cv * wm)
                fsum = (ck * (kf[lo:hi, idx] * ok)).sum(axis=0) + (
                    cv * (vf[lo:hi, idx] * ok)
                ).sum(axis=0)
                gpx += fsum * dw_dx
                gpy += fsum * dw_dy
            dparams[5 * h + 0] = (gpx * (ct * rxf) + gpy * (-st * rxf)).sum()
            dparams[5 * h + 1] = (gpx * (st * ryf) + gpy * (ct * ryf)).sum()
            dparams[5 * h + 2] = gpx.sum()
            dparams[5 * h + 3] = gpy.sum()
            dparams[5 * h + 4] = (
                gpx * (-st * rxf * sx + ct * ryf * sy)
                + gpy * (-ct * rxf * sx - st * ryf * sy)
            ).sum()
        return (
            _W(dk.reshape(C, Hf, Wf)),
            _W(dv.reshape(C, Hf, Wf)),
            _W(dparams.reshape(xs[2].shape)),
        )

    return DifferentiableOp("window_kv_sample", fwd, vjp)


# ---------------------------------------------------------------------------
# loss primitives (targets are closed-over constants)


def _scalar(v: float) -> Tensor:
    return _W(np.asarray(v, dtype=np.float64))


def semantic_ce_op(labels: np.ndarray) -> DifferentiableOp:
    """Mean cross-entropy of [K,H,W] logits against an H x W map; 255 = ignore."""
    lab = np.asarray(labels, dtype=np.int64)
    flat = lab.reshape(-1)
    keep = np.nonzero(flat != 255)[0]

    def fwd(logits):
        K = logits.shape[0]
        if len(keep) == 0:
            return _scalar(0.0)
        z = logits.data.reshape(K, -1)[:, keep]
        m = z.max(axis=0)
        lse = m + np.log(np.exp(z - m).sum(axis=0))
        picked = z[flat[keep], np.arange(len(keep))]
        return _scalar(float((lse - picked).mean()))

    def vjp(xs, y, c):
        K = xs[0].shape[0]
        g = np.zeros((K, flat.size), dtype=np.float64)
        if len(keep) > 0:
            z = xs[0].data.reshape(K, -1)[:, keep]
            m = z.max(axis=0)
            e = np.exp(z - m)
            p = e / e.sum(axis=0)
            p[flat[keep], np.arange(len(keep))] -= 1.0
            g[:, keep] = p * (float(c.data) / len(keep))
        return (_W(g.reshape(xs[0].shape)),)

    return DifferentiableOp("semantic_ce", fwd, vjp)


def bce_mean_op(targets: np.ndarray) -> DifferentiableOp:
    """Mean binary cross-entropy with logits against same-shape 0/1 targets."""
    t = np.asarray(targets, dtype=np.float64)

    def fwd(x):
        d = x.data
        if d.shape != t.shape:
            raise ShapeError(f"bce_mean: logits {d.shape} vs targets {t.shape}")
        per = np.maximum(d, 0.0) - d * t + np.log1p(np.exp(-np.abs(d)))
        return _scalar(float(per.mean()))

    def vjp(xs, y, c):
        d = xs[0].data
        sig = 1.0 / (1.0 + np.exp(-d))
        return (_W((sig - t) * (float(c.data) / d.size)),)

    return DifferentiableOp("bce_mean", fwd, vjp)


def ce_rows_mean_op(labels: np.ndarray) -> DifferentiableOp:
    """Mean cross-entropy of [m,K] logits against integer labels [m]."""
    lab = np.asarray(labels, dtype=np.int64)

    def fwd(x):
        z = x.data
        m = z.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
        picked = z[np.arange(len(lab)), lab]
        return _scalar(float((lse - picked).mean()))

    def vjp(xs, y, c):
        z = xs[0].data
        m = z.max(axis=1, keepdims=True)
        e = np.exp(z - m)
        p = e / e.sum(axis=1, keepdims=True)
        p[np.arange(len(lab)), lab] -= 1.0
        return (_W(p * (float(c.data) / len(lab))),)

    return DifferentiableOp("ce_rows_mean", fwd, vjp)


def smooth_l1_mean_op(targets: np.ndarray) -> DifferentiableOp:
    """Mean smooth-L1 (huber, delta=1) between predictions and fixed targets."""
    t = np.asarray(targets, dtype=np.float64)

    def fwd(x):
        d = x.data - t
        a = np.abs(d)
        per = np.where(a < 1.0, 0.5 * d * d, a - 0.5)
        return _scalar(float(per.mean()))

    def vjp(xs, y, c):
        d = xs[0].data - t
        return (_W(np.clip(d, -1.0, 1.0) * (float(c.data) / d.size)),)

    return DifferentiableOp("smooth_l1_mean", fwd, vjp)


# ---------------------------------------------------------------------------
# Var-level helpers (the building blocks used by the model code)


def v_add(a: Var, b: Var) -> Var:
    return apply_op(add_op, a, b)


def v_mul(a: Var, b: Var) -> Var:
    return apply_op(mul_op, a, b)


def v_scale(x: Var, factor: float) -> Var:
    return apply_op(scale_op(factor), x)


def v_matmul(a: Var, b: Var) -> Var:
    return apply_op(matmul_op, a, b)


def v_linear_rows(x: Var, weight: Var, bias: Var) -> Var:
    """Row-wise affine map: x[m,n] @ weight[k,n]^T + bias[k]."""
    return apply_op(add_bias_rows_op, v_matmul(x, apply_op(transpose2d_op, weight)), bias)


# ---------------------------------------------------------------------------
# public value-level operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return matmul_op.forward(a, b)


def softmax_rows(x: Tensor) -> Tensor:
    return softmax_rows_op.forward(x)


def gap(x: Tensor) -> Tensor:
    return gap_op.forward(x)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    return leaky_relu_op(slope).forward(x)
