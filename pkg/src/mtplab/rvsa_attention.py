"""Rotated varied-size window attention and the plain-transformer backbone.

The operator partitions a feature map into non-overlapping windows, predicts
five affine parameters per window and head (x/y scale, x/y offset, rotation)
from pooled window content, resamples key/value windows bilinearly from the
transformed window region, and runs scaled dot-product attention per head.
Full (single-window) attention is retained at configured layer indices, and
the backbone exposes a feature pyramid tapped after configured layers.

Coordinates: x = column, y = row, origin at the center of pixel (0, 0).
The rotation matrix is [[cos t, sin t], [-sin t, cos t]] applied to
scale-multiplied corner-to-center residuals, then shifted by center + offset.

Zero-initialized parameter-prediction weights give scale 1, offset 0 and
angle 0 (the raw scale outputs are deltas around 1), which makes the layer
bit-identical to plain windowed attention; that reduction is tested.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .tensorcore import Rng, Tensor, Var, apply_op, composite
from .tensorcore.autodiff import backward, leaves_of
from .tensorcore.gradcheck import register_case
from .tensorcore import ops
from .tensorcore.ops import (
    chw_to_tokens_op,
    concat_cols_op,
    extract_window_op,
    gap_op,
    gelu_op,
    layer_norm_rows_op,
    leaky_relu_op,
    merge_windows_op,
    reshape_op,
    sample_window_points_op,
    slice_cols_op,
    tokens_to_chw_op,
    v_add,
    v_linear_rows,
)

LEAKY_SLOPE = 0.01  # negative slope of the parameter-prediction activation


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class RvsaConfig:
    """Backbone layout: depth, width, heads, window size, layer placement."""

    depth: int
    embed_dim: int
    heads: int
    window_size: int
    full_attention_layers: tuple[int, ...]
    pyramid_layers: tuple[int, ...]
    image_size: int

    def __post_init__(self):
        if self.depth < 1 or self.embed_dim < 1 or self.heads < 1:
            raise ConfigError("depth, embed_dim and heads must be positive")
        if self.embed_dim % self.heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        for name, layers in (
            ("full_attention_layers", self.full_attention_layers),
            ("pyramid_layers", self.pyramid_layers),
        ):
            for i in layers:
                if not 1 <= i <= self.depth:
                    raise ConfigError(f"{name} index {i} outside [1, {self.depth}]")
        if self.window_size < 1 or self.image_size < 1:
            raise ConfigError("window_size and image_size must be positive")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    def layer_kinds(self) -> list[str]:
        full = set(self.full_attention_layers)
        return ["full" if i in full else "rvsa" for i in range(1, self.depth + 1)]


PRESETS: dict[str, RvsaConfig] = {
    "vitb-rvsa": RvsaConfig(12, 768, 12, 7, (3, 6, 9, 12), (4, 6, 8, 12), 14),
    "vitl-rvsa": RvsaConfig(24, 1024, 16, 7, (6, 12, 18, 24), (8, 12, 16, 24), 14),
    "toy": RvsaConfig(4, 32, 2, 4, (4,), (2, 4), 8),
}


def preset(name: str) -> RvsaConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; have {sorted(PRESETS)}") from None


# ---------------------------------------------------------------------------
# window geometry


@dataclass(frozen=True)
class WindowGrid:
    rows: int
    cols: int
    window_size: int
    feature_dims: tuple[int, int, int]


@dataclass(frozen=True)
class WindowParams:
    """Per-window, per-head affine parameters (effective scales, not deltas)."""

    s_x: float
    s_y: float
    o_x: float
    o_y: float
    theta: float


@dataclass(frozen=True)
class WindowCorners:
    """Upper-left / lower-right corner coordinates of an untransformed window."""

    x_l: float
    y_l: float
    x_r: float
    y_r: float

    @property
    def x_c(self) -> float:
        return (self.x_l + self.x_r) / 2.0

    @property
    def y_c(self) -> float:
        return (self.y_l + self.y_r) / 2.0

    @property
    def residuals(self) -> tuple[float, float, float, float]:
        """(x_l - x_c, y_l - y_c, x_r - x_c, y_r - y_c)."""
        return (
            self.x_l - self.x_c,
            self.y_l - self.y_c,
            self.x_r - self.x_c,
            self.y_r - self.y_c,
        )

    @classmethod
    def from_grid_cell(cls, row: int, col: int, s: int) -> "WindowCorners":
        return cls(
            x_l=float(col * s),
            y_l=float(row * s),
            x_r=float((col + 1) * s - 1),
            y_r=float((row + 1) * s - 1),
        )


@dataclass(frozen=True)
class AffineWindowMap:
    """The full window transform: p' = center + offset + R(theta) (r * scale)."""

    x_c: float
    y_c: float
    params: WindowParams

    def apply(self, r_x: float, r_y: float) -> tuple[float, float]:
        p = self.params
        ct, st = math.cos(p.theta), math.sin(p.theta)
        ax, ay = r_x * p.s_x, r_y * p.s_y
        return (
            self.x_c + p.o_x + ct * ax + st * ay,
            self.y_c + p.o_y - st * ax + ct * ay,
        )


def partition_windows(x: Tensor, s: int) -> tuple[WindowGrid, list[Tensor]]:
    """Split [C,H,W] into row-major non-overlapping [C,s,s] windows."""
    if x.data.ndim != 3:
        raise ShapeError(f"partition_windows: need [C,H,W], got shape {x.shape}")
    C, H, W = x.shape
    if H % s or W % s:
        raise ShapeError(f"window size {s} does not divide feature size {H}x{W}")
    rows, cols = H // s, W // s
    windows = [
        Tensor._wrap(np.ascontiguousarray(x.data[:, r * s : (r + 1) * s, c * s : (c + 1) * s]))
        for r in range(rows)
        for c in range(cols)
    ]
    return WindowGrid(rows, cols, s, (C, H, W)), windows


def merge_windows(grid: WindowGrid, windows: list[Tensor]) -> Tensor:
    """Inverse of partition_windows (row-major order)."""
    C, H, W = grid.feature_dims
    s = grid.window_size
    if len(windows) != grid.rows * grid.cols:
        raise ShapeError(
            f"expected {grid.rows * grid.cols} windows, got {len(windows)}"
        )
    out = np.empty((C, H, W), dtype=np.float64)
    for i, w in enumerate(windows):
        r, c = divmod(i, grid.cols)
        out[:, r * s : (r + 1) * s, c * s : (c + 1) * s] = w.data
    return Tensor._wrap(out)


def predict_window_params(
    x_w: Tensor, weight: Tensor, bias: Tensor, heads: int
) -> list[WindowParams]:
    """Per-head affine parameters from pooled window content.

    The linear head maps C pooled channels to 5 values per head laid out as
    (ds_x, ds_y, o_x, o_y, theta) with effective scales 1 + ds.
    """
    C = x_w.shape[0]
    if weight.shape != (5 * heads, C) or bias.shape != (5 * heads,):
        raise ShapeError(
            f"parameter head wants weight [5*{heads},{C}] and bias [5*{heads}], "
            f"got {weight.shape} and {bias.shape}"
        )
    pooled = ops.gap(x_w)
    act = ops.leaky_relu(pooled, LEAKY_SLOPE)
    raw = weight.data @ act.data + bias.data
    out = []
    for h in range(heads):
        ds_x, ds_y, o_x, o_y, theta = raw[5 * h : 5 * h + 5]
        out.append(WindowParams(1.0 + ds_x, 1.0 + ds_y, o_x, o_y, theta))
    return out


def transform_window(
    corners: WindowCorners, p: WindowParams
) -> tuple[tuple[float, float, float, float], AffineWindowMap]:
    """Transformed corner coordinates (x', y' for both corners) plus the map."""
    amap = AffineWindowMap(corners.x_c, corners.y_c, p)
    rxl, ryl, rxr, ryr = corners.residuals
    xl, yl = amap.apply(rxl, ryl)
    xr, yr = amap.apply(rxr, ryr)
    return (xl, yl, xr, yr), amap


def _lattice_residuals(corners: WindowCorners, s: int) -> tuple[np.ndarray, np.ndarray]:
    """Residuals of the s x s sample lattice spanning the window corners."""
    if s == 1:
        xs = np.array([corners.x_c])
        ys = np.array([corners.y_c])
    else:
        xs = corners.x_l + np.arange(s, dtype=np.float64) * ((corners.x_r - corners.x_l) / (s - 1))
        ys = corners.y_l + np.arange(s, dtype=np.float64) * ((corners.y_r - corners.y_l) / (s - 1))
    ry, rx = np.meshgrid(ys - corners.y_c, xs - corners.x_c, indexing="ij")
    return rx, ry


def sample_window(feature: Tensor, corners: WindowCorners, p: WindowParams, s: int) -> Tensor:
    """Bilinear s x s resampling of the transformed window from ``feature``.

    Out-of-bounds reads return 0. Identity parameters on a grid-aligned
    window reproduce the original lattice values bit-exactly.
    """
    if s < 1:
        raise ShapeError(f"sample_window: s must be >= 1, got {s}")
    rx, ry = _lattice_residuals(corners, s)
    op = sample_window_points_op(corners.x_c, corners.y_c, rx, ry)
    params = Tensor([p.s_x - 1.0, p.s_y - 1.0, p.o_x, p.o_y, p.theta])
    return op.forward(feature, params)


def window_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(C')) v over one window of tokens [n, C']."""
    if q.data.ndim != 2 or q.shape[1] != k.shape[1] or k.shape != v.shape:
        raise ShapeError(
            f"window_attention: incompatible shapes q={q.shape} k={k.shape} v={v.shape}"
        )
    return _window_attention_var(Var(q), Var(k), Var(v)).value


def _window_attention_var(q: Var, k: Var, v: Var) -> Var:
    return apply_op(ops.attention_op, q, k, v)


# ---------------------------------------------------------------------------
# attention sublayer (token-matrix in, token-matrix out)

ATTN_KEYS_RVSA = (
    "qkv.weight",
    "qkv.bias",
    "winparams.weight",
    "winparams.bias",
    "proj.weight",
    "proj.bias",
)
ATTN_KEYS_FULL = ("qkv.weight", "qkv.bias", "proj.weight", "proj.bias")


def _attention_tokens(
    x_tok: Var, h_size: int, w_size: int, wv: dict[str, Var], heads: int, s: int, kind: str
) -> Var:
    """kind: 'rvsa' (transformed windows), 'plain' (fixed windows), 'full'."""
    n, C = x_tok.value.shape
    if C % heads:
        raise ShapeError(f"channels {C} not divisible by heads {heads}")
    cp = C // heads
    qkv = v_linear_rows(x_tok, wv["qkv.weight"], wv["qkv.bias"])
    q = apply_op(slice_cols_op(0, C), qkv)
    k = apply_op(slice_cols_op(C, 2 * C), qkv)
    v = apply_op(slice_cols_op(2 * C, 3 * C), qkv)

    if kind == "full":
        outs = []
        for h in range(heads):
            lo, hi = h * cp, (h + 1) * cp
            outs.append(
                _window_attention_var(
                    apply_op(slice_cols_op(lo, hi), q),
                    apply_op(slice_cols_op(lo, hi), k),
                    apply_op(slice_cols_op(lo, hi), v),
                )
            )
        merged = apply_op(concat_cols_op(heads), *outs)
        return v_linear_rows(merged, wv["proj.weight"], wv["proj.bias"])

    if h_size % s or w_size % s:
        raise ShapeError(f"window size {s} does not divide feature size {h_size}x{w_size}")
    rows, cols = h_size // s, w_size // s
    to_map = tokens_to_chw_op(h_size, w_size)
    q_map = apply_op(to_map, q)
    k_map = apply_op(to_map, k)
    v_map = apply_op(to_map, v)
    x_map = apply_op(to_map, x_tok)

    window_outs = []
    for r in range(rows):
        for c in range(cols):
            win = extract_window_op(r * s, c * s, s)
            q_tok_w = apply_op(chw_to_tokens_op, apply_op(win, q_map))
            raw_params = None
            if kind == "rvsa":
                pooled = apply_op(gap_op, apply_op(win, x_map))
                act = apply_op(leaky_relu_op(LEAKY_SLOPE), pooled)
                row_vec = apply_op(reshape_op((1, C)), act)
                raw = v_linear_rows(row_vec, wv["winparams.weight"], wv["winparams.bias"])
                raw_params = apply_op(reshape_op((5 * heads,)), raw)
            corners = WindowCorners.from_grid_cell(r, c, s)
            rx, ry = _lattice_residuals(corners, s)
            if kind == "rvsa":
                kv_op = ops.window_kv_sample_op(corners.x_c, corners.y_c, rx, ry, heads)
                kv_tok = apply_op(
                    chw_to_tokens_op, apply_op(kv_op, k_map, v_map, raw_params)
                )
            else:
                k_tok_w = apply_op(chw_to_tokens_op, apply_op(win, k_map))
                v_tok_w = apply_op(chw_to_tokens_op, apply_op(win, v_map))
            head_outs = []
            for h in range(heads):
                lo, hi = h * cp, (h + 1) * cp
                qh = apply_op(slice_cols_op(lo, hi), q_tok_w)
                if kind == "rvsa":
                    kh = apply_op(slice_cols_op(lo, hi), kv_tok)
                    vh = apply_op(slice_cols_op(C + lo, C + hi), kv_tok)
                else:
                    kh = apply_op(slice_cols_op(lo, hi), k_tok_w)
                    vh = apply_op(slice_cols_op(lo, hi), v_tok_w)
                head_outs.append(_window_attention_var(qh, kh, vh))
            w_tok = apply_op(concat_cols_op(heads), *head_outs)
            window_outs.append(apply_op(tokens_to_chw_op(s, s), w_tok))
    merged_map = apply_op(merge_windows_op(rows, cols, s), *window_outs)
    merged = apply_op(chw_to_tokens_op, merged_map)
    return v_linear_rows(merged, wv["proj.weight"], wv["proj.bias"])


def _layer_weight_names(kind: str) -> tuple[str, ...]:
    return ATTN_KEYS_RVSA if kind == "rvsa" else ATTN_KEYS_FULL


def init_attention_weights(
    embed_dim: int, heads: int, rng: Rng, kind: str = "rvsa", init_scale: float = 0.02
) -> dict[str, Tensor]:
    """Attention sublayer weights; parameter-prediction head starts at zero."""
    C = embed_dim
    w: dict[str, Tensor] = {
        "qkv.weight": Tensor._wrap(rng.normals((3 * C, C)) * init_scale),
        "qkv.bias": Tensor.zeros((3 * C,)),
    }
    if kind == "rvsa":
        w["winparams.weight"] = Tensor.zeros((5 * heads, C))
        w["winparams.bias"] = Tensor.zeros((5 * heads,))
    w["proj.weight"] = Tensor._wrap(rng.normals((C, C)) * init_scale)
    w["proj.bias"] = Tensor.zeros((C,))
    return w


def _run_attention_layer(x: Tensor, weights: dict[str, Tensor], heads: int, s: int, kind: str) -> Tensor:
    if x.data.ndim != 3:
        raise ShapeError(f"attention layer: need [C,H,W], got shape {x.shape}")
    C, H, W = x.shape
    wv = leaves_of(weights)
    x_tok = apply_op(chw_to_tokens_op, Var(x))
    out = _attention_tokens(x_tok, H, W, wv, heads, s, kind)
    return apply_op(tokens_to_chw_op(H, W), out).value


def rvsa_layer(x: Tensor, weights: dict[str, Tensor], heads: int, s: int) -> Tensor:
    """One rotated varied-size window attention sublayer on a [C,H,W] map."""
    return _run_attention_layer(x, weights, heads, s, "rvsa")


def plain_window_layer(x: Tensor, weights: dict[str, Tensor], heads: int, s: int) -> Tensor:
    """Reference windowed attention without window transforms (same weights)."""
    return _run_attention_layer(x, weights, heads, s, "plain")


# ---------------------------------------------------------------------------
# backbone


def backbone_weight_names(cfg: RvsaConfig) -> list[str]:
    names = []
    kinds = cfg.layer_kinds()
    for i in range(1, cfg.depth + 1):
        pre = f"layer{i:02d}"
        names += [f"{pre}.norm1.gain", f"{pre}.norm1.bias"]
        names += [f"{pre}.attn.{k}" for k in _layer_weight_names(kinds[i - 1])]
        names += [f"{pre}.norm2.gain", f"{pre}.norm2.bias"]
        names += [
            f"{pre}.mlp.fc1.weight",
            f"{pre}.mlp.fc1.bias",
            f"{pre}.mlp.fc2.weight",
            f"{pre}.mlp.fc2.bias",
        ]
    return names


def init_backbone(cfg: RvsaConfig, rng: Rng, init_scale: float = 0.02) -> dict[str, Tensor]:
    """Backbone weights under the flat ``layerNN.*`` naming scheme."""
    C = cfg.embed_dim
    hidden = 4 * C
    weights: dict[str, Tensor] = {}
    kinds = cfg.layer_kinds()
    for i in range(1, cfg.depth + 1):
        pre = f"layer{i:02d}"
        lrng = rng.derive(i)
        weights[f"{pre}.norm1.gain"] = Tensor.full((C,), 1.0)
        weights[f"{pre}.norm1.bias"] = Tensor.zeros((C,))
        for k, t in init_attention_weights(C, cfg.heads, lrng.derive(1), kinds[i - 1], init_scale).items():
            weights[f"{pre}.attn.{k}"] = t
        weights[f"{pre}.norm2.gain"] = Tensor.full((C,), 1.0)
        weights[f"{pre}.norm2.bias"] = Tensor.zeros((C,))
        mrng = lrng.derive(2)
        weights[f"{pre}.mlp.fc1.weight"] = Tensor._wrap(mrng.normals((hidden, C)) * init_scale)
        weights[f"{pre}.mlp.fc1.bias"] = Tensor.zeros((hidden,))
        weights[f"{pre}.mlp.fc2.weight"] = Tensor._wrap(mrng.normals((C, hidden)) * init_scale)
        weights[f"{pre}.mlp.fc2.bias"] = Tensor.zeros((C,))
    return weights


_LN = layer_norm_rows_op()


def backbone_tokens(
    x: Var, h_size: int, w_size: int, cfg: RvsaConfig, wv: dict[str, Var]
) -> list[tuple[Var, int, int]]:
    """Run all blocks on a token matrix; returns (tokens, H, W) per pyramid tap."""
    kinds = cfg.layer_kinds()
    taps: list[tuple[Var, int, int]] = []
    tok = x
    for i in range(1, cfg.depth + 1):
        pre = f"layer{i:02d}"
        sub = {k: wv[f"{pre}.attn.{k}"] for k in _layer_weight_names(kinds[i - 1])}
        normed = apply_op(_LN, tok, wv[f"{pre}.norm1.gain"], wv[f"{pre}.norm1.bias"])
        tok = v_add(tok, _attention_tokens(normed, h_size, w_size, sub, cfg.heads, cfg.window_size, kinds[i - 1]))
        normed = apply_op(_LN, tok, wv[f"{pre}.norm2.gain"], wv[f"{pre}.norm2.bias"])
        hidden = apply_op(gelu_op, v_linear_rows(normed, wv[f"{pre}.mlp.fc1.weight"], wv[f"{pre}.mlp.fc1.bias"]))
        tok = v_add(tok, v_linear_rows(hidden, wv[f"{pre}.mlp.fc2.weight"], wv[f"{pre}.mlp.fc2.bias"]))
        if i in cfg.pyramid_layers:
            taps.append((tok, h_size, w_size))
    return taps


def backbone_forward(features: Tensor, cfg: RvsaConfig, weights: dict[str, Tensor]) -> list[Tensor]:
    """Full backbone pass over a [C,H,W] feature map; returns the pyramid.

    Pyramid entries are collected after each layer index in
    ``cfg.pyramid_layers``, ascending, all shaped like the input.
    """
    if features.data.ndim != 3:
        raise ShapeError(f"backbone_forward: need [C,H,W], got shape {features.shape}")
    C, H, W = features.shape
    if C != cfg.embed_dim:
        raise ConfigError(f"feature channels {C} != embed_dim {cfg.embed_dim}")
    if H % cfg.window_size or W % cfg.window_size:
        raise ShapeError(
            f"window size {cfg.window_size} does not divide feature size {H}x{W}"
        )
    missing = [n for n in backbone_weight_names(cfg) if n not in weights]
    if missing:
        raise ConfigError(f"backbone weights missing keys: {missing[:4]}...")
    wv = leaves_of(weights)
    tok = apply_op(chw_to_tokens_op, Var(features))
    taps = backbone_tokens(tok, H, W, cfg, wv)
    return [apply_op(tokens_to_chw_op(h, w), t).value for t, h, w in taps]


# ---------------------------------------------------------------------------
# gradient-check registrations


def _layer_case_inputs(rng: Rng):
    C, H, W, heads, s = 8, 4, 4, 2, 2
    x = Tensor._wrap(rng.normals((C, H, W)))
    qkv_w = Tensor._wrap(rng.normals((3 * C, C)) * 0.4)
    qkv_b = Tensor._wrap(rng.normals((3 * C,)) * 0.1)
    win_w = Tensor._wrap(rng.normals((5 * heads, C)) * 0.2)
    win_b = Tensor._wrap(rng.normals((5 * heads,)) * 0.1)
    proj_w = Tensor._wrap(rng.normals((C, C)) * 0.4)
    proj_b = Tensor._wrap(rng.normals((C,)) * 0.1)
    return (x, qkv_w, qkv_b, win_w, win_b, proj_w, proj_b), (C, H, W, heads, s)


def _rvsa_layer_composite(heads: int, s: int, h_size: int, w_size: int):
    def fn(x, qkv_w, qkv_b, win_w, win_b, proj_w, proj_b):
        wv = {
            "qkv.weight": qkv_w,
            "qkv.bias": qkv_b,
            "winparams.weight": win_w,
            "winparams.bias": win_b,
            "proj.weight": proj_w,
            "proj.bias": proj_b,
        }
        tok = apply_op(chw_to_tokens_op, x)
        out = _attention_tokens(tok, h_size, w_size, wv, heads, s, "rvsa")
        return apply_op(tokens_to_chw_op(h_size, w_size), out)

    return composite("rvsa_layer", fn)


def _rvsa_layer_case(rng: Rng):
    inputs, (C, H, W, heads, s) = _layer_case_inputs(rng)
    return _rvsa_layer_composite(heads, s, H, W), inputs


def _window_attention_case(rng: Rng):
    op = composite("window_attention", _window_attention_var)
    q = Tensor._wrap(rng.normals((4, 2)))
    k = Tensor._wrap(rng.normals((4, 2)))
    v = Tensor._wrap(rng.normals((4, 2)))
    return op, (q, k, v)


register_case("window_attention", _window_attention_case)
register_case("rvsa_layer", _rvsa_layer_case)
