"""Layer zoo: shape rules, parameter units, forward and backward passes.

Each layer kind is intentionally small: dense, conv2d (stride 1, no
padding), relu, flatten and a softmax head.  A "parameter unit" is one
learnable tensor; weight and bias of the same layer are separate units so
that conflict scores and surgery operate at the finest unambiguous
granularity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatchError

LAYER_KINDS = ("dense", "conv2d", "relu", "flatten", "softmax")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    fan_in: int = 0
    fan_out: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    has_bias: bool = True

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "dense":
            d.update(fan_in=self.fan_in, fan_out=self.fan_out, has_bias=self.has_bias)
        elif self.kind == "conv2d":
            d.update(
                in_channels=self.in_channels,
                out_channels=self.out_channels,
                kernel=self.kernel,
                has_bias=self.has_bias,
            )
        return d

    @staticmethod
    def from_dict(d: dict) -> "LayerSpec":
        return LayerSpec(**d)


def dense(fan_in: int, fan_out: int, bias: bool = True) -> LayerSpec:
    return LayerSpec("dense", fan_in=fan_in, fan_out=fan_out, has_bias=bias)


def conv2d(in_channels: int, out_channels: int, kernel: int, bias: bool = True) -> LayerSpec:
    return LayerSpec(
        "conv2d", in_channels=in_channels, out_channels=out_channels, kernel=kernel, has_bias=bias
    )


def relu() -> LayerSpec:
    return LayerSpec("relu", has_bias=False)


def flatten() -> LayerSpec:
    return LayerSpec("flatten", has_bias=False)


def softmax() -> LayerSpec:
    return LayerSpec("softmax", has_bias=False)


def output_shape(layer: LayerSpec, in_shape: tuple, where: str) -> tuple:
    """Shape of one example after the layer; raises ShapeMismatchError naming `where`."""
    if layer.kind == "dense":
        if in_shape != (layer.fan_in,):
            raise ShapeMismatchError(
                f"{where}: dense expects input shape ({layer.fan_in},), got {in_shape}"
            )
        return (layer.fan_out,)
    if layer.kind == "conv2d":
        if len(in_shape) != 3 or in_shape[0] != layer.in_channels:
            raise ShapeMismatchError(
                f"{where}: conv2d expects (C={layer.in_channels}, H, W), got {in_shape}"
            )
        _, h, w = in_shape
        k = layer.kernel
        if h < k or w < k:
            raise ShapeMismatchError(f"{where}: kernel {k} larger than input {h}x{w}")
        return (layer.out_channels, h - k + 1, w - k + 1)
    if layer.kind == "relu":
        return in_shape
    if layer.kind == "flatten":
        return (int(np.prod(in_shape)),)
    if layer.kind == "softmax":
        if len(in_shape) != 1:
            raise ShapeMismatchError(f"{where}: softmax expects a vector, got {in_shape}")
        return in_shape
    raise AssertionError(layer.kind)


def param_shapes(layer: LayerSpec) -> dict[str, tuple]:
    """Parameter units owned by a layer, keyed by local name."""
    if layer.kind == "dense":
        shapes = {"weight": (layer.fan_out, layer.fan_in)}
        if layer.has_bias:
            shapes["bias"] = (layer.fan_out,)
        return shapes
    if layer.kind == "conv2d":
        shapes = {"weight": (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)}
        if layer.has_bias:
            shapes["bias"] = (layer.out_channels,)
        return shapes
    return {}


def weight_fan_in(layer: LayerSpec) -> int:
    if layer.kind == "dense":
        return layer.fan_in
    if layer.kind == "conv2d":
        return layer.in_channels * layer.kernel * layer.kernel
    return 0


def forward(layer: LayerSpec, params: dict[str, np.ndarray], x: np.ndarray):
    """Run one layer on a batch. Returns (output, cache-for-backward)."""
    if layer.kind == "dense":
        y = x @ params["weight"].T
        if layer.has_bias:
            y = y + params["bias"]
        return y, x
    if layer.kind == "conv2d":
        y, cols = _conv_forward(x, params["weight"])
        if layer.has_bias:
            y = y + params["bias"][None, :, None, None]
        return y, (x.shape, cols)
    if layer.kind == "relu":
        return np.maximum(x, 0.0), x
    if layer.kind == "flatten":
        return x.reshape(x.shape[0], -1), x.shape
    if layer.kind == "softmax":
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=1, keepdims=True)
        return p, p
    raise AssertionError(layer.kind)


def backward(layer: LayerSpec, params: dict[str, np.ndarray], cache, dy: np.ndarray):
    """Backward pass of one layer. Returns (dx, grads keyed like params)."""
    if layer.kind == "dense":
        x = cache
        grads = {"weight": dy.T @ x}
        if layer.has_bias:
            grads["bias"] = dy.sum(axis=0)
        return dy @ params["weight"], grads
    if layer.kind == "conv2d":
        x_shape, cols = cache
        return _conv_backward(dy, cols, params["weight"], x_shape, layer.has_bias)
    if layer.kind == "relu":
        x = cache
        return dy * (x > 0.0), {}
    if layer.kind == "flatten":
        return dy.reshape(cache), {}
    if layer.kind == "softmax":
        p = cache
        inner = (dy * p).sum(axis=1, keepdims=True)
        return p * (dy - inner), {}
    raise AssertionError(layer.kind)


def _conv_forward(x: np.ndarray, w: np.ndarray):
    # x: (N, C, H, W), w: (F, C, k, k); stride 1, no padding.
    n = x.shape[0]
    f, c, k, _ = w.shape
    windows = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    # windows: (N, C, Ho, Wo, k, k) -> cols (N, Ho, Wo, C*k*k)
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, windows.shape[2], windows.shape[3], c * k * k)
    y = cols @ w.reshape(f, -1).T  # (N, Ho, Wo, F)
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2)), cols


def _conv_backward(dy: np.ndarray, cols: np.ndarray, w: np.ndarray, x_shape, has_bias: bool):
    n, f, ho, wo = dy.shape
    _, c, h, width = x_shape
    k = w.shape[2]
    dy_cols = dy.transpose(0, 2, 3, 1)  # (N, Ho, Wo, F)
    dw = np.einsum("nhwf,nhwc->fc", dy_cols, cols).reshape(w.shape)
    grads = {"weight": dw}
    if has_bias:
        grads["bias"] = dy.sum(axis=(0, 2, 3))
    dcols = dy_cols @ w.reshape(f, -1)  # (N, Ho, Wo, C*k*k)
    dcols = dcols.reshape(n, ho, wo, c, k, k)
    dx = np.zeros((n, c, h, width), dtype=np.float64)
    for di in range(k):
        for dj in range(k):
            dx[:, :, di : di + ho, dj : dj + wo] += dcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
    return dx, grads
