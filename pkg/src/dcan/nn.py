"""Layers: dilated 1-D convolution, 2-D (transposed) convolution, temporal
normalization, and fan-in scaled parameter initialization.

Convolutions are lowered to a single GEMM over an im2col buffer; the
matching col2im scatter is reused both for the input gradient of a
convolution and for the forward pass of a transposed convolution, so the
two are exact adjoints of each other.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import (
    ContractError,
    ShapeError,
    Tensor,
    _record,
    expand,
    matmul,
    read_tensor,
    relu,
    sigmoid,
    write_tensor,
)

__all__ = [
    "Module",
    "Conv1d",
    "Conv2d",
    "Deconv2d",
    "TemporalNorm",
    "Linear",
    "conv1d",
    "conv2d",
    "deconv2d",
    "norm",
    "relu",
    "sigmoid",
    "he_uniform",
    "init_parameters",
    "save_checkpoint",
    "load_checkpoint",
]


# ---------------------------------------------------------------------------
# im2col / col2im


def _im2col1d(xp: np.ndarray, k: int, dilation: int, length: int) -> np.ndarray:
    # (B, C, T + pad) -> (B, C*k, T)
    b, c, _ = xp.shape
    cols = np.stack([xp[:, :, i * dilation : i * dilation + length] for i in range(k)], axis=2)
    return cols.reshape(b, c * k, length)


def _col2im1d(cols: np.ndarray, c: int, k: int, dilation: int, length: int, padded: int) -> np.ndarray:
    b = cols.shape[0]
    cols = cols.reshape(b, c, k, length)
    xp = np.zeros((b, c, padded))
    for i in range(k):
        xp[:, :, i * dilation : i * dilation + length] += cols[:, :, i]
    return xp


def _im2col2d(xp: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, int, int]:
    # (B, C, Hp, Wp) -> (B, C*k*k, Ho*Wo)
    b, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * k * k, ho * wo)
    return cols, ho, wo


def _col2im2d(cols: np.ndarray, c: int, k: int, stride: int, ho: int, wo: int, hp: int, wp: int) -> np.ndarray:
    b = cols.shape[0]
    cols = cols.reshape(b, c, k, k, ho, wo)
    xp = np.zeros((b, c, hp, wp))
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            xp[:, :, i : i + hspan : stride, j : j + wspan : stride] += cols[:, :, i, j]
    return xp


# ---------------------------------------------------------------------------
# Functional ops


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, dilation: int = 1) -> Tensor:
    """Length-preserving dilated cross-correlation, stride 1, zero padding."""
    if x.ndim != 3:
        raise ShapeError(f"conv1d expects (B, C, T), got {x.shape}")
    cout, cin, k = weight.shape
    if x.shape[1] != cin:
        raise ShapeError(f"conv1d: input has {x.shape[1]} channels, weight expects {cin}")
    if k % 2 == 0 or dilation < 1:
        raise ContractError("conv1d needs an odd kernel and dilation >= 1")
    bsz, _, length = x.shape
    pad = dilation * (k - 1) // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad)))
    cols = _im2col1d(xp, k, dilation, length)
    wm = weight.data.reshape(cout, cin * k)
    out = np.matmul(wm, cols)
    if bias is not None:
        out += bias.data[None, :, None]

    def back(g):
        gx = gw = gb = None
        if x.requires_grad:
            dcols = np.matmul(wm.T, g)
            gx = _col2im1d(dcols, cin, k, dilation, length, length + 2 * pad)[:, :, pad : pad + length]
        if weight.requires_grad:
            gw = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        return gx, gw, gb

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return _record(out, parents, back, "conv1d")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int | None = None) -> Tensor:
    """2-D cross-correlation with square kernel; ``padding`` defaults to length-preserving."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects (B, C, H, W), got {x.shape}")
    cout, cin, k, k2 = weight.shape
    if k != k2 or x.shape[1] != cin:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    pad = (k - 1) // 2 if padding is None else padding
    bsz, _, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols, ho, wo = _im2col2d(xp, k, stride)
    wm = weight.data.reshape(cout, cin * k * k)
    out = np.matmul(wm, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(bsz, cout, ho, wo)

    def back(g):
        g = g.reshape(bsz, cout, ho * wo)
        gx = gw = gb = None
        if x.requires_grad:
            dcols = np.matmul(wm.T, g)
            dxp = _col2im2d(dcols, cin, k, stride, ho, wo, h + 2 * pad, w + 2 * pad)
            gx = dxp[:, :, pad : pad + h, pad : pad + w]
        if weight.requires_grad:
            gw = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        return gx, gw, gb

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return _record(out, parents, back, "conv2d")


def deconv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2, padding: int = 1) -> Tensor:
    """Transposed convolution; weight is (C_in, C_out, k, k).

    With k=4, stride=2, padding=1 the output is exactly (2H, 2W).
    """
    if x.ndim != 4:
        raise ShapeError(f"deconv2d expects (B, C, H, W), got {x.shape}")
    cin, cout, k, _ = weight.shape
    if x.shape[1] != cin:
        raise ShapeError(f"deconv2d: input has {x.shape[1]} channels, weight expects {cin}")
    bsz, _, h, w = x.shape
    hp, wp = stride * (h - 1) + k, stride * (w - 1) + k
    ho, wo = hp - 2 * padding, wp - 2 * padding
    wm = weight.data.reshape(cin, cout * k * k)
    xm = x.data.reshape(bsz, cin, h * w)
    cols = np.matmul(wm.T, xm)
    out = _col2im2d(cols, cout, k, stride, h, w, hp, wp)[:, :, padding : padding + ho, padding : padding + wo]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def back(g):
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        gcols, _, _ = _im2col2d(gp, k, stride)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.matmul(wm, gcols).reshape(x.shape)
        if weight.requires_grad:
            gw = np.tensordot(xm, gcols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return _record(out, parents, back, "deconv2d")


def norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize each (sample, channel) over the temporal axis, then apply affine."""
    if x.ndim != 3:
        raise ShapeError(f"norm expects (B, C, T), got {x.shape}")
    length = x.shape[2]
    if length < 2:
        raise ContractError("norm needs T >= 2 for a defined variance")
    mu = x.data.mean(axis=2, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=2, keepdims=True) + eps)
    xhat = xc * inv
    s = scale.data[None, :, None]
    out = s * xhat + shift.data[None, :, None]

    def back(g):
        gx = None
        if x.requires_grad:
            dxhat = g * s
            gx = inv / length * (
                length * dxhat
                - dxhat.sum(axis=2, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=2, keepdims=True)
            )
        gs = (g * xhat).sum(axis=(0, 2)) if scale.requires_grad else None
        gh = g.sum(axis=(0, 2)) if shift.requires_grad else None
        return gx, gs, gh

    return _record(out, (x, scale, shift), back, "norm")


# ---------------------------------------------------------------------------
# Initialization


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_parameters(shapes: dict[str, tuple[int, ...]], seed: int) -> "OrderedDict[str, Tensor]":
    """He-uniform weights for every named shape, drawn in key order from one seeded stream.

    1-D shapes are treated as biases and start at zero.
    """
    rng = np.random.default_rng(seed)
    params: OrderedDict[str, Tensor] = OrderedDict()
    for name, shape in shapes.items():
        if len(shape) == 1:
            params[name] = Tensor(np.zeros(shape), requires_grad=True)
        else:
            fan_in = int(np.prod(shape[1:]))
            params[name] = Tensor(he_uniform(rng, shape, fan_in), requires_grad=True)
    return params


# ---------------------------------------------------------------------------
# Layers


class Module:
    """Minimal parameter container; children are discovered in attribute order."""

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_layers(self, prefix: str = ""):
        yield prefix.rstrip("."), self
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_layers(f"{prefix}{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_layers(f"{prefix}{key}.{i}.")

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, kernel: int = 3, dilation: int = 1):
        if dilation < 1:
            raise ContractError("dilation must be >= 1")
        self.kernel = kernel
        self.dilation = dilation
        self.weight = Tensor(he_uniform(rng, (c_out, c_in, kernel), c_in * kernel), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv1d(x, self.weight, self.bias, self.dilation)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, kernel: int = 3):
        self.kernel = kernel
        self.weight = Tensor(he_uniform(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias)


class Deconv2d(Module):
    """Exact x2 upsampling: kernel 4, stride 2, padding 1."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        # fan-in of a stride-2 k=4 transposed conv: each output sees c_in * (4/2)^2 taps
        self.weight = Tensor(he_uniform(rng, (c_in, c_out, 4, 4), c_in * 4), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return deconv2d(x, self.weight, self.bias, stride=2, padding=1)


class TemporalNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        self.eps = eps
        self.scale = Tensor(np.ones(channels), requires_grad=True)
        self.shift = Tensor(np.zeros(channels), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return norm(x, self.scale, self.shift, self.eps)


class Linear(Module):
    """Affine map over the last axis of a 2-D input."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.weight = Tensor(he_uniform(rng, (d_in, d_out), d_in), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        out = matmul(x, self.weight)
        return out + expand(self.bias.reshape(1, -1), out.shape)


# ---------------------------------------------------------------------------
# Checkpoints: params.bin (concatenated tensor records) + manifest.json


def _layer_types(module: Module) -> dict[str, str]:
    types = {}
    for prefix, layer in module.named_layers():
        for key, value in vars(layer).items():
            if isinstance(value, Tensor) and value.requires_grad:
                types[f"{prefix}.{key}" if prefix else key] = type(layer).__name__
    return types


def save_checkpoint(module: Module, directory, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    types = _layer_types(module)
    entries = []
    with open(directory / "params.bin", "wb") as fh:
        for name, p in module.named_parameters():
            write_tensor(fh, p)
            entries.append({"name": name, "shape": list(p.shape), "layer": types.get(name, "")})
    manifest = {"format": "DCTN", "params": entries}
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(module: Module, directory) -> dict:
    """Load parameters in place; returns the manifest."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    params = OrderedDict(module.named_parameters())
    names = [e["name"] for e in manifest["params"]]
    if names != list(params):
        raise ShapeError("checkpoint parameter names do not match the model")
    with open(directory / "params.bin", "rb") as fh:
        for entry in manifest["params"]:
            arr = read_tensor(fh)
            target = params[entry["name"]]
            if arr.shape != target.shape:
                raise ShapeError(f"{entry['name']}: checkpoint {arr.shape} vs model {target.shape}")
            target.data = arr.copy()
    return manifest
