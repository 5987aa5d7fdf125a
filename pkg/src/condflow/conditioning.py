"""Networks that turn the conditioning input x into flow-layer weights.

Three shapes of network are built here:

* a six-layer stack (three downscaling convolutions, then three fully
  connected layers) whose output parameterizes either an actnorm layer
  (2c values: log-scale and bias) or a channel-mixing matrix (c*c values
  added to the identity);
* a three-layer feature extractor producing a spatial conditioning map
  x_r that matches the coupling input's resolution;
* a three-convolution coupling network mapping (v1, x_r) to the scale
  and shift applied to the second channel half.

The final layer of every network is zero-initialized so an untrained
model is the identity flow; interior layers use uniform fan-in init.
Downscaling convolutions derive stride from the size ratio and kernel
from 2*padding + stride, so the spatial map is exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .layers import ActnormWeights, ConvWeights, CouplingOutput
from .tensor import (NumericsError, Parameter, Tensor, concat_channels, conv2d,
                     matmul, slice_channels)


@dataclass
class DownscaleSpec:
    """Conv geometry for an exact in_size -> out_size spatial reduction."""
    in_size: int
    out_size: int
    stride: int
    kernel: int
    padding: int


def downscale_spec(in_size: int, out_size: int, padding: int = 1) -> DownscaleSpec:
    if in_size <= 0 or out_size <= 0:
        raise ValueError("sizes must be positive")
    if in_size % out_size != 0:
        raise ValueError(f"cannot downscale {in_size} -> {out_size}: not an integer ratio")
    stride = in_size // out_size
    kernel = 2 * padding + stride
    return DownscaleSpec(in_size, out_size, stride, kernel, padding)


def _downscale_sizes(size: int) -> list[int]:
    """Output sizes for the three conv layers, shrinking toward 4."""
    if size >= 8 and size % 4 == 0:
        ratio = size // 4
        factors = [1, 1, 1]
        i = 0
        while ratio > 1:
            d = 2
            while ratio % d:
                d += 1
            factors[i % 3] *= d
            ratio //= d
            i += 1
        factors.sort(reverse=True)
        sizes = []
        s = size
        for f in factors:
            s //= f
            sizes.append(s)
        return sizes
    sizes = []
    s = size
    for _ in range(3):
        if s % 2 == 0 and s > 4:
            s //= 2
        sizes.append(s)
    return sizes


@dataclass
class ConvSpec:
    weight: Parameter  # (kh, kw, cin, cout)
    bias: Parameter    # (1, cout)
    stride: tuple[int, int]
    padding: tuple[int, int]
    relu: bool


@dataclass
class FCSpec:
    weight: Parameter  # (nin, nout)
    bias: Parameter    # (1, nout)
    relu: bool


@dataclass
class CNParams:
    """An ordered stack of conv / fully-connected layers."""
    layers: list[Union[ConvSpec, FCSpec]] = field(default_factory=list)


def _register(registry: dict, name: str, value: np.ndarray) -> Parameter:
    if name in registry:
        raise ValueError(f"duplicate parameter name {name!r}")
    p = Parameter(name, value)
    registry[name] = p
    return p


def _kaiming(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / max(fan_in, 1))
    return rng.uniform(-limit, limit, size=shape)


def _conv_layer(registry, rng, name, kh, kw, cin, cout, stride, padding,
                relu, zero) -> ConvSpec:
    shape = (kh, kw, cin, cout)
    wdata = np.zeros(shape) if zero else _kaiming(rng, shape, kh * kw * cin)
    w = _register(registry, name + ".w", wdata)
    b = _register(registry, name + ".b", np.zeros((1, cout)))
    return ConvSpec(w, b, stride, padding, relu)


def _fc_layer(registry, rng, name, nin, nout, relu, zero) -> FCSpec:
    wdata = np.zeros((nin, nout)) if zero else _kaiming(rng, (nin, nout), nin)
    w = _register(registry, name + ".w", wdata)
    b = _register(registry, name + ".b", np.zeros((1, nout)))
    return FCSpec(w, b, relu)


def build_cn_stack6(x_shape: tuple[int, int, int], out_width: int, n_c: int,
                    n_w: int, rng: np.random.Generator, prefix: str,
                    registry: dict) -> CNParams:
    """Three downscaling convs (n_c channels) then three FC layers (n_w wide);
    the last FC has out_width outputs and is zero-initialized."""
    xh, xw, xc = x_shape
    hs = _downscale_sizes(xh)
    ws = _downscale_sizes(xw)
    layers: list[Union[ConvSpec, FCSpec]] = []
    ch, cw, cin = xh, xw, xc
    for i in range(3):
        sh = downscale_spec(ch, hs[i], padding=1)
        sw = downscale_spec(cw, ws[i], padding=1)
        layers.append(_conv_layer(registry, rng, f"{prefix}.conv{i}",
                                  sh.kernel, sw.kernel, cin, n_c,
                                  (sh.stride, sw.stride), (1, 1),
                                  relu=True, zero=False))
        ch, cw, cin = hs[i], ws[i], n_c
    nin = ch * cw * n_c
    layers.append(_fc_layer(registry, rng, f"{prefix}.fc0", nin, n_w, relu=True, zero=False))
    layers.append(_fc_layer(registry, rng, f"{prefix}.fc1", n_w, n_w, relu=True, zero=False))
    layers.append(_fc_layer(registry, rng, f"{prefix}.fc2", n_w, out_width, relu=False, zero=True))
    return CNParams(layers)


def build_feature_cn(x_shape: tuple[int, int, int], target_hw: tuple[int, int],
                     channels: int, rng: np.random.Generator, prefix: str,
                     registry: dict) -> CNParams:
    """3x3 conv, downscaling conv to the target resolution, zero-init 3x3 conv."""
    xh, xw, xc = x_shape
    th, tw = target_hw
    sh = downscale_spec(xh, th, padding=1)
    sw = downscale_spec(xw, tw, padding=1)
    layers = [
        _conv_layer(registry, rng, f"{prefix}.conv0", 3, 3, xc, channels,
                    (1, 1), (1, 1), relu=True, zero=False),
        _conv_layer(registry, rng, f"{prefix}.conv1", sh.kernel, sw.kernel,
                    channels, channels, (sh.stride, sw.stride), (1, 1),
                    relu=True, zero=False),
        _conv_layer(registry, rng, f"{prefix}.conv2", 3, 3, channels, channels,
                    (1, 1), (1, 1), relu=False, zero=True),
    ]
    return CNParams(layers)


def build_coupling_nn(in_channels: int, hidden: int, out_channels: int,
                      rng: np.random.Generator, prefix: str,
                      registry: dict) -> CNParams:
    """Three 3x3 stride-1 convs; the last is zero-initialized and linear."""
    layers = [
        _conv_layer(registry, rng, f"{prefix}.conv0", 3, 3, in_channels, hidden,
                    (1, 1), (1, 1), relu=True, zero=False),
        _conv_layer(registry, rng, f"{prefix}.conv1", 3, 3, hidden, hidden,
                    (1, 1), (1, 1), relu=True, zero=False),
        _conv_layer(registry, rng, f"{prefix}.conv2", 3, 3, hidden, out_channels,
                    (1, 1), (1, 1), relu=False, zero=True),
    ]
    return CNParams(layers)


def apply_cn(x: Tensor, cn: CNParams) -> Tensor:
    """Run the layer stack; flattens (h, w, c) -> (1, h*w*c) at the first FC."""
    t = x
    for layer in cn.layers:
        if isinstance(layer, FCSpec):
            if t.data.ndim == 3:
                t = t.reshape(1, t.size)
            t = matmul(t, layer.weight) + layer.bias
        else:
            t = conv2d(t, layer.weight, stride=layer.stride, padding=layer.padding)
            t = t + layer.bias
        if layer.relu:
            t = t.relu()
    return t


def cn_actnorm(x: Tensor, cn: CNParams, channels: int) -> ActnormWeights:
    """First half of the 2c outputs is the log-scale, second half the bias."""
    raw = apply_cn(x, cn)
    if raw.shape != (1, 2 * channels):
        raise ValueError(f"actnorm network produced {raw.shape}, "
                         f"expected (1, {2 * channels})")
    s = slice_channels(raw, 0, channels).exp()
    b = slice_channels(raw, channels, 2 * channels)
    return ActnormWeights(s, b)


def cn_conv(x: Tensor, cn: CNParams, channels: int) -> ConvWeights:
    """W = I + M where M is the c*c network output; zero output gives W = I."""
    raw = apply_cn(x, cn)
    if raw.shape != (1, channels * channels):
        raise ValueError(f"conv network produced {raw.shape}, "
                         f"expected (1, {channels * channels})")
    m = raw.reshape(channels, channels)
    return ConvWeights(Tensor(np.eye(channels)) + m)


def cn_coupling_features(x: Tensor, cn: CNParams,
                         target_hw: tuple[int, int]) -> Tensor:
    """Conditioning feature map x_r at the coupling input's resolution."""
    x_r = apply_cn(x, cn)
    if x_r.shape[:2] != target_hw:
        raise ValueError(f"feature network produced spatial {x_r.shape[:2]}, "
                         f"expected {target_hw}")
    return x_r


def nn_coupling(v1: Tensor, x_r: Tensor, cn: CNParams) -> CouplingOutput:
    """Map (v1, x_r) to the coupling scale and shift for the second half.

    Scale is sigmoid(raw + 2), so the zero-initialized network yields the
    near-identity scale sigmoid(2) everywhere.
    """
    if v1.shape[:2] != x_r.shape[:2]:
        raise ValueError(f"v1 spatial {v1.shape[:2]} does not match "
                         f"features {x_r.shape[:2]}")
    raw = apply_cn(concat_channels([v1, x_r]), cn)
    c_out = raw.shape[-1]
    if c_out != 2 * v1.shape[-1]:
        raise ValueError(f"coupling network produced {c_out} channels, "
                         f"expected {2 * v1.shape[-1]}")
    half = c_out // 2
    s2 = (slice_channels(raw, 0, half) + 2.0).sigmoid()
    if np.any(s2.data <= 0.0):
        # mathematically sigmoid is positive; this is float64 underflow,
        # and the coupling is no longer invertible at working precision
        raise NumericsError("coupling scale underflowed to zero; "
                            "conditioning outputs are out of range")
    b2 = slice_channels(raw, half, c_out)
    return CouplingOutput(s2, b2)
