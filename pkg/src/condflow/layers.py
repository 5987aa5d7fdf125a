"""Invertible flow layers with exact log-determinants.

Every forward returns ``(output, logdet)`` where ``logdet`` is a shape-(1,)
tensor living on the tape, so the volume-change term is differentiated along
with everything else. Inverses are exact algebraic inversions of the same
maps and are used for sampling and round-trip verification.

Layer weights arrive from the conditioning networks (see
:mod:`condflow.conditioning`); the cores here are pure functions of
(value, weights) and never own parameters themselves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, concat_channels, mat_inverse, matmul, slice_channels, slogdet_lu

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class ActnormWeights:
    """Per-channel scale and bias, shapes (1, c); scale strictly positive."""
    s: Tensor
    b: Tensor


@dataclass
class ConvWeights:
    """Channel-mixing matrix, shape (c, c), nonsingular at evaluation."""
    w: Tensor


@dataclass
class CouplingOutput:
    """Scale and shift for the transformed half; shapes match that half."""
    s2: Tensor
    b2: Tensor


def _spatial(v: Tensor) -> tuple[int, int, int]:
    if v.data.ndim != 3:
        raise ValueError(f"expected an (h, w, c) tensor, got shape {v.shape}")
    return v.shape


def actnorm_forward(v: Tensor, w: ActnormWeights) -> tuple[Tensor, Tensor]:
    """u = s * v + b per channel; logdet = h*w*sum(log s)."""
    h, wid, _ = _spatial(v)
    if np.any(w.s.data <= 0.0):
        raise ValueError("actnorm scale must be strictly positive")
    u = w.s * v + w.b
    logdet = w.s.log().sum() * float(h * wid)
    return u, logdet


def actnorm_inverse(u: Tensor, w: ActnormWeights) -> Tensor:
    if np.any(w.s.data <= 0.0):
        raise ValueError("actnorm scale must be strictly positive")
    return (u - w.b) / w.s


def invconv_forward(v: Tensor, w: ConvWeights) -> tuple[Tensor, Tensor]:
    """Left-multiply every spatial position's channel vector by W.

    logdet = h*w*log|det W|; raises SingularMatrixError when W has no
    usable pivot.
    """
    h, wid, c = _spatial(v)
    _, logabs = slogdet_lu(w.w)
    u = matmul(v.reshape(h * wid, c), w.w.transpose((1, 0))).reshape(h, wid, c)
    return u, logabs * float(h * wid)


def invconv_inverse(u: Tensor, w: ConvWeights) -> Tensor:
    h, wid, c = _spatial(u)
    winv = mat_inverse(w.w)
    return matmul(u.reshape(h * wid, c), winv.transpose((1, 0))).reshape(h, wid, c)


def affine_couple(v: Tensor, out: CouplingOutput) -> tuple[Tensor, Tensor]:
    """Core coupling: pass the first channel half through untouched and map
    the second half to s2 * v2 + b2. logdet = sum(log s2)."""
    _, _, c = _spatial(v)
    if c % 2 != 0:
        raise ValueError(f"coupling requires an even channel count, got {c}")
    v1 = slice_channels(v, 0, c // 2)
    v2 = slice_channels(v, c // 2, c)
    if out.s2.shape != v2.shape or out.b2.shape != v2.shape:
        raise ValueError(f"coupling weights shaped {out.s2.shape} do not match "
                         f"the transformed half {v2.shape}")
    if np.any(out.s2.data <= 0.0):
        raise ValueError("coupling scale must be strictly positive")
    u2 = out.s2 * v2 + out.b2
    return concat_channels([v1, u2]), out.s2.log().sum()


def affine_decouple(u: Tensor, out: CouplingOutput) -> Tensor:
    """Exact inverse of affine_couple given weights recomputed from u1."""
    _, _, c = _spatial(u)
    if c % 2 != 0:
        raise ValueError(f"coupling requires an even channel count, got {c}")
    u1 = slice_channels(u, 0, c // 2)
    u2 = slice_channels(u, c // 2, c)
    v2 = (u2 - out.b2) / out.s2
    return concat_channels([u1, v2])


def coupling_forward(v: Tensor, x_r: Tensor, nn) -> tuple[Tensor, Tensor]:
    """Conditional coupling: weights come from the coupling network applied
    to (first half of v, conditioning features)."""
    from .conditioning import nn_coupling  # local import keeps layering acyclic
    _, _, c = _spatial(v)
    if c % 2 != 0:
        raise ValueError(f"coupling requires an even channel count, got {c}")
    v1 = slice_channels(v, 0, c // 2)
    return affine_couple(v, nn_coupling(v1, x_r, nn))


def coupling_inverse(u: Tensor, x_r: Tensor, nn) -> Tensor:
    from .conditioning import nn_coupling
    _, _, c = _spatial(u)
    if c % 2 != 0:
        raise ValueError(f"coupling requires an even channel count, got {c}")
    u1 = slice_channels(u, 0, c // 2)
    return affine_decouple(u, nn_coupling(u1, x_r, nn))


def squeeze(v: Tensor) -> Tensor:
    """Fold each 2x2 spatial block into channels: (h, w, c) -> (h/2, w/2, 4c).

    Output channel order is the four block positions (0,0), (0,1), (1,0),
    (1,1) in sequence, with the original c channels contiguous inside each
    position. Volume preserving, logdet 0.
    """
    h, w, c = _spatial(v)
    if h % 2 or w % 2:
        raise ValueError(f"squeeze requires even spatial dims, got {h}x{w}")
    return (v.reshape(h // 2, 2, w // 2, 2, c)
            .transpose((0, 2, 1, 3, 4))
            .reshape(h // 2, w // 2, 4 * c))


def unsqueeze(u: Tensor) -> Tensor:
    """Exact inverse of squeeze: (h, w, 4c) -> (2h, 2w, c)."""
    h, w, c4 = _spatial(u)
    if c4 % 4:
        raise ValueError(f"unsqueeze requires channels divisible by 4, got {c4}")
    c = c4 // 4
    return (u.reshape(h, w, 2, 2, c)
            .transpose((0, 2, 1, 3, 4))
            .reshape(2 * h, 2 * w, c))


def split_forward(v: Tensor) -> tuple[Tensor, Tensor]:
    """Factor out the second channel half as a latent part; keep the first."""
    _, _, c = _spatial(v)
    if c % 2 != 0:
        raise ValueError(f"split requires an even channel count, got {c}")
    return slice_channels(v, 0, c // 2), slice_channels(v, c // 2, c)


def split_inverse(kept: Tensor, z_part: Tensor) -> Tensor:
    return concat_channels([kept, z_part])


def standard_normal_logpdf(z: Tensor) -> Tensor:
    """log N(z; 0, I) summed over all elements, as a shape-(1,) tensor."""
    d = float(z.size)
    return (z * z).sum() * -0.5 + (-0.5 * d * LOG_2PI)
