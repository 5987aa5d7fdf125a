"""Multi-scale conditional flow: composition, likelihood, weight caching.

The flow maps a preprocessed target y (an (h, w, c) array) to a stack of
latent parts. Each level squeezes 2x2 spatial blocks into channels, runs K
steps of actnorm -> channel mixing -> affine coupling, then factors out half
the channels (except at the last level, which keeps everything). All layer
weights are produced from the conditioning input x by the networks in
:mod:`condflow.conditioning`; ``condition(x)`` evaluates them once so the
repeated passes made during sampling and prediction reuse the results.

log_likelihood adds the base-density term for every latent part, the
accumulated layer log-determinants, and the constant volume term of target
preprocessing, so values are comparable across models in nats.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import conditioning as cond
from . import layers
from .linalg import SingularMatrixError
from .tensor import NumericsError, Parameter, Tensor


@dataclass
class FlowConfig:
    """Architecture and data geometry for one model."""
    y_shape: tuple[int, int, int]
    x_shape: tuple[int, int, int]
    levels: int = 2
    steps: int = 2
    n_c: int = 8
    n_w: int = 32
    coupling_channels: int = 64
    feature_channels: int = 16
    bins: Optional[int] = None      # None -> continuous target
    norm_scale: float = 1.0         # continuous targets: y_cont = (y - shift)/scale
    norm_shift: float = 0.0
    x_scale: float = 1.0            # conditioning input divided by this before the CNs

    def validate(self) -> None:
        h, w, c = self.y_shape
        if self.levels < 1 or self.steps < 1:
            raise ValueError("levels and steps must be at least 1")
        if h % (2 ** self.levels) or w % (2 ** self.levels):
            raise ValueError(f"target {h}x{w} not divisible by 2^levels={2 ** self.levels}")
        if self.bins is not None and self.bins < 2:
            raise ValueError("bins must be at least 2 for discrete targets")
        if self.bins is None and self.norm_scale <= 0:
            raise ValueError("norm_scale must be positive")
        if self.x_scale <= 0:
            raise ValueError("x_scale must be positive")


@dataclass
class StepNets:
    actnorm_cn: cond.CNParams
    mix_cn: cond.CNParams
    feat_cn: cond.CNParams
    cpl_nn: cond.CNParams
    channels: int
    v1_hw: tuple[int, int]


@dataclass
class StepWeights:
    """Conditioning-network outputs for one flow step."""
    actnorm: layers.ActnormWeights
    mix: layers.ConvWeights
    features: Tensor


@dataclass
class LayerReport:
    level: int
    step: Optional[int]
    name: str
    logdet: float


@dataclass
class FlowResult:
    parts: list[Tensor]
    logdet: Tensor
    report: list[LayerReport] = field(default_factory=list)


def stack_to_vector(parts) -> np.ndarray:
    """Concatenate latent parts (tensors or arrays) into one flat vector."""
    return np.concatenate([
        (p.data if isinstance(p, Tensor) else np.asarray(p)).ravel() for p in parts
    ])


def vector_to_stack(vec: np.ndarray, shapes: list[tuple[int, ...]]) -> list[np.ndarray]:
    out = []
    pos = 0
    for shape in shapes:
        n = int(np.prod(shape))
        out.append(np.asarray(vec[pos:pos + n]).reshape(shape))
        pos += n
    if pos != vec.size:
        raise ValueError(f"vector has {vec.size} elements, shapes account for {pos}")
    return out


class FlowModel:
    """Conditional flow with weights generated from x."""

    def __init__(self, config: FlowConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.params: dict[str, Parameter] = {}
        self.blocks: list[list[StepNets]] = []
        rng = np.random.default_rng(seed)

        h, w, c = config.y_shape
        cur_h, cur_w, cur_c = h, w, c
        for lv in range(config.levels):
            cur_h //= 2
            cur_w //= 2
            cur_c *= 4
            steps = []
            for st in range(config.steps):
                prefix = f"l{lv}.s{st}"
                try:
                    nets = StepNets(
                        actnorm_cn=cond.build_cn_stack6(
                            config.x_shape, 2 * cur_c, config.n_c, config.n_w,
                            rng, prefix + ".an", self.params),
                        mix_cn=cond.build_cn_stack6(
                            config.x_shape, cur_c * cur_c, config.n_c, config.n_w,
                            rng, prefix + ".mix", self.params),
                        feat_cn=cond.build_feature_cn(
                            config.x_shape, (cur_h, cur_w), config.feature_channels,
                            rng, prefix + ".feat", self.params),
                        cpl_nn=cond.build_coupling_nn(
                            cur_c // 2 + config.feature_channels,
                            config.coupling_channels, cur_c,
                            rng, prefix + ".cpl", self.params),
                        channels=cur_c,
                        v1_hw=(cur_h, cur_w),
                    )
                except ValueError as e:
                    raise ValueError(f"cannot build level {lv} step {st}: {e}") from e
                steps.append(nets)
            self.blocks.append(steps)
            if lv < config.levels - 1:
                cur_c //= 2

    # -- geometry -----------------------------------------------------------

    def latent_shapes(self) -> list[tuple[int, int, int]]:
        """Shapes of the latent parts in forward (coarse-to-fine) order."""
        h, w, c = self.config.y_shape
        shapes = []
        cur_h, cur_w, cur_c = h, w, c
        for lv in range(self.config.levels):
            cur_h //= 2
            cur_w //= 2
            cur_c *= 4
            if lv < self.config.levels - 1:
                cur_c //= 2
                shapes.append((cur_h, cur_w, cur_c))
        shapes.append((cur_h, cur_w, cur_c))
        return shapes

    @property
    def y_dim(self) -> int:
        h, w, c = self.config.y_shape
        return h * w * c

    # -- preprocessing ------------------------------------------------------

    def normalize(self, y_cont: np.ndarray) -> np.ndarray:
        """Map a continuous target (dequantized counts for discrete tasks)
        into the modeled range."""
        y_cont = np.asarray(y_cont, dtype=np.float64)
        if self.config.bins is not None:
            return y_cont / self.config.bins - 0.5
        return (y_cont - self.config.norm_shift) / self.config.norm_scale

    def denormalize(self, y_cont: np.ndarray) -> np.ndarray:
        """Inverse of normalize; for discrete targets the result lands near
        the original integer values (cell centers map to integers)."""
        y_cont = np.asarray(y_cont, dtype=np.float64)
        if self.config.bins is not None:
            return (y_cont + 0.5) * self.config.bins - 0.5
        return y_cont * self.config.norm_scale + self.config.norm_shift

    @property
    def preproc_logdet(self) -> float:
        """Constant volume term of normalize, summed over all elements."""
        if self.config.bins is not None:
            return -self.y_dim * math.log(self.config.bins)
        return -self.y_dim * math.log(self.config.norm_scale)

    # -- conditioning -------------------------------------------------------

    def _check_x(self, x: Tensor) -> None:
        if x.shape != self.config.x_shape:
            raise ValueError(f"conditioning input shaped {x.shape}, "
                             f"model expects {self.config.x_shape}")

    def condition(self, x: Tensor) -> list[StepWeights]:
        """Evaluate every conditioning network once for this x."""
        self._check_x(x)
        if self.config.x_scale != 1.0:
            x = x * (1.0 / self.config.x_scale)
        weights = []
        for lv, steps in enumerate(self.blocks):
            for st, nets in enumerate(steps):
                try:
                    weights.append(StepWeights(
                        actnorm=cond.cn_actnorm(x, nets.actnorm_cn, nets.channels),
                        mix=cond.cn_conv(x, nets.mix_cn, nets.channels),
                        features=cond.cn_coupling_features(x, nets.feat_cn, nets.v1_hw),
                    ))
                except NumericsError as e:
                    raise NumericsError(
                        f"conditioning failed at level {lv} step {st}: {e}") from e
        return weights

    # -- flow passes --------------------------------------------------------

    def _check_finite(self, t: Tensor, lv: int, st: Optional[int], name: str) -> None:
        if not np.all(np.isfinite(t.data)):
            where = f"level {lv}" + ("" if st is None else f" step {st}")
            raise NumericsError(f"non-finite values after {name} at {where}")

    def forward(self, x: Tensor, y: Tensor,
                weights: Optional[list[StepWeights]] = None) -> FlowResult:
        """Transform a normalized target into latent parts.

        Returns the parts, the total log-determinant (a tape tensor), and a
        per-layer report of log-determinant contributions.
        """
        if y.shape != self.config.y_shape:
            raise ValueError(f"target shaped {y.shape}, model expects {self.config.y_shape}")
        if weights is None:
            weights = self.condition(x)
        t = y
        parts: list[Tensor] = []
        report: list[LayerReport] = []
        total: Optional[Tensor] = None
        idx = 0
        for lv, steps in enumerate(self.blocks):
            t = layers.squeeze(t)
            report.append(LayerReport(lv, None, "squeeze", 0.0))
            for st, nets in enumerate(steps):
                sw = weights[idx]
                idx += 1
                t, ld = layers.actnorm_forward(t, sw.actnorm)
                self._check_finite(t, lv, st, "actnorm")
                report.append(LayerReport(lv, st, "actnorm", float(ld.data[0])))
                total = ld if total is None else total + ld
                try:
                    t, ld = layers.invconv_forward(t, sw.mix)
                except SingularMatrixError as e:
                    raise SingularMatrixError(
                        f"channel mixing at level {lv} step {st}: {e}") from e
                self._check_finite(t, lv, st, "mix")
                report.append(LayerReport(lv, st, "mix", float(ld.data[0])))
                total = total + ld
                t, ld = layers.coupling_forward(t, sw.features, nets.cpl_nn)
                self._check_finite(t, lv, st, "coupling")
                report.append(LayerReport(lv, st, "coupling", float(ld.data[0])))
                total = total + ld
            if lv < self.config.levels - 1:
                t, z_part = layers.split_forward(t)
                parts.append(z_part)
                report.append(LayerReport(lv, None, "split", 0.0))
        parts.append(t)
        return FlowResult(parts, total, report)

    def inverse(self, x: Tensor, parts: list[Tensor],
                weights: Optional[list[StepWeights]] = None) -> Tensor:
        """Map latent parts back to a normalized target; exact inverse of forward."""
        shapes = self.latent_shapes()
        if len(parts) != len(shapes):
            raise ValueError(f"expected {len(shapes)} latent parts, got {len(parts)}")
        for p, s in zip(parts, shapes):
            if p.shape != s:
                raise ValueError(f"latent part shaped {p.shape}, expected {s}")
        if weights is None:
            weights = self.condition(x)
        t = parts[-1]
        for lv in range(self.config.levels - 1, -1, -1):
            if lv < self.config.levels - 1:
                t = layers.split_inverse(t, parts[lv])
            for st in range(self.config.steps - 1, -1, -1):
                nets = self.blocks[lv][st]
                sw = weights[lv * self.config.steps + st]
                t = layers.coupling_inverse(t, sw.features, nets.cpl_nn)
                try:
                    t = layers.invconv_inverse(t, sw.mix)
                except SingularMatrixError as e:
                    raise SingularMatrixError(
                        f"channel mixing at level {lv} step {st}: {e}") from e
                t = layers.actnorm_inverse(t, sw.actnorm)
                self._check_finite(t, lv, st, "inverse step")
            t = layers.unsqueeze(t)
        return t

    def log_likelihood(self, x: Tensor, y: Tensor,
                       weights: Optional[list[StepWeights]] = None) -> Tensor:
        """log p(y|x) of a normalized target, in nats, including the constant
        preprocessing volume term."""
        res = self.forward(x, y, weights)
        ll = res.logdet
        for p in res.parts:
            ll = ll + layers.standard_normal_logpdf(p)
        return ll + self.preproc_logdet

    # -- parameter handling -------------------------------------------------

    def parameters(self) -> dict[str, Parameter]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def fingerprint(self) -> str:
        """Digest of all parameter values, for no-mutation assertions."""
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].data.tobytes())
        return h.hexdigest()

    def perturb_parameters(self, rng: np.random.Generator, scale: float) -> None:
        """Add N(0, scale^2) noise to every parameter (used to exercise the
        flow away from its identity initialization)."""
        for name in sorted(self.params):
            p = self.params[name]
            p.data = p.data + rng.normal(0.0, scale, size=p.data.shape)
