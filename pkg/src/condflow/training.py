"""Exact-likelihood training: dequantization, Adam, the loop, checkpoints.

Discrete targets are dequantized with uniform noise so their density is
well defined; by Jensen's inequality the resulting expected log-density
lower-bounds the log-mass of the discrete value, so minimizing the
continuous NLL trains a bound on the discrete NLL. Continuous targets use
the model's fixed affine normalization instead.

Checkpoints store every parameter, both Adam moment vectors, the iteration
count, and the serialized RNG state, so a resumed run reproduces the
uninterrupted run bitwise.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from . import fileio
from .model import FlowConfig, FlowModel
from .tensor import NumericsError, Tensor, backward

CURVE_HEADER = ["iteration", "nll_nats_per_dim"]


def dequantize(y_discrete: np.ndarray, bins: int, rng: np.random.Generator) -> np.ndarray:
    """(y + u) / bins - 0.5 with u ~ U[0,1) per element.

    Every output coordinate lands in [-0.5, 0.5); input values must be
    integers in [0, bins).
    """
    y = np.asarray(y_discrete, dtype=np.float64)
    if bins < 2:
        raise ValueError("bins must be at least 2")
    if np.any(y != np.rint(y)) or np.any(y < 0) or np.any(y >= bins):
        raise ValueError(f"discrete targets must be integers in [0, {bins})")
    u = rng.random(size=y.shape)
    return (y + u) / bins - 0.5


@dataclass
class ArrayDataset:
    """Paired arrays: x is (n, hx, wx, cx), y is (n, h, w, c).

    bins is None for continuous targets, else the number of discrete levels.
    """
    x: np.ndarray
    y: np.ndarray
    bins: Optional[int] = None

    def __post_init__(self):
        if self.x.shape[0] != self.y.shape[0]:
            raise ValueError(f"{self.x.shape[0]} inputs vs {self.y.shape[0]} targets")
        if self.x.shape[0] == 0:
            raise ValueError("empty dataset")


@dataclass
class TrainConfig:
    iters: int
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch: int = 2
    seed: int = 0
    checkpoint_interval: int = 0    # 0 disables periodic checkpoints


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def init_adam(params: dict) -> AdamState:
    state = AdamState()
    for name, p in params.items():
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def adam_step(params: dict, state: AdamState, cfg: TrainConfig) -> None:
    """One update of every parameter; a missing gradient counts as zero."""
    state.t += 1
    t = state.t
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name in sorted(params):
        p = params[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        state.m[name] = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        state.v[name] = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * (g * g)
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        p.data = p.data - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


def nll_loss(pairs, model: FlowModel) -> Tensor:
    """Mean negative log-likelihood over (x, y_cont) pairs, in nats."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("empty batch")
    total = None
    for x, y in pairs:
        nll = -model.log_likelihood(Tensor(np.asarray(x, dtype=np.float64)),
                                    Tensor(np.asarray(y, dtype=np.float64)))
        total = nll if total is None else total + nll
    return total * (1.0 / len(pairs))


# -- checkpoints ------------------------------------------------------------

_SHAPE_KEYS = ("y_shape", "x_shape")


def _config_hyper(model: FlowModel, cfg: TrainConfig, state: AdamState) -> dict[str, str]:
    c = model.config
    return {
        "y_shape": ",".join(map(str, c.y_shape)),
        "x_shape": ",".join(map(str, c.x_shape)),
        "levels": str(c.levels),
        "steps": str(c.steps),
        "n_c": str(c.n_c),
        "n_w": str(c.n_w),
        "coupling_channels": str(c.coupling_channels),
        "feature_channels": str(c.feature_channels),
        "bins": "none" if c.bins is None else str(c.bins),
        "norm_scale": repr(c.norm_scale),
        "norm_shift": repr(c.norm_shift),
        "x_scale": repr(c.x_scale),
        "lr": repr(cfg.lr),
        "beta1": repr(cfg.beta1),
        "beta2": repr(cfg.beta2),
        "eps": repr(cfg.eps),
        "batch": str(cfg.batch),
        "seed": str(cfg.seed),
        "iters": str(cfg.iters),
        "checkpoint_interval": str(cfg.checkpoint_interval),
        "adam_t": str(state.t),
    }


def save_checkpoint(path: Union[str, Path], model: FlowModel, state: AdamState,
                    iteration: int, rng: np.random.Generator,
                    cfg: TrainConfig) -> None:
    tensors: dict[str, np.ndarray] = {}
    for name, p in model.params.items():
        tensors[name] = p.data
        tensors["adam.m." + name] = state.m[name]
        tensors["adam.v." + name] = state.v[name]
    rng_state = json.dumps(rng.bit_generator.state, sort_keys=True).encode("utf-8")
    fileio.write_checkpoint(Path(path), fileio.Checkpoint(
        hyper=_config_hyper(model, cfg, state),
        tensors=tensors,
        iteration=iteration,
        rng_state=rng_state,
    ))


def load_checkpoint(path: Union[str, Path]) -> fileio.Checkpoint:
    return fileio.read_checkpoint(path)


def _parse_shape(s: str) -> tuple[int, int, int]:
    parts = tuple(int(v) for v in s.split(","))
    if len(parts) != 3:
        raise fileio.FormatError(f"expected h,w,c shape, got {s!r}")
    return parts


def restore_model(ckpt: fileio.Checkpoint) -> FlowModel:
    """Rebuild the model a checkpoint describes and load its parameters."""
    hy = ckpt.hyper
    try:
        config = FlowConfig(
            y_shape=_parse_shape(hy["y_shape"]),
            x_shape=_parse_shape(hy["x_shape"]),
            levels=int(hy["levels"]),
            steps=int(hy["steps"]),
            n_c=int(hy["n_c"]),
            n_w=int(hy["n_w"]),
            coupling_channels=int(hy["coupling_channels"]),
            feature_channels=int(hy["feature_channels"]),
            bins=None if hy["bins"] == "none" else int(hy["bins"]),
            norm_scale=float(hy["norm_scale"]),
            norm_shift=float(hy["norm_shift"]),
            x_scale=float(hy["x_scale"]),
        )
    except KeyError as e:
        raise fileio.FormatError(f"checkpoint missing hyperparameter {e.args[0]!r}") from e
    model = FlowModel(config, seed=0)
    load_params(model, ckpt.tensors)
    return model


def load_params(model: FlowModel, tensors: dict[str, np.ndarray]) -> None:
    """Copy parameter tensors into a built model, by name, with shape checks."""
    for name, p in model.params.items():
        if name not in tensors:
            raise fileio.FormatError(f"checkpoint lacks tensor {name!r}")
        arr = tensors[name]
        if arr.shape != p.data.shape:
            raise fileio.FormatError(
                f"tensor {name!r} shaped {arr.shape}, model expects {p.data.shape}")
        p.data = arr.copy()


def restore_training(ckpt: fileio.Checkpoint
                     ) -> tuple[FlowModel, AdamState, TrainConfig, int, np.random.Generator]:
    """Rebuild model, optimizer state, config, iteration, and RNG from a
    checkpoint, ready to hand to train_loop."""
    hy = ckpt.hyper
    model = restore_model(ckpt)
    cfg = TrainConfig(
        iters=int(hy["iters"]),
        lr=float(hy["lr"]),
        beta1=float(hy["beta1"]),
        beta2=float(hy["beta2"]),
        eps=float(hy["eps"]),
        batch=int(hy["batch"]),
        seed=int(hy["seed"]),
        checkpoint_interval=int(hy["checkpoint_interval"]),
    )
    state = AdamState(t=int(hy["adam_t"]))
    for name, p in model.params.items():
        mkey, vkey = "adam.m." + name, "adam.v." + name
        if mkey not in ckpt.tensors or vkey not in ckpt.tensors:
            raise fileio.FormatError(f"checkpoint lacks optimizer state for {name!r}")
        state.m[name] = ckpt.tensors[mkey].copy()
        state.v[name] = ckpt.tensors[vkey].copy()
    rng = np.random.default_rng()
    try:
        rng.bit_generator.state = json.loads(ckpt.rng_state.decode("utf-8"))
    except (ValueError, KeyError) as e:
        raise fileio.FormatError(f"unparseable RNG state: {e}") from e
    return model, state, cfg, ckpt.iteration, rng


# -- the loop ---------------------------------------------------------------

def train_loop(model: FlowModel, dataset: ArrayDataset, cfg: TrainConfig,
               outdir: Optional[Union[str, Path]] = None,
               start_iteration: int = 0,
               adam_state: Optional[AdamState] = None,
               rng: Optional[np.random.Generator] = None,
               progress: Optional[Callable[[int, float], None]] = None,
               ) -> list[tuple[int, float]]:
    """Run Adam on the exact NLL; returns the (iteration, nats/dim) curve.

    A single RNG stream drives batch selection and dequantization, so the
    trajectory is a pure function of (seed, config, dataset). A non-finite
    loss writes an emergency checkpoint (when outdir is set) and raises.
    """
    if dataset.bins is not None and model.config.bins != dataset.bins:
        raise ValueError(f"dataset has {dataset.bins} bins, model expects "
                         f"{model.config.bins}")
    n = dataset.x.shape[0]
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    state = adam_state if adam_state is not None else init_adam(model.params)
    out = Path(outdir) if outdir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    d = model.y_dim
    curve: list[tuple[int, float]] = []
    for it in range(start_iteration, cfg.iters):
        idx = rng.integers(0, n, size=cfg.batch)
        pairs = []
        for i in idx:
            if dataset.bins is not None:
                y_cont = dequantize(dataset.y[i], dataset.bins, rng)
            else:
                y_cont = model.normalize(dataset.y[i])
            pairs.append((dataset.x[i], y_cont))
        model.zero_grad()
        loss = nll_loss(pairs, model)
        val = float(loss.data[0])
        if not math.isfinite(val):
            if out is not None:
                emergency = out / "emergency.ckpt"
                save_checkpoint(emergency, model, state, it, rng, cfg)
                raise NumericsError(f"non-finite loss at iteration {it + 1}; "
                                    f"state saved to {emergency}")
            raise NumericsError(f"non-finite loss at iteration {it + 1}")
        backward(loss)
        adam_step(model.params, state, cfg)
        curve.append((it + 1, val / d))
        if progress is not None:
            progress(it + 1, val / d)
        if (out is not None and cfg.checkpoint_interval > 0
                and (it + 1) % cfg.checkpoint_interval == 0):
            save_checkpoint(out / f"ckpt_{it + 1:06d}.ckpt", model, state,
                            it + 1, rng, cfg)
    if out is not None:
        save_checkpoint(out / "model.ckpt", model, state, cfg.iters, rng, cfg)
        fileio.write_csv(out / "curve.csv", CURVE_HEADER,
                         [(i, repr(v)) for i, v in curve])
    return curve


def smoothed(curve: list[tuple[int, float]], window: int = 101) -> list[float]:
    """Centered moving average of the NLL column, clipped at the ends."""
    vals = np.array([v for _, v in curve], dtype=np.float64)
    half = window // 2
    out = []
    for i in range(len(vals)):
        lo = max(0, i - half)
        hi = min(len(vals), i + half + 1)
        out.append(float(vals[lo:hi].mean()))
    return out
