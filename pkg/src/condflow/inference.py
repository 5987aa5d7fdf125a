"""Conditional sampling and the two predictors built on it.

A draw pushes z ~ N(0, T^2 I) through the inverse flow for the given x.
The sample-mean predictor averages M independent draws, a Monte Carlo
estimate of E[y|x]; its per-element variance shrinks like 1/M. The
gradient predictor ascends log p(y|x) in y with a backtracking line
search; it reports the likelihood it reached, which makes mode-trapping
observable on multimodal conditionals.

All entry points take and return plain numpy arrays in original target
units, never mutate model parameters (asserted via fingerprint), and are
deterministic given the RNG.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import FlowModel, StepWeights
from .tensor import Tensor, backward, no_grad

MAX_BACKTRACK = 30


@dataclass
class PredictionConfig:
    mode: str = "sample-mean"      # "sample-mean" | "gradient"
    m: int = 10
    temperature: float = 1.0
    steps: int = 200
    step_size: float = 0.1

    def validate(self) -> None:
        if self.mode not in ("sample-mean", "gradient"):
            raise ValueError(f"unknown prediction mode {self.mode!r}")
        if self.m < 1:
            raise ValueError("sample count m must be at least 1")
        if self.temperature < 0:
            raise ValueError("temperature must be nonnegative")
        if self.steps < 1:
            raise ValueError("gradient steps must be at least 1")
        if self.step_size <= 0:
            raise ValueError("step size must be positive")


@dataclass
class Prediction:
    y_star: np.ndarray               # original units, continuous
    log_likelihood: float            # of y_star under the model
    variance: Optional[np.ndarray] = None   # per-element, sample-mean mode
    steps_taken: int = 0             # gradient mode


def _normalized_sample(model: FlowModel, weights: list[StepWeights], x: Tensor,
                       rng: np.random.Generator, temperature: float) -> np.ndarray:
    zs = [Tensor(rng.standard_normal(shape) * temperature)
          for shape in model.latent_shapes()]
    return model.inverse(x, zs, weights).data


def sample(model: FlowModel, x: np.ndarray, rng: np.random.Generator,
           temperature: float = 1.0,
           weights: Optional[list[StepWeights]] = None) -> np.ndarray:
    """One conditional draw, in original target units."""
    if temperature < 0:
        raise ValueError("temperature must be nonnegative")
    xt = Tensor(np.asarray(x, dtype=np.float64))
    with no_grad():
        if weights is None:
            weights = model.condition(xt)
        y = _normalized_sample(model, weights, xt, rng, temperature)
    return model.denormalize(y)


def log_likelihood_of(model: FlowModel, x: np.ndarray, y_cont: np.ndarray,
                      weights: Optional[list[StepWeights]] = None) -> float:
    """log p(y|x) of a normalized continuous target, as a float."""
    xt = Tensor(np.asarray(x, dtype=np.float64))
    with no_grad():
        if weights is None:
            weights = model.condition(xt)
        ll = model.log_likelihood(xt, Tensor(np.asarray(y_cont, dtype=np.float64)),
                                  weights)
    return float(ll.data[0])


def predict_sample_mean(model: FlowModel, x: np.ndarray,
                        rng: np.random.Generator, m: int = 10,
                        temperature: float = 1.0) -> Prediction:
    """Average of m conditional draws plus their per-element variance."""
    if m < 1:
        raise ValueError("sample count m must be at least 1")
    fp = model.fingerprint()
    xt = Tensor(np.asarray(x, dtype=np.float64))
    with no_grad():
        weights = model.condition(xt)
        draws = np.stack([
            _normalized_sample(model, weights, xt, rng, temperature)
            for _ in range(m)
        ])
    mean = draws.mean(axis=0)
    var = draws.var(axis=0)
    ll = log_likelihood_of(model, x, mean, weights)
    if model.fingerprint() != fp:
        raise RuntimeError("model parameters changed during inference")
    scale = (model.config.bins if model.config.bins is not None
             else model.config.norm_scale)
    return Prediction(y_star=model.denormalize(mean), log_likelihood=ll,
                      variance=var * scale * scale)


def predict_gradient(model: FlowModel, x: np.ndarray, steps: int = 200,
                     step_size: float = 0.1,
                     init: Optional[np.ndarray] = None,
                     rng: Optional[np.random.Generator] = None) -> Prediction:
    """Ascend log p(y|x) in y with backtracking; starts from `init` (original
    units), else from a conditional draw (needs rng), else from the
    temperature-0 sample."""
    if steps < 1:
        raise ValueError("gradient steps must be at least 1")
    if step_size <= 0:
        raise ValueError("step size must be positive")
    fp = model.fingerprint()
    xt = Tensor(np.asarray(x, dtype=np.float64))
    with no_grad():
        weights = model.condition(xt)
        if init is not None:
            y_cur = model.normalize(np.asarray(init, dtype=np.float64))
        elif rng is not None:
            y_cur = _normalized_sample(model, weights, xt, rng, 1.0)
        else:
            y_cur = _normalized_sample(model, weights, xt, rng=np.random.default_rng(0),
                                       temperature=0.0)
    ll_cur = log_likelihood_of(model, x, y_cur, weights)
    taken = 0
    for _ in range(steps):
        leaf = Tensor(y_cur, requires_grad=True)
        ll = model.log_likelihood(xt, leaf, weights)
        backward(ll)
        g = leaf.grad
        step = step_size
        accepted = False
        for _ in range(MAX_BACKTRACK):
            cand = y_cur + step * g
            ll_cand = log_likelihood_of(model, x, cand, weights)
            if ll_cand > ll_cur:
                y_cur, ll_cur = cand, ll_cand
                accepted = True
                break
            step *= 0.5
        taken += 1
        if not accepted:
            break   # no improving step at any scale: treat as converged
    model.zero_grad()   # ascent backprop also fills parameter grads; discard
    if model.fingerprint() != fp:
        raise RuntimeError("model parameters changed during inference")
    return Prediction(y_star=model.denormalize(y_cur), log_likelihood=ll_cur,
                      steps_taken=taken)


def predict(model: FlowModel, x: np.ndarray, cfg: PredictionConfig,
            rng: np.random.Generator) -> Prediction:
    cfg.validate()
    if cfg.mode == "sample-mean":
        return predict_sample_mean(model, x, rng, m=cfg.m,
                                   temperature=cfg.temperature)
    return predict_gradient(model, x, steps=cfg.steps, step_size=cfg.step_size,
                            rng=rng)


def discretize(y_star: np.ndarray, kind: str, bins: int = 2) -> np.ndarray:
    """Map a continuous prediction to the task's output space.

    binary-seg: average the tiled channels, threshold at 0.5 (ties go to 1),
    return an (h, w) 0/1 mask. inpaint: round to integers, clip to
    [0, bins-1]. denoise: identity (continuous target).
    """
    y_star = np.asarray(y_star, dtype=np.float64)
    if kind == "binary-seg":
        if y_star.ndim != 3:
            raise ValueError(f"binary-seg prediction must be (h, w, c), got {y_star.shape}")
        return (y_star.mean(axis=2) >= 0.5).astype(np.float64)
    if kind == "inpaint":
        return np.clip(np.rint(y_star), 0, bins - 1)
    if kind == "denoise":
        return y_star
    raise ValueError(f"unknown task kind {kind!r}")


def argmax_channels(y_star: np.ndarray) -> np.ndarray:
    """Multi-class readout: class index with the largest channel value."""
    y_star = np.asarray(y_star)
    if y_star.ndim != 3:
        raise ValueError(f"expected (h, w, classes), got {y_star.shape}")
    return np.argmax(y_star, axis=2).astype(np.float64)
