"""Fast invariant suite behind the `check` CLI subcommand.

Five checks exercise the load-bearing numerics at tiny sizes: inverse
round-trip, log-determinant against a finite-difference Jacobian,
parameter gradients against central differences, normalization of the
modeled density by quadrature, and the dequantization lower bound. Each
reports a margin (how far inside the tolerance it landed), so regressions
show up as shrinking margins before they become failures.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .inference import log_likelihood_of
from .model import FlowConfig, FlowModel, stack_to_vector
from .tensor import Tensor, backward, no_grad
from .training import dequantize, nll_loss

ROUNDTRIP_TOL = 1e-8
JACOBIAN_TOL = 1e-5
GRADIENT_TOL = 1e-6
NORMALIZATION_TOL = 0.05


@dataclass
class CheckResult:
    name: str
    value: float         # measured error / deviation / margin input
    threshold: float
    passed: bool
    detail: str = ""


def _tiny_model(seed: int, bins=None, perturb: float = 0.2) -> FlowModel:
    config = FlowConfig(y_shape=(2, 2, 1), x_shape=(2, 2, 1), levels=1, steps=1,
                        n_c=2, n_w=4, coupling_channels=4, feature_channels=2,
                        bins=bins)
    model = FlowModel(config, seed=seed)
    model.perturb_parameters(np.random.default_rng(seed + 1), perturb)
    return model


def check_roundtrip(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for trial in range(5):
        config = FlowConfig(y_shape=(4, 4, 2), x_shape=(4, 4, 1),
                            levels=int(rng.integers(1, 3)), steps=int(rng.integers(1, 3)),
                            n_c=2, n_w=4, coupling_channels=4, feature_channels=2)
        model = FlowModel(config, seed=seed + trial)
        model.perturb_parameters(rng, 0.1)
        x = Tensor(rng.normal(size=config.x_shape))
        y = Tensor(rng.normal(size=config.y_shape))
        with no_grad():
            weights = model.condition(x)
            res = model.forward(x, y, weights)
            back = model.inverse(x, res.parts, weights)
        worst = max(worst, float(np.max(np.abs(back.data - y.data))))
    return CheckResult("round-trip", worst, ROUNDTRIP_TOL, worst < ROUNDTRIP_TOL,
                       "max |y - f_inv(f(y))| over 5 random models")


def fd_jacobian(model: FlowModel, x: Tensor, y: np.ndarray,
                eps: float = 1e-6) -> np.ndarray:
    """Numerical Jacobian dz/dy by central differences, one column per
    flattened y element."""
    with no_grad():
        weights = model.condition(x)
    d = y.size
    cols = np.empty((d, d))
    flat = y.ravel()
    for j in range(d):
        plus = flat.copy()
        plus[j] += eps
        minus = flat.copy()
        minus[j] -= eps
        with no_grad():
            zp = stack_to_vector(model.forward(x, Tensor(plus.reshape(y.shape)),
                                               weights).parts)
            zm = stack_to_vector(model.forward(x, Tensor(minus.reshape(y.shape)),
                                               weights).parts)
        cols[:, j] = (zp - zm) / (2.0 * eps)
    return cols


def check_jacobian(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    model = _tiny_model(seed)
    worst = 0.0
    for _ in range(3):
        x = Tensor(rng.normal(size=model.config.x_shape))
        y = rng.normal(size=model.config.y_shape)
        with no_grad():
            weights = model.condition(x)
            analytic = float(model.forward(x, Tensor(y), weights).logdet.data[0])
        jac = fd_jacobian(model, x, y)
        sign, fd_logdet = np.linalg.slogdet(jac)
        if sign <= 0:
            return CheckResult("jacobian", float("nan"), JACOBIAN_TOL, False,
                               "finite-difference Jacobian not orientation-preserving")
        rel = abs(fd_logdet - analytic) / max(abs(fd_logdet), 1e-12)
        worst = max(worst, rel)
    return CheckResult("jacobian", worst, JACOBIAN_TOL, worst < JACOBIAN_TOL,
                       "rel err of analytic logdet vs FD Jacobian, 3 pairs")


def grad_group_errors(model: FlowModel, pairs, eps: float = 1e-6) -> dict[str, float]:
    """Per-parameter-group relative error between backprop gradients and
    central finite differences of the NLL, every element."""
    model.zero_grad()
    loss = nll_loss(pairs, model)
    backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in model.params.items()}

    def loss_value() -> float:
        with no_grad():
            return float(nll_loss(pairs, model).data[0])

    errors = {}
    for name, p in model.params.items():
        fd = np.zeros_like(p.data)
        flat = p.data.ravel()
        fd_flat = fd.ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            lp = loss_value()
            flat[j] = orig - eps
            lm = loss_value()
            flat[j] = orig
            fd_flat[j] = (lp - lm) / (2.0 * eps)
        num = float(np.linalg.norm(fd - analytic[name]))
        den = max(float(np.linalg.norm(fd)), float(np.linalg.norm(analytic[name])), 1e-12)
        errors[name] = num / den if den > 1e-12 else num
    model.zero_grad()
    return errors


def check_gradient(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    model = _tiny_model(seed, perturb=0.3)
    pairs = [(rng.normal(size=model.config.x_shape),
              rng.normal(size=model.config.y_shape))]
    errors = grad_group_errors(model, pairs)
    worst_name = max(errors, key=errors.get)
    worst = errors[worst_name]
    return CheckResult("gradient", worst, GRADIENT_TOL, worst < GRADIENT_TOL,
                       f"worst parameter group: {worst_name}")


def gauss_legendre_grid(d: int, nodes: int, lo: float, hi: float):
    """Tensor-product Gauss-Legendre nodes and weights on [lo, hi]^d,
    yielded one point at a time as (point, weight)."""
    x, w = np.polynomial.legendre.leggauss(nodes)
    x = 0.5 * (hi - lo) * x + 0.5 * (hi + lo)
    w = 0.5 * (hi - lo) * w
    idx = np.stack(np.meshgrid(*([np.arange(nodes)] * d), indexing="ij"),
                   axis=-1).reshape(-1, d)
    points = x[idx]
    weights = w[idx].prod(axis=1)
    return points, weights


def quadrature_mass(model: FlowModel, x: np.ndarray, nodes: int = 12,
                    half_width: float = 5.0) -> float:
    """Integral of exp(log p(y|x)) over a centered box, by tensor-product
    Gauss-Legendre quadrature."""
    shape = model.config.y_shape
    d = int(np.prod(shape))
    xt = Tensor(np.asarray(x, dtype=np.float64))
    with no_grad():
        weights = model.condition(xt)
    points, wts = gauss_legendre_grid(d, nodes, -half_width, half_width)
    total = 0.0
    for point, wt in zip(points, wts):
        ll = log_likelihood_of(model, x, point.reshape(shape), weights)
        total += wt * np.exp(ll)
    return total


def check_normalization(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    model = _tiny_model(seed, perturb=0.05)
    x = rng.normal(size=model.config.x_shape)
    mass = quadrature_mass(model, x)
    dev = abs(mass - 1.0)
    return CheckResult("normalization", mass, NORMALIZATION_TOL,
                       dev < NORMALIZATION_TOL,
                       "quadrature of p(y|x) over a 2x2x1 model, target 1.0")


def dequant_bound_margin(model: FlowModel, x: np.ndarray, y: np.ndarray,
                         nodes: int = 5, mc_draws: int = 128,
                         seed: int = 0) -> float:
    """log of the quadrature cell mass minus (MC Jensen estimate - 3 SE);
    nonnegative when the bound holds within noise."""
    bins = model.config.bins
    shape = model.config.y_shape
    d = int(np.prod(shape))
    xt = Tensor(np.asarray(x, dtype=np.float64))
    with no_grad():
        weights = model.condition(xt)
    points, wts = gauss_legendre_grid(d, nodes, 0.0, 1.0)
    mass = 0.0
    for point, wt in zip(points, wts):
        y_cont = (y.ravel() + point) / bins - 0.5
        ll = log_likelihood_of(model, x, y_cont.reshape(shape), weights)
        # the cell has volume bins^-d in normalized units; ll already
        # carries the -d*log(bins) preprocessing term, so du-integration
        # of exp(ll) gives the mass directly
        mass += wt * np.exp(ll)
    rng = np.random.default_rng(seed)
    lls = np.empty(mc_draws)
    for i in range(mc_draws):
        y_cont = dequantize(y, bins, rng)
        lls[i] = log_likelihood_of(model, x, y_cont, weights)
    se = float(lls.std(ddof=1) / np.sqrt(mc_draws))
    return float(np.log(mass) - (float(lls.mean()) - 3.0 * se))


def check_dequant_bound(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    model = _tiny_model(seed, bins=2, perturb=0.1)
    worst = np.inf
    for _ in range(2):
        x = rng.normal(size=model.config.x_shape)
        for value in range(4):
            y = np.array([[value >> 1 & 1, value & 1],
                          [value & 1, value >> 1 & 1]], dtype=np.float64)
            y = y.reshape(model.config.y_shape)
            margin = dequant_bound_margin(model, x, y, seed=seed)
            worst = min(worst, margin)
    return CheckResult("dequant-bound", worst, 0.0, worst >= 0.0,
                       "min margin of log-mass over MC Jensen estimate - 3 SE")


def run_all(seed: int = 0) -> list[CheckResult]:
    return [
        check_roundtrip(seed),
        check_jacobian(seed),
        check_gradient(seed),
        check_normalization(seed),
        check_dequant_bound(seed),
    ]


def format_table(results: list[CheckResult]) -> str:
    lines = [f"{'check':<16} {'value':>14} {'threshold':>12} {'status':>8}"]
    for r in results:
        lines.append(f"{r.name:<16} {r.value:>14.6g} {r.threshold:>12.3g} "
                     f"{'pass' if r.passed else 'FAIL':>8}")
        if r.detail:
            lines.append(f"    {r.detail}")
    return "\n".join(lines)
