"""Acceptance gate: ten falsifiable claims, each with an independent oracle.

Every test prints one PASS/FAIL line with the measured margin, then asserts.
The oracles are deliberately external to the code under test: full
finite-difference Jacobians, tensor-product quadrature, a hand-derived Adam
recurrence, and a coupling flow whose modes are known in closed form.
Budgets are wall-clock seconds on one CPU core.
"""

import itertools
import math
import time

import numpy as np

from condflow.checks import (dequant_bound_margin, fd_jacobian,
                             grad_group_errors, quadrature_mass)
from condflow.inference import (PredictionConfig, log_likelihood_of,
                                predict_gradient, predict_sample_mean, sample)
from condflow.model import FlowConfig, FlowModel
from condflow.tasks import TaskSpec, evaluate, flow_config_for, make_task
from condflow.tensor import Parameter, Tensor, no_grad
from condflow.training import (ArrayDataset, TrainConfig, adam_step,
                               init_adam, load_checkpoint, restore_training,
                               save_checkpoint, smoothed, train_loop)

INVERT_TOL = 1e-8
JACOBIAN_TOL = 1e-5
MASS_TOL = 0.05
BOX_COVERAGE_MIN = 0.999
GRAD_TOL = 1e-6
IOU_MIN = 0.90
WIN_FRACTION = 0.8
SLOPE_RANGE = (-1.15, -0.85)
ADAM_TOL = 1e-12
RESUME_TOL = 1e-12

ONE_MINUTE = 60.0
TWO_MINUTES = 120.0
FIVE_MINUTES = 300.0
TEN_MINUTES = 600.0
THIRTY_MINUTES = 1800.0


def report(num: int, name: str, ok: bool, detail: str) -> str:
    line = f"[criterion {num:02d}] {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    print(line)
    return line


def small_config(h, w, c, levels, steps, bins=None) -> FlowConfig:
    return FlowConfig((h, w, c), (h, w, 1), levels=levels, steps=steps,
                      n_c=2, n_w=4, coupling_channels=4, feature_channels=2,
                      bins=bins)


def test_criterion_01_invertibility():
    """Round trips through every depth/width combination at up to 16x16."""
    t0 = time.perf_counter()
    worst = 0.0
    pairs = 0
    for i, (levels, steps, c) in enumerate(
            itertools.product((1, 2, 3), (1, 2, 4), (2, 4))):
        size = 16 if levels == 3 else 8
        rng = np.random.default_rng(1000 + i)
        model = FlowModel(small_config(size, size, c, levels, steps),
                          seed=1000 + i)
        # deep stacks compound the coupling contraction; keep the random
        # weights small enough that sigmoids stay in their linear range
        model.perturb_parameters(rng, 0.1 if levels * steps <= 4 else 0.05)
        for _ in range(6):
            x = Tensor(rng.normal(size=model.config.x_shape))
            y = rng.normal(size=model.config.y_shape)
            with no_grad():
                weights = model.condition(x)
                res = model.forward(x, Tensor(y), weights)
                back = model.inverse(x, res.parts, weights)
            worst = max(worst, float(np.max(np.abs(back.data - y))))
            pairs += 1
    elapsed = time.perf_counter() - t0
    ok = worst < INVERT_TOL and pairs >= 100 and elapsed < ONE_MINUTE
    line = report(1, "invertibility", ok,
                  f"max err {worst:.2e} over {pairs} pairs, {elapsed:.1f}s")
    assert ok, line


def test_criterion_02_exact_jacobian():
    """Analytic logdet against slogdet of the full numerical Jacobian."""
    t0 = time.perf_counter()
    geoms = [(2, 2, 1, 1, 1), (2, 2, 2, 1, 1), (2, 2, 4, 1, 2),
             (4, 4, 1, 1, 1), (4, 4, 1, 2, 1), (4, 4, 2, 1, 1),
             (4, 4, 2, 2, 2), (2, 4, 2, 1, 1), (4, 2, 2, 1, 2),
             (2, 2, 2, 1, 4)]
    worst = 0.0
    n_configs = 0
    for seed_base in (0, 50):
        for i, (h, w, c, levels, steps) in enumerate(geoms):
            assert h * w * c <= 32
            rng = np.random.default_rng(seed_base + i)
            model = FlowModel(small_config(h, w, c, levels, steps),
                              seed=seed_base + i)
            model.perturb_parameters(rng, 0.1)
            x = Tensor(rng.normal(size=model.config.x_shape))
            y = rng.normal(size=model.config.y_shape)
            with no_grad():
                weights = model.condition(x)
                analytic = float(model.forward(x, Tensor(y), weights)
                                 .logdet.data[0])
            sign, fd_logdet = np.linalg.slogdet(fd_jacobian(model, x, y))
            assert sign > 0, "numerical Jacobian lost orientation"
            rel = abs(fd_logdet - analytic) / max(1.0, abs(fd_logdet))
            worst = max(worst, rel)
            n_configs += 1
    elapsed = time.perf_counter() - t0
    ok = worst < JACOBIAN_TOL and n_configs == 20 and elapsed < TWO_MINUTES
    line = report(2, "exact jacobian", ok,
                  f"worst rel err {worst:.2e} over {n_configs} configs, "
                  f"{elapsed:.1f}s")
    assert ok, line


def test_criterion_03_normalization():
    """exp(log_likelihood) integrates to one over a box holding the mass."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    model = FlowModel(small_config(2, 2, 1, 1, 1), seed=0)
    model.perturb_parameters(rng, 0.05)
    x = rng.normal(size=model.config.x_shape)
    draws = np.stack([sample(model, x, rng) for _ in range(4000)])
    coverage = float(np.mean(np.max(np.abs(draws.reshape(4000, -1)), axis=1)
                             <= 5.0))
    mass = quadrature_mass(model, x, nodes=12, half_width=5.0)
    elapsed = time.perf_counter() - t0
    ok = (abs(mass - 1.0) < MASS_TOL and coverage >= BOX_COVERAGE_MIN
          and elapsed < TEN_MINUTES)
    line = report(3, "normalization", ok,
                  f"mass {mass:.6f}, box holds {coverage:.2%} of 4000 draws, "
                  f"{elapsed:.1f}s")
    assert ok, line


def test_criterion_04_gradient_fidelity():
    """Backprop against central differences for every parameter group."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    model = FlowModel(small_config(2, 2, 1, 1, 1), seed=0)
    model.perturb_parameters(rng, 0.3)
    pairs = [(rng.normal(size=model.config.x_shape),
              rng.normal(size=model.config.y_shape)) for _ in range(2)]
    errors = grad_group_errors(model, pairs, eps=1e-6)
    worst_name = max(errors, key=errors.get)
    worst = errors[worst_name]
    elapsed = time.perf_counter() - t0
    ok = worst < GRAD_TOL and elapsed < FIVE_MINUTES
    line = report(4, "gradient fidelity", ok,
                  f"worst group {worst_name} rel err {worst:.2e} "
                  f"of {len(errors)} groups, {elapsed:.1f}s")
    assert ok, line


def test_criterion_05_dequantization_bound():
    """Cell-mass quadrature dominates the Monte-Carlo Jensen estimate."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    model = FlowModel(small_config(2, 2, 1, 1, 1, bins=2), seed=0)
    model.perturb_parameters(rng, 0.1)
    patterns = [np.array(bits, dtype=np.int64).reshape(2, 2, 1)
                for bits in itertools.product((0, 1), repeat=4)]
    worst = np.inf
    checked = 0
    for xi in range(5):
        x = rng.normal(size=model.config.x_shape)
        for y in patterns:
            margin = dequant_bound_margin(model, x, y, nodes=5,
                                          mc_draws=128, seed=checked)
            worst = min(worst, margin)
            checked += 1
    elapsed = time.perf_counter() - t0
    ok = worst >= 0.0 and checked == 80 and elapsed < TEN_MINUTES
    line = report(5, "dequantization bound", ok,
                  f"min margin {worst:.4f} nats over {checked} (x,y), "
                  f"{elapsed:.1f}s")
    assert ok, line


def test_criterion_06_training_sanity():
    """Loss deciles strictly decrease and held-out IOU clears 0.90."""
    t0 = time.perf_counter()
    spec = TaskSpec(kind="binary-seg", size=8, train_size=64, test_size=16,
                    seed=0)
    train_ds, test_ds = make_task(spec)
    model = FlowModel(flow_config_for(spec, levels=1, steps=2, n_c=8, n_w=32,
                                      coupling_channels=16,
                                      feature_channels=8), seed=0)
    tcfg = TrainConfig(iters=8000, seed=0)
    assert tcfg.batch == 2 and tcfg.lr == 2e-4
    assert 2000 <= tcfg.iters <= 10000
    data = ArrayDataset(train_ds.x, train_ds.y, bins=train_ds.bins)
    curve = train_loop(model, data, tcfg)
    # window wide enough that batch-2 noise cannot mask the trend at the
    # flat end of the curve
    smooth = np.asarray(smoothed(curve, window=501))
    deciles = smooth[[round(len(smooth) * k / 10) - 1 for k in range(1, 11)]]
    decreasing = bool(np.all(np.diff(deciles) < 0))
    rep = evaluate(model, test_ds, PredictionConfig(mode="sample-mean", m=10),
                   np.random.default_rng(1))
    mean_iou = rep.aggregates["mean_iou"]
    elapsed = time.perf_counter() - t0
    ok = decreasing and mean_iou >= IOU_MIN and elapsed < THIRTY_MINUTES
    line = report(6, "training sanity", ok,
                  f"deciles decreasing={decreasing} "
                  f"(span {deciles[0]:.3f}->{deciles[-1]:.3f}), "
                  f"test IOU {mean_iou:.4f} on {len(rep.rows)} examples, "
                  f"{elapsed:.0f}s")
    assert ok, line


# -- a flow that is bimodal by construction ---------------------------------
#
# One coupling step on a 2x2x1 output. After the squeeze the four pixels
# become channels (v1, v2) and the coupling shift is driven only by
# t = v1[0] through a hand-set ReLU ramp r(t) = relu(k(t-t0)) - relu(k(t-t0)-1),
# so b2 = m*(1 - 2 r(t)) flips from +m to -m as t crosses t0. The conditional
# p(y|x) then has a heavy mode near v2 = -m/s2 (t below t0, 90% of the prior
# mass) and a light mode near v2 = +m/s2, separated by a density wall.

SIG2 = 1.0 / (1.0 + math.exp(-2.0))
RAMP_GAIN = 50.0
RAMP_KNEE = 1.2815515655446004   # 90th percentile of the standard normal
MODE_SHIFT = 4.0


def build_bimodal_model() -> FlowModel:
    model = FlowModel(small_config(2, 2, 1, 1, 1), seed=0)
    p = model.params
    for name in ("l0.s0.cpl.conv0", "l0.s0.cpl.conv1", "l0.s0.cpl.conv2"):
        p[name + ".w"].data = np.zeros_like(p[name + ".w"].data)
        p[name + ".b"].data = np.zeros_like(p[name + ".b"].data)
    # conv0 center taps read t and emit the two ReLU arms of the ramp
    p["l0.s0.cpl.conv0.w"].data[1, 1, 0, 0] = RAMP_GAIN
    p["l0.s0.cpl.conv0.b"].data[0, 0] = -RAMP_GAIN * RAMP_KNEE
    p["l0.s0.cpl.conv0.w"].data[1, 1, 0, 1] = RAMP_GAIN
    p["l0.s0.cpl.conv0.b"].data[0, 1] = -RAMP_GAIN * RAMP_KNEE - 1.0
    # conv1 passes both arms through
    p["l0.s0.cpl.conv1.w"].data[1, 1, 0, 0] = 1.0
    p["l0.s0.cpl.conv1.w"].data[1, 1, 1, 1] = 1.0
    # conv2 combines the arms into the shift; scale channels stay at zero
    # so the coupling scale is the zero-raw sigmoid
    for ch in (2, 3):
        p["l0.s0.cpl.conv2.w"].data[1, 1, 0, ch] = -2.0 * MODE_SHIFT
        p["l0.s0.cpl.conv2.w"].data[1, 1, 1, ch] = +2.0 * MODE_SHIFT
        p["l0.s0.cpl.conv2.b"].data[0, ch] = MODE_SHIFT
    return model


def bimodal_point(t, v2):
    y = np.zeros((2, 2, 1))
    y[0, 0, 0] = t
    y[1, 0, 0] = v2
    y[1, 1, 0] = v2
    return y


def bimodal_conditional_mean() -> np.ndarray:
    # E[v2] = -E[m (1 - 2 r(T))] / s2 for T standard normal, by quadrature
    gx, gw = np.polynomial.legendre.leggauss(400)
    t = 8.0 * gx
    w = 8.0 * gw
    phi = np.exp(-0.5 * t * t) / math.sqrt(2.0 * math.pi)
    ramp = (np.clip(RAMP_GAIN * (t - RAMP_KNEE), 0.0, None)
            - np.clip(RAMP_GAIN * (t - RAMP_KNEE) - 1.0, 0.0, None))
    shift_mean = float(np.sum(w * phi * MODE_SHIFT * (1.0 - 2.0 * ramp)))
    return bimodal_point(0.0, -shift_mean / SIG2)


def test_criterion_07_inference_comparison():
    """Gradient ascent stuck in the light mode loses to the sample mean."""
    t0 = time.perf_counter()
    model = build_bimodal_model()
    x = np.zeros((2, 2, 1))
    y_mean = bimodal_conditional_mean()

    # the construction really is bimodal: both mode centers sit far above
    # the wall between them, and draws split ~90/10 between the basins
    rng = np.random.default_rng(0)
    probe = rng.normal(size=(2, 2, 1))
    with no_grad():
        weights = model.condition(Tensor(x))
        res = model.forward(Tensor(x), Tensor(probe), weights)
        back = model.inverse(Tensor(x), res.parts, weights)
    assert np.max(np.abs(back.data - probe)) < 1e-9
    ll_major = log_likelihood_of(model, x, bimodal_point(0.0, -MODE_SHIFT / SIG2))
    ll_minor = log_likelihood_of(model, x, bimodal_point(RAMP_KNEE + 0.6,
                                                         +MODE_SHIFT / SIG2))
    ll_wall = log_likelihood_of(model, x, bimodal_point(RAMP_KNEE + 0.01,
                                                        +MODE_SHIFT / SIG2))
    assert ll_wall < ll_minor - 5.0 and ll_wall < ll_major - 5.0
    basin = np.stack([sample(model, x, rng) for _ in range(400)])
    frac_major = float(np.mean(basin[:, 1, 0, 0] < 0.0))
    assert 0.84 <= frac_major <= 0.96

    wins = 0
    wall_sm = 0.0
    wall_gr = 0.0
    adversary = bimodal_point(RAMP_KNEE + 0.6, MODE_SHIFT / SIG2)
    for trial in range(50):
        rng = np.random.default_rng(100 + trial)
        tic = time.perf_counter()
        sm = predict_sample_mean(model, x, rng, m=10)
        wall_sm += time.perf_counter() - tic
        init = adversary + rng.normal(0.0, 0.05, size=(2, 2, 1))
        tic = time.perf_counter()
        gr = predict_gradient(model, x, steps=1000, step_size=0.1, init=init)
        wall_gr += time.perf_counter() - tic
        if (np.linalg.norm(gr.y_star - y_mean)
                > np.linalg.norm(sm.y_star - y_mean)):
            wins += 1
    elapsed = time.perf_counter() - t0
    ok = (wins >= WIN_FRACTION * 50 and wall_sm < wall_gr
          and elapsed < TEN_MINUTES)
    line = report(7, "inference comparison", ok,
                  f"sample-mean better in {wins}/50 trials, "
                  f"wall {wall_sm * 20:.1f} vs {wall_gr * 20:.0f} ms/call, "
                  f"{elapsed:.0f}s")
    assert ok, line


def test_criterion_08_estimator_scaling():
    """Variance of the M-sample mean falls like 1/M."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    model = FlowModel(small_config(2, 2, 1, 1, 1), seed=0)
    model.perturb_parameters(rng, 0.05)
    x = rng.normal(size=model.config.x_shape)
    pool = np.stack([sample(model, x, rng).ravel() for _ in range(200 * 64)])
    ms = np.arange(1, 65)
    log_var = []
    for m in ms:
        groups = pool[:(pool.shape[0] // m) * m].reshape(-1, m, pool.shape[1])
        log_var.append(math.log(groups.mean(axis=1).var(axis=0, ddof=1).mean()))
    slope = float(np.polyfit(np.log(ms), np.array(log_var), 1)[0])
    elapsed = time.perf_counter() - t0
    ok = SLOPE_RANGE[0] <= slope <= SLOPE_RANGE[1] and elapsed < FIVE_MINUTES
    line = report(8, "estimator scaling", ok,
                  f"log-log slope {slope:.4f} over M in 1..64, {elapsed:.1f}s")
    assert ok, line


def test_criterion_09_optimizer_oracle():
    """Adam on a scalar quadratic against a hand-rolled recurrence."""
    t0 = time.perf_counter()
    target = 0.7
    p = Parameter("theta", np.array([2.5]))
    params = {"theta": p}
    state = init_adam(params)
    tcfg = TrainConfig(iters=100, lr=2e-4, beta1=0.9, beta2=0.999)
    theta = 2.5
    m1 = v1 = 0.0
    worst = 0.0
    for t in range(1, 101):
        p.grad = p.data - target          # d/dtheta of 0.5 (theta - target)^2
        adam_step(params, state, tcfg)
        g = theta - target
        m1 = tcfg.beta1 * m1 + (1.0 - tcfg.beta1) * g
        v1 = tcfg.beta2 * v1 + (1.0 - tcfg.beta2) * g * g
        m_hat = m1 / (1.0 - tcfg.beta1 ** t)
        v_hat = v1 / (1.0 - tcfg.beta2 ** t)
        theta -= tcfg.lr * m_hat / (math.sqrt(v_hat) + tcfg.eps)
        worst = max(worst, abs(float(p.data[0]) - theta))
    elapsed = time.perf_counter() - t0
    ok = worst <= ADAM_TOL and elapsed < 1.0
    line = report(9, "optimizer oracle", ok,
                  f"max trajectory gap {worst:.2e} over 100 steps, "
                  f"{elapsed * 1000:.0f}ms")
    assert ok, line


def test_criterion_10_persistence(tmp_path):
    """A run split by a mid-run checkpoint matches its uninterrupted twin."""
    t0 = time.perf_counter()
    spec = TaskSpec(kind="binary-seg", size=8, train_size=8, test_size=2,
                    seed=5)
    train_ds, _ = make_task(spec)
    data = ArrayDataset(train_ds.x, train_ds.y, bins=train_ds.bins)
    fcfg = flow_config_for(spec, levels=1, steps=1, n_c=2, n_w=8,
                           coupling_channels=8, feature_channels=4)
    full = TrainConfig(iters=40, seed=9)

    straight = FlowModel(fcfg, seed=3)
    curve_straight = train_loop(straight, data, full)

    part = FlowModel(fcfg, seed=3)
    state = init_adam(part.params)
    rng = np.random.default_rng(full.seed)
    train_loop(part, data, TrainConfig(iters=20, seed=full.seed),
               adam_state=state, rng=rng)
    path = tmp_path / "mid.ckpt"
    save_checkpoint(path, part, state, 20, rng, full)
    resumed, state_b, cfg_b, start, rng_b = restore_training(
        load_checkpoint(path))

    bitwise = all(
        resumed.params[n].data.tobytes() == part.params[n].data.tobytes()
        and state_b.m[n].tobytes() == state.m[n].tobytes()
        and state_b.v[n].tobytes() == state.v[n].tobytes()
        for n in part.params)
    assert start == 20 and cfg_b.iters == 40 and state_b.t == state.t

    curve_resumed = train_loop(resumed, data, cfg_b, start_iteration=start,
                               adam_state=state_b, rng=rng_b)
    d = straight.y_dim
    next_gap = abs(curve_resumed[0][1] * d - curve_straight[20][1] * d)
    tail_match = curve_resumed == curve_straight[20:]
    final_match = all(
        resumed.params[n].data.tobytes() == straight.params[n].data.tobytes()
        for n in straight.params)
    elapsed = time.perf_counter() - t0
    ok = (bitwise and next_gap <= RESUME_TOL and tail_match and final_match
          and elapsed < FIVE_MINUTES)
    line = report(10, "persistence", ok,
                  f"round-trip bitwise={bitwise}, next-iteration NLL gap "
                  f"{next_gap:.1e}, tail identical={tail_match}, "
                  f"{elapsed:.1f}s")
    assert ok, line
