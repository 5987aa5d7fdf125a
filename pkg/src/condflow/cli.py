"""Command-line surface: gen, train, predict, sample, eval, check.

Exit codes: 0 success, 1 usage error, 2 configuration or input-format
error, 3 numeric failure (singular matrix, non-finite loss), 4 one or
more verification checks failed.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import checks, fileio, inference, tasks
from .config import Config, ConfigError, load_config
from .inference import PredictionConfig
from .linalg import SingularMatrixError
from .model import FlowModel
from .tensor import NumericsError
from .training import (TrainConfig, load_checkpoint, restore_model,
                       restore_training, train_loop)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_CHECK = 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):   # argparse default exits with code 2
        raise UsageError(message)


def _task_spec(cfg: Config) -> tasks.TaskSpec:
    spec = tasks.TaskSpec(
        kind=cfg.get("task.kind"),
        size=cfg.get("task.size"),
        train_size=cfg.get("task.train_size"),
        test_size=cfg.get("task.test_size"),
        sigma=cfg.get("task.sigma"),
        mask_fraction=cfg.get("task.mask_fraction"),
        seed=cfg.get("train.seed"),
    )
    spec.validate()
    return spec


def _flow_config(cfg: Config, spec: tasks.TaskSpec):
    fc = tasks.flow_config_for(
        spec,
        levels=cfg.get("model.L"),
        steps=cfg.get("model.K"),
        n_c=cfg.get("model.n_c"),
        n_w=cfg.get("model.n_w"),
        coupling_channels=cfg.get("model.coupling_channels"),
        feature_channels=cfg.get("model.feature_channels"),
    )
    fc.validate()
    return fc


def _train_config(cfg: Config) -> TrainConfig:
    return TrainConfig(
        iters=cfg.get("train.iters"),
        lr=cfg.get("train.lr"),
        beta1=cfg.get("train.beta1"),
        beta2=cfg.get("train.beta2"),
        batch=cfg.get("train.batch"),
        seed=cfg.get("train.seed"),
        checkpoint_interval=cfg.get("train.checkpoint_interval"),
    )


def _predict_config(cfg: Config, args) -> PredictionConfig:
    for key, attr in (("predict.mode", "mode"), ("predict.M", "M"),
                      ("predict.temperature", "temperature"),
                      ("predict.steps", "steps"),
                      ("predict.step_size", "step_size")):
        value = getattr(args, attr, None)
        if value is not None:
            cfg.override(key, value)
    pcfg = PredictionConfig(
        mode=cfg.get("predict.mode"),
        m=cfg.get("predict.M"),
        temperature=cfg.get("predict.temperature"),
        steps=cfg.get("predict.steps"),
        step_size=cfg.get("predict.step_size"),
    )
    pcfg.validate()
    return pcfg


def _export_view(kind: str, out: np.ndarray, x: np.ndarray) -> np.ndarray:
    """2-D grayscale rendering of a discretized prediction."""
    if kind == "binary-seg":
        return out * 255.0
    if kind == "denoise":
        return x[:, :, 0] - out[:, :, 0]    # denoised image
    return out[:, :, 0]


def cmd_gen(args) -> int:
    cfg = load_config(args.config)
    spec = _task_spec(cfg)
    _flow_config(cfg, spec)   # fail fast if geometry and levels disagree
    outdir = Path(args.outdir) if args.outdir else Path(cfg.get("io.outdir"))
    train_ds, test_ds = tasks.make_task(spec)
    tasks.save_task(outdir, train_ds, test_ds)
    print(f"wrote {len(train_ds)} train / {len(test_ds)} test "
          f"{spec.kind} examples to {outdir}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    train_ds, _ = tasks.load_task(args.data)
    outdir = Path(cfg.get("io.outdir"))

    def progress(it, nll):
        if it % max(1, args.log_every) == 0:
            print(f"iter {it}: nll {nll:.4f} nats/dim")

    if args.resume:
        model, state, tc, start, rng = restore_training(load_checkpoint(args.resume))
        print(f"resuming at iteration {start} from {args.resume}")
        curve = train_loop(model, train_ds, tc, outdir=outdir,
                           start_iteration=start, adam_state=state, rng=rng,
                           progress=progress)
    else:
        tc = _train_config(cfg)
        model = FlowModel(_flow_config(cfg, train_ds.spec), seed=tc.seed)
        curve = train_loop(model, train_ds, tc, outdir=outdir, progress=progress)
    if curve:
        print(f"final nll {curve[-1][1]:.4f} nats/dim")
    print(f"model checkpoint: {outdir / 'model.ckpt'}")
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = load_config(args.config)
    pcfg = _predict_config(cfg, args)
    model = restore_model(load_checkpoint(args.model))
    _, test_ds = tasks.load_task(args.data)
    outdir = Path(cfg.get("io.outdir")) / "predictions"
    outdir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.get("train.seed"))
    indices = [args.index] if args.index is not None else range(len(test_ds))
    records = []
    for i in indices:
        if not 0 <= i < len(test_ds):
            raise UsageError(f"index {i} outside test set of {len(test_ds)}")
        pred = inference.predict(model, test_ds.x[i], pcfg, rng)
        fileio.write_tensor(outdir / f"pred_{i:03d}.cft", pred.y_star)
        if pred.variance is not None:
            fileio.write_tensor(outdir / f"var_{i:03d}.cft", pred.variance)
        out = inference.discretize(pred.y_star, test_ds.spec.kind,
                                   bins=test_ds.bins or 2)
        fileio.write_tensor(outdir / f"out_{i:03d}.cft", out)
        if args.images:
            fileio.write_pgm(outdir / f"out_{i:03d}.pgm",
                             _export_view(test_ds.spec.kind, out, test_ds.x[i]))
        records.append({"index": int(i), "mode": pcfg.mode,
                        "log_likelihood": pred.log_likelihood,
                        "steps_taken": pred.steps_taken})
    fileio.write_jsonl(outdir / "predictions.jsonl", records)
    print(f"wrote {len(records)} prediction(s) to {outdir}")
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg = load_config(args.config)
    if args.temperature is not None:
        cfg.override("predict.temperature", args.temperature)
    temperature = cfg.get("predict.temperature")
    model = restore_model(load_checkpoint(args.model))
    _, test_ds = tasks.load_task(args.data)
    if not 0 <= args.index < len(test_ds):
        raise UsageError(f"index {args.index} outside test set of {len(test_ds)}")
    outdir = Path(cfg.get("io.outdir")) / "samples"
    outdir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.get("train.seed"))
    x = test_ds.x[args.index]
    for j in range(args.count):
        draw = inference.sample(model, x, rng, temperature=temperature)
        fileio.write_tensor(outdir / f"sample_{args.index:03d}_{j:02d}.cft", draw)
        if args.images:
            out = inference.discretize(draw, test_ds.spec.kind,
                                       bins=test_ds.bins or 2)
            fileio.write_pgm(outdir / f"sample_{args.index:03d}_{j:02d}.pgm",
                             _export_view(test_ds.spec.kind, out, x))
    print(f"wrote {args.count} draw(s) for example {args.index} to {outdir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    pcfg = _predict_config(cfg, args)
    model = restore_model(load_checkpoint(args.model))
    _, test_ds = tasks.load_task(args.data)
    outdir = Path(cfg.get("io.outdir"))
    outdir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.get("train.seed"))
    report = tasks.evaluate(model, test_ds, pcfg, rng)
    report.to_csv(outdir / "report.csv")
    report.to_jsonl(outdir / "report.jsonl")
    for key, value in sorted(report.aggregates.items()):
        print(f"{key}: {value:.4f}")
    print(f"mode {report.mode} (M={report.m}), {report.wall_time:.2f}s; "
          f"report in {outdir}")
    return EXIT_OK


def cmd_check(args) -> int:
    results = checks.run_all(args.seed)
    print(checks.format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


def build_parser() -> _Parser:
    p = _Parser(prog="condflow",
                description="Conditional normalizing flows for structured prediction")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--outdir", help="override io.outdir for the dataset")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model on a generated dataset")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True, help="dataset directory from `gen`")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--log-every", type=int, default=100)
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="predict test examples")
    pr.add_argument("--config", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--model", required=True, help="checkpoint file")
    pr.add_argument("--mode", choices=["sample-mean", "gradient"])
    pr.add_argument("--M", type=int, dest="M")
    pr.add_argument("--temperature", type=float)
    pr.add_argument("--steps", type=int)
    pr.add_argument("--step-size", type=float, dest="step_size")
    pr.add_argument("--index", type=int, help="single test example (default: all)")
    pr.add_argument("--images", action="store_true", help="also write PGM previews")
    pr.set_defaults(func=cmd_predict)

    s = sub.add_parser("sample", help="draw conditional samples")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--count", type=int, default=4)
    s.add_argument("--temperature", type=float)
    s.add_argument("--images", action="store_true")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="score predictions on the test set")
    e.add_argument("--config", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--mode", choices=["sample-mean", "gradient"])
    e.add_argument("--M", type=int, dest="M")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("check", help="run the numeric verification suite")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:       # argparse --help
        code = e.code if isinstance(e.code, int) else 0
        return code
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except fileio.FormatError as e:
        print(f"input error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as e:       # contract violations from validation layers
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericsError, SingularMatrixError, ZeroDivisionError,
            FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
