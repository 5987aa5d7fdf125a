"""Desk-scale synthetic tasks, their metrics, and dataset persistence.

Three task families cover the structured-output settings the toolkit
targets:

* binary-seg: grayscale images of 1-3 bright ellipses/rectangles on a
  darker textured background; the target is the shape-interior mask,
  tiled to 3 identical channels, so the flow sees a multi-channel target
  whose channels must agree.
* denoise: smooth sinusoid fields on the 0-255 scale corrupted by
  N(0, sigma^2) noise; the input is the noisy image and the continuous
  target is the residual (noisy minus clean).
* inpaint: quantized smooth fields with a central block zeroed in the
  input; the target is the hidden block's 0-255 contents.

Generation is a pure function of (spec, seed). Datasets persist as tensor
files plus a JSON manifest carrying the task parameters and per-file
SHA-256 hashes.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import fileio, inference
from .model import FlowConfig, FlowModel

KINDS = ("binary-seg", "denoise", "inpaint")


@dataclass
class TaskSpec:
    kind: str
    size: int = 8
    train_size: int = 64
    test_size: int = 16
    sigma: float = 25.0            # denoise noise level, 0-255 scale
    mask_fraction: float = 0.25    # inpaint hidden-area fraction
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.size < 8:
            raise ValueError(f"task size must be at least 8, got {self.size}")
        if self.train_size < 1 or self.test_size < 0:
            raise ValueError("dataset sizes must be positive")
        if self.kind == "denoise" and self.sigma <= 0:
            raise ValueError("noise sigma must be positive")
        if self.kind == "inpaint" and not 0.0 < self.mask_fraction < 1.0:
            raise ValueError("mask fraction must lie in (0, 1)")

    @property
    def bins(self) -> Optional[int]:
        return {"binary-seg": 2, "denoise": None, "inpaint": 256}[self.kind]

    def block_geometry(self) -> tuple[int, int, int, int]:
        """(row0, col0, height, width) of the hidden central block."""
        side = int(round(self.size * math.sqrt(self.mask_fraction)))
        side -= side % 2
        if side < 2:
            raise ValueError(f"mask fraction {self.mask_fraction} gives a "
                             f"degenerate block on size {self.size}")
        if side >= self.size:
            raise ValueError(f"mask fraction {self.mask_fraction} hides the whole image")
        off = (self.size - side) // 2
        return off, off, side, side

    def y_shape(self) -> tuple[int, int, int]:
        if self.kind == "binary-seg":
            return (self.size, self.size, 3)
        if self.kind == "denoise":
            return (self.size, self.size, 1)
        _, _, bh, bw = self.block_geometry()
        return (bh, bw, 1)

    def x_shape(self) -> tuple[int, int, int]:
        return (self.size, self.size, 1)


@dataclass
class Dataset:
    spec: TaskSpec
    x: np.ndarray                  # (n, h, w, 1)
    y: np.ndarray                  # (n,) + spec.y_shape()
    block: Optional[tuple[int, int, int, int]] = None

    @property
    def bins(self) -> Optional[int]:
        return self.spec.bins

    def __len__(self) -> int:
        return self.x.shape[0]


def _smooth_field(rng: np.random.Generator, size: int, waves: int = 4) -> np.ndarray:
    """Superposed low-frequency sinusoids, scaled to [0, 1]."""
    r, c = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    f = np.zeros((size, size))
    for _ in range(waves):
        amp = rng.uniform(0.3, 1.0)
        p, q = rng.uniform(-2.0, 2.0, size=2)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        f += amp * np.sin(2.0 * np.pi * (p * r + q * c) / size + phase)
    lo, hi = f.min(), f.max()
    return (f - lo) / (hi - lo + 1e-12)


def _shape_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    """Union of 1-3 random filled ellipses/rectangles, with a coverage
    guarantee of 5-80% positive pixels."""
    r, c = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    for _ in range(1000):
        mask = np.zeros((size, size), dtype=bool)
        for _ in range(rng.integers(1, 4)):
            cy, cx = rng.uniform(size * 0.2, size * 0.8, size=2)
            ay, ax = rng.uniform(size / 8.0, size / 3.0, size=2)
            if rng.random() < 0.5:
                mask |= ((r - cy) / ay) ** 2 + ((c - cx) / ax) ** 2 <= 1.0
            else:
                mask |= (np.abs(r - cy) <= ay) & (np.abs(c - cx) <= ax)
        frac = mask.mean()
        if 0.05 <= frac <= 0.80:
            return mask
    raise ValueError(f"could not draw a 5-80% coverage mask at size {size}")


def gen_binary_seg(spec: TaskSpec, rng: np.random.Generator,
                   count: Optional[int] = None) -> Dataset:
    spec.validate()
    n = spec.train_size if count is None else count
    s = spec.size
    xs = np.empty((n, s, s, 1))
    ys = np.empty((n, s, s, 3))
    for i in range(n):
        mask = _shape_mask(rng, s)
        background = 0.15 + 0.2 * _smooth_field(rng, s) + rng.uniform(0, 0.05, (s, s))
        interior = 0.65 + 0.3 * _smooth_field(rng, s)
        img = np.where(mask, interior, background)
        xs[i, :, :, 0] = img
        ys[i] = np.repeat(mask[:, :, None].astype(np.float64), 3, axis=2)
    return Dataset(spec, xs, ys)


def gen_denoise(spec: TaskSpec, rng: np.random.Generator,
                count: Optional[int] = None) -> Dataset:
    spec.validate()
    n = spec.train_size if count is None else count
    s = spec.size
    xs = np.empty((n, s, s, 1))
    ys = np.empty((n, s, s, 1))
    for i in range(n):
        clean = 255.0 * _smooth_field(rng, s)
        noise = rng.normal(0.0, spec.sigma, size=(s, s))
        xs[i, :, :, 0] = clean + noise
        ys[i, :, :, 0] = noise       # residual: noisy minus clean, exactly
    return Dataset(spec, xs, ys)


def gen_inpaint(spec: TaskSpec, rng: np.random.Generator,
                count: Optional[int] = None) -> Dataset:
    spec.validate()
    n = spec.train_size if count is None else count
    s = spec.size
    r0, c0, bh, bw = spec.block_geometry()
    xs = np.empty((n, s, s, 1))
    ys = np.empty((n, bh, bw, 1))
    for i in range(n):
        img = np.floor(256.0 * _smooth_field(rng, s)).clip(0, 255)
        ys[i, :, :, 0] = img[r0:r0 + bh, c0:c0 + bw]
        occluded = img.copy()
        occluded[r0:r0 + bh, c0:c0 + bw] = 0.0
        xs[i, :, :, 0] = occluded
    return Dataset(spec, xs, ys, block=(r0, c0, bh, bw))


_GENERATORS = {"binary-seg": gen_binary_seg, "denoise": gen_denoise,
               "inpaint": gen_inpaint}


def make_task(spec: TaskSpec) -> tuple[Dataset, Dataset]:
    """Deterministic train/test pair from one seed."""
    rng = np.random.default_rng(spec.seed)
    gen = _GENERATORS[spec.kind]
    return gen(spec, rng, spec.train_size), gen(spec, rng, spec.test_size)


def flow_config_for(spec: TaskSpec, levels: int = 2, steps: int = 2,
                    n_c: int = 8, n_w: int = 32, coupling_channels: int = 64,
                    feature_channels: int = 16) -> FlowConfig:
    """Model geometry matching a task: target shape, bins or residual scale,
    and conditioning-input scale."""
    norm_scale = spec.sigma if spec.kind == "denoise" else 1.0
    x_scale = 1.0 if spec.kind == "binary-seg" else 255.0
    return FlowConfig(
        y_shape=spec.y_shape(), x_shape=spec.x_shape(),
        levels=levels, steps=steps, n_c=n_c, n_w=n_w,
        coupling_channels=coupling_channels, feature_channels=feature_channels,
        bins=spec.bins, norm_scale=norm_scale, x_scale=x_scale,
    )


# -- metrics ----------------------------------------------------------------

def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def iou(pred_mask: np.ndarray, true_mask: np.ndarray) -> float:
    """Intersection over union of two binary masks; empty union counts as 1."""
    pred_mask = np.asarray(pred_mask)
    true_mask = np.asarray(true_mask)
    _check_shapes(pred_mask, true_mask)
    for m in (pred_mask, true_mask):
        if not np.all((m == 0) | (m == 1)):
            raise ValueError("masks must be binary")
    p = pred_mask.astype(bool)
    t = true_mask.astype(bool)
    union = np.logical_or(p, t).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, t).sum() / union)


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 255.0) -> float:
    """20*log10(peak/RMSE); +inf for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_shapes(a, b)
    rmse = float(np.sqrt(np.mean((a - b) ** 2)))
    if rmse == 0.0:
        return float("inf")
    return 20.0 * math.log10(peak / rmse)


def pixel_accuracy(pred: np.ndarray, true: np.ndarray) -> float:
    pred = np.asarray(pred)
    true = np.asarray(true)
    _check_shapes(pred, true)
    return float(np.mean(pred == true))


@dataclass
class MetricReport:
    mode: str
    m: int
    wall_time: float
    rows: list[dict] = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)

    def to_csv(self, path: Union[str, Path]) -> None:
        cols = ["index", "iou", "psnr", "pixel_accuracy"]
        rows = [[r.get("index"), *(("" if r.get(c) is None else repr(r[c]))
                                   for c in cols[1:])] for r in self.rows]
        fileio.write_csv(path, cols, rows)

    def to_jsonl(self, path: Union[str, Path]) -> None:
        records = list(self.rows)
        records.append({"aggregate": self.aggregates, "mode": self.mode,
                        "m": self.m, "wall_time": self.wall_time})
        fileio.write_jsonl(path, records)


def evaluate(model: FlowModel, dataset: Dataset, cfg: inference.PredictionConfig,
             rng: np.random.Generator) -> MetricReport:
    """Predict every test example, discretize, and score with the task's
    metrics (IOU and accuracy for masks, PSNR for images)."""
    kind = dataset.spec.kind
    t0 = time.perf_counter()
    rows = []
    for i in range(len(dataset)):
        pred = inference.predict(model, dataset.x[i], cfg, rng)
        out = inference.discretize(pred.y_star, kind,
                                   bins=dataset.bins or 2)
        row: dict = {"index": i, "log_likelihood": pred.log_likelihood}
        if kind == "binary-seg":
            truth = dataset.y[i][:, :, 0]
            row["iou"] = iou(out, truth)
            row["pixel_accuracy"] = pixel_accuracy(out, truth)
        elif kind == "denoise":
            noisy = dataset.x[i][:, :, 0]
            clean = noisy - dataset.y[i][:, :, 0]
            denoised = noisy - out[:, :, 0]
            row["psnr"] = psnr(clean, denoised, peak=255.0)
        else:
            truth = dataset.y[i][:, :, 0]
            row["psnr"] = psnr(out[:, :, 0], truth, peak=255.0)
            row["pixel_accuracy"] = pixel_accuracy(out[:, :, 0], truth)
        rows.append(row)
    wall = time.perf_counter() - t0
    agg = {}
    for key in ("iou", "psnr", "pixel_accuracy", "log_likelihood"):
        vals = [r[key] for r in rows if key in r and np.isfinite(r[key])]
        if vals:
            agg["mean_" + key] = float(np.mean(vals))
    return MetricReport(mode=cfg.mode, m=cfg.m, wall_time=wall,
                        rows=rows, aggregates=agg)


# -- persistence ------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_task(outdir: Union[str, Path], train: Dataset, test: Dataset) -> None:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"train_x": train.x, "train_y": train.y,
             "test_x": test.x, "test_y": test.y}
    hashes = {}
    for name, arr in files.items():
        path = out / f"{name}.cft"
        fileio.write_tensor(path, arr)
        hashes[name] = _sha256(path)
    spec = train.spec
    manifest = {
        "kind": spec.kind, "size": spec.size,
        "train_size": spec.train_size, "test_size": spec.test_size,
        "sigma": spec.sigma, "mask_fraction": spec.mask_fraction,
        "seed": spec.seed,
        "block": list(train.block) if train.block else None,
        "sha256": hashes,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_task(indir: Union[str, Path]) -> tuple[Dataset, Dataset]:
    """Read a generated dataset back, verifying the manifest hashes."""
    src = Path(indir)
    manifest_path = src / "manifest.json"
    if not manifest_path.exists():
        raise fileio.FormatError(f"no manifest.json in {src}")
    manifest = json.loads(manifest_path.read_text())
    spec = TaskSpec(kind=manifest["kind"], size=manifest["size"],
                    train_size=manifest["train_size"],
                    test_size=manifest["test_size"], sigma=manifest["sigma"],
                    mask_fraction=manifest["mask_fraction"],
                    seed=manifest["seed"])
    arrays = {}
    for name in ("train_x", "train_y", "test_x", "test_y"):
        path = src / f"{name}.cft"
        if not path.exists():
            raise fileio.FormatError(f"dataset file missing: {path}")
        if _sha256(path) != manifest["sha256"][name]:
            raise fileio.FormatError(f"hash mismatch for {path}; dataset corrupted")
        arrays[name] = fileio.read_tensor(path)
    block = tuple(manifest["block"]) if manifest.get("block") else None
    train = Dataset(spec, arrays["train_x"], arrays["train_y"], block=block)
    test = Dataset(spec, arrays["test_x"], arrays["test_y"], block=block)
    return train, test
