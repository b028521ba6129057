"""Training, evaluation, gradient checking and ablation sweeps."""

import itertools
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import netcore as nc
from .checkpoint import load_checkpoint, save_checkpoint
from .datasets import load_shapenet_part, synthetic_split, text_split
from .errors import ArchitectureMismatchError, DatasetError, NumericError
from .metrics import (ConfusionMatrix, category_mean_iou, confusion_update, format_report,
                      mean_iou, report_records, shape_part_iou)
from .model import PbpNet, grid_normalize_op, segmentation_loss
from .pcgeom import SYNTHETIC_NUM_CLASSES
from .planeops import coord_grad, sample, splat


def learning_rate(step, lr0, factor, decay_step):
    """Learning rate in effect after ``step`` optimiser steps."""
    return lr0 * factor ** (step // decay_step)


def _text_files(cfg, split):
    root = Path(cfg.data_path)
    sub = root / split
    folder = sub if sub.is_dir() else root
    files = sorted(folder.glob("*.txt"))
    if not files:
        raise DatasetError(f"no .txt point files in {folder}")
    return files


def build_split(cfg, split):
    """The dataset split named ``split`` ("train", "test", "val" or "all")."""
    if cfg.dataset in SYNTHETIC_NUM_CLASSES:
        count = cfg.train_clouds if split == "train" else cfg.test_clouds
        return synthetic_split(cfg.dataset, count, cfg.points_per_cloud, cfg.seed, split)
    if cfg.dataset == "shapenet":
        return load_shapenet_part(cfg.data_path, cfg.category or None, split)
    return text_split(_text_files(cfg, split), cfg.resolved_num_classes())


def _batches(cfg, split, epoch, shuffle=True):
    from .datasets import batch_iterator

    return batch_iterator(split, cfg.batch_size, cfg.points_per_cloud, cfg.seed, epoch,
                          shuffle=shuffle, with_index=True)


@dataclass
class TrainResult:
    model: PbpNet
    history: list
    checkpoint: Path | None
    best_checkpoint: Path | None
    seconds: float


def train_step(model, coords, labels, state, lr):
    """One forward/backward/Adam step; returns (loss, correct count, new state)."""
    model.zero_grad()
    logits = model.forward(coords)
    loss = segmentation_loss(logits, labels)
    value = float(loss.data)
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss {value} at optimiser step {state.step}")
    loss.backward()
    new_params, state = nc.adam_update(model.state_dict(), model.grads(), state, lr)
    for name, array in new_params.items():
        model.params[name].data = array
    correct = int((logits.data.argmax(axis=-1) == labels).sum())
    return value, correct, state


def run_train(cfg, log=None, write_checkpoint=True):
    """Train from scratch with Adam and step-based learning-rate decay.

    Appends one ``key=value`` line per epoch to ``cfg.log`` (if set) and
    calls ``log(record)`` with the same dict. Writes the final checkpoint to
    ``cfg.checkpoint`` and the lowest-loss one next to it with ``.best``
    inserted before the suffix.
    """
    start = time.perf_counter()
    split = build_split(cfg, "train")
    model = PbpNet(cfg.model_config(), seed=cfg.seed)
    state = nc.AdamState()
    ckpt = Path(cfg.checkpoint) if write_checkpoint and cfg.checkpoint else None
    best_ckpt = ckpt.with_name(f"{ckpt.stem}.best{ckpt.suffix}") if ckpt else None
    log_file = open(cfg.log, "a") if cfg.log else None
    history, best = [], np.inf
    try:
        for epoch in range(cfg.epochs):
            losses, correct, seen = [], 0, 0
            for coords, labels, _ in _batches(cfg, split, epoch):
                lr = learning_rate(state.step, cfg.lr, cfg.lr_decay, cfg.lr_decay_step)
                loss, hits, state = train_step(model, coords, labels, state, lr)
                losses.append(loss * labels.size)
                correct += hits
                seen += labels.size
            record = {"epoch": epoch + 1, "step": state.step, "loss": sum(losses) / seen,
                      "accuracy": correct / seen, "lr": lr}
            history.append(record)
            if log_file:
                log_file.write(" ".join(f"{k}={_fmt(v)}" for k, v in record.items()) + "\n")
                log_file.flush()
            if log:
                log(record)
            if best_ckpt and record["loss"] < best:
                best = record["loss"]
                save_checkpoint(model.state_dict(), best_ckpt)
    finally:
        if log_file:
            log_file.close()
    if ckpt:
        save_checkpoint(model.state_dict(), ckpt)
    return TrainResult(model, history, ckpt, best_ckpt, time.perf_counter() - start)


def _fmt(value):
    return f"{value:.6g}" if isinstance(value, float) else str(value)


@dataclass
class EvalReport:
    confusion: ConfusionMatrix
    miou: float
    accuracy: float
    mciou: float | None = None
    text: str = ""
    records: str = ""


def evaluate(model, cfg, split):
    """Confusion matrix over ``split`` plus category-mean IoU for part datasets."""
    num_classes = model.config.num_classes
    cm = ConfusionMatrix.empty(num_classes)
    per_shape = {}
    for coords, labels, index in _batches(cfg, split, 0, shuffle=False):
        pred = model.predict(coords)
        if labels.max() >= num_classes:
            raise ArchitectureMismatchError(
                f"dataset has label {labels.max()} but the model predicts {num_classes} classes")
        cm = confusion_update(cm, pred, labels)
        if split.part_offsets:
            for row, i in enumerate(index):
                category = split.categories[int(i)]
                per_shape.setdefault(category, []).append(
                    shape_part_iou(pred[row], labels[row], split.part_ids(category)))
    mciou = category_mean_iou(per_shape) if per_shape else None
    extra = {"mcIoU": mciou} if mciou is not None else {}
    return EvalReport(cm, mean_iou(cm), cm.overall_accuracy(), mciou,
                      format_report(cm, extra), report_records(cm, extra))


def run_eval(cfg, checkpoint=None, model=None):
    """Evaluate a checkpoint (default ``cfg.checkpoint``) on ``cfg.eval_split``.

    When ``cfg.report`` is set, the text table is written there and the
    key-value records to the same path with ``.kv`` appended.
    """
    if model is None:
        model = PbpNet(cfg.model_config(), seed=cfg.seed)
        model.load_state_dict(load_checkpoint(checkpoint or cfg.checkpoint))
    report = evaluate(model, cfg, build_split(cfg, cfg.eval_split))
    if cfg.report:
        Path(cfg.report).write_text(report.text)
        Path(cfg.report + ".kv").write_text(report.records)
    return report


# -- gradient checking ---------------------------------------------------------

def relative_error(analytic, numeric, floor=1e-7):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def finite_difference(f, x, index, eps):
    """Central difference of scalar ``f()`` w.r.t. ``x[index]`` (perturbed in place)."""
    saved = x[index]
    x[index] = saved + eps
    up = f()
    x[index] = saved - eps
    down = f()
    x[index] = saved
    return (up - down) / (2 * eps)


@dataclass
class GradcheckReport:
    tolerance: float
    groups: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(err <= self.tolerance for err in self.groups.values())

    def failures(self):
        return {k: v for k, v in self.groups.items() if v > self.tolerance}

    def format(self):
        lines = [f"{'group':<28} {'max rel err':>12}  status"]
        for name, err in self.groups.items():
            lines.append(f"{name:<28} {err:12.3e}  {'ok' if err <= self.tolerance else 'FAIL'}")
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'} (tolerance {self.tolerance:g})")
        return "\n".join(lines) + "\n"


def gradcheck_fixture(seed=0, n_points=8, dtype=np.float64):
    rng = np.random.default_rng(seed)
    coords = rng.uniform(-1, 1, size=(1, n_points, 3)).astype(dtype)
    return coords, rng


def perturb_for_gradcheck(model, rng, scale=0.05):
    """Break the exact-zero initialisation so every layer has a gradient."""
    for name, t in model.params.items():
        if name.endswith(".b") or name.endswith("out.w"):
            t.data = t.data + rng.normal(0, scale, size=t.shape).astype(t.dtype)


def check_model_gradients(model, coords, labels, rng, per_tensor=2, eps=1e-6):
    """Max relative error per layer between backprop and central differences."""
    model.zero_grad()
    segmentation_loss(model.forward(coords), labels).backward()
    analytic = model.grads()

    def loss():
        return float(segmentation_loss(model.forward(coords), labels).data)

    groups = {}
    for name, t in model.params.items():
        layer = name.rsplit(".", 1)[0]
        flat = t.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False)
        errs = []
        for i in picks:
            numeric = finite_difference(loss, flat, int(i), eps)
            errs.append(float(relative_error(analytic[name].reshape(-1)[i], numeric)))
        groups[layer] = max(groups.get(layer, 0.0), max(errs))
    return groups


def check_plane_gradients(rng, resolution=8, n_points=16, channels=3, eps=1e-6):
    """Feature and coordinate VJPs of scatter and gather on random inputs."""
    margin = 0.5
    coords = rng.uniform(margin, resolution - 1 - margin, size=(n_points, 2))
    # keep clear of the tent-kernel kinks at integer coordinates
    frac = coords - np.floor(coords)
    coords = np.floor(coords) + np.clip(frac, 0.05, 0.95)
    feats = rng.standard_normal((n_points, channels))
    grid = rng.standard_normal((resolution, resolution, channels))
    up_grid = rng.standard_normal((resolution, resolution, channels))
    up_pts = rng.standard_normal((n_points, channels))

    def scatter_obj():
        return float(np.sum(up_grid * splat(coords, feats, resolution)))

    def gather_obj():
        return float(np.sum(up_pts * sample(grid, coords)))

    analytic = {
        "scatter.feats": sample(up_grid, coords),
        "scatter.coords": coord_grad(up_grid, coords, feats),
        "gather.map": splat(coords, up_pts, resolution),
        "gather.coords": coord_grad(grid, coords, up_pts),
    }
    targets = {"scatter.feats": (scatter_obj, feats), "scatter.coords": (scatter_obj, coords),
               "gather.map": (gather_obj, grid), "gather.coords": (gather_obj, coords)}
    out = {}
    for key, (obj, arr) in targets.items():
        errs = []
        for index in itertools.islice(np.ndindex(arr.shape), 0, None, max(1, arr.size // 12)):
            numeric = finite_difference(obj, arr, index, eps)
            errs.append(float(relative_error(analytic[key][index], numeric)))
        out[f"planeops.{key}"] = max(errs)
    return out


def check_grid_normalize(rng, resolution=8, n_points=16, eps=1e-6):
    x = nc.Tensor(rng.uniform(-1, 1, size=(1, n_points, 3)), True)
    up = rng.standard_normal((1, n_points, 3))
    grid_normalize_op(x, resolution).backward(up)

    def obj():
        return float(np.sum(up * grid_normalize_op(nc.Tensor(x.data), resolution).data))

    errs = [float(relative_error(x.grad[idx], finite_difference(obj, x.data, idx, eps)))
            for idx in np.ndindex(x.shape)]
    return {"grid_normalize.coords": max(errs)}


def run_gradcheck(cfg, tolerance=1e-2, n_points=8, resolution=8, seed=None, per_tensor=2):
    """Finite-difference check of every parameter-bearing layer and the plane kernels.

    The model is built from ``cfg``'s toggles at ``resolution`` and evaluated
    in 64-bit arithmetic on an ``n_points`` cloud.
    """
    seed = cfg.seed if seed is None else seed
    mcfg = cfg.replace(resolution=resolution, accumulation="ordered").model_config()
    model = PbpNet(mcfg, seed=seed).astype(np.float64)
    coords, rng = gradcheck_fixture(seed, n_points)
    perturb_for_gradcheck(model, rng)
    labels = rng.integers(0, mcfg.num_classes, size=(1, n_points))
    groups = check_model_gradients(model, coords, labels, rng, per_tensor)
    groups.update(check_plane_gradients(rng, resolution))
    groups.update(check_grid_normalize(rng, resolution))
    return GradcheckReport(tolerance, groups)


# -- ablation -------------------------------------------------------------------

PLANE_SETS = {1: "XY", 2: "XY,YZ", 3: "XY,YZ,ZX"}
STAGE_ROWS = (
    ("# Planes", 1, False, False, False),
    ("# Planes", 2, False, False, False),
    ("# Planes", 3, False, False, False),
    ("T-Net", 3, True, False, False),
    ("Multi-Scale", 3, True, True, False),
    ("Additional", 3, True, True, True),
)


def ablation_variants(grid="full"):
    """(label, #planes, tnet, multiscale, additional) tuples."""
    if grid == "stages":
        return list(STAGE_ROWS)
    if grid == "planes":
        return list(STAGE_ROWS[:3])
    return [("grid", n, t, m, a) for n, t, m, a in
            itertools.product((1, 2, 3), (False, True), (False, True), (False, True))]


@dataclass
class AblationRow:
    label: str
    planes: int
    tnet: bool
    multiscale: bool
    additional: bool
    miou: float
    seconds: float


def run_ablate(cfg, log=None):
    """Train and evaluate each variant of ``cfg.ablate_grid`` under one seed."""
    rows = []
    for label, n_planes, tnet, multi, extra in ablation_variants(cfg.ablate_grid):
        variant = cfg.replace(planes=PLANE_SETS[n_planes], use_tnet=tnet, use_multiscale=multi,
                              use_additional=extra, log="", report="")
        result = run_train(variant, write_checkpoint=False)
        report = run_eval(variant, model=result.model)
        row = AblationRow(label, n_planes, tnet, multi, extra, report.miou, result.seconds)
        rows.append(row)
        if log:
            log(row)
    return rows


def format_ablation(rows):
    def mark(flag):
        return "x" if flag else ""

    lines = [f"{'Ablation':<12}| {'mIoU':>6} | {'# Planes':>8} | {'T-Net':>5} | "
             f"{'Multi-Scale':>11} | {'Additional':>10}"]
    for r in rows:
        lines.append(f"{r.label:<12}| {100 * r.miou:6.1f} | {r.planes:>8} | {mark(r.tnet):>5} | "
                     f"{mark(r.multiscale):>11} | {mark(r.additional):>10}")
    return "\n".join(lines) + "\n"
