"""Unified training loop, evaluation and checkpoints."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .config import RunConfig
from .data import (
    BatchPlan,
    Dataset,
    find_split_files,
    load_idx,
    normalize,
    sequential_batches,
    shuffled_batches,
    subset,
    train_val_split,
)
from .layers import softmax_cross_entropy
from .metrics import ConfusionMatrix, MetricsReport, accumulate_confusion, compute_metrics
from .models import Classifier, ModelKind, ModelSpec, SamplerError, build_model
from .optim import AdamW, EarlyStopping, ExponentialSchedule, OneCycleSchedule, clip_grad_global_norm
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "bhddbench-checkpoint"
CHECKPOINT_VERSION = 1
LOG_HEADER = "epoch,step,lr,train_loss,val_loss,val_acc"


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class DataConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# data


@dataclass
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset

    def sizes(self) -> dict[str, int]:
        return {"train": len(self.train), "val": len(self.val), "test": len(self.test)}


def split_paths(cfg: RunConfig, split: str) -> tuple[str, str]:
    images = cfg.train_images if split == "train" else cfg.test_images
    labels = cfg.train_labels if split == "train" else cfg.test_labels
    if images and labels:
        return images, labels
    if images or labels:
        raise DataConfigError(f"{split}: give both image and label paths, or a data root")
    root = cfg.resolve_data_root()
    if root is None:
        raise DataConfigError("no dataset configured: pass --data-root, explicit IDX paths, "
                              "or set BHDD_DATA_ROOT")
    return tuple(str(p) for p in find_split_files(root, split))


def auto_val_size(n_pool: int) -> int:
    # 5,000 of 60,000 at full scale, the same fraction below that
    return int(round(n_pool / 12))


def load_splits(cfg: RunConfig) -> Splits:
    """Hold out validation from the whole training file, then subsample.

    The training subset is drawn from what remains after the hold-out, so a
    6,000-sample run trains on 6,000 images.
    """
    pool = load_idx(*split_paths(cfg, "train"), split="train")
    test = load_idx(*split_paths(cfg, "test"), split="test")
    val_size = auto_val_size(len(pool)) if cfg.val_size < 0 else cfg.val_size
    train, val = train_val_split(pool, val_size, cfg.seed)
    if cfg.train_subset:
        train = subset(train, cfg.train_subset, cfg.seed)
    if cfg.val_subset and cfg.val_subset < len(val):
        val = subset(val, cfg.val_subset, cfg.seed)
    if cfg.test_subset:
        test = subset(test, cfg.test_subset, cfg.seed)
    return Splits(train, val, test)


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model: Classifier, dataset: Dataset, batch_size: int = 1000,
             dtype=np.float32) -> tuple[ConfusionMatrix, float]:
    """Confusion matrix and mean cross-entropy in eval mode (dropout off)."""
    was_training = model.training
    model.eval()
    cm = ConfusionMatrix()
    loss_sum = 0.0
    try:
        with no_grad():
            for idx in sequential_batches(len(dataset), batch_size):
                x = normalize(dataset.images[idx], dtype)
                logits = model(Tensor(x))
                y = dataset.labels[idx]
                loss_sum += float(softmax_cross_entropy(logits, y).data) * len(idx)
                accumulate_confusion(cm, y, logits.data.argmax(axis=1))
    finally:
        model.train(was_training)
    return cm, (loss_sum / len(dataset) if len(dataset) else math.nan)


# ---------------------------------------------------------------------------
# checkpoints


def shape_fingerprint(model: Classifier) -> dict[str, list[int]]:
    return {name: list(p.shape) for name, p in model.named_parameters()}


def save_checkpoint(path, model: Classifier, meta: dict | None = None) -> Path:
    path = Path(path)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": model.spec.to_dict(),
        "dtype": str(model.parameters()[0].dtype),
        "fingerprint": shape_fingerprint(model),
        "meta": meta or {},
    }
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(z["header"].tobytes().decode())
            params = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    except (OSError, ValueError, KeyError) as e:
        raise CheckpointError(f"{path}: not a readable checkpoint ({e})") from None
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unknown container format {header.get('format')!r}")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    return header, params


def load_checkpoint(path, expected_spec: ModelSpec | None = None, seed: int = 0) -> tuple[Classifier, dict]:
    """Rebuild the model a checkpoint describes and load its weights.

    With ``expected_spec`` the checkpoint's parameter shapes must match the
    shapes that spec produces; any difference is a :class:`CheckpointError`.
    """
    header, params = read_checkpoint(path)
    spec = ModelSpec.from_dict(header["spec"])
    dtype = np.dtype(header["dtype"])
    if expected_spec is not None:
        reference = build_model(expected_spec, seed, dtype)
        want = shape_fingerprint(reference)
        if want != header["fingerprint"]:
            diff = _fingerprint_diff(want, header["fingerprint"])
            raise CheckpointError(f"{path}: checkpoint does not match {expected_spec.kind.value} spec: {diff}")
        spec = expected_spec
    model = build_model(spec, seed, dtype)
    if shape_fingerprint(model) != header["fingerprint"]:
        raise CheckpointError(f"{path}: stored fingerprint disagrees with its own spec")
    for name, arr in params.items():
        if list(arr.shape) != header["fingerprint"].get(name):
            raise CheckpointError(f"{path}: parameter {name} has shape {arr.shape}, fingerprint says "
                                  f"{header['fingerprint'].get(name)}")
    try:
        model.load_state_dict(params)
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"{path}: {e}") from None
    return model, header


def _fingerprint_diff(want: dict, got: dict) -> str:
    parts = []
    for name in sorted(set(want) | set(got)):
        if want.get(name) != got.get(name):
            parts.append(f"{name}: expected {want.get(name)}, found {got.get(name)}")
    return "; ".join(parts[:5]) + (" ..." if len(parts) > 5 else "")


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochRecord:
    epoch: int
    step: int
    lr: float
    train_loss: float
    val_loss: float
    val_acc: float

    def line(self) -> str:
        return (f"{self.epoch},{self.step},{self.lr:.6e},{self.train_loss:.6f},"
                f"{self.val_loss:.6f},{self.val_acc:.6f}")


@dataclass
class TrainResult:
    kind: ModelKind
    report: MetricsReport
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False
    sampler_failures: int = 0
    model: Classifier | None = None

    def log_text(self) -> str:
        return "\n".join([LOG_HEADER, *(r.line() for r in self.history)]) + "\n"


def make_schedule(cfg: RunConfig, kind: ModelKind, total_steps: int, steps_per_epoch: int):
    if cfg.schedule_for(kind) == "exponential":
        return ExponentialSchedule(total_steps, steps_per_epoch, base_lr=cfg.lr, gamma=cfg.gamma)
    pct = cfg.pct_start
    if kind is ModelKind.TRANSFORMER and cfg.epochs > cfg.transformer_warmup_epochs > 0:
        pct = cfg.transformer_warmup_epochs / cfg.epochs
    return OneCycleSchedule(total_steps, max_lr=cfg.max_lr, pct_start=pct,
                            div_initial=cfg.div_initial, div_final=cfg.div_final)


def _batch_loss(model: Classifier, x: Tensor, y: np.ndarray, kind: ModelKind, result: TrainResult,
                epoch: int, step: int) -> Tensor:
    if kind is not ModelKind.JEM:
        return model.loss(x, y)
    try:
        return model.loss(x, y)
    except SamplerError as e:
        result.sampler_failures += 1
        log.warning("JEM sampler failed at epoch %d step %d (%s); using cross-entropy for this batch",
                    epoch, step, e)
        return softmax_cross_entropy(model(x), y)


def train_model(cfg: RunConfig, kind: ModelKind | str, splits: Splits, out_dir=None,
                on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Train one model under the shared protocol and report on the test split.

    The reported metrics come from the weights with the best validation loss
    (the last epoch when there is no validation data).
    """
    kind = ModelKind.parse(kind) if isinstance(kind, str) else kind
    dtype = np.dtype(cfg.dtype).type
    spec = cfg.model_spec(kind)
    model = build_model(spec, cfg.seed, dtype)
    names, params = zip(*model.named_parameters())
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay, betas=(cfg.beta1, cfg.beta2),
                eps=cfg.adam_eps, names=names)
    plan = BatchPlan(cfg.batch_size, cfg.seed)
    steps_per_epoch = math.ceil(len(splits.train) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    schedule = make_schedule(cfg, kind, total, steps_per_epoch) if total else None
    stopper = EarlyStopping(cfg.patience, cfg.min_delta)
    result = TrainResult(kind, report=None)  # type: ignore[arg-type]
    best_state = model.state_dict()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    step = 0
    model.train()
    for epoch in range(1, cfg.epochs + 1):
        loss_sum, seen = 0.0, 0
        lr = opt.lr
        for idx in shuffled_batches(len(splits.train), plan, epoch):
            lr = schedule.lr_at(step)
            opt.lr = lr
            x = Tensor(normalize(splits.train.images[idx], dtype))
            y = splits.train.labels[idx]
            opt.zero_grad()
            loss = _batch_loss(model, x, y, kind, result, epoch, step)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"{kind.value}: non-finite loss {value} at epoch {epoch}, step {step}")
            backward(loss)
            grads, _ = clip_grad_global_norm([p.grad for p in params], cfg.clip_norm)
            try:
                opt.step(grads)
            except FloatingPointError as e:
                raise TrainingError(f"{kind.value}: {e} at epoch {epoch}, step {step}") from None
            loss_sum += value * len(idx)
            seen += len(idx)
            step += 1
        if len(splits.val):
            cm, val_loss = evaluate(model, splits.val, cfg.eval_batch_size, dtype)
            val_acc = compute_metrics(cm).accuracy
        else:
            val_loss, val_acc = math.nan, math.nan
        rec = EpochRecord(epoch, step, lr, loss_sum / seen, val_loss, val_acc)
        result.history.append(rec)
        log.info("%s %s", kind.value, rec.line())
        if on_epoch is not None:
            on_epoch(rec)
        if len(splits.val):
            stop = stopper.update(val_loss)
            if stopper.best_epoch == epoch:
                best_state = model.state_dict()
            if stop:
                result.stopped_early = True
                break
        else:
            best_state = model.state_dict()

    result.best_epoch = stopper.best_epoch if len(splits.val) and stopper.best_epoch > 0 else len(result.history)
    meta_common = {"seed": cfg.seed, "epochs": cfg.epochs}
    if out is not None:
        save_checkpoint(out / "final.npz", model, {**meta_common, "epoch": len(result.history)})
    model.load_state_dict(best_state)
    if out is not None:
        save_checkpoint(out / "best.npz", model, {**meta_common, "epoch": result.best_epoch})

    cm, test_loss = evaluate(model, splits.test, cfg.eval_batch_size, dtype)
    meta = {
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "epochs_run": len(result.history),
        "best_epoch": result.best_epoch,
        "stopped_early": result.stopped_early,
        "schedule": cfg.schedule_for(kind),
        "dataset_sizes": splits.sizes(),
        "test_loss": test_loss,
        "parameters": model.num_parameters(),
    }
    if kind is ModelKind.JEM:
        meta["sampler_failures"] = result.sampler_failures
    result.report = compute_metrics(cm, model=kind.value, metadata=meta)
    result.model = model
    if out is not None:
        (out / "train_log.csv").write_text(result.log_text())
    return result


def evaluate_checkpoint(cfg: RunConfig, path, test: Dataset, kind: ModelKind | str | None = None) -> MetricsReport:
    """Test-set report for a saved checkpoint, checked against the configured spec."""
    expected = cfg.model_spec(kind) if kind is not None else None
    model, header = load_checkpoint(path, expected, cfg.seed)
    dtype = model.parameters()[0].dtype.type
    cm, test_loss = evaluate(model, test, cfg.eval_batch_size, dtype)
    meta = {"checkpoint_epoch": header["meta"].get("epoch"), "seed": header["meta"].get("seed"),
            "dataset_sizes": {"test": len(test)}, "test_loss": test_loss}
    return compute_metrics(cm, model=model.spec.kind.value, metadata=meta)
