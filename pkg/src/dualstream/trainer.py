"""Stratified k-fold training, global-best checkpoint selection, evaluation and inference."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import shutil
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import tensor as T
from .augment import AugConfig, Image, resize
from .checkpoint import checkpoint_bytes, load_checkpoint, parse_checkpoint
from .data import CLASS_NAMES, LabeledDataset, LabeledItem, SplitPlan, make_split_plan, read_image
from .errors import ConfigError, DataError, NumericError, StateError
from .metrics import EvalReport, classification_report
from .model import DualStreamModel, ModelConfig, init_parameters, prepare_views
from .optim import OptimState, ScheduleConfig, adamw_step, class_weights, clip_gradients, cosine_lr, focal_loss

log = logging.getLogger(__name__)

LOG_FIELDS = ("fold", "epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    seed: int = 0
    lr_max: float = 1e-4
    lr_min: float = 1e-6
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    gamma: float = 2.0
    clip_norm: float = 1.0
    folds: int = 5
    test_frac: float = 0.15
    image_size: int = 64
    d1: int = 256
    backbone_channels: tuple[int, ...] = (16, 32, 64, 128)
    physics_prob: float = 1.0
    flip_prob: float = 0.5
    max_rotation_deg: float = 15.0
    elastic_alpha_px: float | None = None
    elastic_sigma_px: float | None = None
    eval_batch_size: int = 32

    def __post_init__(self):
        self.backbone_channels = tuple(int(c) for c in self.backbone_channels)
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch norm needs two samples)")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if self.gamma < 0 or self.clip_norm <= 0:
            raise ConfigError("gamma must be >= 0 and clip_norm > 0")
        self.schedule()
        self.aug_config()
        self.model_config()

    def schedule(self) -> ScheduleConfig:
        # the schedule spans the whole run
        return ScheduleConfig(self.lr_max, self.lr_min, self.epochs)

    def aug_config(self) -> AugConfig:
        return AugConfig(
            physics_prob=self.physics_prob,
            flip_prob=self.flip_prob,
            max_rotation_deg=self.max_rotation_deg,
            elastic_alpha_px=self.elastic_alpha_px,
            elastic_sigma_px=self.elastic_sigma_px,
        )

    def model_config(self) -> ModelConfig:
        return ModelConfig(image_size=self.image_size, d1=self.d1, backbone_channels=self.backbone_channels)

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    def with_overrides(self, values: dict[str, str]) -> TrainConfig:
        current = dataclasses.asdict(self)
        for key, raw in values.items():
            if key not in current:
                raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(self.keys())}")
            current[key] = _parse_value(key, raw)
        return TrainConfig(**current)

    def to_text(self) -> str:
        lines = []
        for key, value in dataclasses.asdict(self).items():
            if isinstance(value, (tuple, list)):
                value = ",".join(str(v) for v in value)
            elif value is None:
                value = "none"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _parse_value(key: str, raw: str):
    kind = str(_TYPES[key])
    raw = raw.strip()
    try:
        if "tuple" in kind:
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if "None" in kind and raw.lower() in ("none", ""):
            return None
        if kind.startswith("int"):
            return int(raw)
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def parse_config_text(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for number, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {number} is not key = value: {line!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def load_config(path=None, overrides: dict[str, str] | None = None) -> TrainConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    values.update(overrides or {})
    return TrainConfig().with_overrides(values)


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------


@dataclass
class CheckpointRecord:
    fold: int
    epoch: int
    val_loss: float
    path: str = ""


def select_global_best(records: Sequence[CheckpointRecord]) -> CheckpointRecord:
    """Lowest validation loss; ties go to the lower fold, then the earlier epoch."""
    if not records:
        raise StateError("no checkpoint records to select from")
    return min(records, key=lambda r: (r.val_loss, r.fold, r.epoch))


@dataclass
class FoldResult:
    fold: int
    log: list[dict]
    best: CheckpointRecord
    best_bytes: bytes = field(repr=False, default=b"")


@dataclass
class EvalResult:
    report: EvalReport
    ids: list[str]
    labels: np.ndarray
    probabilities: np.ndarray

    @property
    def predictions(self) -> np.ndarray:
        # argmax ties resolve to the lowest class index
        return self.probabilities.argmax(axis=1)

    def predictions_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id", "true_label"] + [f"p{c}" for c in range(self.probabilities.shape[1])])
        for ident, label, probs in zip(self.ids, self.labels, self.probabilities):
            writer.writerow([ident, int(label)] + [repr(float(p)) for p in probs])
        return buf.getvalue()


def format_log(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=LOG_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _item_key(ident: str) -> int:
    return zlib.crc32(ident.encode("utf-8"))


def at_resolution(items: Sequence[LabeledItem], size: int) -> list[LabeledItem]:
    return [dataclasses.replace(it, image=resize(it.image, size)) for it in items]


def eval_views(items: Sequence[LabeledItem]) -> tuple[np.ndarray, np.ndarray]:
    views = [prepare_views(it.image, False) for it in items]
    return np.stack([v[0] for v in views]), np.stack([v[1] for v in views])


def predict_logits(
    model: DualStreamModel,
    texture: np.ndarray,
    edges: np.ndarray,
    batch_size: int = 32,
    zero_edge_stream: bool = False,
) -> np.ndarray:
    out = []
    with T.no_grad():
        for start in range(0, texture.shape[0], batch_size):
            sl = slice(start, start + batch_size)
            out.append(model.forward_views(texture[sl], edges[sl], False, zero_edge_stream=zero_edge_stream).data)
    return np.concatenate(out, axis=0)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def train_fold(
    fold: int,
    train_items: Sequence[LabeledItem],
    val_items: Sequence[LabeledItem],
    cfg: TrainConfig,
    checkpoint_path=None,
) -> FoldResult:
    """Train a fresh model on one fold; keeps the lowest-validation-loss snapshot."""
    if not train_items or not val_items:
        raise DataError(f"fold {fold} has an empty train or validation part")
    if len(train_items) < cfg.batch_size:
        raise DataError(f"fold {fold} has {len(train_items)} training items, fewer than one batch")
    counts = np.bincount([it.label for it in train_items], minlength=len(CLASS_NAMES))
    alpha = class_weights(counts)
    model = init_parameters(DualStreamModel(cfg.model_config()), np.random.default_rng([cfg.seed, 0, fold]))
    params = model.parameters()
    state = OptimState(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay, cfg.lr_max)
    aug = cfg.aug_config()
    schedule = cfg.schedule()
    val_tex, val_edge = eval_views(val_items)
    val_labels = np.array([it.label for it in val_items])
    rows: list[dict] = []
    best: CheckpointRecord | None = None
    best_bytes = b""
    n_batches = len(train_items) // cfg.batch_size
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, schedule)
        order = np.random.default_rng([cfg.seed, 1, fold, epoch]).permutation(len(train_items))
        loss_sum, correct, seen = 0.0, 0, 0
        for b in range(n_batches):
            batch = [train_items[i] for i in order[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
            views = [
                prepare_views(it.image, True, aug, np.random.default_rng([cfg.seed, 2, fold, epoch, _item_key(it.id)]))
                for it in batch
            ]
            labels = np.array([it.label for it in batch])
            try:
                logits = model.forward_views(
                    np.stack([v[0] for v in views]),
                    np.stack([v[1] for v in views]),
                    True,
                    np.random.default_rng([cfg.seed, 3, fold, epoch, b]),
                )
                loss = focal_loss(logits, labels, alpha, cfg.gamma)
            except NumericError as exc:
                raise NumericError(f"fold {fold} epoch {epoch} batch {b}: {exc}") from exc
            value = loss.item()
            model.zero_grad()
            T.backward(loss)
            clip_gradients(params, cfg.clip_norm)
            adamw_step(params, state, lr)
            loss_sum += value * len(batch)
            correct += int((logits.data.argmax(axis=1) == labels).sum())
            seen += len(batch)
        val_logits = predict_logits(model, val_tex, val_edge, cfg.eval_batch_size)
        with T.no_grad():
            val_loss = focal_loss(T.Tensor(val_logits), val_labels, alpha, cfg.gamma).item()
        if not np.isfinite(val_loss):
            raise NumericError(f"fold {fold} epoch {epoch}: validation loss {val_loss}")
        val_acc = float((val_logits.argmax(axis=1) == val_labels).mean())
        row = {
            "fold": fold,
            "epoch": epoch,
            "lr": lr,
            "train_loss": loss_sum / seen,
            "train_acc": correct / seen,
            "val_loss": val_loss,
            "val_acc": val_acc,
        }
        rows.append(row)
        log.info("fold %d epoch %d lr %.3g train %.4f/%.3f val %.4f/%.3f", fold, epoch, lr, row["train_loss"], row["train_acc"], val_loss, val_acc)
        if best is None or val_loss < best.val_loss:
            best = CheckpointRecord(fold, epoch, val_loss, str(checkpoint_path or ""))
            best_bytes = checkpoint_bytes(model, {"seed": cfg.seed, "fold": fold, "epoch": epoch, "val_loss": val_loss})
            if checkpoint_path is not None:
                Path(checkpoint_path).write_bytes(best_bytes)
    return FoldResult(fold, rows, best, best_bytes)


def evaluate(model: DualStreamModel, items: Sequence[LabeledItem], batch_size: int = 32, zero_edge_stream: bool = False) -> EvalResult:
    """Eval-mode predictions and the full report; no augmentation, no dropout."""
    if not items:
        raise DataError("evaluation set is empty")
    items = at_resolution(items, model.cfg.image_size)
    tex, edges = eval_views(items)
    probs = softmax_rows(predict_logits(model, tex, edges, batch_size, zero_edge_stream))
    labels = np.array([it.label for it in items])
    report = classification_report(labels, probs.argmax(axis=1), probs, CLASS_NAMES)
    return EvalResult(report, [it.id for it in items], labels, probs)


def infer(checkpoint, image_path) -> tuple[str, np.ndarray]:
    """Predicted class name and probability vector for one image file."""
    model, _ = load_checkpoint(checkpoint)
    img = resize(Image(read_image(image_path), id=str(image_path)), model.cfg.image_size)
    tex, edges = prepare_views(img, False)
    probs = softmax_rows(predict_logits(model, tex[None], edges[None]))[0]
    return CLASS_NAMES[int(probs.argmax())], probs


# ---------------------------------------------------------------------------
# full cross-validation run
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    plan: SplitPlan
    folds: list[FoldResult]
    best: CheckpointRecord
    model: DualStreamModel
    test: EvalResult | None


def _digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def dataset_digest(ds: LabeledDataset) -> str:
    h = hashlib.sha256()
    for it in ds.items:
        h.update(it.id.encode("utf-8"))
        h.update(bytes([it.label]))
        h.update(np.ascontiguousarray(it.image.pixels).tobytes())
    return h.hexdigest()


def write_split(path, plan: SplitPlan) -> None:
    fold_of = {}
    for k, (_, val) in enumerate(plan.folds, 1):
        for ident in val:
            fold_of[ident] = k
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "part", "fold"])
        for ident in plan.train_ids:
            writer.writerow([ident, "train", fold_of.get(ident, "")])
        for ident in plan.test_ids:
            writer.writerow([ident, "test", ""])


def read_split(path) -> tuple[list[str], list[str]]:
    train, test = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            (test if row["part"] == "test" else train).append(row["id"])
    return train, test


def run_cross_validation(
    ds: LabeledDataset,
    cfg: TrainConfig,
    out_dir=None,
    figures: bool = True,
) -> RunResult:
    """Split, train every fold, pick the global best and evaluate it on the held-out part.

    With ``out_dir`` the run writes its manifest first, then fold logs,
    checkpoints, predictions, the text/CSV report and figures.
    """
    out = Path(out_dir) if out_dir is not None else None
    manifest = {
        "tool_version": __version__,
        "config": dataclasses.asdict(cfg),
        "seed": cfg.seed,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "input_digest": dataset_digest(ds),
        "n_items": len(ds),
    }
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.to_text())
        _write_json(out / "manifest.json", manifest)
    plan = make_split_plan(ds, cfg.test_frac, cfg.folds, cfg.seed)
    items = {it.id: it for it in at_resolution(ds.items, cfg.image_size)}
    if out is not None:
        write_split(out / "split.csv", plan)
    results = []
    for k, (train_ids, val_ids) in enumerate(plan.folds, 1):
        ckpt = out / "checkpoints" / f"fold{k}_best.ckpt" if out is not None else None
        res = train_fold(k, [items[i] for i in train_ids], [items[i] for i in val_ids], cfg, ckpt)
        results.append(res)
        if out is not None:
            (out / f"log_fold{k}.csv").write_text(format_log(res.log))
    best = select_global_best([r.best for r in results])
    best_bytes = next(r.best_bytes for r in results if r.best is best)
    model, _ = parse_checkpoint(best_bytes)
    test = evaluate(model, [items[i] for i in plan.test_ids], cfg.eval_batch_size) if plan.test_ids else None
    if out is not None:
        all_rows = [row for r in results for row in r.log]
        (out / "log.csv").write_text(format_log(all_rows))
        shutil.copyfile(best.path, out / "best.ckpt")
        outputs = {"best_checkpoint": "best.ckpt", "log": "log.csv", "split": "split.csv"}
        if test is not None:
            (out / "predictions.csv").write_text(test.predictions_csv())
            (out / "report.txt").write_text(test.report.render())
            (out / "metrics.csv").write_text(test.report.to_csv())
            outputs.update(predictions="predictions.csv", report="report.txt", metrics="metrics.csv")
        if figures:
            from .plotting import write_run_figures

            outputs["figures"] = write_run_figures(out / "figures", all_rows, [r.best for r in results], best, test)
        manifest.update(
            finished=time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            best={"fold": best.fold, "epoch": best.epoch, "val_loss": best.val_loss},
            best_checkpoint_sha256=_digest((out / "best.ckpt").read_bytes()),
            outputs=outputs,
        )
        _write_json(out / "manifest.json", manifest)
    return RunResult(plan, results, best, model, test)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")
