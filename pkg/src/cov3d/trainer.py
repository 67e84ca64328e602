"""Training loop: Adam with decoupled weight decay, a 1cycle schedule for the
learning rate and first-moment decay, random sagittal-reflection augmentation,
per-epoch validation macro F1, and best-checkpoint selection per task.

Runs are deterministic for a fixed seed: the data order, augmentation coins
and dropout all draw from seeded generators, so identical configurations
produce byte-identical history files.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import metrics, objectives
from .dataio import AnnotationSet, VOLUME_SUFFIX, read_volume_file
from .errors import ConfigError, DataError, TrainingError
from .network import Cov3dNetwork, run_backward, run_forward, save_checkpoint
from .objectives import LossConfig, Prediction, combined_loss, make_target
from .resampler import SMALL, PreprocessedVolume, SizePreset

# 1cycle shape: cosine warmup over the first quarter from max_lr/25, cosine
# anneal to max_lr/1e5, momentum running opposite between 0.95 and 0.85.
WARMUP_FRACTION = 0.25
START_DIV = 25.0
FINAL_DIV = 1e5
MOMENTUM_HIGH = 0.95
MOMENTUM_LOW = 0.85

ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_NAMES = {"task1": "best_task1.ckpt", "task2": "best_task2.ckpt", "last": "last.ckpt"}
HISTORY_FILENAME = "history.csv"


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 2
    max_lr: float = 1e-4
    weight_decay: float = 1e-5
    loss: LossConfig = field(default_factory=LossConfig)
    preset: SizePreset = SMALL
    reflection_augment: bool = True
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.epochs < 1:
            problems.append(f"epochs: must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            problems.append(f"batch_size: must be >= 1, got {self.batch_size}")
        if not (self.max_lr > 0):
            problems.append(f"max_lr: must be > 0, got {self.max_lr}")
        if self.weight_decay < 0:
            problems.append(f"weight_decay: must be >= 0, got {self.weight_decay}")
        if not (0 <= self.seed < 2**64):
            problems.append("seed: must fit in 64 bits")
        if problems:
            raise ConfigError("; ".join(problems))


@dataclass
class ScheduleState:
    step: float
    total_steps: int
    lr: float
    momentum: float

    def __post_init__(self):
        if not (0 <= self.step <= self.total_steps):
            raise ConfigError(f"parameter error: step {self.step} outside [0, {self.total_steps}]")
        if not (self.lr > 0 and 0.0 < self.momentum < 1.0):
            raise ConfigError("parameter error: schedule produced invalid lr/momentum")


def _cosine(a: float, b: float, u: float) -> float:
    if u <= 0.0:
        return a
    if u >= 1.0:
        return b
    return a + (b - a) * (1.0 - math.cos(math.pi * u)) / 2.0


def one_cycle(step: float, total_steps: int, max_lr: float) -> ScheduleState:
    """1cycle learning rate and momentum at a (possibly fractional) step.

    The lr rises from max_lr/25 to exactly max_lr at 25% of the steps, then
    anneals to max_lr/1e5; the momentum mirrors it from 0.95 down to 0.85 and
    back. Both phases interpolate with a half-cosine, so the schedule is
    continuous on [0, total_steps].
    """
    if total_steps < 1:
        raise ConfigError(f"parameter error: total_steps must be >= 1, got {total_steps}")
    if not (0 <= step <= total_steps):
        raise ConfigError(f"parameter error: step {step} outside [0, {total_steps}]")
    peak = WARMUP_FRACTION * total_steps
    if step <= peak:
        u = step / peak
        lr = _cosine(max_lr / START_DIV, max_lr, u)
        momentum = _cosine(MOMENTUM_HIGH, MOMENTUM_LOW, u)
    else:
        u = (step - peak) / (total_steps - peak)
        lr = _cosine(max_lr, max_lr / FINAL_DIV, u)
        momentum = _cosine(MOMENTUM_LOW, MOMENTUM_HIGH, u)
    return ScheduleState(step=step, total_steps=total_steps, lr=lr, momentum=momentum)


@dataclass
class AdamState:
    step: int = 0
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState, lr: float, momentum: float,
              weight_decay: float) -> AdamState:
    """One Adam update over named parameters, in place.

    First-moment decay comes from the schedule, the second-moment decay is
    0.999 with epsilon 1e-8 and bias correction. Weight decay is decoupled:
    p <- p - lr * wd * p happens before the Adam update.
    """
    state.step += 1
    t = state.step
    bias1 = 1.0 - momentum**t
    bias2 = 1.0 - ADAM_BETA2**t
    with torch.no_grad():
        for name, param in params.items():
            grad = grads[name]
            if not torch.isfinite(grad).all():
                raise TrainingError(
                    f"training aborted: non-finite gradient in parameter {name!r}"
                )
            if weight_decay:
                param.mul_(1.0 - lr * weight_decay)
            m = state.exp_avg.setdefault(name, torch.zeros_like(param))
            v = state.exp_avg_sq.setdefault(name, torch.zeros_like(param))
            m.mul_(momentum).add_(grad, alpha=1.0 - momentum)
            v.mul_(ADAM_BETA2).addcmul_(grad, grad, value=1.0 - ADAM_BETA2)
            denom = (v / bias2).sqrt_().add_(ADAM_EPS)
            param.addcdiv_(m / bias1, denom, value=-lr)
    return state


def sagittal_reflect(voxels: np.ndarray) -> np.ndarray:
    """Reverse the width axis (left-right within each axial slice)."""
    return np.ascontiguousarray(voxels[..., ::-1])


def random_sagittal_reflect(volume, rng) -> object:
    """Reflect through the sagittal plane with probability 0.5."""
    flip = rng.random() < 0.5
    if isinstance(volume, PreprocessedVolume):
        if not flip:
            return volume
        return PreprocessedVolume(voxels=sagittal_reflect(volume.voxels),
                                  scan_id=volume.scan_id, preset=volume.preset)
    return sagittal_reflect(volume) if flip else volume


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    f1_task1: float
    f1_task2: float | None
    lr_last: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,f1_task1,f1_task2,lr_last"]
        for r in self.records:
            task2 = "" if r.f1_task2 is None else repr(r.f1_task2)
            lines.append(f"{r.epoch},{r.train_loss!r},{r.f1_task1!r},{task2},{r.lr_last!r}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def read(cls, path) -> "TrainHistory":
        lines = Path(path).read_text().strip().splitlines()
        records = []
        for line in lines[1:]:
            epoch, loss, f1a, f1b, lr = line.split(",")
            records.append(EpochRecord(int(epoch), float(loss), float(f1a),
                                       float(f1b) if f1b else None, float(lr)))
        return cls(records)

    def scores(self, task: int) -> list[float | None]:
        if task == 1:
            return [r.f1_task1 for r in self.records]
        if task == 2:
            return [r.f1_task2 for r in self.records]
        raise ConfigError(f"parameter error: task must be 1 or 2, got {task}")


def select_best(history: TrainHistory, checkpoints, task: int):
    """Checkpoint of the epoch with the highest validation macro F1 for a task.

    Ties break toward the earliest epoch. ``checkpoints`` maps epoch -> value
    (whatever the caller stores: paths, state blobs).
    """
    scores = history.scores(task)
    best_epoch, best_score = None, None
    for record, score in zip(history.records, scores):
        if score is None:
            continue
        if best_score is None or score > best_score:
            best_epoch, best_score = record.epoch, score
    if best_epoch is None:
        raise ConfigError(f"no task-{task} scores recorded; cannot select a checkpoint")
    return checkpoints[best_epoch]


class VolumeStore:
    """Loads preprocessed volumes by scan id from a directory, with caching."""

    def __init__(self, volumes_dir, expected_dims: tuple[int, int, int]):
        self.volumes_dir = Path(volumes_dir)
        self.expected_dims = tuple(expected_dims)
        self._cache: dict[str, np.ndarray] = {}

    def get(self, scan_id: str) -> np.ndarray:
        cached = self._cache.get(scan_id)
        if cached is not None:
            return cached
        path = self.volumes_dir / f"{scan_id}{VOLUME_SUFFIX}"
        if not path.is_file():
            raise DataError(f"structural error: missing preprocessed volume {path}")
        volume = read_volume_file(path)
        if volume.dims != self.expected_dims:
            raise ConfigError(
                f"configuration error: volume {scan_id} has dims {volume.dims}, "
                f"expected {self.expected_dims} (preset mismatch?)"
            )
        self._cache[scan_id] = volume.voxels
        return volume.voxels


def _predict_validation(network: Cov3dNetwork, records, store: VolumeStore,
                        batch_size: int) -> dict[str, Prediction]:
    predictions: dict[str, Prediction] = {}
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        batch = np.stack([store.get(r.scan_id) for r in chunk], axis=0)
        outputs = run_forward(network, batch, mode="eval")
        for i, rec in enumerate(chunk):
            x = float(outputs.x[i, 0]) if outputs.x is not None else None
            z = outputs.z[i].numpy() if outputs.z is not None else None
            predictions[rec.scan_id] = Prediction(x=x, z=z)
    return predictions


def _validation_scores(network, records, store, batch_size, lam):
    preds = _predict_validation(network, records, store, batch_size)
    covid_pred = {}
    for scan_id, pred in preds.items():
        p = pred.p if pred.p is not None else pred.p_covid_from_severity
        covid_pred[scan_id] = p > 0.5
    truth1 = [r.covid_label for r in records]
    f1_task1 = metrics.macro_f1(truth1, [covid_pred[r.scan_id] for r in records], [False, True])

    f1_task2 = None
    annotated = [r for r in records if r.severity is not None]
    if lam > 0 and network.config.has_severity_head and annotated:
        severity_pred = {
            r.scan_id: 1 + int(np.argmax(preds[r.scan_id].s[1:])) for r in annotated
        }
        f1_task2 = metrics.macro_f1([r.severity for r in annotated],
                                    [severity_pred[r.scan_id] for r in annotated],
                                    [1, 2, 3, 4])
    return f1_task1, f1_task2


def fit(network: Cov3dNetwork, annotations: AnnotationSet, volumes_dir, cfg: TrainConfig,
        out_dir=None, augment_rng=None) -> tuple[TrainHistory, dict[str, Path]]:
    """Train a network on the preprocessed volumes of a dataset.

    Returns the per-epoch history and, when ``out_dir`` is given, the paths of
    the retained checkpoints (best per task plus last). ``augment_rng`` is the
    source of reflection coin flips and defaults to a stream derived from the
    seed; the data-order stream is separate so augmentation choices never
    perturb batch composition.
    """
    train_records = [r for r in annotations.partition("train") if r.covid_label is not None]
    if not train_records:
        raise ConfigError("configuration error: training set is empty")
    val_records = [r for r in annotations.partition("validation") if r.covid_label is not None]
    if not val_records:
        raise ConfigError("configuration error: validation set is empty")
    lam = cfg.loss.lam
    if lam > 0 and not network.config.has_severity_head:
        raise ConfigError("configuration error: lambda > 0 requires the severity head")
    if lam < 1 and not network.config.has_covid_head:
        raise ConfigError("configuration error: lambda < 1 requires the covid head")
    if tuple(network.config.input_dims) != cfg.preset.dims:
        raise ConfigError(
            f"configuration error: network input dims {network.config.input_dims} do not "
            f"match preset {cfg.preset.name} {cfg.preset.dims}"
        )

    store = VolumeStore(volumes_dir, cfg.preset.dims)
    order_seq, augment_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    order_rng = np.random.default_rng(order_seq)
    if augment_rng is None:
        augment_rng = np.random.default_rng(augment_seq)
    torch.manual_seed(cfg.seed)

    targets = {
        r.scan_id: make_target(r.covid_label, r.severity, cfg.loss) for r in train_records
    }
    steps_per_epoch = math.ceil(len(train_records) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    adam_state = AdamState()
    params = dict(network.named_parameters())

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_paths: dict[str, Path] = {}
    best = {"task1": None, "task2": None}

    history = TrainHistory()
    global_step = 0
    lr_last = None
    for epoch in range(1, cfg.epochs + 1):
        order = order_rng.permutation(len(train_records))
        epoch_loss_sum = 0.0
        for start in range(0, len(order), cfg.batch_size):
            chunk = [train_records[i] for i in order[start:start + cfg.batch_size]]
            arrays = []
            for rec in chunk:
                voxels = store.get(rec.scan_id)
                if cfg.reflection_augment:
                    voxels = random_sagittal_reflect(voxels, augment_rng)
                arrays.append(voxels)
            batch = np.stack(arrays, axis=0)
            outputs = run_forward(network, batch, mode="train")

            n = len(chunk)
            grad_x = np.zeros((n, 1)) if outputs.x is not None else None
            grad_z = np.zeros((n, 5)) if outputs.z is not None else None
            for i, rec in enumerate(chunk):
                pred = Prediction(
                    x=float(outputs.x.detach()[i, 0]) if outputs.x is not None else None,
                    z=outputs.z.detach()[i].numpy() if outputs.z is not None else None,
                )
                result = combined_loss(cfg.loss, pred, targets[rec.scan_id])
                epoch_loss_sum += result.loss
                if result.grad_x is not None:
                    grad_x[i, 0] = result.grad_x / n
                if result.grad_z is not None:
                    grad_z[i] = result.grad_z / n
            grads = run_backward(network, grad_x=grad_x, grad_z=grad_z)

            schedule = one_cycle(global_step, total_steps, cfg.max_lr)
            adam_step(params, grads, adam_state, schedule.lr, schedule.momentum,
                      cfg.weight_decay)
            lr_last = schedule.lr
            global_step += 1

        f1_task1, f1_task2 = _validation_scores(network, val_records, store,
                                                cfg.batch_size, lam)
        record = EpochRecord(
            epoch=epoch,
            train_loss=epoch_loss_sum / len(train_records),
            f1_task1=f1_task1,
            f1_task2=f1_task2,
            lr_last=lr_last,
        )
        history.records.append(record)

        if out_dir is not None:
            extra = {"train_loss": record.train_loss, "f1_task1": f1_task1,
                     "f1_task2": f1_task2}
            save_checkpoint(out_dir / CHECKPOINT_NAMES["last"], network,
                            seed=cfg.seed, epoch=epoch, extra=extra)
            checkpoint_paths["last"] = out_dir / CHECKPOINT_NAMES["last"]
            for task, score in (("task1", f1_task1), ("task2", f1_task2)):
                if score is None:
                    continue
                if best[task] is None or score > best[task]:
                    best[task] = score
                    save_checkpoint(out_dir / CHECKPOINT_NAMES[task], network,
                                    seed=cfg.seed, epoch=epoch, extra=extra)
                    checkpoint_paths[task] = out_dir / CHECKPOINT_NAMES[task]

    if out_dir is not None:
        history.write(out_dir / HISTORY_FILENAME)
    return history, checkpoint_paths
