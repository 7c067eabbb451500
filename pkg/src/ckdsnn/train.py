"""Optimization loops: teacher pretraining, student distillation, evaluation, ablations.

Every stochastic choice (parameter init, shuffling, augmentation, noise)
derives from the single config seed through fixed stream keys, so two
single-threaded runs with the same config are bitwise identical. Wall-clock
seconds are suppressed (written as 0) in deterministic mode so metrics CSVs
compare byte-for-byte.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from itertools import product
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import AugmentConfig, BatchIterator, Dataset, augment, channel_stats, normalize
from .distill import LossWeights, NoiseConfig, nld_loss, sample_noise, smooth_logits, total_loss
from .energy import spike_count
from .models import StudentNet, TeacherNet, make_student, make_teacher, save_checkpoint, teacher_from_state
from .saliency import sam_generate, scaled_map_alignment, teacher_cam
from .spiking import NeuronParams
from .tensor import Tensor, no_grad

# stream keys hung off the master seed
_S_INIT_TEACHER = 0
_S_INIT_STUDENT = 1
_S_AUGMENT = 2
_S_NOISE = 3
_S_SHUFFLE = 4

METRICS_HEADER = ("epoch", "ce", "samd", "nld", "total", "test_acc", "fire_rate", "seconds")


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: str = "cosine"  # or "constant"
    seed: int = 1
    time_steps: int = 4
    beta: float = 1.0
    gamma: float = 1.0
    lam: float = 0.1
    tau: float = 2.0
    temp_map: float = 2.0
    scale_mode: str = "softmax"
    noise_mode: str = "adaptive"  # "adaptive", "none", or "fixed:<std>"
    samd_stage: int = 4
    dataset: str = "synthetic"
    arch: str = "base"
    cam_target: str = "logit"
    noise_ddof: int = 0  # population std by default
    crop_pad: int = 0
    hflip: bool = False
    eval_batch_size: int = 256
    deterministic: bool = False

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.time_steps < 1:
            raise ValueError("time_steps must be >= 1")
        if self.tau <= 0 or self.temp_map <= 0:
            raise ValueError("temperatures must be positive")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if not 1 <= self.samd_stage <= 4:
            raise ValueError("samd_stage must be in [1,4]")

    def weights(self) -> LossWeights:
        return LossWeights(self.beta, self.gamma, self.tau, self.temp_map)

    def noise(self) -> NoiseConfig:
        return NoiseConfig.parse(self.noise_mode, self.lam)


@dataclass
class EpochRow:
    epoch: int
    ce: float
    samd: float
    nld: float
    total: float
    test_acc: float
    fire_rate: float
    seconds: float


@dataclass
class RunMetrics:
    rows: list[EpochRow] = field(default_factory=list)
    best_acc: float = 0.0
    best_epoch: int = -1

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(METRICS_HEADER)
            for r in self.rows:
                writer.writerow([
                    r.epoch,
                    f"{r.ce:.6f}", f"{r.samd:.6f}", f"{r.nld:.6f}", f"{r.total:.6f}",
                    f"{r.test_acc:.4f}", f"{r.fire_rate:.4f}", f"{r.seconds:.3f}",
                ])


class SGD:
    """Momentum SGD with decoupled-from-nothing L2 weight decay (classic form)."""

    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 1e-4):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data = p.data - self.lr * v


def schedule_lr(config: TrainConfig, epoch: int) -> float:
    if config.schedule == "constant":
        return config.lr
    return 0.5 * config.lr * (1.0 + np.cos(np.pi * epoch / config.epochs))


def _augment_config(config: TrainConfig) -> AugmentConfig | None:
    if config.crop_pad == 0 and not config.hflip:
        return None
    return AugmentConfig(crop_pad=config.crop_pad, hflip=config.hflip)


def evaluate(net, dataset: Dataset, time_steps: int | None = None, batch_size: int = 256,
             stats: tuple[np.ndarray, np.ndarray] | None = None):
    """Top-1 accuracy percent; for spiking nets also the overall fire rate percent.

    Noise is never applied here; batch norm uses running statistics.
    """
    was_training = net.training
    net.eval()
    correct = 0
    ones = 0
    total_entries = 0
    spiking = isinstance(net, StudentNet)
    for start in range(0, len(dataset), batch_size):
        images = dataset.images[start : start + batch_size]
        labels = dataset.labels[start : start + batch_size]
        if stats is not None:
            images = normalize(images, *stats)
        with no_grad():
            if spiking:
                if time_steps is None:
                    raise ValueError("evaluating a spiking net requires time_steps")
                logits, _, stage_outputs = net.forward(Tensor(images), time_steps, record_stages=True)
                for out in stage_outputs:
                    o, t = spike_count(out)
                    ones += o
                    total_entries += t
            else:
                logits, _ = net.forward(Tensor(images))
        correct += int((logits.data.argmax(axis=1) == labels).sum())
    if was_training:
        net.train()
    accuracy = 100.0 * correct / len(dataset)
    rate = 100.0 * ones / total_entries if spiking else None
    return accuracy, rate


def train_teacher(config: TrainConfig, train_ds: Dataset, test_ds: Dataset,
                  out_dir=None, quiet: bool = False):
    """Cross-entropy pretraining; returns (net with best weights, metrics)."""
    rng_init = np.random.default_rng([config.seed, _S_INIT_TEACHER])
    teacher = make_teacher(config.arch, train_ds.images.shape[1], train_ds.num_classes, rng_init)
    stats = channel_stats(train_ds.images)
    optimizer = SGD(teacher.parameters(), config.lr, config.momentum, config.weight_decay)
    batches = BatchIterator(train_ds, config.batch_size, seed=(config.seed, _S_SHUFFLE))
    aug = _augment_config(config)

    metrics = RunMetrics()
    best_state = None
    for epoch in range(config.epochs):
        tic = time.perf_counter()
        optimizer.lr = schedule_lr(config, epoch)
        teacher.train()
        ce_sum, seen = 0.0, 0
        aug_rng = np.random.default_rng([config.seed, _S_AUGMENT, epoch])
        for images, labels in batches:
            if aug is not None:
                images = augment(images, aug, aug_rng)
            images = normalize(images, *stats)
            logits, _ = teacher.forward(Tensor(images))
            loss = T.cross_entropy(logits, labels)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            ce_sum += loss.item() * labels.shape[0]
            seen += labels.shape[0]
        acc, _ = evaluate(teacher, test_ds, batch_size=config.eval_batch_size, stats=stats)
        seconds = 0.0 if config.deterministic else time.perf_counter() - tic
        ce = ce_sum / seen
        metrics.rows.append(EpochRow(epoch, ce, 0.0, 0.0, ce, acc, 0.0, seconds))
        if acc > metrics.best_acc or best_state is None:
            metrics.best_acc = acc
            metrics.best_epoch = epoch
            best_state = {k: v.copy() for k, v in teacher.state_dict().items()}
        if not quiet:
            print(f"[teacher] epoch {epoch} ce {ce:.4f} acc {acc:.2f}")

    teacher.load_state_dict(best_state)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(teacher, out / "teacher.ckpt")
        metrics.write_csv(out / "metrics.csv")
    return teacher, metrics


def check_compatible(teacher: TeacherNet, student: StudentNet, sample: np.ndarray,
                     tap_stage: int) -> None:
    """Fail fast if the pair cannot be distilled (before any training step)."""
    if teacher.in_channels != student.in_channels:
        raise ValueError(
            f"teacher expects {teacher.in_channels} input channels, student {student.in_channels}"
        )
    if teacher.num_classes != student.num_classes:
        raise ValueError(
            f"teacher has {teacher.num_classes} classes, student {student.num_classes}"
        )
    probe = Tensor(sample[:1])
    with no_grad():
        _, te_feat = teacher.forward(probe, tap_stage=tap_stage)
        _, st_train = student.forward(probe, 1, tap_stage=tap_stage)
    if te_feat.shape[2:] != st_train.spikes.shape[3:]:
        raise ValueError(
            f"stage {tap_stage} spatial mismatch: teacher {te_feat.shape[2:]} "
            f"vs student {st_train.spikes.shape[3:]}"
        )


def distill_student(config: TrainConfig, teacher_state: dict, train_ds: Dataset, test_ds: Dataset,
                    out_dir=None, quiet: bool = False, on_step=None):
    """Train a spiking student against a frozen teacher; returns (student, metrics).

    Per step: teacher forward (plus a scoped map backward when the map loss
    is active), student forward over T steps, then CE + beta * map loss +
    gamma * logits loss, updating the student only.
    """
    teacher = teacher_from_state(teacher_state).eval()
    rng_init = np.random.default_rng([config.seed, _S_INIT_STUDENT])
    student = make_student(config.arch, train_ds.images.shape[1], train_ds.num_classes,
                           rng_init, NeuronParams())
    check_compatible(teacher, student, train_ds.images, config.samd_stage)

    stats = channel_stats(train_ds.images)
    weights = config.weights()
    noise_cfg = config.noise()
    optimizer = SGD(student.parameters(), config.lr, config.momentum, config.weight_decay)
    batches = BatchIterator(train_ds, config.batch_size, seed=(config.seed, _S_SHUFFLE))
    aug = _augment_config(config)
    zero = Tensor(np.float32(0.0))

    metrics = RunMetrics()
    best_state = None
    for epoch in range(config.epochs):
        tic = time.perf_counter()
        optimizer.lr = schedule_lr(config, epoch)
        student.train()
        sums = np.zeros(4)
        seen = 0
        aug_rng = np.random.default_rng([config.seed, _S_AUGMENT, epoch])
        noise_rng = np.random.default_rng([config.seed, _S_NOISE, epoch])
        for images, labels in batches:
            if aug is not None:
                images = augment(images, aug, aug_rng)
            images = normalize(images, *stats)
            x = Tensor(images)

            need_teacher = weights.beta != 0.0 or weights.gamma != 0.0
            teacher_logits = None
            cam = None
            if weights.beta != 0.0:
                cam = teacher_cam(teacher, x, labels, config.cam_target, config.samd_stage)
                with no_grad():
                    teacher_logits, _ = teacher.forward(x)
            elif need_teacher:
                with no_grad():
                    teacher_logits, _ = teacher.forward(x)

            logits, train = student.forward(x, config.time_steps, tap_stage=config.samd_stage)
            ce = T.cross_entropy(logits, labels)

            samd = zero
            if weights.beta != 0.0:
                sam = sam_generate(train)
                samd = scaled_map_alignment(cam, sam, config.scale_mode, weights.temp_map)

            nld = zero
            if weights.gamma != 0.0:
                noise = sample_noise(logits, noise_cfg, noise_rng, config.noise_ddof)
                soft = smooth_logits(logits, noise, noise_cfg.lam)
                nld = nld_loss(teacher_logits.detach(), soft, weights.tau)

            loss = total_loss(ce, samd, nld, weights)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            teacher.zero_grad()

            n = labels.shape[0]
            step_vals = (ce.item(), samd.item(), nld.item(), loss.item())
            if on_step is not None:
                on_step(*step_vals)
            sums += np.array(step_vals) * n
            seen += n

        acc, rate = evaluate(student, test_ds, config.time_steps,
                             batch_size=config.eval_batch_size, stats=stats)
        seconds = 0.0 if config.deterministic else time.perf_counter() - tic
        ce_m, samd_m, nld_m, total_m = (sums / seen).tolist()
        metrics.rows.append(EpochRow(epoch, ce_m, samd_m, nld_m, total_m, acc, rate, seconds))
        if acc > metrics.best_acc or best_state is None:
            metrics.best_acc = acc
            metrics.best_epoch = epoch
            best_state = {k: v.copy() for k, v in student.state_dict().items()}
        if not quiet:
            print(
                f"[distill] epoch {epoch} ce {ce_m:.4f} samd {samd_m:.4f} "
                f"nld {nld_m:.4f} acc {acc:.2f} fire {rate:.2f}"
            )

    student.load_state_dict(best_state)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(student, out / "student.ckpt")
        metrics.write_csv(out / "metrics.csv")
    return student, metrics


ABLATION_SCALE_MODES = ("softmax", "l2", "zscore", "none")
ABLATION_NOISE_MODES = ("adaptive", "fixed:0.01", "fixed:0.1", "fixed:1.0", "none")
ABLATION_HEADER = ("scale_mode", "noise_mode", "ce", "samd", "nld", "total", "best_acc", "fire_rate", "diverged")


def ablation_suite(config: TrainConfig, teacher_state: dict, train_ds: Dataset, test_ds: Dataset,
                   out_path=None, quiet: bool = True) -> list[dict]:
    """Run the scale-mode x noise-mode grid; divergence is recorded, not fatal."""
    rows = []
    for scale_mode, noise_mode in product(ABLATION_SCALE_MODES, ABLATION_NOISE_MODES):
        run_cfg = replace(config, scale_mode=scale_mode, noise_mode=noise_mode)
        row = {"scale_mode": scale_mode, "noise_mode": noise_mode, "diverged": 0}
        try:
            _, metrics = distill_student(run_cfg, teacher_state, train_ds, test_ds, quiet=quiet)
            last = metrics.rows[-1]
            row.update(ce=last.ce, samd=last.samd, nld=last.nld, total=last.total,
                       best_acc=metrics.best_acc, fire_rate=last.fire_rate)
        except FloatingPointError:
            row.update(ce=float("nan"), samd=float("nan"), nld=float("nan"),
                       total=float("nan"), best_acc=float("nan"), fire_rate=float("nan"),
                       diverged=1)
        rows.append(row)
        if not quiet:
            print(f"[ablate] scale={scale_mode} noise={noise_mode} acc={row['best_acc']}")
    if out_path is not None:
        write_ablation_csv(rows, out_path)
    return rows


def write_ablation_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(ABLATION_HEADER)
        for row in rows:
            writer.writerow([
                row["scale_mode"], row["noise_mode"],
                f"{row['ce']:.6f}", f"{row['samd']:.6f}", f"{row['nld']:.6f}",
                f"{row['total']:.6f}", f"{row['best_acc']:.4f}", f"{row['fire_rate']:.4f}",
                row["diverged"],
            ])
