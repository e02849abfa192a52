"""Training pipelines: robust-to-deviation quantized training plus baselines.

The core loop follows the multi-sample scheme: per step, sample a mini-batch,
accumulate the loss over n independently sampled chip instances (losses are
summed, not averaged), then apply a single optimizer update. The default
step size divides by n so the effective step stays comparable across n.
Baselines reuse the same loop: the quantize-only arm forces all deviations
to zero, the deviation-only arm drops the quantizers, and the post-training
arm quantizes a finished full-precision model.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .autograd import add, backward, softmax_cross_entropy
from .dataio import Checkpoint, Dataset, checkpoint_from_model
from .network import (
    CLEAN,
    PERTURBED_ONLY,
    QUANT_ONLY,
    QUANT_PERTURBED,
    Model,
    NetworkSpec,
    forward,
    init_model,
    refresh_stats,
)
from .quantization import calibrate_activations
from .variability import ChipInstance, VariabilityConfig, derive_seed, stream

PIPELINES = ("qavat", "qat", "vat", "ptq_vat")


class TrainingDivergedError(RuntimeError):
    """Loss went non-finite; carries the epoch/step where it happened."""


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for one training run.

    lr=None means base_lr / n_samples (summed multi-sample loss scales the
    gradient by n; dividing the step keeps the update magnitude stable).
    """

    pipeline: str = "qavat"
    epochs: int = 30
    batch_size: int = 64
    base_lr: float = 0.1
    lr: float | None = None
    momentum: float = 0.9
    decay_factor: float = 0.1
    decay_at: tuple = (0.5, 0.75)
    n_samples: int = 1
    seed: int = 0
    variability: VariabilityConfig = field(default_factory=VariabilityConfig)
    dtype: str = "float64"
    calibration_batches: int = 10
    refresh_weight_scales: bool = False
    val_chips: int = 20
    val_subset: int = 2048
    train_subset: int | None = None

    def __post_init__(self):
        if self.pipeline not in PIPELINES:
            raise ValueError(f"pipeline must be one of {PIPELINES}, got {self.pipeline!r}")
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def effective_lr(self) -> float:
        return self.lr if self.lr is not None else self.base_lr / self.n_samples

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decay_at"] = list(self.decay_at)
        return d


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    mean_loss: float
    clean_acc: float
    panel_acc: float | None = None


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    wall_time_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "records": [asdict(r) for r in self.records],
            "wall_time_s": self.wall_time_s,
        }


class SGD:
    """SGD with classical momentum: v = mu*v + g; w -= lr*v."""

    def __init__(self, params: dict, momentum: float):
        self.params = params
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        for k, p in self.params.items():
            if p.grad is None:
                continue
            v = self.velocity[k]
            v *= self.momentum
            v += p.grad
            p.data -= lr * v


def _epoch_lr(cfg: TrainConfig, epoch: int) -> float:
    lr = cfg.effective_lr
    for frac in cfg.decay_at:
        if epoch >= int(cfg.epochs * frac):
            lr *= cfg.decay_factor
    return lr


def _batch_iter(n: int, batch_size: int, perm: np.ndarray | None = None):
    order = perm if perm is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def accuracy(model: Model, ds: Dataset, mode: str, chip: ChipInstance | None = None, st=None,
             batch_size: int = 512, limit: int | None = None) -> float:
    """Fraction of correct argmax predictions over (a prefix of) a split."""
    n = len(ds) if limit is None else min(limit, len(ds))
    correct = 0
    for idx in _batch_iter(n, batch_size):
        logits = forward(model, ds.images[idx], mode, chip=chip, st=st)
        correct += int((logits.data.argmax(axis=1) == ds.labels[idx]).sum())
    return correct / n


def _calibration_batches(train_ds: Dataset, cfg: TrainConfig, dtype):
    for idx in _batch_iter(min(len(train_ds), cfg.calibration_batches * cfg.batch_size), cfg.batch_size):
        yield train_ds.images[idx].astype(dtype, copy=False)


def _train_mode(pipeline: str) -> str:
    return {"qavat": QUANT_PERTURBED, "qat": QUANT_ONLY, "vat": PERTURBED_ONLY}[pipeline]


def train(spec: NetworkSpec, train_ds: Dataset, test_ds: Dataset, cfg: TrainConfig, on_epoch=None):
    """Run one pipeline; returns (Checkpoint, TrainLog).

    on_epoch (optional) receives each EpochRecord as it completes, for
    streaming logs. ptq_vat composes the deviation-only training with
    post-hoc quantization.
    """
    if cfg.pipeline == "ptq_vat":
        vat_cfg = _replace_pipeline(cfg, "vat")
        ckpt, log = train(spec, train_ds, test_ds, vat_cfg, on_epoch=on_epoch)
        bits = {l.name: l.weight_bits for l in spec.weight_layers()}
        k_w = next(iter(bits.values()))
        k_a = next(
            l.activation_bits for l in spec.layers if l.activation_bits is not None
        )
        qckpt = ptq(ckpt, k_a, k_w, train_ds, cfg)
        return qckpt, log

    t0 = time.perf_counter()
    dtype = np.dtype(cfg.dtype)
    quantized = cfg.pipeline in ("qavat", "qat")
    perturbed = cfg.pipeline in ("qavat", "vat")
    var = cfg.variability if perturbed else VariabilityConfig()
    mode = _train_mode(cfg.pipeline)
    n_draws = cfg.n_samples if perturbed else 1

    model = init_model(spec, cfg.seed, dtype)
    if quantized:
        model.compute_weight_configs()
        model.act_configs = calibrate_activations(model, _calibration_batches(train_ds, cfg, dtype))

    opt = SGD(model.params, cfg.momentum)
    log = TrainLog()
    n_train = len(train_ds) if cfg.train_subset is None else min(cfg.train_subset, len(train_ds))
    step = 0
    for epoch in range(cfg.epochs):
        lr = _epoch_lr(cfg, epoch)
        if quantized and cfg.refresh_weight_scales and epoch > 0:
            model.compute_weight_configs()
        perm = stream(cfg.seed, f"shuffle/{epoch}").permutation(n_train)
        loss_sum = 0.0
        n_batches = 0
        for idx in _batch_iter(n_train, cfg.batch_size, perm):
            xb = train_ds.images[idx].astype(dtype, copy=False)
            yb = train_ds.labels[idx]
            model.zero_grad()
            if perturbed:
                refresh_stats(model, quantized=quantized)
            total = None
            for i in range(n_draws):
                chip = None
                if perturbed:
                    chip = ChipInstance(derive_seed(cfg.seed, "trainchip", step, i), var)
                logits = forward(model, xb, mode, chip=chip)
                loss = softmax_cross_entropy(logits, yb)
                total = loss if total is None else add(total, loss)
            if not np.isfinite(total.data):
                raise TrainingDivergedError(
                    f"loss non-finite at epoch {epoch}, step {step} (pipeline {cfg.pipeline}, lr {lr:g})"
                )
            backward(total)
            opt.step(lr)
            loss_sum += float(total.data) / n_draws
            n_batches += 1
            step += 1

        clean_mode = QUANT_ONLY if quantized else CLEAN
        clean_acc = accuracy(model, test_ds, clean_mode)
        panel = None
        if perturbed and not var.is_zero and cfg.val_chips > 0:
            refresh_stats(model, quantized=quantized)
            accs = []
            for c in range(cfg.val_chips):
                chip = ChipInstance(derive_seed(cfg.seed, "valchip", c), var)
                accs.append(accuracy(model, test_ds, mode, chip=chip, limit=cfg.val_subset))
            panel = float(np.mean(accs))
        log.records.append(EpochRecord(epoch, lr, loss_sum / max(n_batches, 1), clean_acc, panel))
        if on_epoch is not None:
            on_epoch(log.records[-1])

    if quantized or perturbed:
        refresh_stats(model, quantized=quantized)
    log.wall_time_s = time.perf_counter() - t0
    provenance = {
        "train_config": cfg.to_dict(),
        "variability": asdict(var),
        "final_clean_acc": log.records[-1].clean_acc if log.records else None,
    }
    return checkpoint_from_model(model, provenance), log


def _replace_pipeline(cfg: TrainConfig, pipeline: str) -> TrainConfig:
    d = cfg.to_dict()
    d["pipeline"] = pipeline
    d["decay_at"] = tuple(d["decay_at"])
    d["variability"] = cfg.variability
    return TrainConfig(**d)


def train_qavat(spec: NetworkSpec, train_ds: Dataset, test_ds: Dataset, cfg: TrainConfig):
    return train(spec, train_ds, test_ds, _replace_pipeline(cfg, "qavat"))


def train_qat(spec: NetworkSpec, train_ds: Dataset, test_ds: Dataset, cfg: TrainConfig):
    return train(spec, train_ds, test_ds, _replace_pipeline(cfg, "qat"))


def train_vat(spec: NetworkSpec, train_ds: Dataset, test_ds: Dataset, cfg: TrainConfig):
    return train(spec, train_ds, test_ds, _replace_pipeline(cfg, "vat"))


def ptq(ckpt: Checkpoint, k_a: int, k_w: int, calib_ds: Dataset, cfg: TrainConfig | None = None) -> Checkpoint:
    """Post-hoc quantization of a trained full-precision checkpoint.

    Weight scales by MMSE on the trained weights; activation scales from
    running min/max over calibration batches with quantized weights active.
    No retraining.
    """
    if calib_ds is None or len(calib_ds) == 0:
        raise ValueError("post-training quantization requires calibration data")
    cfg = cfg or TrainConfig(pipeline="qat")
    spec = ckpt.spec
    want_w = {l.name: l.weight_bits for l in spec.weight_layers()}
    want_a = {l.name: l.activation_bits for l in spec.layers if l.activation_bits is not None}
    if any(b != k_w for b in want_w.values()) or any(b != k_a for b in want_a.values()):
        raise ValueError(
            f"requested A{k_a}W{k_w} but the network spec declares different bit widths"
        )
    model = ckpt.to_model()
    model.compute_weight_configs()
    model.act_configs = calibrate_activations(model, _calibration_batches(calib_ds, cfg, model.dtype))
    refresh_stats(model, quantized=True)
    provenance = dict(ckpt.provenance)
    provenance["ptq"] = {"k_a": k_a, "k_w": k_w, "calibration_batches": cfg.calibration_batches}
    provenance["pipeline"] = "ptq_vat"
    return checkpoint_from_model(model, provenance)
