"""Monte Carlo deployment evaluation over sampled chip populations.

Each chip index maps through a counter-based stream to one frozen hardware
realization, so populations are reproducible, order-independent, and safe to
evaluate from worker threads into preallocated result slots. Reports carry a
fingerprint hashed from every config plus the checkpoint identity; wall time
stays out of the hash.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataio import Checkpoint, Dataset
from .network import PERTURBED_ONLY, QUANT_PERTURBED, forward, refresh_stats
from .selftuning import NonRecoverableChipError, STConfig, overhead, prepare_st
from .training import TrainConfig, train
from .variability import ChipInstance, VariabilityConfig, derive_seed, stream

QUICK_CHIPS = 200


@dataclass(frozen=True)
class EvalConfig:
    """Deployment population description."""

    n_chips: int = 2000
    variability: VariabilityConfig = field(default_factory=VariabilityConfig)
    st: STConfig | None = field(default_factory=STConfig)  # None normalizes to no correction
    split: str = "test"
    batch_size: int = 512
    master_seed: int = 0
    threads: int = 1
    dtype: str = "float64"
    limit: int | None = None

    def __post_init__(self):
        if self.st is None:
            object.__setattr__(self, "st", STConfig())
        if self.n_chips < 1:
            raise ValueError(f"n_chips must be >= 1, got {self.n_chips}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def fingerprint_payload(self) -> dict:
        d = asdict(self)
        d.pop("threads")  # execution detail; does not affect results
        return d


@dataclass
class EvalReport:
    """Population statistics plus the raw per-chip vector.

    Non-recoverable chips appear as NaN in the vector, are excluded from
    the mean, and are counted separately.
    """

    accuracies: np.ndarray
    mean: float
    std: float
    min: float
    max: float
    stderr: float
    n_chips: int
    n_nonrecoverable: int
    fingerprint: str
    overhead: dict
    wall_time_s: float

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "std": self.std,
            "min": self.min,
            "max": self.max,
            "stderr": self.stderr,
            "n_chips": self.n_chips,
            "n_nonrecoverable": self.n_nonrecoverable,
            "fingerprint": self.fingerprint,
            "overhead": self.overhead,
        }

    def save(self, out_dir) -> None:
        """report.json + per_chip.csv (deterministic); wall time goes to a
        separate metadata file so reruns produce identical artifacts."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.json", "w") as fp:
            json.dump(self.to_dict(), fp, indent=2, sort_keys=True)
            fp.write("\n")
        with open(out / "per_chip.csv", "w", newline="") as fp:
            writer = csv.writer(fp)
            writer.writerow(["chip_index", "accuracy", "recoverable", "fingerprint"])
            for c, acc in enumerate(self.accuracies):
                ok = not np.isnan(acc)
                writer.writerow([c, f"{acc:.6f}" if ok else "", int(ok), self.fingerprint])
        with open(out / "metadata.json", "w") as fp:
            json.dump({"wall_time_s": self.wall_time_s}, fp, indent=2)
            fp.write("\n")


def chip_seed(master_seed: int, index: int) -> int:
    return derive_seed("evalchip", master_seed, index)


def _report_fingerprint(ckpt: Checkpoint, cfg: EvalConfig) -> str:
    payload = {"checkpoint": ckpt.fingerprint(), "eval": cfg.fingerprint_payload()}
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def evaluate(ckpt: Checkpoint, test_ds: Dataset, cfg: EvalConfig) -> EvalReport:
    """Accuracy of one checkpoint over a population of sampled chips.

    Quantized checkpoints deploy with quantized+perturbed weights; full
    precision ones with perturbation only. Correction (if configured)
    requires a quantized checkpoint. Thread-parallel evaluation is
    bit-identical to serial: chips are independent streams and results land
    in preallocated slots.
    """
    t0 = time.perf_counter()
    if cfg.st.st_type != "none" and not ckpt.quantized:
        raise ValueError("output correction requires a quantized checkpoint")
    model = ckpt.to_model(np.dtype(cfg.dtype))
    refresh_stats(model, quantized=ckpt.quantized)
    mode = QUANT_PERTURBED if ckpt.quantized else PERTURBED_ONLY

    n = len(test_ds) if cfg.limit is None else min(cfg.limit, len(test_ds))
    images = test_ds.images[:n].astype(model.dtype, copy=False)
    labels = test_ds.labels[:n]
    batches = [
        (images[s : s + cfg.batch_size], labels[s : s + cfg.batch_size])
        for s in range(0, n, cfg.batch_size)
    ]

    def run_chip(c: int) -> float:
        chip = ChipInstance(chip_seed(cfg.master_seed, c), cfg.variability)
        try:
            st_state = prepare_st(model, chip, cfg.st)
        except NonRecoverableChipError:
            return float("nan")
        correct = 0
        for xb, yb in batches:
            logits = forward(model, xb, mode, chip=chip, st=st_state)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
        return correct / n

    slots = np.full(cfg.n_chips, np.nan)
    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            for c, acc in zip(range(cfg.n_chips), pool.map(run_chip, range(cfg.n_chips))):
                slots[c] = acc
    else:
        for c in range(cfg.n_chips):
            slots[c] = run_chip(c)

    valid = slots[~np.isnan(slots)]
    n_bad = int(np.isnan(slots).sum())
    if valid.size == 0:
        mean = std = vmin = vmax = stderr = float("nan")
    else:
        mean = float(valid.mean())
        std = float(valid.std())
        vmin = float(valid.min())
        vmax = float(valid.max())
        stderr = std / np.sqrt(valid.size)
    return EvalReport(
        accuracies=slots,
        mean=mean,
        std=std,
        min=vmin,
        max=vmax,
        stderr=float(stderr) if valid.size else float("nan"),
        n_chips=cfg.n_chips,
        n_nonrecoverable=n_bad,
        fingerprint=_report_fingerprint(ckpt, cfg),
        overhead=overhead(cfg.st, ckpt.spec),
        wall_time_s=time.perf_counter() - t0,
    )


def _eval_with(cfg: EvalConfig, **overrides) -> EvalConfig:
    d = asdict(cfg)
    d["variability"] = cfg.variability
    d["st"] = cfg.st
    d.update(overrides)
    return EvalConfig(**d)


def run_scenario1(
    spec,
    train_ds: Dataset,
    test_ds: Dataset,
    sigmas,
    train_cfg: TrainConfig,
    eval_cfg: EvalConfig,
    arms=("qat", "ptq_vat", "qavat"),
    out_dir=None,
) -> list[dict]:
    """Within-chip-only comparison table over a deviation grid.

    The quantize-only arm is deviation-oblivious and trains once; the
    deviation-aware arms retrain per grid point with matching sigma_w. Every
    arm at a given sigma deploys on the same chip population. With out_dir
    set, finished cells are loaded from per-cell result files on rerun.
    """
    model_kind = eval_cfg.variability.model
    rows: list[dict] = []
    trained: dict[tuple, Checkpoint] = {}
    for arm in arms:
        if arm not in ("qat", "ptq_vat", "qavat", "vat"):
            raise ValueError(f"unknown scenario arm {arm!r}")
    for sigma in sigmas:
        for arm in arms:
            cell = f"s1_{arm}_sw{sigma:g}"
            cached = _load_cell(out_dir, cell)
            if cached is not None:
                rows.append(cached)
                continue
            key = (arm, 0.0 if arm == "qat" else sigma)
            if key not in trained:
                var = VariabilityConfig(model=model_kind, sigma_w=key[1], sigma_b=0.0)
                cfg_arm = _train_with(train_cfg, pipeline=arm, variability=var)
                trained[key], _ = train(spec, train_ds, test_ds, cfg_arm)
            pop = _eval_with(
                eval_cfg,
                variability=VariabilityConfig(model=model_kind, sigma_w=sigma, sigma_b=0.0),
                st=STConfig(),
            )
            report = evaluate(trained[key], test_ds, pop)
            row = {
                "scenario": 1,
                "arm": arm,
                "sigma_w": float(sigma),
                "sigma_b": 0.0,
                "mean": report.mean,
                "std": report.std,
                "stderr": report.stderr,
                "n_chips": report.n_chips,
                "n_nonrecoverable": report.n_nonrecoverable,
                "fingerprint": report.fingerprint,
            }
            rows.append(row)
            _save_cell(out_dir, cell, row)
    return rows


def run_scenario2(
    spec,
    train_ds: Dataset,
    test_ds: Dataset,
    sigma_tots,
    train_cfg: TrainConfig,
    eval_cfg: EvalConfig,
    st_cfg: STConfig | None = None,
    out_dir=None,
) -> list[dict]:
    """Mixed-deviation table: uncorrected, corrected, and cross-corrected.

    sigma_tot splits evenly (sigma_b = sigma_w = sigma_tot/sqrt(2)). The
    network trains once per sigma_tot with within-chip sampling only (the
    correction-deployment flow); rows evaluate that same checkpoint
    within-only, mixed, mixed with the correction matching the deviation
    model, and mixed with the mismatched correction.
    """
    model_kind = eval_cfg.variability.model
    st_cfg = st_cfg or STConfig(st_type="gtm_plus_ltm")
    correct_type = "gtm_only" if model_kind == "weight_proportional" else "gtm_plus_ltm"
    wrong_type = "gtm_plus_ltm" if correct_type == "gtm_only" else "gtm_only"
    rows: list[dict] = []
    for sigma_tot in sigma_tots:
        s_comp = float(sigma_tot) / np.sqrt(2.0)
        var_within = VariabilityConfig(model=model_kind, sigma_w=float(sigma_tot), sigma_b=0.0)
        var_mixed = VariabilityConfig(model=model_kind, sigma_w=s_comp, sigma_b=s_comp)
        ckpt = None
        arms = (
            ("qavat_within", var_within, "none"),
            ("qavat_mixed", var_mixed, "none"),
            ("qavat_mixed_st", var_mixed, correct_type),
            ("qavat_mixed_wrong_st", var_mixed, wrong_type),
        )
        for arm, var, st_type in arms:
            cell = f"s2_{arm}_st{sigma_tot:g}"
            cached = _load_cell(out_dir, cell)
            if cached is not None:
                rows.append(cached)
                continue
            if ckpt is None:
                cfg_arm = _train_with(train_cfg, pipeline="qavat", variability=var_within)
                ckpt, _ = train(spec, train_ds, test_ds, cfg_arm)
            st = replace(st_cfg, st_type=st_type) if st_type != "none" else STConfig()
            report = evaluate(ckpt, test_ds, _eval_with(eval_cfg, variability=var, st=st))
            row = {
                "scenario": 2,
                "arm": arm,
                "sigma_tot": float(sigma_tot),
                "sigma_w": var.sigma_w,
                "sigma_b": var.sigma_b,
                "st_type": st_type,
                "mean": report.mean,
                "std": report.std,
                "stderr": report.stderr,
                "n_chips": report.n_chips,
                "n_nonrecoverable": report.n_nonrecoverable,
                "fingerprint": report.fingerprint,
            }
            rows.append(row)
            _save_cell(out_dir, cell, row)
    return rows


def _train_with(cfg: TrainConfig, **overrides) -> TrainConfig:
    d = cfg.to_dict()
    d["decay_at"] = tuple(d["decay_at"])
    d["variability"] = cfg.variability
    d.update(overrides)
    return TrainConfig(**d)


def _load_cell(out_dir, cell: str) -> dict | None:
    if out_dir is None:
        return None
    path = Path(out_dir) / f"{cell}.json"
    if path.exists():
        with open(path) as fp:
            return json.load(fp)
    return None


def _save_cell(out_dir, cell: str, row: dict) -> None:
    if out_dir is None:
        return
    path = Path(out_dir) / f"{cell}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fp:
        json.dump(row, fp, indent=2, sort_keys=True)
        fp.write("\n")


def bias_demo(w: float = 1.0, t: float = 0.0, sigma: float = 0.5, n: int = 1_000_000, seed: int = 0) -> dict:
    """Gradient-estimator bias on the analytic quadratic L = (w(1+eps)-t)^2.

    The reparameterized estimator 2(w(1+eps)-t)(1+eps) targets the true
    gradient of E[L], 2(w-t) + 2 sigma^2 w. Treating the sampled deviation
    as a constant instead gives 2(w_tilde-t), whose mean is 2(w-t): it
    misses the 2 sigma^2 w term entirely.
    """
    eps = sigma * stream(seed, "bias_demo").standard_normal(n)
    reparam = 2.0 * (w * (1.0 + eps) - t) * (1.0 + eps)
    naive = 2.0 * (w * (1.0 + eps) - t)
    return {
        "w": w,
        "t": t,
        "sigma": sigma,
        "n": n,
        "analytic_true_grad": 2.0 * (w - t) + 2.0 * sigma**2 * w,
        "analytic_naive_mean": 2.0 * (w - t),
        "reparam_mean": float(reparam.mean()),
        "reparam_se": float(reparam.std() / np.sqrt(n)),
        "naive_mean": float(naive.mean()),
        "naive_se": float(naive.std() / np.sqrt(n)),
    }
