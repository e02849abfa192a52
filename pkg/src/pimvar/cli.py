"""Command-line entry points: train, eval, sweep, bias-demo.

Runs are described by a versioned YAML config; unknown keys are rejected so
typos fail loudly. Exit codes: 0 success, 1 runtime failure, 2 bad
config/usage. Artifacts (checkpoints, reports, tables) are deterministic
given config+seed; timestamps and wall times live in separate metadata
files.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import time
from pathlib import Path

import yaml

from .dataio import Dataset, load_checkpoint, load_cifar10, load_mnist, save_checkpoint, synthetic_dataset
from .evaluation import QUICK_CHIPS, EvalConfig, bias_demo, evaluate, run_scenario1, run_scenario2
from .network import BUILDERS
from .selftuning import STConfig
from .training import TrainConfig, train
from .variability import VariabilityConfig


class ConfigError(ValueError):
    """Bad run configuration (unknown key, wrong type, missing section)."""


CONFIG_VERSION = 1

_SCHEMA = {
    "version": None,
    "output_dir": None,
    "model": {"name", "activation_bits", "weight_bits"},
    "data": {"dataset", "dir", "per_class", "n_train", "n_test", "seed"},
    "train": {
        "pipeline", "epochs", "batch_size", "base_lr", "lr", "momentum",
        "decay_factor", "decay_at", "n_samples", "seed", "dtype",
        "calibration_batches", "refresh_weight_scales", "val_chips",
        "val_subset", "train_subset",
    },
    "variability": {"model", "sigma_w", "sigma_b"},
    "eval": {"n_chips", "batch_size", "master_seed", "dtype", "limit", "split"},
    "selftuning": {"st_type", "n_gtm", "w_g", "x_g", "ltm_columns", "w_l", "guard"},
    "sweep": {"scenario", "sigmas", "arms"},
    "bias_demo": {"w", "t", "sigma", "n", "seed"},
}


def load_config(path) -> dict:
    try:
        with open(path) as fp:
            raw = yaml.safe_load(fp)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except yaml.YAMLError as e:
        raise ConfigError(f"config is not valid YAML: {e}")
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    for key, sub in raw.items():
        if key not in _SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        allowed = _SCHEMA[key]
        if allowed is not None:
            if not isinstance(sub, dict):
                raise ConfigError(f"config section {key!r} must be a mapping")
            for k in sub:
                if k not in allowed:
                    raise ConfigError(f"unknown config key {key}.{k}")
    version = raw.get("version")
    if version != CONFIG_VERSION:
        raise ConfigError(f"config version must be {CONFIG_VERSION}, got {version!r}")
    return raw


def _build(cls, section: dict, **extra):
    try:
        return cls(**{**section, **extra})
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad {cls.__name__}: {e}")


def build_spec(cfg: dict):
    model = cfg.get("model", {})
    name = model.get("name")
    if name not in BUILDERS:
        raise ConfigError(f"model.name must be one of {sorted(BUILDERS)}, got {name!r}")
    kwargs = {}
    if "activation_bits" in model:
        kwargs["activation_bits"] = model["activation_bits"]
    if "weight_bits" in model:
        kwargs["weight_bits"] = model["weight_bits"]
    return BUILDERS[name](**kwargs)


def load_datasets(cfg: dict) -> tuple[Dataset, Dataset]:
    data = cfg.get("data", {})
    kind = data.get("dataset")
    if kind == "mnist":
        d = data.get("dir", "data/mnist")
        return load_mnist(d, "train"), load_mnist(d, "test")
    if kind == "cifar10":
        d = data.get("dir", "data/cifar10")
        per_class = data.get("per_class")
        seed = data.get("seed", 0)
        return (
            load_cifar10(d, "train", per_class=per_class, seed=seed),
            load_cifar10(d, "test", per_class=per_class, seed=seed),
        )
    if kind == "synthetic":
        seed = data.get("seed", 0)
        return (
            synthetic_dataset(data.get("n_train", 512), "train", seed=seed),
            synthetic_dataset(data.get("n_test", 256), "test", seed=seed),
        )
    raise ConfigError(f"data.dataset must be mnist, cifar10, or synthetic, got {kind!r}")


def build_train_config(cfg: dict, seed_override: int | None) -> TrainConfig:
    section = dict(cfg.get("train", {}))
    if "decay_at" in section:
        section["decay_at"] = tuple(section["decay_at"])
    if seed_override is not None:
        section["seed"] = seed_override
    var = _build(VariabilityConfig, cfg.get("variability", {}))
    return _build(TrainConfig, section, variability=var)


def build_eval_config(cfg: dict, args) -> EvalConfig:
    section = dict(cfg.get("eval", {}))
    if args.quick:
        section["n_chips"] = QUICK_CHIPS
    if getattr(args, "seed", None) is not None:
        section["master_seed"] = args.seed
    var = _build(VariabilityConfig, cfg.get("variability", {}))
    st = _build(STConfig, cfg.get("selftuning", {}))
    return _build(
        EvalConfig, section, variability=var, st=st, threads=args.threads
    )


def _out_dir(cfg: dict, args) -> Path:
    out = args.out or cfg.get("output_dir")
    if out is None:
        raise ConfigError("no output directory: set output_dir in the config or pass --out")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_metadata(out: Path, wall_time_s: float) -> None:
    with open(out / "metadata.json", "w") as fp:
        json.dump(
            {"started_at": time.strftime("%Y-%m-%dT%H:%M:%S"), "wall_time_s": wall_time_s},
            fp,
            indent=2,
        )
        fp.write("\n")


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    spec = build_spec(cfg)
    train_ds, test_ds = load_datasets(cfg)
    tcfg = build_train_config(cfg, args.seed)
    out = _out_dir(cfg, args)
    t0 = time.perf_counter()
    with open(out / "trainlog.jsonl", "w") as logfp:

        def on_epoch(rec):
            logfp.write(json.dumps(dataclasses.asdict(rec)) + "\n")
            logfp.flush()

        ckpt, log = train(spec, train_ds, test_ds, tcfg, on_epoch=on_epoch)
    fingerprint = save_checkpoint(ckpt, out / "checkpoint.pvck")
    _write_metadata(out, time.perf_counter() - t0)
    final = log.records[-1] if log.records else None
    print(f"checkpoint {out / 'checkpoint.pvck'} fingerprint {fingerprint}")
    if final is not None:
        print(f"final clean accuracy {final.clean_acc:.4f}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    ckpt = load_checkpoint(args.checkpoint)
    _, test_ds = load_datasets(cfg)
    ecfg = build_eval_config(cfg, args)
    out = _out_dir(cfg, args)
    report = evaluate(ckpt, test_ds, ecfg)
    report.save(out)
    print(
        f"mean {report.mean:.4f} std {report.std:.4f} stderr {report.stderr:.5f} "
        f"chips {report.n_chips} non-recoverable {report.n_nonrecoverable} "
        f"fingerprint {report.fingerprint}"
    )
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    sweep = cfg.get("sweep", {})
    scenario = sweep.get("scenario")
    sigmas = sweep.get("sigmas")
    if scenario not in (1, 2):
        raise ConfigError(f"sweep.scenario must be 1 or 2, got {scenario!r}")
    if not sigmas:
        raise ConfigError("sweep.sigmas must be a non-empty list")
    spec = build_spec(cfg)
    train_ds, test_ds = load_datasets(cfg)
    tcfg = build_train_config(cfg, args.seed)
    ecfg = build_eval_config(cfg, args)
    out = _out_dir(cfg, args)
    t0 = time.perf_counter()
    if scenario == 1:
        arms = tuple(sweep.get("arms", ("qat", "ptq_vat", "qavat")))
        rows = run_scenario1(spec, train_ds, test_ds, sigmas, tcfg, ecfg, arms=arms, out_dir=out)
    else:
        st = _build(STConfig, cfg.get("selftuning", {"st_type": "gtm_plus_ltm"}))
        rows = run_scenario2(spec, train_ds, test_ds, sigmas, tcfg, ecfg, st_cfg=st, out_dir=out)
    with open(out / "table.csv", "w", newline="") as fp:
        writer = csv.DictWriter(fp, fieldnames=sorted({k for r in rows for k in r}))
        writer.writeheader()
        writer.writerows(rows)
    with open(out / "rows.json", "w") as fp:
        json.dump(rows, fp, indent=2, sort_keys=True)
        fp.write("\n")
    _write_metadata(out, time.perf_counter() - t0)
    for r in rows:
        print(json.dumps(r, sort_keys=True))
    return 0


def cmd_bias_demo(args) -> int:
    params = {}
    if args.config:
        cfg = load_config(args.config)
        params = cfg.get("bias_demo", {})
    if args.seed is not None:
        params["seed"] = args.seed
    result = bias_demo(**params)
    text = json.dumps(result, indent=2, sort_keys=True)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bias_demo.json").write_text(text + "\n")
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pimvar",
        description="Deviation-robust quantized training and chip-population evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        p.add_argument("--config", required=needs_config, help="run config YAML")
        p.add_argument("--seed", type=int, default=None, help="override config seeds")
        p.add_argument("--out", default=None, help="output directory (overrides output_dir)")

    p = sub.add_parser("train", help="train a pipeline and save a checkpoint")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint over a chip population")
    common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--quick", action="store_true", help=f"quick mode: {QUICK_CHIPS} chips")
    p.add_argument("--threads", type=int, default=1, help="evaluation worker threads")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="run a scenario sweep (resumable per cell)")
    common(p)
    p.add_argument("--quick", action="store_true", help=f"quick mode: {QUICK_CHIPS} chips")
    p.add_argument("--threads", type=int, default=1, help="evaluation worker threads")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("bias-demo", help="gradient estimator bias demonstration")
    common(p, needs_config=False)
    p.set_defaults(fn=cmd_bias_demo)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "quick"):
        args.quick = False
    if not hasattr(args, "threads"):
        args.threads = 1
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
