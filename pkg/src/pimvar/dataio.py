"""Dataset loading and checkpoint serialization.

Image sets load from their standard binary layouts (big-endian IDX for the
digit set, 3073-byte records for the RGB set), transparently gunzipping,
with magic/count validation. A bundled procedural dataset serves smoke tests
so no network access is ever needed. Checkpoints are a little-endian
sectioned container: magic, format version, canonical-JSON header, raw
tensor payload, and a trailing sha256 over everything before it; that hash
doubles as the artifact fingerprint.
"""

from __future__ import annotations

import dataclasses
import gzip
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .network import LayerSpec, Model, NetworkSpec
from .quantization import QuantConfig
from .variability import LayerStats, stream

MNIST_MEAN, MNIST_STD = 0.1307, 0.3081
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)

_IDX_IMAGES_MAGIC = 2051
_IDX_LABELS_MAGIC = 2049

CHECKPOINT_MAGIC = b"PVCK"
CHECKPOINT_VERSION = 1


class DataFormatError(ValueError):
    """Raised when a dataset file does not match its documented layout."""


class CheckpointFormatError(ValueError):
    """Raised when a checkpoint file is corrupt, truncated, or from an
    unsupported format version."""


@dataclass
class Dataset:
    """Images as (N, C, H, W) float arrays plus integer labels."""

    images: np.ndarray
    labels: np.ndarray
    name: str
    split: str
    n_classes: int

    def __post_init__(self):
        if self.images.ndim != 4 or self.labels.shape != (self.images.shape[0],):
            raise ValueError(
                f"dataset arrays inconsistent: images {self.images.shape}, labels {self.labels.shape}"
            )

    def __len__(self) -> int:
        return self.images.shape[0]


def _read_maybe_gz(path: Path) -> bytes:
    if path.exists():
        if path.suffix == ".gz":
            with gzip.open(path, "rb") as fp:
                return fp.read()
        return path.read_bytes()
    gz = path.with_name(path.name + ".gz")
    if gz.exists():
        with gzip.open(gz, "rb") as fp:
            return fp.read()
    raise FileNotFoundError(f"dataset file not found: {path} (or {gz.name})")


def _parse_idx_images(raw: bytes, source: str) -> np.ndarray:
    if len(raw) < 16:
        raise DataFormatError(f"{source}: truncated header ({len(raw)} bytes)")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != _IDX_IMAGES_MAGIC:
        raise DataFormatError(f"{source}: bad magic {magic}, expected {_IDX_IMAGES_MAGIC}")
    expected = 16 + n * rows * cols
    if len(raw) != expected:
        raise DataFormatError(f"{source}: expected {expected} bytes for {n} images, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(n, rows, cols)


def _parse_idx_labels(raw: bytes, source: str) -> np.ndarray:
    if len(raw) < 8:
        raise DataFormatError(f"{source}: truncated header ({len(raw)} bytes)")
    magic, n = struct.unpack(">II", raw[:8])
    if magic != _IDX_LABELS_MAGIC:
        raise DataFormatError(f"{source}: bad magic {magic}, expected {_IDX_LABELS_MAGIC}")
    if len(raw) != 8 + n:
        raise DataFormatError(f"{source}: expected {8 + n} bytes for {n} labels, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, offset=8)


def load_mnist(data_dir, split: str = "train", normalize: bool = True, dtype=np.float32) -> Dataset:
    """Load the 28x28 digit set from IDX files (plain or .gz).

    Pixels scale to [0, 1] then standardize with the conventional mean/std.
    """
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    prefix = "train" if split == "train" else "t10k"
    d = Path(data_dir)
    images_raw = _read_maybe_gz(d / f"{prefix}-images-idx3-ubyte")
    labels_raw = _read_maybe_gz(d / f"{prefix}-labels-idx1-ubyte")
    images = _parse_idx_images(images_raw, f"{prefix}-images")
    labels = _parse_idx_labels(labels_raw, f"{prefix}-labels")
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"{prefix}: image count {images.shape[0]} != label count {labels.shape[0]}"
        )
    x = images.astype(dtype)[:, None, :, :] / 255.0
    if normalize:
        x = (x - MNIST_MEAN) / MNIST_STD
    return Dataset(x.astype(dtype), labels.astype(np.int64), "mnist", split, 10)


def _parse_cifar_batch(raw: bytes, source: str):
    rec = 3073
    if len(raw) == 0 or len(raw) % rec:
        raise DataFormatError(f"{source}: size {len(raw)} is not a multiple of {rec}-byte records")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, 0]
    if labels.max() > 9:
        raise DataFormatError(f"{source}: label {labels.max()} out of range")
    images = arr[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def load_cifar10(
    data_dir,
    split: str = "train",
    per_class: int | None = None,
    seed: int = 0,
    normalize: bool = True,
    dtype=np.float32,
) -> Dataset:
    """Load the 32x32 RGB set from its binary batch files.

    per_class takes a stratified deterministic subset (same seed, same
    subset, regardless of platform).
    """
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    d = Path(data_dir)
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
    images_parts, labels_parts = [], []
    for name in names:
        img, lab = _parse_cifar_batch(_read_maybe_gz(d / name), name)
        images_parts.append(img)
        labels_parts.append(lab)
    images = np.concatenate(images_parts)
    labels = np.concatenate(labels_parts).astype(np.int64)

    if per_class is not None:
        keep = []
        rng = stream(seed, f"cifar_subset/{split}")
        for cls in range(10):
            idx = np.nonzero(labels == cls)[0]
            if len(idx) < per_class:
                raise ValueError(f"class {cls} has only {len(idx)} samples, need {per_class}")
            keep.append(idx[rng.permutation(len(idx))[:per_class]])
        keep = np.sort(np.concatenate(keep))
        images, labels = images[keep], labels[keep]

    x = images.astype(dtype) / 255.0
    if normalize:
        mean = np.asarray(CIFAR_MEAN, dtype=dtype).reshape(1, 3, 1, 1)
        std = np.asarray(CIFAR_STD, dtype=dtype).reshape(1, 3, 1, 1)
        x = (x - mean) / std
    return Dataset(x.astype(dtype), labels, "cifar10", split, 10)


def synthetic_dataset(n: int, split: str = "train", seed: int = 0, dtype=np.float32) -> Dataset:
    """Procedural 8x8 two-class set (horizontal vs vertical bar plus noise).

    Small, separable, and generated in-process: smoke tests never touch the
    real datasets.
    """
    rng = stream(seed, f"synthetic/{split}")
    labels = rng.integers(0, 2, size=n).astype(np.int64)
    images = rng.normal(0.0, 0.3, size=(n, 1, 8, 8))
    pos = rng.integers(1, 7, size=n)
    for i in range(n):
        if labels[i] == 0:
            images[i, 0, pos[i], :] += 2.0
        else:
            images[i, 0, :, pos[i]] += 2.0
    return Dataset(images.astype(dtype), labels, "synthetic", split, 2)


LOADERS = {"mnist": load_mnist, "cifar10": load_cifar10}


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    """A trained network plus everything needed to deploy it."""

    spec: NetworkSpec
    params: dict[str, np.ndarray]
    weight_configs: dict[str, QuantConfig] = field(default_factory=dict)
    act_configs: dict[str, QuantConfig] = field(default_factory=dict)
    stats: dict[str, float] = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    @property
    def quantized(self) -> bool:
        return bool(self.weight_configs)

    def fingerprint(self) -> str:
        """The container's trailing hash (what save_checkpoint returns)."""
        return serialize_checkpoint(self)[-32:].hex()

    def to_model(self, dtype=None) -> Model:
        """Materialize a Model (parameters frozen; callers opt back in to
        gradients explicitly)."""
        from .autograd import Tensor

        dtype = np.dtype(dtype) if dtype is not None else next(iter(self.params.values())).dtype
        params = {
            k: Tensor(v.astype(dtype, copy=False), requires_grad=False, name=k)
            for k, v in self.params.items()
        }
        model = Model(self.spec, params, dtype)
        model.weight_configs = dict(self.weight_configs)
        model.act_configs = dict(self.act_configs)
        model.stats = LayerStats(dict(self.stats))
        return model


def checkpoint_from_model(model: Model, provenance: dict | None = None) -> Checkpoint:
    return Checkpoint(
        spec=model.spec,
        params={k: p.data.copy() for k, p in model.params.items()},
        weight_configs=dict(model.weight_configs),
        act_configs=dict(model.act_configs),
        stats=dict(model.stats.w_max),
        provenance=dict(provenance or {}),
    )


def _spec_to_dict(spec: NetworkSpec) -> dict:
    return {
        "name": spec.name,
        "input_shape": list(spec.input_shape),
        "n_classes": spec.n_classes,
        "layers": [dataclasses.asdict(l) for l in spec.layers],
    }


def _spec_from_dict(d: dict) -> NetworkSpec:
    return NetworkSpec(
        name=d["name"],
        input_shape=tuple(d["input_shape"]),
        n_classes=d["n_classes"],
        layers=tuple(LayerSpec(**l) for l in d["layers"]),
    )


def _qcfg_to_dict(cfg: QuantConfig) -> dict:
    return {"bits": cfg.bits, "scale": cfg.scale, "target": cfg.target}


def _le_dtype(arr: np.ndarray) -> np.ndarray:
    want = arr.dtype.newbyteorder("<")
    return arr.astype(want, copy=False)


def serialize_checkpoint(ckpt: Checkpoint) -> bytes:
    """Container layout: magic | u32 version | u64 header_len | header JSON
    (canonical: sorted keys, no whitespace) | u64 blob_len | tensor bytes |
    sha256 of all preceding bytes."""
    names = sorted(ckpt.params)
    tensors = []
    blobs = []
    for name in names:
        arr = _le_dtype(np.ascontiguousarray(ckpt.params[name]))
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str})
        blobs.append(arr.tobytes())
    header = {
        "spec": _spec_to_dict(ckpt.spec),
        "weight_configs": {k: _qcfg_to_dict(v) for k, v in ckpt.weight_configs.items()},
        "act_configs": {k: _qcfg_to_dict(v) for k, v in ckpt.act_configs.items()},
        "stats": ckpt.stats,
        "provenance": ckpt.provenance,
        "tensors": tensors,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    blob = b"".join(blobs)
    body = (
        CHECKPOINT_MAGIC
        + struct.pack("<I", CHECKPOINT_VERSION)
        + struct.pack("<Q", len(header_bytes))
        + header_bytes
        + struct.pack("<Q", len(blob))
        + blob
    )
    return body + hashlib.sha256(body).digest()


def save_checkpoint(ckpt: Checkpoint, path) -> str:
    """Write the container; returns its fingerprint (the trailing hash)."""
    data = serialize_checkpoint(ckpt)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return data[-32:].hex()


def load_checkpoint(path) -> Checkpoint:
    """Read and validate a container; any mismatch raises
    CheckpointFormatError naming what failed."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 + 4 + 8 + 8 + 32:
        raise CheckpointFormatError(f"{path}: too short to be a checkpoint ({len(raw)} bytes)")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {raw[:4]!r}, not a checkpoint file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointFormatError(f"{path}: checksum mismatch, file corrupted")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(
            f"{path}: unsupported format version {version}, this build reads {CHECKPOINT_VERSION}"
        )
    off = 8
    (hlen,) = struct.unpack("<Q", raw[off : off + 8])
    off += 8
    if off + hlen > len(body):
        raise CheckpointFormatError(f"{path}: header overruns file")
    header = json.loads(raw[off : off + hlen].decode())
    off += hlen
    (blen,) = struct.unpack("<Q", raw[off : off + 8])
    off += 8
    if off + blen != len(body):
        raise CheckpointFormatError(f"{path}: tensor payload length mismatch")

    params: dict[str, np.ndarray] = {}
    for t in header["tensors"]:
        dt = np.dtype(t["dtype"])
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        nbytes = dt.itemsize * count
        params[t["name"]] = (
            np.frombuffer(raw, dtype=dt, count=count, offset=off).reshape(t["shape"]).copy()
        )
        off += nbytes

    def qcfgs(d):
        return {k: QuantConfig(v["bits"], v["scale"], v["target"]) for k, v in d.items()}

    return Checkpoint(
        spec=_spec_from_dict(header["spec"]),
        params=params,
        weight_configs=qcfgs(header["weight_configs"]),
        act_configs=qcfgs(header["act_configs"]),
        stats=header["stats"],
        provenance=header["provenance"],
    )
