"""Analog device-variation model: per-chip correlated and per-cell random deviations.

A fabricated chip is a frozen draw of multiplicative conductance deviations
eps = eps_b + eps_w, with eps_b ~ N(0, sigma_b^2) shared by every cell on the
chip and eps_w ~ N(0, sigma_w^2) independent per cell. Draws come from
counter-based Philox streams keyed by (seed, tensor id), so any chip in a
population can be regenerated bit-exactly and in any order.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

MODEL_WEIGHT_PROPORTIONAL = "weight_proportional"
MODEL_LAYER_FIXED = "layer_fixed"
_MODELS = (MODEL_WEIGHT_PROPORTIONAL, MODEL_LAYER_FIXED)

_CHIP_STREAM = "__chip__"  # stream id reserved for the chip-level offset


@dataclass(frozen=True)
class VariabilityConfig:
    """Deviation magnitudes and how they scale stored values.

    Under the weight-proportional model a cell stores x*(1+eps); under the
    layer-fixed model it stores x + eps*w_max with w_max the largest
    magnitude in that cell's layer.
    """

    model: str = MODEL_WEIGHT_PROPORTIONAL
    sigma_w: float = 0.0
    sigma_b: float = 0.0

    def __post_init__(self):
        if self.model not in _MODELS:
            raise ValueError(f"unknown variability model {self.model!r}; expected one of {_MODELS}")
        if not (self.sigma_w >= 0 and np.isfinite(self.sigma_w)):
            raise ValueError(f"sigma_w must be finite and >= 0, got {self.sigma_w}")
        if not (self.sigma_b >= 0 and np.isfinite(self.sigma_b)):
            raise ValueError(f"sigma_b must be finite and >= 0, got {self.sigma_b}")

    @property
    def sigma_tot(self) -> float:
        return float(np.hypot(self.sigma_w, self.sigma_b))

    @property
    def is_zero(self) -> bool:
        return self.sigma_w == 0.0 and self.sigma_b == 0.0


def stream(seed: int, tensor_id: str) -> np.random.Generator:
    """Philox generator keyed by hashing (seed, tensor_id).

    The 128-bit key comes from blake2b, so streams for different ids are
    independent and insertion order never matters.
    """
    digest = hashlib.blake2b(f"{seed}\x1f{tensor_id}".encode(), digest_size=16).digest()
    key = int.from_bytes(digest, "little")
    return np.random.Generator(np.random.Philox(key=key))


def derive_seed(*parts) -> int:
    """Collapse a tuple of labels/ints into a 63-bit sub-seed."""
    digest = hashlib.blake2b("\x1f".join(map(str, parts)).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


class ChipInstance:
    """One fabricated chip: a reproducible assignment of deviations to cells.

    Deviation arrays are generated lazily per tensor id and cached, so the
    same chip presents identical hardware to every batch it evaluates.
    """

    def __init__(self, seed: int, config: VariabilityConfig):
        self.seed = int(seed)
        self.config = config
        self._within: dict[str, np.ndarray] = {}
        self._eps_b: float | None = None

    @property
    def eps_b(self) -> float:
        """Chip-level offset, drawn once and shared by every cell."""
        if self._eps_b is None:
            if self.config.sigma_b == 0.0:
                self._eps_b = 0.0
            else:
                draw = stream(self.seed, _CHIP_STREAM).standard_normal()
                self._eps_b = float(self.config.sigma_b * draw)
        return self._eps_b

    def eps_within(self, tensor_id: str, shape) -> np.ndarray:
        """Per-cell deviations for one stored tensor (zero-mean, iid)."""
        shape = tuple(shape)
        cached = self._within.get(tensor_id)
        if cached is not None:
            if cached.shape != shape:
                raise ValueError(
                    f"tensor id {tensor_id!r} already drawn with shape {cached.shape}, requested {shape}"
                )
            return cached
        if self.config.sigma_w == 0.0:
            eps = np.zeros(shape)
        else:
            eps = self.config.sigma_w * stream(self.seed, tensor_id).standard_normal(shape)
        self._within[tensor_id] = eps
        return eps

    def eps(self, tensor_id: str, shape) -> np.ndarray:
        """Total deviation eps_b + eps_w for the cells holding tensor_id."""
        return self.eps_b + self.eps_within(tensor_id, shape)


def sample_chip(config: VariabilityConfig, seed: int) -> ChipInstance:
    return ChipInstance(seed, config)


@dataclass
class LayerStats:
    """Per-layer scale of stored values (max |dequantized weight|).

    Refreshed by the owner whenever weights change; forward passes only
    read it, so concurrent chip evaluations can share one instance.
    """

    w_max: dict[str, float] = field(default_factory=dict)

    def __getitem__(self, layer_id: str) -> float:
        try:
            return self.w_max[layer_id]
        except KeyError:
            raise KeyError(f"no w_max recorded for layer {layer_id!r}; refresh stats first") from None

    def __setitem__(self, layer_id: str, value: float) -> None:
        self.w_max[layer_id] = float(value)

    def __contains__(self, layer_id: str) -> bool:
        return layer_id in self.w_max


def perturb(
    x_d: np.ndarray,
    chip: ChipInstance,
    cfg: VariabilityConfig,
    stats: LayerStats | None,
    tensor_id: str,
) -> np.ndarray:
    """Stored-value deviation applied to dequantized values x_d.

    weight_proportional: x_d * (1 + eps); layer_fixed: x_d + eps * w_max.
    w_max is read from stats and treated as a constant (no gradient path).
    """
    eps = chip.eps(tensor_id, x_d.shape).astype(x_d.dtype, copy=False)
    if cfg.model == MODEL_WEIGHT_PROPORTIONAL:
        return x_d * (1.0 + eps)
    w_max = stats[tensor_id] if stats is not None else 0.0
    return x_d + eps * x_d.dtype.type(w_max)


def reparam_grad_factor(cfg: VariabilityConfig, eps: np.ndarray | float):
    """d(perturbed)/d(stored): (1+eps) when deviations scale with the value,
    1 when they are additive with a constant scale."""
    if cfg.model == MODEL_WEIGHT_PROPORTIONAL:
        return 1.0 + eps
    return 1.0
