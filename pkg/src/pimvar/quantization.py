"""Symmetric uniform fake-quantization with straight-through gradients.

A k-bit tensor uses the symmetric integer range [-(2^(k-1)-1), 2^(k-1)-1]
(so k=2 is ternary) with a single positive scale per tensor:

    codes = clip(round(x / scale), -qmax, qmax),  dequant = codes * scale

Rounding is half-away-from-zero. Weight scales come from an MSE grid search;
activation scales from running min/max calibration. The graph nodes pass
gradients straight through, optionally masked where the input saturated the
clip range, and fold in the stored-value deviation factor when a chip is
attached.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, custom_op
from .variability import ChipInstance, LayerStats, VariabilityConfig, perturb, reparam_grad_factor

TARGET_WEIGHT = "weight"
TARGET_ACTIVATION = "activation"
_TARGETS = (TARGET_WEIGHT, TARGET_ACTIVATION)


@dataclass(frozen=True)
class QuantConfig:
    """Bit width, scale, and what the tensor is (weights vs activations).

    The target decides the default straight-through behaviour: activation
    gradients are zeroed where the forward value clipped, weight gradients
    pass through everywhere.
    """

    bits: int
    scale: float
    target: str = TARGET_WEIGHT

    def __post_init__(self):
        if not isinstance(self.bits, int) or not 2 <= self.bits <= 16:
            raise ValueError(f"bits must be an int in [2, 16], got {self.bits!r}")
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be finite and > 0, got {self.scale!r}")
        if self.target not in _TARGETS:
            raise ValueError(f"target must be one of {_TARGETS}, got {self.target!r}")

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1


def round_half_away(r: np.ndarray) -> np.ndarray:
    """Round to nearest with ties away from zero (not banker's rounding)."""
    return np.trunc(r + np.copysign(0.5, r))


def quantize(x: np.ndarray, cfg: QuantConfig):
    """Map values to integer codes and back; returns (codes, dequantized)."""
    x = np.asarray(x)
    if not np.isfinite(x).all():
        raise ValueError("quantize: input contains non-finite values")
    r = round_half_away(x / cfg.scale)
    codes = np.clip(r, -cfg.qmax, cfg.qmax).astype(np.int64)
    return codes, codes.astype(x.dtype) * x.dtype.type(cfg.scale)


def dequantize(codes: np.ndarray, cfg: QuantConfig) -> np.ndarray:
    return codes * cfg.scale


def dequant_values(x: np.ndarray, cfg: QuantConfig) -> np.ndarray:
    """quantize then dequantize, skipping the integer-code materialization.

    Bit-identical to quantize(x, cfg)[1] (codes are small integers, exactly
    representable); used on the hot inference path.
    """
    x = np.asarray(x)
    r = x / cfg.scale
    r += np.copysign(0.5, r)
    np.trunc(r, out=r)
    np.clip(r, -cfg.qmax, cfg.qmax, out=r)
    r *= x.dtype.type(cfg.scale)
    return r


def saturation_mask(x: np.ndarray, cfg: QuantConfig) -> np.ndarray:
    """True where x rounds outside the representable range (got clipped)."""
    return np.abs(round_half_away(np.asarray(x) / cfg.scale)) > cfg.qmax


def quant_mse(x: np.ndarray, bits: int, scale: float) -> float:
    qmax = 2 ** (bits - 1) - 1
    codes = np.clip(round_half_away(x / scale), -qmax, qmax)
    err = x - codes * scale
    return float(np.mean(err * err))


def mmse_scale(
    x: np.ndarray,
    bits: int,
    grid_points: int = 200,
    refine_rounds: int = 3,
    refine_points: int = 80,
) -> float:
    """Scale minimizing mean squared dequantization error for one tensor.

    Coarse geometric grid over [amax/qmax * 1e-2, amax/qmax * 2] followed by
    local geometric refinement around the incumbent. Each refinement round
    brackets two steps of the previous resolution on either side: at high bit
    widths the MSE landscape is jagged enough that the best valley is not
    always the one the coarse argmin sits in. Exact-fit candidates amax/q
    (q = 1..qmax) are always evaluated too, so tensors whose values sit on a
    lattice quantize losslessly.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    amax = float(np.max(np.abs(x))) if x.size else 0.0
    if amax == 0.0:
        raise ValueError("mmse_scale: all-zero tensor has no defined scale")
    qmax = 2 ** (bits - 1) - 1
    base = amax / qmax
    lo, hi = base * 1e-2, base * 2.0

    def best_of(cands):
        errs = [quant_mse(x, bits, s) for s in cands]
        i = int(np.argmin(errs))
        return float(cands[i]), errs[i]

    grid = np.geomspace(lo, hi, grid_points)
    best_s, best_e = best_of(grid)
    step = (hi / lo) ** (1.0 / (grid_points - 1))
    for _ in range(refine_rounds):
        local = np.geomspace(best_s / step**2, best_s * step**2, refine_points)
        s, e = best_of(local)
        if e < best_e:
            best_s, best_e = s, e
        step = step ** (4.0 / (refine_points - 1))

    snaps = [amax / q for q in range(1, qmax + 1)]
    s, e = best_of(snaps)
    if e < best_e:
        best_s, best_e = s, e
    return best_s


def mmse_weight_configs(weights: dict[str, np.ndarray], bits: dict[str, int]) -> dict[str, QuantConfig]:
    """Per-tensor MMSE scales for a set of weight tensors."""
    return {
        name: QuantConfig(bits[name], mmse_scale(w, bits[name]), TARGET_WEIGHT)
        for name, w in weights.items()
    }


@dataclass
class CalibrationState:
    """Running min/max of one activation site, EMA-smoothed across batches.

    The first batch initializes the range; later batches blend in with
    weight (1 - momentum). Frozen into a scale once calibration ends.
    """

    momentum: float = 0.9
    running_min: float | None = None
    running_max: float | None = None
    batches_seen: int = 0

    def update(self, batch: np.ndarray) -> None:
        bmin, bmax = float(np.min(batch)), float(np.max(batch))
        if self.running_min is None:
            self.running_min, self.running_max = bmin, bmax
        else:
            m = self.momentum
            self.running_min = m * self.running_min + (1 - m) * bmin
            self.running_max = m * self.running_max + (1 - m) * bmax
        self.batches_seen += 1

    def scale_for(self, bits: int) -> float:
        if self.running_min is None:
            raise ValueError("no batches observed; cannot derive a scale")
        amax = max(abs(self.running_min), abs(self.running_max))
        if amax == 0.0:
            return 1.0  # dead site: codes are all zero regardless
        return amax / (2 ** (bits - 1) - 1)


def calibrate_activations(model, batches, momentum: float = 0.9) -> dict[str, QuantConfig]:
    """Derive activation scales by streaming batches through the model.

    The model runs with weights quantized but activation quantization off
    (model.record_activations); each quantization site tracks a running
    range which freezes into scale = max(|min|, |max|) / qmax.
    """
    sites = model.activation_sites()
    states = {site: CalibrationState(momentum) for site in sites}
    seen = 0
    for xb in batches:
        acts = model.record_activations(xb)
        for site, arr in acts.items():
            states[site].update(arr)
        seen += 1
    if seen == 0:
        raise ValueError("calibration requires at least one batch")
    return {
        site: QuantConfig(bits, states[site].scale_for(bits), TARGET_ACTIVATION)
        for site, bits in sites.items()
    }


# ---------------------------------------------------------------------------
# graph nodes
# ---------------------------------------------------------------------------


def ste_rule(
    upstream: np.ndarray,
    eps: np.ndarray | float | None = None,
    var_cfg: VariabilityConfig | None = None,
    saturated: np.ndarray | None = None,
) -> np.ndarray:
    """Straight-through gradient of a fake-quant(+deviation) node.

    The quantizer itself passes upstream through unchanged; the deviation
    contributes its reparameterization factor (1+eps for value-proportional
    deviations, 1 for fixed-scale ones); `saturated` zeroes entries whose
    forward value clipped.
    """
    g = upstream
    if var_cfg is not None and eps is not None:
        g = g * reparam_grad_factor(var_cfg, eps)
    if saturated is not None:
        g = np.where(saturated, 0.0, g)
    return g


def fake_quant(t: Tensor, cfg: QuantConfig, mask_saturated: bool | None = None) -> Tensor:
    """Quantize-dequantize node with a straight-through gradient.

    mask_saturated defaults per target: True for activations, False for
    weights. The mask is derived inside the backward closure so inference
    never pays for it.
    """
    if mask_saturated is None:
        mask_saturated = cfg.target == TARGET_ACTIVATION
    xd = dequant_values(t.data, cfg)
    if not t.requires_grad:
        return custom_op(xd, (t,), None, "fake_quant")
    td = t.data

    def _backward(g):
        sat = saturation_mask(td, cfg) if mask_saturated else None
        return (ste_rule(g, saturated=sat),)

    return custom_op(xd, (t,), _backward, "fake_quant")


def fake_quant_perturbed(
    t: Tensor,
    cfg: QuantConfig,
    chip: ChipInstance,
    var_cfg: VariabilityConfig,
    stats: LayerStats | None,
    tensor_id: str,
    mask_saturated: bool | None = None,
) -> Tensor:
    """Quantize-dequantize then apply the chip's stored-value deviation.

    Forward matches what the analog array computes with; backward is the
    straight-through rule with the deviation's reparameterization factor,
    so the deviation draw itself shapes the gradient.
    """
    if mask_saturated is None:
        mask_saturated = cfg.target == TARGET_ACTIVATION
    xd = dequant_values(t.data, cfg)
    xt = perturb(xd, chip, var_cfg, stats, tensor_id)
    if not t.requires_grad:
        return custom_op(xt, (t,), None, "fake_quant_perturbed")
    td = t.data
    eps = chip.eps(tensor_id, xd.shape)

    def _backward(g):
        sat = saturation_mask(td, cfg) if mask_saturated else None
        return (ste_rule(g, eps=eps, var_cfg=var_cfg, saturated=sat),)

    return custom_op(xt, (t,), _backward, "fake_quant_perturbed")


def perturbed_only(
    t: Tensor,
    chip: ChipInstance,
    var_cfg: VariabilityConfig,
    stats: LayerStats | None,
    tensor_id: str,
) -> Tensor:
    """Stored-value deviation on full-precision values (no quantizer)."""
    xt = perturb(t.data, chip, var_cfg, stats, tensor_id)
    eps = chip.eps(tensor_id, t.data.shape)
    return custom_op(xt, (t,), lambda g: (ste_rule(g, eps=eps, var_cfg=var_cfg),), "perturbed_only")
