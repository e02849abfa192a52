"""On-chip deviation measurement and digital output correction.

A global tuning column of reference cells estimates the chip-level offset:
with n cells storing w_g driven by x_g, the analog readout is
y = w_g*x_g*sum(1+eps_i) while the digital expectation is y0 = n*w_g*x_g, so
y/y0 - 1 estimates eps_b with standard error sigma_w/sqrt(n). Per-layer
tuning columns measure, for each input vector, what a constant column of
cells returns under the chip's deviations; the correction then removes the
estimated chip-level term from every MVM output. All corrections are digital
and run on the raw MVM result, before bias and activation quantization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, custom_op, im2col
from .network import LayerSpec, Model, NetworkSpec
from .variability import MODEL_LAYER_FIXED, ChipInstance

ST_NONE = "none"
ST_GTM = "gtm_only"
ST_GTM_LTM = "gtm_plus_ltm"
_ST_TYPES = (ST_NONE, ST_GTM, ST_GTM_LTM)

_GTM_STREAM = "__st_gtm__"


class NonRecoverableChipError(RuntimeError):
    """Chip whose measured offset makes the correction ill-conditioned."""


@dataclass(frozen=True)
class STConfig:
    """Tuning hardware description.

    gtm_only divides outputs by (1 + estimated offset), matching deviations
    that scale with the stored value. gtm_plus_ltm subtracts the estimated
    additive term using per-layer column measurements, matching fixed-scale
    deviations. w_l is the tuning-cell value; None means use each layer's
    own max |stored value|.
    """

    st_type: str = ST_NONE
    n_gtm: int = 1000
    w_g: float = 1.0
    x_g: float = 1.0
    ltm_columns: int = 1
    w_l: float | None = None
    guard: float = 1e-3

    def __post_init__(self):
        if self.st_type not in _ST_TYPES:
            raise ValueError(f"st_type must be one of {_ST_TYPES}, got {self.st_type!r}")
        if self.n_gtm < 1:
            raise ValueError(f"n_gtm must be >= 1, got {self.n_gtm}")
        if self.ltm_columns < 1:
            raise ValueError(f"ltm_columns must be >= 1, got {self.ltm_columns}")
        if not (self.guard > 0):
            raise ValueError(f"guard must be > 0, got {self.guard}")
        if self.w_g == 0 or self.x_g == 0:
            raise ValueError("w_g and x_g must be nonzero")


@dataclass
class STState:
    """Per-chip tuning measurements frozen at deployment."""

    cfg: STConfig
    eps_b_hat: float
    w_l: dict[str, float]
    w_max: dict[str, float]


def gtm_measure(chip: ChipInstance, cfg: STConfig) -> float:
    """Estimate the chip-level offset from the global tuning column.

    The column's cells hold w_g, so proportional and fixed-scale deviations
    coincide there; the estimate is eps_b plus the mean of n_gtm per-cell
    draws (unbiased, std sigma_w/sqrt(n_gtm)).
    """
    eps = chip.eps(_GTM_STREAM, (cfg.n_gtm,))
    y0 = cfg.n_gtm * cfg.w_g * cfg.x_g
    y = cfg.w_g * cfg.x_g * float(np.sum(1.0 + eps))
    return y / y0 - 1.0


def ltm_measure(
    x2d: np.ndarray,
    chip: ChipInstance,
    cfg: STConfig,
    layer_id: str,
    w_l: float,
    dev_scale: float,
) -> np.ndarray:
    """Per-input-row readout of the layer's tuning columns, averaged.

    Each column holds cells at w_l deviating on the chip's own terms
    (dev_scale is w_max under fixed-scale physics, w_l under proportional).
    """
    readings = np.zeros(x2d.shape[0], dtype=x2d.dtype)
    for c in range(cfg.ltm_columns):
        eps_c = chip.eps(f"__st_ltm__/{layer_id}/{c}", (x2d.shape[1],)).astype(x2d.dtype, copy=False)
        readings += x2d @ (w_l + dev_scale * eps_c)
    return readings / cfg.ltm_columns


def prepare_st(model: Model, chip: ChipInstance, cfg: STConfig) -> STState | None:
    """Measure the chip and freeze the correction state.

    Raises NonRecoverableChipError when a guard trips: |1 + eps_hat| at or
    below the guard for the divide correction, or any layer's
    |w_l + eps_hat * w_max| at or below it for the subtract correction.
    Model stats must be fresh (they define w_max per layer).
    """
    if cfg.st_type == ST_NONE:
        return None
    eps_hat = gtm_measure(chip, cfg)
    w_l: dict[str, float] = {}
    w_max: dict[str, float] = {}
    for layer in model.spec.weight_layers():
        wm = model.stats[layer.name]
        w_l[layer.name] = cfg.w_l if cfg.w_l is not None else wm
        w_max[layer.name] = wm
    if cfg.st_type == ST_GTM:
        if abs(1.0 + eps_hat) <= cfg.guard:
            raise NonRecoverableChipError(
                f"divide correction ill-conditioned: |1 + eps_hat| = {abs(1.0 + eps_hat):.3g}"
            )
    else:
        for name in w_l:
            denom = w_l[name] + eps_hat * w_max[name]
            if abs(denom) <= cfg.guard:
                raise NonRecoverableChipError(
                    f"subtract correction ill-conditioned at {name}: |w_l + eps_hat*w_max| = {abs(denom):.3g}"
                )
    return STState(cfg, eps_hat, w_l, w_max)


def apply_correction(y: Tensor, layer: LayerSpec, x_in: Tensor, st: STState, chip: ChipInstance) -> Tensor:
    """Correct one raw MVM output tensor.

    Divide: y / (1 + eps_hat). Subtract: y - [eps_hat*w_max / (w_l +
    eps_hat*w_max)] * ltm_reading, with the reading taken on the same input
    the array saw (per im2col patch for conv layers). Measurements are
    treated as constants; the gradient is the correction's scale on y.
    """
    if st.cfg.st_type == ST_GTM:
        denom = 1.0 + st.eps_b_hat
        data = y.data / denom
        return custom_op(data, (y,), lambda g: (g / denom,), "st_divide")

    name = layer.name
    w_l, w_max = st.w_l[name], st.w_max[name]
    factor = st.eps_b_hat * w_max / (w_l + st.eps_b_hat * w_max)
    dev_scale = w_max if chip.config.model == MODEL_LAYER_FIXED else w_l
    if layer.kind == "linear":
        x2d = x_in.data
    else:
        x2d = im2col(x_in.data, layer.kernel, layer.kernel, layer.stride, layer.pad)
    readings = ltm_measure(x2d, chip, st.cfg, name, w_l, dev_scale)
    if layer.kind == "linear":
        corr = factor * readings[:, None]
    else:
        n, _, oh, ow = y.data.shape
        corr = factor * readings.reshape(n, 1, oh, ow)
    data = y.data - corr
    return custom_op(data, (y,), lambda g: (g,), "st_ltm_subtract")


def overhead(cfg: STConfig, spec: NetworkSpec, array_rows: int = 512, array_cols: int = 512) -> dict:
    """Added area and compute relative to the bare network.

    Area counts tuning columns against the array width (the global column's
    cells are a per-chip constant, reported separately). Compute counts one
    multiply-accumulate per tuning cell touched per inference against the
    network's MAC total.
    """
    if cfg.st_type == ST_NONE:
        return {"area_ratio": 0.0, "flop_ratio": 0.0, "gtm_cells": 0, "ltm_columns": 0}

    macs = 0
    ltm_flops = 0
    shape = tuple(spec.input_shape)
    for layer in spec.layers:
        out_shape = NetworkSpec._step(layer, shape)
        if layer.kind == "conv2d":
            d_in = layer.in_channels * layer.kernel * layer.kernel
            positions = out_shape[1] * out_shape[2]
            macs += layer.out_channels * d_in * positions
            ltm_flops += cfg.ltm_columns * d_in * positions
        elif layer.kind == "linear":
            macs += layer.out_features * layer.in_features
            ltm_flops += cfg.ltm_columns * layer.in_features
        shape = out_shape

    if cfg.st_type == ST_GTM:
        return {
            "area_ratio": 0.0,
            "flop_ratio": cfg.n_gtm / macs,
            "gtm_cells": cfg.n_gtm,
            "ltm_columns": 0,
        }
    return {
        "area_ratio": cfg.ltm_columns / array_cols,
        "flop_ratio": (cfg.n_gtm + ltm_flops) / macs,
        "gtm_cells": cfg.n_gtm,
        "ltm_columns": cfg.ltm_columns,
    }


def gtm_stderr(cfg: STConfig, sigma_w: float) -> float:
    """Predicted standard error of the offset estimate."""
    return sigma_w / math.sqrt(cfg.n_gtm)
