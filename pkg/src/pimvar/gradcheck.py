"""Finite-difference gradient verification.

Central differences against the analytic backward pass. Parameters feeding a
quantizer get special handling: an element sitting within 2h of a rounding
decision boundary would make the numerical derivative blow up (the forward
value jumps a whole code there), so such elements are skipped and reported
rather than failed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, backward
from .quantization import QuantConfig, round_half_away


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    n_skipped_boundary: int
    tol: float = 1e-4
    per_param: dict[str, float] = field(default_factory=dict)
    boundary_skipped: dict[str, int] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.max_rel_error < self.tol


def boundary_distance(value: float, cfg: QuantConfig) -> float:
    """Distance from a value to the nearest quantizer decision boundary.

    Boundaries sit at half-integer multiples of the scale up to the clip
    point; past the last boundary the code is pinned so the distance grows
    with saturation depth.
    """
    r = abs(value) / cfg.scale
    last = cfg.qmax - 0.5
    if r >= last:
        return (r - last) * cfg.scale
    return (0.5 - abs(r - round_half_away(np.asarray(r)))) * cfg.scale


def check_gradients(
    loss_fn,
    params: dict[str, Tensor],
    h: float = 1e-4,
    quant_configs: dict[str, QuantConfig] | None = None,
    max_elements_per_param: int = 8,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    loss_fn() rebuilds the graph from the current parameter values and
    returns a scalar Tensor; it must be deterministic between calls.
    quant_configs maps parameter names to the quantizer they feed, enabling
    boundary skipping. An empty parameter dict yields an empty report.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    report = GradCheckReport(max_rel_error=0.0, n_checked=0, n_skipped_boundary=0)
    if not params:
        return report

    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    backward(loss)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }

    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        k = min(max_elements_per_param, n)
        picks = rng.choice(n, size=k, replace=False)
        cfg = quant_configs.get(name) if quant_configs else None
        worst = 0.0
        skipped = 0
        for i in picks:
            if cfg is not None and boundary_distance(float(flat[i]), cfg) < 2 * h:
                skipped += 1
                continue
            orig = flat[i]
            flat[i] = orig + h
            lp = float(loss_fn().data)
            flat[i] = orig - h
            lm = float(loss_fn().data)
            flat[i] = orig
            num = (lp - lm) / (2 * h)
            ana = float(analytic[name].reshape(-1)[i])
            rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, rel)
            report.n_checked += 1
        report.per_param[name] = worst
        if skipped:
            report.boundary_skipped[name] = skipped
            report.n_skipped_boundary += skipped
        report.max_rel_error = max(report.max_rel_error, worst)
    return report
