"""Network descriptions and the shared forward pass.

One code path serves training and deployment; what changes is the forward
mode: "clean" (full precision), "quant_only" (fake-quantized, no deviations),
"quant_perturbed" (fake-quantized weights carrying a chip's deviations, the
deployment view), and "perturbed_only" (full-precision weights with
deviations). Output correction hooks into the raw matrix-vector product,
before the bias and before activation quantization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor, custom_op
from .quantization import (
    QuantConfig,
    fake_quant,
    fake_quant_perturbed,
    mmse_weight_configs,
    perturbed_only,
    quantize,
)
from .variability import ChipInstance, LayerStats, stream

CLEAN = "clean"
QUANT_ONLY = "quant_only"
QUANT_PERTURBED = "quant_perturbed"
PERTURBED_ONLY = "perturbed_only"
MODES = (CLEAN, QUANT_ONLY, QUANT_PERTURBED, PERTURBED_ONLY)

_WEIGHT_KINDS = ("conv2d", "linear")
_KINDS = _WEIGHT_KINDS + ("relu", "maxpool", "avgpool", "flatten")


@dataclass(frozen=True)
class LayerSpec:
    """One layer. Which fields matter depends on kind; the rest stay at
    their zero defaults and are ignored."""

    kind: str
    name: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    in_features: int = 0
    out_features: int = 0
    size: int = 0
    weight_bits: int | None = None
    activation_bits: int | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in _WEIGHT_KINDS and self.weight_bits is not None and not 2 <= self.weight_bits <= 16:
            raise ValueError(f"{self.name}: weight_bits must be in [2, 16], got {self.weight_bits}")
        if self.kind == "relu" and self.activation_bits is not None and not 2 <= self.activation_bits <= 16:
            raise ValueError(f"{self.name}: activation_bits must be in [2, 16], got {self.activation_bits}")

    def weight_shape(self) -> tuple:
        if self.kind == "conv2d":
            return (self.out_channels, self.in_channels, self.kernel, self.kernel)
        if self.kind == "linear":
            return (self.out_features, self.in_features)
        raise ValueError(f"{self.name}: layer kind {self.kind!r} has no weights")


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    input_shape: tuple  # (C, H, W)
    n_classes: int
    layers: tuple

    def __post_init__(self):
        self.validate_shapes()

    def validate_shapes(self) -> tuple:
        """Walk the layer chain, checking every interface; returns the
        output shape."""
        shape = tuple(self.input_shape)
        names = set()
        for layer in self.layers:
            if layer.name in names:
                raise ValueError(f"duplicate layer name {layer.name!r}")
            names.add(layer.name)
            shape = self._step(layer, shape)
        if shape != (self.n_classes,):
            raise ValueError(f"network emits shape {shape}, expected ({self.n_classes},)")
        return shape

    @staticmethod
    def _step(layer: LayerSpec, shape: tuple) -> tuple:
        k = layer.kind
        if k == "conv2d":
            if len(shape) != 3 or shape[0] != layer.in_channels:
                raise ValueError(f"{layer.name}: expects {layer.in_channels} channels, gets shape {shape}")
            c, h, w = shape
            oh = (h + 2 * layer.pad - layer.kernel) // layer.stride + 1
            ow = (w + 2 * layer.pad - layer.kernel) // layer.stride + 1
            if oh <= 0 or ow <= 0:
                raise ValueError(f"{layer.name}: kernel does not fit input {shape}")
            return (layer.out_channels, oh, ow)
        if k == "linear":
            if shape != (layer.in_features,):
                raise ValueError(f"{layer.name}: expects ({layer.in_features},), gets shape {shape}")
            return (layer.out_features,)
        if k in ("maxpool", "avgpool"):
            if len(shape) != 3 or shape[1] % layer.size or shape[2] % layer.size:
                raise ValueError(f"{layer.name}: window {layer.size} does not tile shape {shape}")
            return (shape[0], shape[1] // layer.size, shape[2] // layer.size)
        if k == "flatten":
            return (int(np.prod(shape)),)
        return shape  # relu

    def weight_layers(self) -> list:
        return [l for l in self.layers if l.kind in _WEIGHT_KINDS]

    @property
    def label(self) -> str:
        abits = {l.activation_bits for l in self.layers if l.activation_bits is not None}
        wbits = {l.weight_bits for l in self.layers if l.weight_bits is not None}
        a = abits.pop() if len(abits) == 1 else "x"
        w = wbits.pop() if len(wbits) == 1 else "x"
        return f"A{a}W{w}"


def build_lenet5(activation_bits: int = 2, weight_bits: int = 2) -> NetworkSpec:
    """The 28x28 grayscale digit classifier: 2 conv + 3 linear, max pooling,
    activation quantizers after every hidden ReLU, unquantized logits."""
    a, w = activation_bits, weight_bits
    layers = (
        LayerSpec("conv2d", "conv1", in_channels=1, out_channels=6, kernel=5, pad=2, weight_bits=w),
        LayerSpec("relu", "relu1", activation_bits=a),
        LayerSpec("maxpool", "pool1", size=2),
        LayerSpec("conv2d", "conv2", in_channels=6, out_channels=16, kernel=5, weight_bits=w),
        LayerSpec("relu", "relu2", activation_bits=a),
        LayerSpec("maxpool", "pool2", size=2),
        LayerSpec("flatten", "flat"),
        LayerSpec("linear", "fc1", in_features=400, out_features=120, weight_bits=w),
        LayerSpec("relu", "relu3", activation_bits=a),
        LayerSpec("linear", "fc2", in_features=120, out_features=84, weight_bits=w),
        LayerSpec("relu", "relu4", activation_bits=a),
        LayerSpec("linear", "fc3", in_features=84, out_features=10, weight_bits=w),
    )
    return NetworkSpec("lenet5", (1, 28, 28), 10, layers)


def build_smallconvnet(activation_bits: int = 4, weight_bits: int = 2) -> NetworkSpec:
    """A compact 4-conv/2-linear net for 32x32 RGB inputs."""
    a, w = activation_bits, weight_bits
    layers = (
        LayerSpec("conv2d", "conv1", in_channels=3, out_channels=32, kernel=3, pad=1, weight_bits=w),
        LayerSpec("relu", "relu1", activation_bits=a),
        LayerSpec("conv2d", "conv2", in_channels=32, out_channels=32, kernel=3, pad=1, weight_bits=w),
        LayerSpec("relu", "relu2", activation_bits=a),
        LayerSpec("maxpool", "pool1", size=2),
        LayerSpec("conv2d", "conv3", in_channels=32, out_channels=64, kernel=3, pad=1, weight_bits=w),
        LayerSpec("relu", "relu3", activation_bits=a),
        LayerSpec("conv2d", "conv4", in_channels=64, out_channels=64, kernel=3, pad=1, weight_bits=w),
        LayerSpec("relu", "relu4", activation_bits=a),
        LayerSpec("maxpool", "pool2", size=2),
        LayerSpec("flatten", "flat"),
        LayerSpec("linear", "fc1", in_features=4096, out_features=256, weight_bits=w),
        LayerSpec("relu", "relu5", activation_bits=a),
        LayerSpec("linear", "fc2", in_features=256, out_features=10, weight_bits=w),
    )
    return NetworkSpec("smallconvnet", (3, 32, 32), 10, layers)


def build_tinynet(activation_bits: int = 4, weight_bits: int = 2) -> NetworkSpec:
    """Minimal conv net for the procedural 8x8 smoke dataset."""
    a, w = activation_bits, weight_bits
    layers = (
        LayerSpec("conv2d", "conv1", in_channels=1, out_channels=4, kernel=3, pad=1, weight_bits=w),
        LayerSpec("relu", "relu1", activation_bits=a),
        LayerSpec("maxpool", "pool1", size=2),
        LayerSpec("flatten", "flat"),
        LayerSpec("linear", "fc1", in_features=64, out_features=2, weight_bits=w),
    )
    return NetworkSpec("tinynet", (1, 8, 8), 2, layers)


BUILDERS = {"lenet5": build_lenet5, "smallconvnet": build_smallconvnet, "tinynet": build_tinynet}


class Model:
    """Parameters plus quantizer/deviation bookkeeping for one network.

    ``stats`` (per-layer max |stored value|) is written only by
    :func:`refresh_stats`; forward passes read it, so one model instance can
    serve many chips concurrently.
    """

    def __init__(self, spec: NetworkSpec, params: dict[str, Tensor], dtype=np.float64):
        self.spec = spec
        self.params = params
        self.dtype = np.dtype(dtype)
        self.weight_configs: dict[str, QuantConfig] = {}
        self.act_configs: dict[str, QuantConfig] = {}
        self.stats = LayerStats()

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def activation_sites(self) -> dict[str, int]:
        return {l.name: l.activation_bits for l in self.spec.layers if l.activation_bits is not None}

    def weight_bits(self) -> dict[str, int]:
        return {l.name: l.weight_bits for l in self.spec.weight_layers() if l.weight_bits is not None}

    def record_activations(self, x) -> dict[str, np.ndarray]:
        """Quantized-weight forward collecting pre-quantizer activations
        (what range calibration consumes)."""
        rec: dict[str, np.ndarray] = {}
        forward(self, x, QUANT_ONLY, _record=rec, _skip_act_quant=True)
        return rec

    def compute_weight_configs(self) -> None:
        """Fit per-layer MMSE weight scales to the current weights."""
        weights = {l.name: self.params[l.name + ".w"].data for l in self.spec.weight_layers()}
        self.weight_configs = mmse_weight_configs(weights, self.weight_bits())

    def cast(self, dtype) -> "Model":
        """Copy with parameters converted to dtype (configs/stats carried over)."""
        dtype = np.dtype(dtype)
        params = {
            k: Tensor(p.data.astype(dtype), requires_grad=p.requires_grad, name=p.name)
            for k, p in self.params.items()
        }
        out = Model(self.spec, params, dtype)
        out.weight_configs = dict(self.weight_configs)
        out.act_configs = dict(self.act_configs)
        out.stats = LayerStats(dict(self.stats.w_max))
        return out


def init_model(spec: NetworkSpec, seed: int, dtype=np.float64) -> Model:
    """He-initialized weights, zero biases; draws come from per-layer
    streams so layer order never shifts the init."""
    dtype = np.dtype(dtype)
    params: dict[str, Tensor] = {}
    for layer in spec.weight_layers():
        shape = layer.weight_shape()
        fan_in = int(np.prod(shape[1:]))
        rng = stream(seed, f"init/{layer.name}")
        w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        out_dim = shape[0]
        params[layer.name + ".w"] = Tensor(w.astype(dtype), requires_grad=True, name=layer.name + ".w")
        params[layer.name + ".b"] = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True, name=layer.name + ".b")
    return Model(spec, params, dtype)


def refresh_stats(model: Model, quantized: bool) -> None:
    """Recompute per-layer max |stored value| from the current weights.

    Quantized deployments store dequantized codes, so the max is taken
    after quantize-dequantize; full-precision ones use the raw weights.
    Call after every weight update and before any perturbed forward.
    """
    for layer in model.spec.weight_layers():
        w = model.params[layer.name + ".w"].data
        if quantized:
            cfg = model.weight_configs.get(layer.name)
            if cfg is None:
                raise ValueError(f"{layer.name}: no weight quantizer configured; fit scales first")
            _, w = quantize(w, cfg)
        model.stats[layer.name] = float(np.max(np.abs(w))) if w.size else 0.0


def _weight_node(model: Model, layer: LayerSpec, mode: str, chip: ChipInstance | None) -> Tensor:
    p = model.params[layer.name + ".w"]
    if mode == CLEAN:
        return p
    if mode == PERTURBED_ONLY:
        return perturbed_only(p, chip, chip.config, model.stats, layer.name)
    cfg = model.weight_configs.get(layer.name)
    if cfg is None:
        raise ValueError(f"{layer.name}: no weight quantizer configured for mode {mode!r}")
    if mode == QUANT_ONLY:
        return fake_quant(p, cfg)
    return fake_quant_perturbed(p, cfg, chip, chip.config, model.stats, layer.name)


def _correct_output(y: Tensor, layer: LayerSpec, x_in: Tensor, st, chip: ChipInstance) -> Tensor:
    """Digital output correction on the raw MVM result.

    Imported lazily from the tuning module to keep the dependency one-way;
    the correction is affine in y, so its gradient is a plain scale.
    """
    from . import selftuning

    return selftuning.apply_correction(y, layer, x_in, st, chip)


def forward(
    model: Model,
    x,
    mode: str,
    chip: ChipInstance | None = None,
    st=None,
    _record: dict | None = None,
    _skip_act_quant: bool = False,
) -> Tensor:
    """Run the network and return logits.

    In perturbed modes a chip must be supplied; the same instance must be
    used for every batch that is meant to run on that chip. ``st`` is a
    prepared tuning state (deployment only) whose correction applies to each
    MVM output before the bias and before activation quantization.
    """
    if mode not in MODES:
        raise ValueError(f"unknown forward mode {mode!r}; expected one of {MODES}")
    if mode in (QUANT_PERTURBED, PERTURBED_ONLY) and chip is None:
        raise ValueError(f"mode {mode!r} requires a chip instance")
    if st is not None and mode != QUANT_PERTURBED:
        raise ValueError(f"output correction only applies in mode {QUANT_PERTURBED!r}, got {mode!r}")
    quant = mode in (QUANT_ONLY, QUANT_PERTURBED)

    h = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=model.dtype))
    for layer in model.spec.layers:
        k = layer.kind
        if k in _WEIGHT_KINDS:
            wt = _weight_node(model, layer, mode, chip)
            x_in = h
            if k == "conv2d":
                h = ag.conv2d(h, wt, stride=layer.stride, pad=layer.pad)
            else:
                h = ag.matmul(h, ag.transpose(wt))
            if st is not None:
                h = _correct_output(h, layer, x_in, st, chip)
            h = ag.add_bias(h, model.params[layer.name + ".b"])
        elif k == "relu":
            h = ag.relu(h)
            if _record is not None and layer.activation_bits is not None:
                _record[layer.name] = h.data
            if quant and not _skip_act_quant and layer.activation_bits is not None:
                cfg = model.act_configs.get(layer.name)
                if cfg is None:
                    raise ValueError(f"{layer.name}: no activation quantizer configured; calibrate first")
                h = fake_quant(h, cfg)
        elif k == "maxpool":
            h = ag.maxpool2d(h, layer.size)
        elif k == "avgpool":
            h = ag.avgpool2d(h, layer.size)
        else:
            h = ag.flatten(h)
    return h


def predictions(model: Model, x, mode: str, chip: ChipInstance | None = None, st=None) -> np.ndarray:
    logits = forward(model, x, mode, chip=chip, st=st)
    return logits.data.argmax(axis=1)
