"""Declarative ResNet segmentation models and weight-preserving surgery.

A model is a :class:`ModelSpec`: an ordered chain of convolution layers,
pooling layers and residual units, plus a classifier head. Parameters
live outside the spec in a plain ``dict[str, np.ndarray]`` keyed by
layer name, so structural transformations (head replacement, stride
removal) never touch tensor values.

Two transformations are provided:

* :func:`convert_to_fcn` removes the global pooling / fully connected
  head and installs a freshly initialized 1x1 convolution head, turning
  the classifier into a dense predictor.
* :func:`apply_output_stride` sets the last two stride-2 downsampling
  layers to stride 1 and dilates every convolution behind them (rate 2
  after the first, rate 4 after the second, padding scaled alike), so
  the existing weights keep sampling the same relative positions while
  the output grid becomes 4x denser. The receptive field is unchanged,
  which :func:`compute_receptive_field` makes checkable.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import CheckpointIncompatibleError
from .tensor_ops import conv_output_size, effective_kernel_extent

__all__ = [
    "ConvLayer",
    "MaxPoolLayer",
    "ResidualUnit",
    "DenseHead",
    "ModelSpec",
    "bottleneck_unit",
    "build_resnet",
    "build_resnet101",
    "build_resnet_tiny",
    "convert_to_fcn",
    "apply_output_stride",
    "compute_receptive_field",
    "spatial_output_shape",
    "count_conv_layers",
    "parameter_table",
    "init_parameters",
    "reconcile_parameters",
    "trainable_names",
    "validate_parameters",
    "spec_to_dict",
    "spec_from_dict",
]

HEAD_INIT_STD = 0.01


@dataclass(frozen=True)
class ConvLayer:
    """One convolution, optionally followed by batch norm and a rectifier."""

    name: str
    kernel: int
    stride: int
    padding: int
    rate: int
    in_channels: int
    out_channels: int
    bias: bool = False
    batch_norm: bool = True
    activation: str = "relu"

    def __post_init__(self):
        if min(self.kernel, self.stride, self.rate) < 1:
            raise ValueError(f"{self.name}: kernel/stride/rate must be positive")
        if self.padding < 0:
            raise ValueError(f"{self.name}: padding must be non-negative")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError(f"{self.name}: channel counts must be positive")
        if self.activation not in ("relu", "none"):
            raise ValueError(f"{self.name}: unknown activation {self.activation!r}")


@dataclass(frozen=True)
class MaxPoolLayer:
    name: str
    kernel: int
    stride: int
    padding: int


@dataclass(frozen=True)
class ResidualUnit:
    """Residual unit: output = relu(skip(x) + chain(x)).

    ``projection`` is the 1x1 skip convolution; it is present exactly
    when the identity cannot carry x across (channel change or stride).
    """

    name: str
    inner: tuple[ConvLayer, ...]
    projection: ConvLayer | None = None

    def __post_init__(self):
        if not self.inner:
            raise ValueError(f"{self.name}: residual unit needs at least one conv")
        for a, b in zip(self.inner, self.inner[1:]):
            if a.out_channels != b.in_channels:
                raise ValueError(
                    f"{self.name}: channel mismatch {a.name} -> {b.name}")
        strided = [c for c in self.inner if c.stride > 1]
        if len(strided) > 1:
            raise ValueError(f"{self.name}: at most one strided conv per unit")
        needs_projection = (self.in_channels != self.out_channels
                            or self.stride != 1)
        if needs_projection and self.projection is None:
            raise ValueError(f"{self.name}: skip branch cannot be identity here")
        if not needs_projection and self.projection is not None:
            raise ValueError(f"{self.name}: identity skip expected when shapes match")
        if self.projection is not None:
            p = self.projection
            if (p.in_channels, p.out_channels) != (self.in_channels, self.out_channels):
                raise ValueError(f"{self.name}: projection channels disagree")
            if p.stride != self.stride:
                raise ValueError(f"{self.name}: projection stride disagrees")

    @property
    def in_channels(self) -> int:
        return self.inner[0].in_channels

    @property
    def out_channels(self) -> int:
        return self.inner[-1].out_channels

    @property
    def stride(self) -> int:
        s = 1
        for c in self.inner:
            s *= c.stride
        return s


@dataclass(frozen=True)
class DenseHead:
    """Global average pooling followed by a fully connected classifier."""

    name: str
    in_features: int
    num_classes: int


Layer = ConvLayer | MaxPoolLayer | ResidualUnit


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[Layer, ...]
    head: DenseHead | ConvLayer
    num_classes: int
    output_stride: int
    bn_frozen: bool = False
    conversion_warning: bool = False

    @property
    def fully_convolutional(self) -> bool:
        return isinstance(self.head, ConvLayer)


def bottleneck_unit(name: str, in_channels: int, mid_channels: int,
                    stride: int = 1, batch_norm: bool = True) -> ResidualUnit:
    """Three-conv bottleneck: 1x1 reduce, 3x3 spatial, 1x1 expand (4x mid).

    The stride, when present, sits on the reducing 1x1 conv and on the
    projection shortcut.
    """
    out_channels = 4 * mid_channels
    bias = not batch_norm
    inner = (
        ConvLayer(f"{name}.reduce", 1, stride, 0, 1, in_channels, mid_channels,
                  bias=bias, batch_norm=batch_norm, activation="relu"),
        ConvLayer(f"{name}.spatial", 3, 1, 1, 1, mid_channels, mid_channels,
                  bias=bias, batch_norm=batch_norm, activation="relu"),
        ConvLayer(f"{name}.expand", 1, 1, 0, 1, mid_channels, out_channels,
                  bias=bias, batch_norm=batch_norm, activation="none"),
    )
    projection = None
    if in_channels != out_channels or stride != 1:
        projection = ConvLayer(f"{name}.proj", 1, stride, 0, 1,
                               in_channels, out_channels,
                               bias=bias, batch_norm=batch_norm, activation="none")
    return ResidualUnit(name, inner, projection)


def build_resnet(num_classes: int, stage_units: tuple[int, int, int, int],
                 base_channels: int = 64, pretrained: str | None = None,
                 seed: int = 0) -> tuple[ModelSpec, dict[str, np.ndarray]]:
    """Build a bottleneck ResNet classifier and its parameters.

    Returns the spec together with a parameter dict: randomly
    initialized from ``seed``, or loaded from the ``pretrained``
    parameter directory (shape-checked, first offending tensor named).
    Batch norm runs frozen when pretrained weights are supplied.
    """
    layers: list[Layer] = [
        ConvLayer("conv1", 7, 2, 3, 1, 3, base_channels,
                  bias=False, batch_norm=True, activation="relu"),
        MaxPoolLayer("pool1", 3, 2, 1),
    ]
    in_ch = base_channels
    for s, units in enumerate(stage_units):
        mid = base_channels * (2 ** s)
        stage_stride = 1 if s == 0 else 2
        for u in range(units):
            stride = stage_stride if u == 0 else 1
            unit = bottleneck_unit(f"layer{s + 1}.unit{u}", in_ch, mid, stride)
            layers.append(unit)
            in_ch = unit.out_channels
    head = DenseHead("fc", in_ch, num_classes)
    spec = ModelSpec(tuple(layers), head, num_classes, output_stride=32,
                     bn_frozen=pretrained is not None)
    if pretrained is None:
        params = init_parameters(spec, seed)
    else:
        from .params import load_parameters
        params = validate_parameters(spec, load_parameters(pretrained))
    return spec, params


def build_resnet101(num_classes: int, pretrained: str | None = None,
                    seed: int = 0) -> tuple[ModelSpec, dict[str, np.ndarray]]:
    """Standard 3/4/23/3 bottleneck layout, output stride 32."""
    return build_resnet(num_classes, (3, 4, 23, 3), 64, pretrained, seed)


def build_resnet_tiny(num_classes: int, pretrained: str | None = None,
                      seed: int = 0) -> tuple[ModelSpec, dict[str, np.ndarray]]:
    """Reduced-depth variant (one unit per stage, base width 16) for
    CPU-scale experiments. Same stage layout, same surgery behaviour."""
    return build_resnet(num_classes, (1, 1, 1, 1), 16, pretrained, seed)


ARCHITECTURES = {
    "resnet101": build_resnet101,
    "resnet-tiny": build_resnet_tiny,
}


def convert_to_fcn(model: ModelSpec, num_classes: int) -> ModelSpec:
    """Swap the pooling + fully connected head for a 1x1 conv head.

    Converting an already fully convolutional model is a no-op that sets
    ``conversion_warning`` on the result. All body layers are untouched,
    so existing parameters stay valid; only the head tensors change
    (see :func:`reconcile_parameters`).
    """
    if num_classes < 1:
        raise ValueError("num_classes must be positive")
    if isinstance(model.head, ConvLayer):
        return replace(model, conversion_warning=True)
    head = ConvLayer("head", 1, 1, 0, 1, model.head.in_features, num_classes,
                     bias=True, batch_norm=False, activation="none")
    return replace(model, head=head, num_classes=num_classes,
                   conversion_warning=False)


def _scaled(conv: ConvLayer, mult: int, unstride: bool = False) -> ConvLayer:
    return replace(conv,
                   stride=1 if unstride else conv.stride,
                   rate=conv.rate * mult,
                   padding=conv.padding * mult)


def _unstride_unit(unit: ResidualUnit, mult: int) -> tuple[ResidualUnit, int]:
    """Set the unit's stride-2 conv to stride 1; dilate what follows it."""
    inner = []
    cur = mult
    for conv in unit.inner:
        if conv.stride == 2:
            inner.append(_scaled(conv, cur, unstride=True))
            cur = mult * 2
        else:
            inner.append(_scaled(conv, cur))
    projection = unit.projection
    if projection is not None:
        projection = _scaled(projection, mult, unstride=True)
    return ResidualUnit(unit.name, tuple(inner), projection), cur


def apply_output_stride(model: ModelSpec, target_stride: int) -> ModelSpec:
    """Reduce downsampling from 32x to 8x without touching any weight.

    The last two stride-2 layers are set to stride 1 and every
    convolution after the first (second) of them gets dilation rate 2
    (4), padding scaled by the same factor. The stem is never modified.
    """
    if target_stride != 8:
        raise ValueError(f"unsupported target stride {target_stride}; expected 8")
    if model.output_stride != 32:
        raise ValueError(
            f"model has output stride {model.output_stride}; surgery expects 32")
    strided = [i for i, item in enumerate(model.layers)
               if _item_stride(item) > 1]
    if len(strided) < 2:
        raise ValueError("target stride not reachable by removing exactly "
                         "two stride-2 layers")
    first, second = strided[-2:]
    for idx in (first, second):
        item = model.layers[idx]
        if isinstance(item, MaxPoolLayer):
            raise ValueError(f"{item.name}: cannot dilate through a pooling layer")
        if _item_stride(item) != 2:
            raise ValueError(f"{_item_name(item)}: expected stride 2, "
                             f"got {_item_stride(item)}")

    new_layers: list[Layer] = []
    mult = 1
    for i, item in enumerate(model.layers):
        if i in (first, second):
            if isinstance(item, ConvLayer):
                new_layers.append(_scaled(item, mult, unstride=True))
                mult *= 2
            else:
                unit, mult = _unstride_unit(item, mult)
                new_layers.append(unit)
        elif mult > 1:
            if isinstance(item, ConvLayer):
                new_layers.append(_scaled(item, mult))
            elif isinstance(item, ResidualUnit):
                inner = tuple(_scaled(c, mult) for c in item.inner)
                projection = (None if item.projection is None
                              else _scaled(item.projection, mult))
                new_layers.append(ResidualUnit(item.name, inner, projection))
            else:
                raise ValueError(
                    f"{item.name}: pooling after the modified layers would "
                    "change the sampling grid")
        else:
            new_layers.append(item)

    head = model.head
    if isinstance(head, ConvLayer):
        head = _scaled(head, mult)
    return replace(model, layers=tuple(new_layers), head=head,
                   output_stride=model.output_stride // 4)


def _item_stride(item: Layer) -> int:
    if isinstance(item, (ConvLayer, MaxPoolLayer)):
        return item.stride
    return item.stride


def _item_name(item: Layer) -> str:
    return item.name


def _chain_rf(items, rf: int, jump: int) -> tuple[int, int]:
    for item in items:
        if isinstance(item, (ConvLayer, MaxPoolLayer)):
            rate = item.rate if isinstance(item, ConvLayer) else 1
            extent = effective_kernel_extent(item.kernel, rate)
            rf += (extent - 1) * jump
            jump *= item.stride
        elif isinstance(item, ResidualUnit):
            rf_inner, jump_inner = _chain_rf(item.inner, rf, jump)
            if item.projection is not None:
                rf_skip, jump_skip = _chain_rf([item.projection], rf, jump)
            else:
                rf_skip, jump_skip = rf, jump
            if jump_inner != jump_skip:
                raise ValueError(f"{item.name}: branch strides disagree")
            rf, jump = max(rf_inner, rf_skip), jump_inner
        else:
            raise ValueError(f"unknown layer kind {item!r}")
    return rf, jump


def compute_receptive_field(model: ModelSpec) -> int:
    """Receptive field of one output unit, in input pixels per axis.

    All layers here are square, so a single integer covers both axes.
    Dense heads see the whole input through global pooling and are
    excluded; the value describes the final convolutional feature map.
    """
    items = list(model.layers)
    if isinstance(model.head, ConvLayer):
        items.append(model.head)
    rf, _ = _chain_rf(items, 1, 1)
    return rf


def spatial_output_shape(model: ModelSpec, input_hw: tuple[int, int]) -> tuple[int, int]:
    """Spatial size of the feature map entering the head (before any
    global pooling), for a given input size."""
    h, w = input_hw

    def step(item, h, w):
        if isinstance(item, (ConvLayer, MaxPoolLayer)):
            rate = item.rate if isinstance(item, ConvLayer) else 1
            h = conv_output_size(h, item.kernel, item.stride, item.padding, rate)
            w = conv_output_size(w, item.kernel, item.stride, item.padding, rate)
            return h, w
        for conv in item.inner:
            h, w = step(conv, h, w)
        return h, w

    for item in model.layers:
        h, w = step(item, h, w)
    return h, w


def _iter_convs(model: ModelSpec):
    for item in model.layers:
        if isinstance(item, ConvLayer):
            yield item
        elif isinstance(item, ResidualUnit):
            yield from item.inner
            if item.projection is not None:
                yield item.projection
    if isinstance(model.head, ConvLayer):
        yield model.head


def count_conv_layers(model: ModelSpec) -> int:
    """Number of convolution layers, projection shortcuts included."""
    return sum(1 for _ in _iter_convs(model))


def parameter_table(model: ModelSpec) -> dict[str, tuple[tuple[int, ...], str]]:
    """name -> (shape, kind) for every tensor the model owns.

    Kinds: weight, bias, gamma, beta, running_mean, running_var,
    dense_weight, dense_bias. Conv weights are (K, K, c_in, c_out).
    """
    table: dict[str, tuple[tuple[int, ...], str]] = {}
    for conv in _iter_convs(model):
        k = conv.kernel
        table[f"{conv.name}.weight"] = ((k, k, conv.in_channels, conv.out_channels),
                                        "weight")
        if conv.bias:
            table[f"{conv.name}.bias"] = ((conv.out_channels,), "bias")
        if conv.batch_norm:
            c = (conv.out_channels,)
            table[f"{conv.name}.bn.gamma"] = (c, "gamma")
            table[f"{conv.name}.bn.beta"] = (c, "beta")
            table[f"{conv.name}.bn.running_mean"] = (c, "running_mean")
            table[f"{conv.name}.bn.running_var"] = (c, "running_var")
    head = model.head
    if isinstance(head, DenseHead):
        table[f"{head.name}.weight"] = ((head.in_features, head.num_classes),
                                        "dense_weight")
        table[f"{head.name}.bias"] = ((head.num_classes,), "dense_bias")
    return table


def _init_tensor(name: str, shape: tuple[int, ...], kind: str,
                 rng: np.random.Generator) -> np.ndarray:
    if kind == "weight":
        if name.startswith("head."):
            std = HEAD_INIT_STD
        else:
            fan_in = shape[0] * shape[1] * shape[2]
            std = float(np.sqrt(2.0 / fan_in))
        return rng.normal(0.0, std, size=shape)
    if kind == "dense_weight":
        return rng.normal(0.0, HEAD_INIT_STD, size=shape)
    if kind in ("gamma", "running_var"):
        return np.ones(shape, dtype=np.float64)
    # bias, beta, running_mean, dense_bias
    return np.zeros(shape, dtype=np.float64)


def init_parameters(model: ModelSpec, seed: int = 0) -> dict[str, np.ndarray]:
    """Fresh float64 parameters: He-normal conv weights, unit-gaussian
    running stats, and a small-variance (std 0.01) zero-bias head."""
    rng = np.random.default_rng(seed)
    table = parameter_table(model)
    return {name: _init_tensor(name, shape, kind, rng)
            for name, (shape, kind) in table.items()}


def validate_parameters(model: ModelSpec,
                        params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Check a loaded tensor set against the model, casting to float64.

    Missing tensors and shape mismatches raise
    :class:`CheckpointIncompatibleError` naming the first offending
    tensor in model order. Extra tensors are dropped.
    """
    out = {}
    for name, (shape, _) in parameter_table(model).items():
        if name not in params:
            raise CheckpointIncompatibleError(f"missing tensor {name}")
        arr = params[name]
        if tuple(arr.shape) != shape:
            raise CheckpointIncompatibleError(
                f"tensor {name} has shape {tuple(arr.shape)}, expected {shape}")
        out[name] = np.asarray(arr, dtype=np.float64)
    return out


def reconcile_parameters(model: ModelSpec, params: dict[str, np.ndarray],
                         seed: int = 0) -> dict[str, np.ndarray]:
    """Carry matching tensors over to a transformed model.

    Tensors whose name and shape survive (everything except a replaced
    head) are kept by reference, bit for bit. Tensors the new model no
    longer owns are dropped; tensors it newly owns (the fresh head) are
    initialized from ``seed``.
    """
    rng = np.random.default_rng(seed)
    out = {}
    for name, (shape, kind) in parameter_table(model).items():
        if name in params:
            arr = params[name]
            if tuple(arr.shape) != shape:
                raise CheckpointIncompatibleError(
                    f"tensor {name} has shape {tuple(arr.shape)}, expected {shape}")
            out[name] = arr
        else:
            out[name] = _init_tensor(name, shape, kind, rng)
    return out


def trainable_names(model: ModelSpec) -> list[str]:
    """Parameters the optimizer may update; running stats never qualify,
    and batch-norm scale/shift drop out when the model runs frozen BN."""
    names = []
    for name, (_, kind) in parameter_table(model).items():
        if kind in ("running_mean", "running_var"):
            continue
        if model.bn_frozen and kind in ("gamma", "beta"):
            continue
        names.append(name)
    return names


# --- spec (de)serialization for checkpoints -------------------------------

def _layer_to_dict(item) -> dict:
    if isinstance(item, ConvLayer):
        return {"type": "conv", **{f: getattr(item, f) for f in (
            "name", "kernel", "stride", "padding", "rate", "in_channels",
            "out_channels", "bias", "batch_norm", "activation")}}
    if isinstance(item, MaxPoolLayer):
        return {"type": "maxpool", "name": item.name, "kernel": item.kernel,
                "stride": item.stride, "padding": item.padding}
    if isinstance(item, ResidualUnit):
        return {"type": "residual", "name": item.name,
                "inner": [_layer_to_dict(c) for c in item.inner],
                "projection": (None if item.projection is None
                               else _layer_to_dict(item.projection))}
    if isinstance(item, DenseHead):
        return {"type": "dense", "name": item.name,
                "in_features": item.in_features,
                "num_classes": item.num_classes}
    raise ValueError(f"cannot serialize {item!r}")


def _layer_from_dict(d: dict):
    kind = d["type"]
    if kind == "conv":
        fields = {k: v for k, v in d.items() if k != "type"}
        return ConvLayer(**fields)
    if kind == "maxpool":
        return MaxPoolLayer(d["name"], d["kernel"], d["stride"], d["padding"])
    if kind == "residual":
        projection = (None if d["projection"] is None
                      else _layer_from_dict(d["projection"]))
        return ResidualUnit(d["name"],
                            tuple(_layer_from_dict(c) for c in d["inner"]),
                            projection)
    if kind == "dense":
        return DenseHead(d["name"], d["in_features"], d["num_classes"])
    raise ValueError(f"unknown layer type {kind!r}")


def spec_to_dict(model: ModelSpec) -> dict:
    return {
        "layers": [_layer_to_dict(item) for item in model.layers],
        "head": _layer_to_dict(model.head),
        "num_classes": model.num_classes,
        "output_stride": model.output_stride,
        "bn_frozen": model.bn_frozen,
        "conversion_warning": model.conversion_warning,
    }


def spec_from_dict(d: dict) -> ModelSpec:
    return ModelSpec(
        layers=tuple(_layer_from_dict(x) for x in d["layers"]),
        head=_layer_from_dict(d["head"]),
        num_classes=d["num_classes"],
        output_stride=d["output_stride"],
        bn_frozen=d["bn_frozen"],
        conversion_warning=d["conversion_warning"],
    )
