"""Network descriptions and the per-layer quantities every cost formula uses.

A network is an input shape plus an ordered chain of convolutional and
fully connected layers. ``derive_dims`` turns that chain into activation
sizes ``d_in``/``d_out`` and parameter counts ``weight_count``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Sequence, Union


class NetSpecError(ValueError):
    """Raised for malformed network documents or invalid layer chains."""


@dataclass(frozen=True)
class InputShape:
    height: int
    width: int
    channels: int

    def __post_init__(self):
        for name in ("height", "width", "channels"):
            _check_positive_int(getattr(self, name), f"input.{name}")

    @property
    def size(self) -> int:
        return self.height * self.width * self.channels


@dataclass(frozen=True)
class ConvLayer:
    """Convolution with 'same' padding, so the output is ceil(x / stride).

    ``pool_divisor`` models a following overlapping pool (window d+1,
    stride d, as in AlexNet's 3x3/2 pooling); 1 means no pooling.
    """

    kernel_h: int
    kernel_w: int
    stride: int
    out_channels: int
    pool_divisor: int = 1

    def __post_init__(self):
        _check_positive_int(self.kernel_h, "kh")
        _check_positive_int(self.kernel_w, "kw")
        _check_positive_int(self.stride, "stride")
        _check_positive_int(self.out_channels, "out_channels")
        _check_positive_int(self.pool_divisor, "pool_divisor")

    kind = "conv"


@dataclass(frozen=True)
class FCLayer:
    out_features: int

    def __post_init__(self):
        _check_positive_int(self.out_features, "out")

    kind = "fc"


LayerDef = Union[ConvLayer, FCLayer]


@dataclass(frozen=True)
class LayerDims:
    kind: str
    x_h: int
    x_w: int
    x_c: int
    y_h: int
    y_w: int
    y_c: int
    kernel_h: int
    kernel_w: int
    weight_count: int

    @property
    def d_in(self) -> int:
        return self.x_h * self.x_w * self.x_c

    @property
    def d_out(self) -> int:
        return self.y_h * self.y_w * self.y_c

    @property
    def is_conv(self) -> bool:
        return self.kind == "conv"


@dataclass(frozen=True)
class NetworkSpec:
    input: InputShape
    layers: tuple
    sample_count: int = 1
    dims: tuple = field(init=False, compare=False)

    def __post_init__(self):
        _check_positive_int(self.sample_count, "samples")
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "dims", tuple(derive_dims(self.input, self.layers)))

    def __len__(self):
        return len(self.layers)

    @property
    def total_weights(self) -> int:
        return sum(d.weight_count for d in self.dims)


def _check_positive_int(value, name):
    if isinstance(value, bool) or not isinstance(value, int):
        raise NetSpecError(f"{name} must be an integer, got {value!r}")
    if value < 1:
        raise NetSpecError(f"{name} must be >= 1, got {value}")


def _pooled(y: int, divisor: int) -> int:
    if divisor == 1:
        return y
    return (y - 1) // divisor


def derive_dims(input: InputShape, layers: Sequence[LayerDef]) -> list[LayerDims]:
    """Per-layer activation and parameter counts for a layer chain.

    Conv layers use the padded output size ``ceil(x / s)``; FC layers
    flatten whatever reaches them into a vector of length ``d_in``.
    """
    if not layers:
        raise NetSpecError("layer list is empty")
    h, w, c = input.height, input.width, input.channels
    seen_fc = False
    dims = []
    for i, layer in enumerate(layers):
        if isinstance(layer, ConvLayer):
            if seen_fc:
                raise NetSpecError(f"layer {i}: conv layer after a fully connected layer")
            if layer.stride > h or layer.stride > w:
                raise NetSpecError(
                    f"layer {i}: stride {layer.stride} exceeds spatial extent {h}x{w}"
                )
            yh = _pooled(math.ceil(h / layer.stride), layer.pool_divisor)
            yw = _pooled(math.ceil(w / layer.stride), layer.pool_divisor)
            if yh < 1 or yw < 1:
                raise NetSpecError(f"layer {i}: pooling collapses the {h}x{w} activation")
            dims.append(
                LayerDims(
                    kind="conv",
                    x_h=h, x_w=w, x_c=c,
                    y_h=yh, y_w=yw, y_c=layer.out_channels,
                    kernel_h=layer.kernel_h, kernel_w=layer.kernel_w,
                    weight_count=layer.kernel_h * layer.kernel_w * c * layer.out_channels,
                )
            )
            h, w, c = yh, yw, layer.out_channels
        elif isinstance(layer, FCLayer):
            seen_fc = True
            d_in = h * w * c
            dims.append(
                LayerDims(
                    kind="fc",
                    x_h=1, x_w=1, x_c=d_in,
                    y_h=1, y_w=1, y_c=layer.out_features,
                    kernel_h=1, kernel_w=1,
                    weight_count=d_in * layer.out_features,
                )
            )
            h, w, c = 1, 1, layer.out_features
        else:
            raise NetSpecError(f"layer {i}: unknown layer object {layer!r}")
    return dims


_CONV_KEYS = {"type", "kh", "kw", "stride", "out_channels", "pool_divisor"}
_FC_KEYS = {"type", "out"}


def _require(mapping: dict, key: str, where: str):
    if key not in mapping:
        raise NetSpecError(f"{where}: missing field '{key}'")
    return mapping[key]


def _reject_unknown(mapping: dict, allowed: set, where: str):
    extra = sorted(set(mapping) - allowed)
    if extra:
        raise NetSpecError(f"{where}: unknown field '{extra[0]}'")


def network_from_dict(doc: Any) -> NetworkSpec:
    if not isinstance(doc, dict):
        raise NetSpecError("network document must be an object")
    _reject_unknown(doc, {"input", "samples", "layers"}, "network")
    inp = _require(doc, "input", "network")
    if not isinstance(inp, dict):
        raise NetSpecError("input: must be an object with h, w, c")
    _reject_unknown(inp, {"h", "w", "c"}, "input")
    shape = InputShape(
        _require(inp, "h", "input"), _require(inp, "w", "input"), _require(inp, "c", "input")
    )
    samples = doc.get("samples", 1)
    raw_layers = _require(doc, "layers", "network")
    if not isinstance(raw_layers, list):
        raise NetSpecError("layers: must be an array")
    layers = []
    for i, raw in enumerate(raw_layers):
        where = f"layers[{i}]"
        if not isinstance(raw, dict):
            raise NetSpecError(f"{where}: must be an object")
        kind = _require(raw, "type", where)
        try:
            if kind == "conv":
                _reject_unknown(raw, _CONV_KEYS, where)
                layers.append(
                    ConvLayer(
                        _require(raw, "kh", where),
                        _require(raw, "kw", where),
                        _require(raw, "stride", where),
                        _require(raw, "out_channels", where),
                        raw.get("pool_divisor", 1),
                    )
                )
            elif kind == "fc":
                _reject_unknown(raw, _FC_KEYS, where)
                layers.append(FCLayer(_require(raw, "out", where)))
            else:
                raise NetSpecError(f"{where}.type: expected 'conv' or 'fc', got {kind!r}")
        except NetSpecError as exc:
            if str(exc).startswith("layers["):
                raise
            raise NetSpecError(f"{where}: {exc}") from None
    return NetworkSpec(shape, tuple(layers), samples)


def network_to_dict(net: NetworkSpec) -> dict:
    layers = []
    for layer in net.layers:
        if isinstance(layer, ConvLayer):
            entry = {
                "type": "conv",
                "kh": layer.kernel_h,
                "kw": layer.kernel_w,
                "stride": layer.stride,
                "out_channels": layer.out_channels,
            }
            if layer.pool_divisor != 1:
                entry["pool_divisor"] = layer.pool_divisor
        else:
            entry = {"type": "fc", "out": layer.out_features}
        layers.append(entry)
    return {
        "input": {"h": net.input.height, "w": net.input.width, "c": net.input.channels},
        "samples": net.sample_count,
        "layers": layers,
    }


def parse_network(text: str) -> NetworkSpec:
    """Parse a JSON network document into a validated ``NetworkSpec``."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise NetSpecError(f"not valid JSON: {exc}") from None
    return network_from_dict(doc)


def serialize_network(net: NetworkSpec) -> str:
    return json.dumps(network_to_dict(net), indent=2) + "\n"


def load_network(path) -> NetworkSpec:
    with open(path) as fh:
        return parse_network(fh.read())


def alexnet_preset() -> NetworkSpec:
    text = resources.files("gridplan.presets").joinpath("alexnet.json").read_text()
    return parse_network(text)


def fc_chain(widths: Sequence[int], samples: int = 1) -> NetworkSpec:
    """A pure fully connected chain ``widths[0] -> widths[1] -> ...``."""
    if len(widths) < 2:
        raise NetSpecError("an FC chain needs at least an input width and one layer")
    return NetworkSpec(
        InputShape(1, 1, widths[0]), tuple(FCLayer(w) for w in widths[1:]), samples
    )
