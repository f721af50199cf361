"""Layer-graph backbones and the stride-to-dilation transform.

A :class:`NetworkSpec` is an ordered list of :class:`LayerSpec` entries
(conv, max_pool, activation, residual_block).  ``dilate_transform`` removes
the stride of one layer and multiplies the dilation of every layer after it
by that stride, which raises the output resolution while every kernel keeps
looking at the same input scale and keeps its parameter shape.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import tensor as T

KINDS = ("conv", "max_pool", "activation", "residual_block")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    channels: int = 0          # output channels, conv only
    kernel: int = 1
    stride: int = 1
    dilation: int = 1
    padding: str = "same"
    activation: str = "relu"   # activation layers only
    inner: tuple = ()          # residual_block: two conv LayerSpecs
    shortcut: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.stride < 1 or self.dilation < 1 or self.kernel < 1:
            raise ValueError(f"stride, dilation and kernel must be >= 1 ({self})")
        if self.kind == "residual_block":
            if len(self.inner) != 2 or any(l.kind != "conv" for l in self.inner):
                raise ValueError("residual_block needs exactly two conv layers")
            if any(l.stride != 1 or l.padding != "same" for l in self.inner):
                raise ValueError("residual_block convs must be stride 1 with 'same' padding")

    @property
    def holes(self) -> int:
        return self.dilation - 1


def conv(channels, kernel=3, stride=1, dilation=1, padding="same") -> LayerSpec:
    return LayerSpec("conv", channels, kernel, stride, dilation, padding)


def max_pool(kernel=2, stride=2, padding="same") -> LayerSpec:
    return LayerSpec("max_pool", kernel=kernel, stride=stride, padding=padding)


def relu() -> LayerSpec:
    return LayerSpec("activation", activation="relu")


def residual_block(channels, kernel=3) -> LayerSpec:
    return LayerSpec(
        "residual_block",
        inner=(conv(channels, kernel), conv(channels, kernel)),
    )


@dataclass(frozen=True)
class NetworkSpec:
    in_channels: int
    layers: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        self.channel_trace()  # validates channel compatibility

    def channel_trace(self) -> list[int]:
        """Output channel count after each layer."""
        c = self.in_channels
        trace = []
        for i, layer in enumerate(self.layers):
            if layer.kind == "conv":
                c = layer.channels
            elif layer.kind == "residual_block":
                a, b = layer.inner
                if layer.shortcut and b.channels != c:
                    raise ValueError(
                        f"layer {i}: residual block maps {c} -> {b.channels} channels "
                        "but the identity shortcut needs them equal"
                    )
                c = b.channels
            trace.append(c)
        return trace

    @property
    def out_channels(self) -> int:
        trace = self.channel_trace()
        return trace[-1] if trace else self.in_channels


def effective_kernel(kernel: int, holes: int) -> int:
    """Receptive extent of a kernel with ``holes`` zeros between taps."""
    if kernel < 1 or holes < 0:
        raise ValueError("kernel must be >= 1 and holes >= 0")
    return kernel + (kernel - 1) * holes


def downscale_factor(net: NetworkSpec) -> int:
    f = 1
    for layer in net.layers:
        f *= layer.stride
    return f


def receptive_fields(net: NetworkSpec) -> list[int]:
    """Receptive field (input pixels, one axis) of each layer's output."""
    rf, jump = 1, 1
    out = []
    for layer in net.layers:
        convs = layer.inner if layer.kind == "residual_block" else (layer,)
        if layer.kind != "activation":
            for c in convs:
                rf += (effective_kernel(c.kernel, c.holes) - 1) * jump
        jump *= layer.stride
        out.append(rf)
    return out


def _dilated(layer: LayerSpec, factor: int) -> LayerSpec:
    if layer.kind in ("conv", "max_pool"):
        return replace(layer, dilation=layer.dilation * factor)
    if layer.kind == "residual_block":
        return replace(layer, inner=tuple(_dilated(c, factor) for c in layer.inner))
    return layer


def dilate_transform(net: NetworkSpec, layer_index: int) -> NetworkSpec:
    """Drop the stride of ``layer_index`` and dilate every later layer by it.

    Pooling layers after the target are dilated exactly like convolutions.
    Parameter shapes never change.
    """
    if not 0 <= layer_index < len(net.layers):
        raise IndexError(f"layer index {layer_index} out of range (0..{len(net.layers) - 1})")
    target = net.layers[layer_index]
    s = target.stride
    if s <= 1:
        raise ValueError(f"layer {layer_index} has stride 1; nothing to transform")
    layers = list(net.layers)
    layers[layer_index] = replace(target, stride=1)
    for j in range(layer_index + 1, len(layers)):
        layers[j] = _dilated(layers[j], s)
    return NetworkSpec(net.in_channels, tuple(layers))


def remove_layer(net: NetworkSpec, layer_index: int) -> NetworkSpec:
    layers = list(net.layers)
    del layers[layer_index]
    return NetworkSpec(net.in_channels, tuple(layers))


def strided_layers(net: NetworkSpec) -> list[int]:
    return [i for i, l in enumerate(net.layers) if l.stride > 1]


def apply_dilated_recipe(net: NetworkSpec, kind: str) -> NetworkSpec:
    """Turn a stride-32 toy backbone into a stride-8 one.

    ``vgg_like``: remove the final max-pool, then transform the last
    remaining strided layer.  ``residual_like``: transform the last two
    strided layers (stage-4 then stage-5 downsampling convs).
    """
    if kind == "vgg_like":
        pools = [i for i, l in enumerate(net.layers) if l.kind == "max_pool"]
        if not pools:
            raise ValueError("vgg_like recipe needs a max-pool layer to remove")
        net = remove_layer(net, pools[-1])
        return dilate_transform(net, strided_layers(net)[-1])
    if kind == "residual_like":
        idx = strided_layers(net)
        if len(idx) < 2:
            raise ValueError("residual_like recipe needs two strided layers")
        for i in idx[-2:]:
            net = dilate_transform(net, i)
        return net
    raise ValueError(f"unknown backbone kind {kind!r}")


# --------------------------------------------------------------------------
# execution

def _conv_layer(x, layer: LayerSpec, p, where: str):
    w, b = p
    if w.shape[0] != layer.channels or w.shape[2:] != (layer.kernel, layer.kernel):
        raise T.ShapeError(
            f"{where}: kernel shape {w.shape} does not match spec "
            f"({layer.channels}, *, {layer.kernel}, {layer.kernel})"
        )
    try:
        return T.conv2d(x, w, b, layer.stride, layer.dilation, layer.padding)
    except T.ShapeError as exc:
        raise T.ShapeError(f"{where}: {exc}") from None


def forward(net: NetworkSpec, params: list, x) -> np.ndarray:
    """Run ``net`` on a C x H x W tensor.

    ``params`` is aligned with ``net.layers``: ``(weight, bias)`` for conv,
    a pair of those for residual blocks and ``None`` otherwise.
    """
    if len(params) != len(net.layers):
        raise T.ShapeError(f"{len(params)} parameter entries for {len(net.layers)} layers")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != net.in_channels:
        raise T.ShapeError(f"input has {x.shape[0]} channels, network expects {net.in_channels}")
    for i, (layer, p) in enumerate(zip(net.layers, params)):
        where = f"layer {i} ({layer.kind})"
        if layer.kind == "conv":
            x = _conv_layer(x, layer, p, where)
        elif layer.kind == "max_pool":
            x = T.max_pool2d(x, layer.kernel, layer.stride, layer.dilation, layer.padding)
        elif layer.kind == "activation":
            x = T.activation(x, layer.activation)
        else:
            c1, c2 = layer.inner
            h = _conv_layer(x, c1, p[0], where + " conv1")
            h = _conv_layer(np.maximum(h, 0.0), c2, p[1], where + " conv2")
            x = x + h if layer.shortcut else h
    return x


def glorot_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    c_out, c_in, kh, kw = shape
    limit = np.sqrt(6.0 / (c_in * kh * kw + c_out * kh * kw))
    return rng.uniform(-limit, limit, size=shape)


def init_params(net: NetworkSpec, rng: np.random.Generator) -> list:
    params = []
    c = net.in_channels
    for layer in net.layers:
        if layer.kind == "conv":
            params.append((glorot_uniform(rng, (layer.channels, c, layer.kernel, layer.kernel)),
                           np.zeros(layer.channels)))
            c = layer.channels
        elif layer.kind == "residual_block":
            pair = []
            for inner in layer.inner:
                pair.append((glorot_uniform(rng, (inner.channels, c, inner.kernel, inner.kernel)),
                             np.zeros(inner.channels)))
                c = inner.channels
            params.append(tuple(pair))
        else:
            params.append(None)
    return params


def build_toy_backbone(kind: str, width: int = 8, in_channels: int = 1,
                       out_channels: Optional[int] = None, seed: int = 0):
    """Five stride-2 stages at toy width; returns ``(spec, params)``.

    ``vgg_like`` stages are conv3x3 + ReLU + maxpool(2, 2) with channels
    (w, 2w, 2w, 2w, 2w).  ``residual_like`` stages downsample with a strided
    conv3x3 and, in stages 3-5, add a residual block; a trailing 1x1 conv
    sets the output channel count.
    """
    if width < 1:
        raise ValueError("width must be >= 1")
    layers: list[LayerSpec] = []
    if kind == "vgg_like":
        for ch in (width, 2 * width, 2 * width, 2 * width, 2 * width):
            layers += [conv(ch, 3), relu(), max_pool(2, 2)]
        if out_channels is not None and out_channels != 2 * width:
            layers.append(conv(out_channels, 1))
    elif kind == "residual_like":
        for stage, ch in enumerate((width, width, 2 * width, 2 * width, 2 * width), start=1):
            layers += [conv(ch, 3, stride=2), relu()]
            if stage >= 3:
                layers += [residual_block(ch), relu()]
        layers.append(conv(out_channels or 2 * width, 1))
    else:
        raise ValueError(f"unknown backbone kind {kind!r}")
    net = NetworkSpec(in_channels, tuple(layers))
    return net, init_params(net, np.random.default_rng(seed))


# --------------------------------------------------------------------------
# JSON

def _layer_to_json(layer: LayerSpec) -> dict:
    d = {"kind": layer.kind}
    if layer.kind == "conv":
        d.update(channels=layer.channels, kernel=layer.kernel, stride=layer.stride,
                 holes=layer.holes, padding=layer.padding)
    elif layer.kind == "max_pool":
        d.update(kernel=layer.kernel, stride=layer.stride, holes=layer.holes,
                 padding=layer.padding)
    elif layer.kind == "activation":
        d.update(activation=layer.activation)
    else:
        d.update(layers=[_layer_to_json(c) for c in layer.inner], shortcut=layer.shortcut)
    return d


def _layer_from_json(d: dict) -> LayerSpec:
    kind = d.get("kind")
    if kind == "conv":
        return LayerSpec("conv", int(d["channels"]), int(d.get("kernel", 3)),
                         int(d.get("stride", 1)), T.holes_to_dilation(int(d.get("holes", 0))),
                         d.get("padding", "same"))
    if kind == "max_pool":
        return LayerSpec("max_pool", kernel=int(d.get("kernel", 2)), stride=int(d.get("stride", 2)),
                         dilation=T.holes_to_dilation(int(d.get("holes", 0))),
                         padding=d.get("padding", "same"))
    if kind == "activation":
        return LayerSpec("activation", activation=d.get("activation", "relu"))
    if kind == "residual_block":
        return LayerSpec("residual_block",
                         inner=tuple(_layer_from_json(c) for c in d["layers"]),
                         shortcut=bool(d.get("shortcut", True)))
    raise ValueError(f"unknown layer kind {kind!r}")


def spec_to_json(net: NetworkSpec) -> dict:
    return {
        "in_channels": net.in_channels,
        "downscale_factor": downscale_factor(net),
        "layers": [_layer_to_json(l) for l in net.layers],
    }


def spec_from_json(obj) -> NetworkSpec:
    """Accepts either ``{"in_channels": .., "layers": [...]}`` or a bare layer array."""
    if isinstance(obj, list):
        return NetworkSpec(1, tuple(_layer_from_json(d) for d in obj))
    if not isinstance(obj, dict) or "layers" not in obj:
        raise ValueError("network JSON must be a layer array or an object with 'layers'")
    return NetworkSpec(int(obj.get("in_channels", 1)),
                       tuple(_layer_from_json(d) for d in obj["layers"]))


def dumps(net: NetworkSpec) -> str:
    return json.dumps(spec_to_json(net), indent=2, sort_keys=True) + "\n"


def loads(text: str) -> NetworkSpec:
    return spec_from_json(json.loads(text))
