"""Parameterized layers shared by the generator and the inversion encoders.

Each layer owns its weight tensors, applies itself to a batched activation,
and can describe itself for the weight-file header. Initialization is
Kaiming-uniform on fan-in (negative slope 0.2); transposed convolutions use
the per-output-pixel fan-in Cin*k*k/stride^2.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

LEAKY_SLOPE = 0.2


def _kaiming_bound(fan_in: float, slope: float = LEAKY_SLOPE) -> float:
    gain2 = 2.0 / (1.0 + slope * slope)
    return float(np.sqrt(3.0 * gain2 / fan_in))


def _activate(x: ad.Tensor, activation: str) -> ad.Tensor:
    if activation == "leaky":
        return ad.leaky_relu(x, LEAKY_SLOPE)
    if activation == "tanh":
        return ad.tanh(x)
    if activation == "none":
        return x
    raise ValueError(f"unknown activation: {activation}")


class LinearLayer:
    kind = "linear"

    def __init__(self, in_features, out_features, activation="leaky", out_chw=None, rng=None):
        self.in_features = in_features
        self.out_features = out_features
        self.activation = activation
        self.out_chw = tuple(out_chw) if out_chw else None  # reshape target, optional
        bound = _kaiming_bound(in_features)
        rng = rng or np.random.default_rng(0)
        self.weight = ad.Tensor(rng.uniform(-bound, bound, (in_features, out_features)), requires_grad=True)
        self.bias = ad.Tensor(np.zeros(out_features), requires_grad=True)

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        if x.data.ndim == 4:  # flatten feature maps
            x = ad.reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))
        out = _activate(ad.linear(x, self.weight, self.bias), self.activation)
        if self.out_chw is not None:
            out = ad.reshape(out, (out.shape[0], *self.out_chw))
        return out

    def out_shape(self, in_shape):
        return self.out_chw if self.out_chw else (self.out_features,)

    def params(self):
        return [self.weight, self.bias]

    def describe(self):
        return {
            "kind": self.kind,
            "in_features": self.in_features,
            "out_features": self.out_features,
            "activation": self.activation,
            "out_chw": list(self.out_chw) if self.out_chw else None,
        }

    @classmethod
    def from_description(cls, desc):
        return cls(desc["in_features"], desc["out_features"], desc["activation"],
                   desc["out_chw"], rng=np.random.default_rng(0))


class ConvLayer:
    kind = "conv"

    def __init__(self, in_ch, out_ch, ksize, stride, padding, activation="leaky", rng=None):
        self.in_ch, self.out_ch = in_ch, out_ch
        self.ksize, self.stride, self.padding = ksize, stride, padding
        self.activation = activation
        bound = _kaiming_bound(in_ch * ksize * ksize)
        rng = rng or np.random.default_rng(0)
        self.weight = ad.Tensor(
            rng.uniform(-bound, bound, (out_ch, in_ch, ksize, ksize)), requires_grad=True
        )
        self.bias = ad.Tensor(np.zeros(out_ch), requires_grad=True)

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        out = ad.bias_add(ad.conv2d(x, self.weight, self.stride, self.padding), self.bias)
        return _activate(out, self.activation)

    def out_shape(self, in_shape):
        _, h, w = in_shape
        ho = (h + 2 * self.padding - self.ksize) // self.stride + 1
        wo = (w + 2 * self.padding - self.ksize) // self.stride + 1
        return (self.out_ch, ho, wo)

    def params(self):
        return [self.weight, self.bias]

    def describe(self):
        return {
            "kind": self.kind,
            "in_ch": self.in_ch,
            "out_ch": self.out_ch,
            "ksize": self.ksize,
            "stride": self.stride,
            "padding": self.padding,
            "activation": self.activation,
        }

    @classmethod
    def from_description(cls, desc):
        return cls(desc["in_ch"], desc["out_ch"], desc["ksize"], desc["stride"],
                   desc["padding"], desc["activation"], rng=np.random.default_rng(0))


class ConvTransposeLayer:
    """Transposed-conv block; optionally sees two fixed coordinate ramp channels.

    The coordinate channels give kernels direct access to absolute position,
    which the generator needs to place objects at latent-controlled locations.
    """

    kind = "conv_transpose"

    def __init__(self, in_ch, out_ch, ksize, stride, padding, activation="leaky",
                 coords=False, rng=None):
        self.in_ch, self.out_ch = in_ch, out_ch
        self.ksize, self.stride, self.padding = ksize, stride, padding
        self.activation = activation
        self.coords = coords
        self._coord_cache = {}
        cin = in_ch + (2 if coords else 0)
        fan_in = cin * ksize * ksize / (stride * stride)
        bound = _kaiming_bound(fan_in)
        rng = rng or np.random.default_rng(0)
        self.weight = ad.Tensor(
            rng.uniform(-bound, bound, (cin, out_ch, ksize, ksize)), requires_grad=True
        )
        self.bias = ad.Tensor(np.zeros(out_ch), requires_grad=True)

    def _coord_planes(self, n, h, w) -> ad.Tensor:
        key = (n, h, w)
        if key not in self._coord_cache:
            ramp_y = np.linspace(-1.0, 1.0, h, dtype=np.float32)[:, None]
            ramp_x = np.linspace(-1.0, 1.0, w, dtype=np.float32)[None, :]
            planes = np.stack([np.broadcast_to(ramp_y, (h, w)), np.broadcast_to(ramp_x, (h, w))])
            self._coord_cache[key] = np.broadcast_to(planes, (n, 2, h, w)).copy()
        return ad.Tensor(self._coord_cache[key])

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        if self.coords:
            n, _, h, w = x.shape
            x = ad.concat_channels(x, self._coord_planes(n, h, w))
        out = ad.bias_add(ad.conv_transpose2d(x, self.weight, self.stride, self.padding), self.bias)
        return _activate(out, self.activation)

    def out_shape(self, in_shape):
        _, h, w = in_shape
        ho = (h - 1) * self.stride - 2 * self.padding + self.ksize
        wo = (w - 1) * self.stride - 2 * self.padding + self.ksize
        return (self.out_ch, ho, wo)

    def params(self):
        return [self.weight, self.bias]

    def describe(self):
        return {
            "kind": self.kind,
            "in_ch": self.in_ch,
            "out_ch": self.out_ch,
            "ksize": self.ksize,
            "stride": self.stride,
            "padding": self.padding,
            "activation": self.activation,
            "coords": self.coords,
        }

    @classmethod
    def from_description(cls, desc):
        return cls(desc["in_ch"], desc["out_ch"], desc["ksize"], desc["stride"],
                   desc["padding"], desc["activation"], desc.get("coords", False),
                   rng=np.random.default_rng(0))


_LAYER_KINDS = {cls.kind: cls for cls in (LinearLayer, ConvLayer, ConvTransposeLayer)}


def layer_from_description(desc) -> object:
    kind = desc.get("kind")
    if kind not in _LAYER_KINDS:
        raise ValueError(f"unknown layer kind in weight header: {kind!r}")
    return _LAYER_KINDS[kind].from_description(desc)


def sequential_params(layers) -> list:
    out = []
    for layer in layers:
        out.extend(layer.params())
    return out


def run_layers(layers, x: ad.Tensor) -> ad.Tensor:
    for layer in layers:
        x = layer(x)
    return x
