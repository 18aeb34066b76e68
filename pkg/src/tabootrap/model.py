"""Layer-list models, the LeNet5 build, and MAC/parameter accounting."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from . import tensor as T


@dataclass(frozen=True)
class Conv2d:
    name: str
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class MaxPool2d:
    kernel: int
    stride: int


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Linear:
    name: str
    in_features: int
    out_features: int


Layer = Union[Conv2d, MaxPool2d, ReLU, Flatten, Linear]


def describe(layers) -> str:
    """Compact text form of a layer list, stored in checkpoints."""
    parts = []
    for layer in layers:
        if isinstance(layer, Conv2d):
            parts.append(
                f"conv:{layer.name}:{layer.in_channels}:{layer.out_channels}:"
                f"{layer.kernel}:{layer.stride}:{layer.padding}"
            )
        elif isinstance(layer, MaxPool2d):
            parts.append(f"pool:{layer.kernel}:{layer.stride}")
        elif isinstance(layer, ReLU):
            parts.append("relu")
        elif isinstance(layer, Flatten):
            parts.append("flatten")
        elif isinstance(layer, Linear):
            parts.append(f"linear:{layer.name}:{layer.in_features}:{layer.out_features}")
        else:
            raise TypeError(f"unknown layer {layer!r}")
    return "|".join(parts)


def parse_description(text: str) -> tuple[tuple[int, ...], list]:
    """Inverse of the ``input=...;`` + :func:`describe` string used by :class:`Model`."""
    head, _, body = text.partition(";")
    if not head.startswith("input="):
        raise ValueError(f"malformed model descriptor {text!r}")
    input_shape = tuple(int(v) for v in head[len("input=") :].split("x"))
    layers = []
    for part in body.split("|"):
        kind, *args = part.split(":")
        if kind == "conv":
            name, *nums = args
            layers.append(Conv2d(name, *map(int, nums)))
        elif kind == "pool":
            layers.append(MaxPool2d(*map(int, args)))
        elif kind == "relu":
            layers.append(ReLU())
        elif kind == "flatten":
            layers.append(Flatten())
        elif kind == "linear":
            name, *nums = args
            layers.append(Linear(name, *map(int, nums)))
        else:
            raise ValueError(f"unknown layer kind {kind!r} in descriptor")
    return input_shape, layers


class Model:
    """An ordered layer list plus its parameter arrays.

    The instrumentation points are the ReLU outputs, in forward order.
    Instances are treated as immutable; training builds new ones through
    :meth:`with_params`.
    """

    def __init__(self, layers, params: dict[str, np.ndarray], input_shape=(1, 28, 28)):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        expected = dict(self.parameter_shapes())
        if set(expected) != set(params):
            raise ValueError(
                f"parameter names {sorted(params)} do not match layers {sorted(expected)}"
            )
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {params[name].shape}")
        self.params = {name: np.asarray(params[name]) for name in expected}

    @classmethod
    def initialize(cls, layers, input_shape=(1, 28, 28), seed: int = 0) -> "Model":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in cls._shapes(layers):
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else None
            if fan_in is None:
                # bias shares the bound of the weight declared just before it
                fan_in = int(np.prod(params[name.replace(".bias", ".weight")].shape[1:]))
            bound = 1.0 / np.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(T.DTYPE)
        return cls(layers, params, input_shape)

    @staticmethod
    def _shapes(layers):
        for layer in layers:
            if isinstance(layer, Conv2d):
                k = layer.kernel
                yield f"{layer.name}.weight", (layer.out_channels, layer.in_channels, k, k)
                yield f"{layer.name}.bias", (layer.out_channels,)
            elif isinstance(layer, Linear):
                yield f"{layer.name}.weight", (layer.out_features, layer.in_features)
                yield f"{layer.name}.bias", (layer.out_features,)

    def parameter_shapes(self):
        return list(self._shapes(self.layers))

    @property
    def descriptor(self) -> str:
        return "input=" + "x".join(map(str, self.input_shape)) + ";" + describe(self.layers)

    @classmethod
    def from_descriptor(cls, descriptor: str, params) -> "Model":
        input_shape, layers = parse_description(descriptor)
        return cls(layers, params, input_shape)

    def with_params(self, params) -> "Model":
        return Model(self.layers, params, self.input_shape)

    @property
    def num_instrumentation_points(self) -> int:
        return sum(isinstance(layer, ReLU) for layer in self.layers)

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def forward(self, graph: T.Graph, x: T.Node, param_nodes: dict | None = None):
        """Trace the model onto ``graph``.

        Returns ``(logits, activations, param_nodes)`` where ``activations``
        lists the post-ReLU nodes.
        """
        if tuple(x.shape[1:]) != self.input_shape:
            raise T.ShapeError(
                f"model expects inputs of shape (N, {', '.join(map(str, self.input_shape))}), "
                f"got {x.shape}"
            )
        if param_nodes is None:
            param_nodes = {name: graph.param(value, name) for name, value in self.params.items()}
        h = x
        activations = []
        for layer in self.layers:
            if isinstance(layer, Conv2d):
                h = T.conv2d(
                    h,
                    param_nodes[f"{layer.name}.weight"],
                    param_nodes[f"{layer.name}.bias"],
                    layer.stride,
                    layer.padding,
                )
            elif isinstance(layer, MaxPool2d):
                h = T.maxpool2d(h, layer.kernel, layer.stride)
            elif isinstance(layer, ReLU):
                h = T.relu(h)
                activations.append(h)
            elif isinstance(layer, Flatten):
                h = T.flatten(h)
            elif isinstance(layer, Linear):
                h = T.linear(
                    h, param_nodes[f"{layer.name}.weight"], param_nodes[f"{layer.name}.bias"]
                )
        return h, activations, param_nodes

    def run(self, images: np.ndarray, batch_size: int = 1000):
        """Inference only: ``(logits, [activation arrays])`` for a stack of images."""
        logits, acts = [], None
        for start in range(0, len(images), batch_size):
            g = T.Graph()
            x = g.input(images[start : start + batch_size], requires_grad=False)
            out, activations, _ = self.forward(g, x, {n: g.constant(v) for n, v in self.params.items()})
            logits.append(out.value)
            if acts is None:
                acts = [[] for _ in activations]
            for bucket, a in zip(acts, activations):
                bucket.append(a.value)
        if acts is None:
            raise ValueError("no images given")
        return np.concatenate(logits), [np.concatenate(a) for a in acts]

    def predict(self, images: np.ndarray, batch_size: int = 1000) -> np.ndarray:
        return self.run(images, batch_size)[0].argmax(axis=1)


def lenet5_layers():
    return [
        Conv2d("conv1", 1, 20, 5),
        MaxPool2d(2, 2),
        ReLU(),
        Conv2d("conv2", 20, 50, 5),
        MaxPool2d(2, 2),
        ReLU(),
        Flatten(),
        Linear("fc1", 800, 500),
        ReLU(),
        Linear("fc2", 500, 10),
    ]


def build_lenet5(seed: int = 0, zero: bool = False) -> Model:
    """The 20/50/500 LeNet5 variant (431,080 parameters)."""
    model = Model.initialize(lenet5_layers(), (1, 28, 28), seed)
    if zero:
        model = model.with_params({n: np.zeros_like(p) for n, p in model.params.items()})
    return model


def detector_cost(key=None) -> tuple[int, int]:
    """MACs and parameters added by the taboo detector.

    The check is a per-activation comparison against stored thresholds or
    interval endpoints: no multiply-accumulate and no new network weights.
    """
    return 0, 0


def count_overhead(model: Model, with_detector: bool = False, key=None) -> tuple[int, int]:
    """Per-sample (MACs, parameters) for a forward pass."""
    macs = 0
    features = None
    if len(model.input_shape) == 1:
        (features,) = model.input_shape
    else:
        c, h, w = model.input_shape
    for layer in model.layers:
        if isinstance(layer, Conv2d):
            h = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
            w = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
            macs += layer.out_channels * h * w * layer.in_channels * layer.kernel**2
            c = layer.out_channels
        elif isinstance(layer, MaxPool2d):
            h = (h - layer.kernel) // layer.stride + 1
            w = (w - layer.kernel) // layer.stride + 1
        elif isinstance(layer, Flatten):
            features = c * h * w
        elif isinstance(layer, Linear):
            if features is not None and features != layer.in_features:
                raise T.ShapeError(f"{layer.name} expects {layer.in_features} inputs, gets {features}")
            macs += layer.out_features * layer.in_features
            features = layer.out_features
    params = model.parameter_count()
    if with_detector:
        extra_macs, extra_params = detector_cost(key)
        macs += extra_macs
        params += extra_params
    return macs, params
